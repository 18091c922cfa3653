//! CIR variance paths under common noise, the first Malliavin derivative of
//! `σ_t`, and estimators for the conditional variance density and its
//! weighted supremum.
//!
//! The variance is advanced with the drift-implicit square-root Euler
//! scheme: writing `s = √σ`,
//!
//! ```text
//! (1 + k dt/2) s'² − (s + ξ ΔB/2) s' − (kθ − ξ²/4) dt/2 = 0,
//! ```
//!
//! whose positive root stays strictly positive whenever `4kθ > ξ²`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LpsvError, Result};
use crate::kde::{gaussian_kde, silverman_bandwidth};
use crate::noise::{NoiseBundle, StreamPurpose};
use crate::numerics::{mean_se, quantile_sorted, trapezoid, trapezoid_xy};
use crate::params::{ExponentSet, ModelParams};

/// Fewest samples accepted by [`conditional_vol_density`].
pub const MIN_DENSITY_SAMPLES: usize = 1000;

/// Law of the initial variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialVariance {
    /// Uniform on `[sigma0_lo, sigma0_hi]`.
    Uniform,
    Fixed(f64),
}

impl InitialVariance {
    /// Draws `σ₀` for one particle. This is always the first draw of the
    /// particle's `Initial` stream, so pool and CIR runs agree on it.
    pub fn draw<R: Rng>(&self, p: &ModelParams, rng: &mut R) -> f64 {
        match *self {
            InitialVariance::Uniform => {
                let u: f64 = rng.gen();
                p.sigma0_lo + (p.sigma0_hi - p.sigma0_lo) * u
            }
            InitialVariance::Fixed(v) => v,
        }
    }
}

/// One step of the drift-implicit square-root scheme.
#[inline]
pub fn cir_step(p: &ModelParams, sigma: f64, db: f64, dt: f64) -> f64 {
    let a = 1.0 + 0.5 * p.k * dt;
    let b = sigma.sqrt() + 0.5 * p.xi * db;
    let c = 0.5 * (p.k * p.theta - 0.25 * p.xi * p.xi) * dt;
    let s = (b + (b * b + 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
    s * s.abs()
}

/// Integrand of the inner exponent of `‖D·σ_t‖²`,
/// `(kθ/2 − ξ²/8)/σ + k/2`.
#[inline]
pub fn malliavin_rate(p: &ModelParams, sigma: f64) -> f64 {
    (0.5 * p.k * p.theta - 0.125 * p.xi * p.xi) / sigma + 0.5 * p.k
}

/// Volatility driving increment `ρ₂ ΔB⁰ + √(1−ρ₂²) ΔB^i`.
#[inline]
pub(crate) fn mixed_increment(rho2: f64, common: f64, idio: f64) -> f64 {
    rho2 * common + (1.0 - rho2 * rho2).sqrt() * idio
}

/// A variance path on the uniform grid `j·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct CirPath {
    pub dt: f64,
    pub sigma: Vec<f64>,
    pub scenario: u64,
    pub particle: u64,
}

impl CirPath {
    pub fn times(&self) -> Vec<f64> {
        (0..self.sigma.len()).map(|j| j as f64 * self.dt).collect()
    }

    pub fn horizon(&self) -> f64 {
        self.dt * (self.sigma.len() - 1) as f64
    }

    /// Grid index of time `t`, or a horizon fault.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let j = (t / self.dt).round();
        if t < 0.0 || j as usize >= self.sigma.len() {
            return Err(LpsvError::Horizon {
                t,
                horizon: self.horizon(),
            });
        }
        Ok(j as usize)
    }
}

/// Online composite-trapezoid accumulator for
/// `∫₀ᵗ exp(−2∫_{t'}^t g(σ_s) ds) dt'`, `g` = [`malliavin_rate`].
///
/// `K_{n+1} = e^{−2ΔA}(K_n + dt/2) + dt/2` reproduces the composite
/// trapezoid rule on both integrals exactly.
#[derive(Debug, Clone, Copy)]
pub struct MalliavinAccumulator {
    kernel: f64,
    prev_rate: f64,
}

impl MalliavinAccumulator {
    pub fn new(p: &ModelParams, sigma0: f64) -> Self {
        Self {
            kernel: 0.0,
            prev_rate: malliavin_rate(p, sigma0),
        }
    }

    #[inline]
    pub fn push(&mut self, p: &ModelParams, sigma_next: f64, dt: f64) {
        let rate = malliavin_rate(p, sigma_next);
        let da = 0.5 * dt * (self.prev_rate + rate);
        self.kernel = (-2.0 * da).exp() * (self.kernel + 0.5 * dt) + 0.5 * dt;
        self.prev_rate = rate;
    }

    /// `‖D·σ_t‖² = ξ²(1−ρ₂²) σ_t K(t)`.
    pub fn norm_sq(&self, p: &ModelParams, sigma_t: f64) -> f64 {
        p.xi * p.xi * (1.0 - p.rho2 * p.rho2) * sigma_t * self.kernel
    }
}

/// `‖D·σ_t‖²_{L²[0,t]}` for a stored path, by composite trapezoid
/// quadrature of both the inner exponent and the outer integral.
pub fn malliavin_norm_sq(path: &CirPath, p: &ModelParams, t: f64) -> Result<f64> {
    let n = path.index_of(t)?;
    let mut acc = MalliavinAccumulator::new(p, path.sigma[0]);
    for j in 1..=n {
        acc.push(p, path.sigma[j], path.dt);
    }
    Ok(acc.norm_sq(p, path.sigma[n]))
}

fn check_positive(value: f64, step: usize) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(LpsvError::Positivity { step, value })
    }
}

fn simulate_one<F: FnMut(usize, f64)>(
    p: &ModelParams,
    noise: &NoiseBundle,
    particle: u64,
    init: InitialVariance,
    n_steps: usize,
    mut visit: F,
) -> Result<()> {
    let mut init_rng = noise.idio_rng(particle, StreamPurpose::Initial);
    let mut sigma = check_positive(init.draw(p, &mut init_rng), 0)?;
    visit(0, sigma);
    let mut idio = vec![0.0; n_steps];
    noise.fill_idio(particle, StreamPurpose::IdioVol, &mut idio);
    for (j, &db_i) in idio.iter().enumerate() {
        let db = mixed_increment(p.rho2, noise.common_b0[j], db_i);
        sigma = check_positive(cir_step(p, sigma, db, noise.dt), j + 1)?;
        visit(j + 1, sigma);
    }
    Ok(())
}

/// Samples `n_paths` variance paths sharing the bundle's `B⁰`.
///
/// Particle `i` uses the `IdioVol` stream `i` of the bundle, mixed with the
/// common increment through `ρ₂`.
pub fn sample_cir_paths(
    p: &ModelParams,
    noise: &NoiseBundle,
    n_paths: usize,
    init: InitialVariance,
) -> Result<Vec<CirPath>> {
    (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut sigma = Vec::with_capacity(noise.n_steps + 1);
            simulate_one(p, noise, i, init, noise.n_steps, |_, s| sigma.push(s))?;
            Ok(CirPath {
                dt: noise.dt,
                sigma,
                scenario: noise.scenario,
                particle: i,
            })
        })
        .collect()
}

/// Variance and Malliavin norm of one path at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirSample {
    pub sigma: f64,
    pub dnorm_sq: f64,
}

/// Memory-light sampling: only `(σ_t, ‖D·σ_t‖²)` at the requested grid
/// indices are kept. Returns `out[time][path]`.
pub fn sample_cir_at(
    p: &ModelParams,
    noise: &NoiseBundle,
    n_paths: usize,
    init: InitialVariance,
    steps: &[usize],
) -> Result<Vec<Vec<CirSample>>> {
    let last = steps.iter().copied().max().unwrap_or(0);
    if last > noise.n_steps {
        return Err(LpsvError::Horizon {
            t: last as f64 * noise.dt,
            horizon: noise.horizon(),
        });
    }
    let per_path: Vec<Vec<CirSample>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::with_capacity(steps.len());
            let mut acc: Option<MalliavinAccumulator> = None;
            simulate_one(p, noise, i, init, last, |j, s| {
                match acc.as_mut() {
                    None => acc = Some(MalliavinAccumulator::new(p, s)),
                    Some(a) => a.push(p, s, noise.dt),
                }
                let a = acc.as_ref().unwrap();
                for &want in steps {
                    if want == j {
                        out.push(CirSample {
                            sigma: s,
                            dnorm_sq: a.norm_sq(p, s),
                        });
                    }
                }
            })?;
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok((0..steps.len())
        .map(|k| per_path.iter().map(|row| row[k]).collect())
        .collect())
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Pathwise summands `σ_t^{q r̃ α} / ‖D·σ_t‖^{2 q r̃}`.
pub fn ratio_summands(samples: &[CirSample], e: &ExponentSet) -> Vec<f64> {
    let qr = e.q * e.r_tilde;
    samples
        .iter()
        .map(|s| s.sigma.powf(qr * e.alpha) / s.dnorm_sq.powf(qr))
        .collect()
}

/// `E[σ_t^{q r̃ α} / ‖D·σ_t‖^{2 q r̃}]` over stored paths.
pub fn ratio_moment(
    paths: &[CirPath],
    p: &ModelParams,
    e: &ExponentSet,
    t: f64,
) -> Result<Estimate> {
    if paths.is_empty() {
        return Err(LpsvError::Empty("paths"));
    }
    let samples = paths
        .iter()
        .map(|path| {
            let j = path.index_of(t)?;
            Ok(CirSample {
                sigma: path.sigma[j],
                dnorm_sq: malliavin_norm_sq(path, p, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ratio_moment_from_samples(&samples, e)
}

pub fn ratio_moment_from_samples(samples: &[CirSample], e: &ExponentSet) -> Result<Estimate> {
    if samples.is_empty() {
        return Err(LpsvError::Empty("paths"));
    }
    let s = ratio_summands(samples, e);
    let (mean, se) = mean_se(&s);
    Ok(Estimate {
        mean,
        se,
        n: s.len(),
    })
}

/// Kernel estimate of the conditional variance density on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub centers: Vec<f64>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
    pub n_samples: usize,
}

impl DensityEstimate {
    pub fn integral(&self) -> f64 {
        trapezoid_xy(&self.centers, &self.values)
    }

    /// `sup_y y^α p̂(y)` over the grid.
    pub fn weighted_sup(&self, alpha: f64) -> f64 {
        self.centers
            .iter()
            .zip(&self.values)
            .map(|(&y, &v)| if alpha == 0.0 { v } else { y.powf(alpha) * v })
            .fold(0.0, f64::max)
    }
}

/// Number of grid points used by [`conditional_vol_density`].
pub const DENSITY_GRID_POINTS: usize = 256;

/// Gaussian-kernel estimate of `p_t(·|B⁰)` from variance samples that share
/// one common-noise path, on `[0, q_{0.999}]`. `bandwidth = None` selects
/// Silverman's rule.
pub fn conditional_vol_density(samples: &[f64], bandwidth: Option<f64>) -> Result<DensityEstimate> {
    if samples.len() < MIN_DENSITY_SAMPLES {
        return Err(LpsvError::InvalidArgument(format!(
            "{} samples, at least {MIN_DENSITY_SAMPLES} required",
            samples.len()
        )));
    }
    let h = bandwidth.unwrap_or_else(|| silverman_bandwidth(samples));
    if !(h > 0.0) {
        return Err(LpsvError::InvalidArgument(format!(
            "bandwidth {h} must be positive"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let top = quantile_sorted(&sorted, 0.999);
    let n = DENSITY_GRID_POINTS - 1;
    let centers: Vec<f64> = (0..=n).map(|i| top * i as f64 / n as f64).collect();
    let values = gaussian_kde(&sorted, &centers, h)?;
    Ok(DensityEstimate {
        centers,
        values,
        bandwidth: h,
        n_samples: samples.len(),
    })
}

/// Least-squares fit of `c₁ + c₂ t^{−q/2}` with `c₁, c₂ ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub c1: f64,
    pub c2: f64,
    /// `‖fit − data‖₂ / ‖data‖₂`.
    pub rel_residual: f64,
}

/// Nonnegative least squares on the two-column basis `{1, t^{−q/2}}`.
pub fn fit_blowup(times: &[f64], values: &[f64], q: f64) -> PowerFit {
    let basis: Vec<f64> = times.iter().map(|t| t.powf(-0.5 * q)).collect();
    let n = times.len() as f64;
    let (s1, s2) = (
        basis.iter().sum::<f64>(),
        basis.iter().map(|b| b * b).sum::<f64>(),
    );
    let sy = values.iter().sum::<f64>();
    let sby = basis.iter().zip(values).map(|(b, y)| b * y).sum::<f64>();
    let det = n * s2 - s1 * s1;
    let (mut c1, mut c2) = ((s2 * sy - s1 * sby) / det, (n * sby - s1 * sy) / det);
    if c1 < 0.0 || c2 < 0.0 || !det.is_finite() || det == 0.0 {
        // Best single-column fits; keep whichever leaves less residual.
        let only_c1 = (sy / n).max(0.0);
        let only_c2 = (sby / s2).max(0.0);
        let r1: f64 = values.iter().map(|y| (y - only_c1).powi(2)).sum();
        let r2: f64 = basis
            .iter()
            .zip(values)
            .map(|(b, y)| (y - only_c2 * b).powi(2))
            .sum();
        (c1, c2) = if r1 <= r2 {
            (only_c1, 0.0)
        } else {
            (0.0, only_c2)
        };
    }
    let res: f64 = basis
        .iter()
        .zip(values)
        .map(|(b, y)| (y - c1 - c2 * b).powi(2))
        .sum();
    let norm: f64 = values.iter().map(|y| y * y).sum();
    PowerFit {
        c1,
        c2,
        rel_residual: (res / norm).sqrt(),
    }
}

/// Weighted-supremum statistics over a `(t, scenario)` panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MReport {
    pub alpha: f64,
    pub q: f64,
    pub times: Vec<f64>,
    /// `m[t][scenario] = sup_y y^α p̂_t(y|B⁰)`.
    pub m: Vec<Vec<f64>>,
    /// Scenario average of `m^q` per time.
    pub avg_q_power: Vec<f64>,
    /// Trapezoid integral of `avg_q_power` over the time grid.
    pub time_integral: f64,
    pub fit: PowerFit,
}

/// Builds the `M^α` report from `estimates[t][scenario]`.
pub fn malpha_report(
    times: &[f64],
    estimates: &[Vec<DensityEstimate>],
    alpha: f64,
    q: f64,
) -> MReport {
    let m: Vec<Vec<f64>> = estimates
        .iter()
        .map(|row| row.iter().map(|d| d.weighted_sup(alpha)).collect())
        .collect();
    let avg_q_power: Vec<f64> = m
        .iter()
        .map(|row| row.iter().map(|v| v.powf(q)).sum::<f64>() / row.len().max(1) as f64)
        .collect();
    let time_integral = trapezoid_xy(times, &avg_q_power);
    let fit = fit_blowup(times, &avg_q_power, q);
    MReport {
        alpha,
        q,
        times: times.to_vec(),
        m,
        avg_q_power,
        time_integral,
        fit,
    }
}

/// Settings for a conditional-density study across common-noise scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityStudy {
    pub dt: f64,
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub scenarios: Vec<u64>,
    pub bandwidth: Option<f64>,
    pub init: InitialVariance,
}

/// Output of [`run_density_study`]: densities and Malliavin samples per
/// `(time, scenario)`.
#[derive(Debug, Clone)]
pub struct DensityPanel {
    pub times: Vec<f64>,
    pub densities: Vec<Vec<DensityEstimate>>,
    pub samples: Vec<Vec<Vec<CirSample>>>,
}

/// Simulates `n_paths` variance paths per scenario (sharing that
/// scenario's `B⁰`) and estimates the conditional density at each time.
pub fn run_density_study(
    p: &ModelParams,
    lineage: crate::noise::SeedLineage,
    study: &DensityStudy,
) -> Result<DensityPanel> {
    let steps: Vec<usize> = study
        .times
        .iter()
        .map(|t| (t / study.dt).round() as usize)
        .collect();
    let n_steps = steps.iter().copied().max().unwrap_or(0);
    let per_scenario: Vec<(Vec<DensityEstimate>, Vec<Vec<CirSample>>)> = study
        .scenarios
        .iter()
        .map(|&sc| {
            let noise = NoiseBundle::generate(lineage, sc, study.dt, n_steps, p.rho3)?;
            let samples = sample_cir_at(p, &noise, study.n_paths, study.init, &steps)?;
            let dens = samples
                .iter()
                .map(|row| {
                    let s: Vec<f64> = row.iter().map(|c| c.sigma).collect();
                    conditional_vol_density(&s, study.bandwidth)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((dens, samples))
        })
        .collect::<Result<_>>()?;
    let nt = study.times.len();
    let densities = (0..nt)
        .map(|k| per_scenario.iter().map(|(d, _)| d[k].clone()).collect())
        .collect();
    let samples = (0..nt)
        .map(|k| per_scenario.iter().map(|(_, s)| s[k].clone()).collect())
        .collect();
    Ok(DensityPanel {
        times: study.times.clone(),
        densities,
        samples,
    })
}

/// Closed-form CIR mean `θ + (σ₀ − θ)e^{−kt}`.
pub fn cir_mean(p: &ModelParams, sigma0: f64, t: f64) -> f64 {
    p.theta + (sigma0 - p.theta) * (-p.k * t).exp()
}

/// Closed-form CIR variance
/// `σ₀ (ξ²/k)(e^{−kt} − e^{−2kt}) + θ ξ²/(2k) (1 − e^{−kt})²`.
pub fn cir_variance(p: &ModelParams, sigma0: f64, t: f64) -> f64 {
    let e = (-p.k * t).exp();
    let xi2 = p.xi * p.xi;
    sigma0 * xi2 / p.k * (e - e * e) + p.theta * xi2 / (2.0 * p.k) * (1.0 - e).powi(2)
}

/// Fraction of density mass on `[0, top]` by the trapezoid rule, used as a
/// normalization diagnostic.
pub fn density_mass(d: &DensityEstimate) -> f64 {
    let h = d.centers[1] - d.centers[0];
    trapezoid(&d.values, h)
}
