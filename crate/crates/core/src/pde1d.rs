//! Conditional density of the distance to default given one variance path
//! and the common noise `W⁰`, with the derivative and sup statistics used
//! to check the energy estimates.
//!
//! The equation is
//!
//! ```text
//! du = [½h² u_xx − (r − h²/2) u_x] dt − ρ₁ h u_x dW⁰,   u(t, 0) = 0,
//! ```
//!
//! with `h = h(σ_t)` constant in `x`. Each step applies the explicit
//! stochastic transport, then one implicit solve for the diffusion and the
//! upwinded drift. Node `j` owns a dual cell of width `Δx` (half a cell at
//! `x_max`), node 0 is the absorbing boundary and `x_max` has zero flux.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cirlab::{sample_cir_paths, CirPath, InitialVariance};
use crate::error::{LpsvError, Result};
use crate::noise::{NoiseBundle, SeedLineage};
use crate::numerics::{norm_cdf, norm_pdf, solve_tridiagonal, trap_weight};
use crate::params::ModelParams;
use crate::transport::{max_courant, transport_step, TransportScheme};

/// Values below this are treated as a positivity breakdown.
pub const POSITIVITY_TOL: f64 = -1e-12;

/// Weight of the energy estimates, `w(x) = min{1, √x}`.
#[inline]
pub fn w(x: f64) -> f64 {
    x.max(0.0).sqrt().min(1.0)
}

/// Uniform grid on `[0, x_max]` with `n_x` cells, and the recorded
/// solution `u[k][j]` at `times[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub x_max: f64,
    pub n_x: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    /// Mass after every step, starting with the initial mass.
    pub mass: Vec<f64>,
}

impl Grid1D {
    pub fn new(x_max: f64, n_x: usize, dt: f64) -> Result<Self> {
        if n_x < 2 || !(x_max > 0.0) || !(dt > 0.0) {
            return Err(LpsvError::InvalidArgument(format!(
                "bad 1D grid: x_max {x_max}, n_x {n_x}, dt {dt}"
            )));
        }
        Ok(Self {
            x_max,
            n_x,
            dt,
            times: Vec::new(),
            u: Vec::new(),
            mass: Vec::new(),
        })
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.x_max / self.n_x as f64
    }

    #[inline]
    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.dx()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..=self.n_x).map(|j| self.x(j)).collect()
    }

    /// Samples `f` on the nodes.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..=self.n_x).map(|j| f(self.x(j))).collect()
    }

    /// Trapezoid mass of node values.
    pub fn integrate(&self, u: &[f64]) -> f64 {
        let n = u.len();
        u.iter()
            .enumerate()
            .map(|(j, v)| v * trap_weight(j, n, self.dx()))
            .sum()
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.u.last().map(|v| v.as_slice())
    }

    /// Empty copy of the grid geometry.
    pub fn geometry(&self) -> Self {
        Self {
            times: Vec::new(),
            u: Vec::new(),
            mass: Vec::new(),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pde1dOptions {
    pub scheme: TransportScheme,
    /// Keep every `record_every`-th step (the final step is always kept).
    pub record_every: usize,
}

impl Default for Pde1dOptions {
    fn default() -> Self {
        Self {
            scheme: TransportScheme::Limited,
            record_every: 1,
        }
    }
}

/// Solves the conditional equation along `vol_path` with the realized
/// increments `w0`; the number of steps is `w0.len()`.
pub fn solve_conditional_spde(
    p: &ModelParams,
    vol_path: &CirPath,
    w0: &[f64],
    grid: &Grid1D,
    u0: &[f64],
) -> Result<Grid1D> {
    solve_conditional_spde_with(p, vol_path, w0, grid, u0, Pde1dOptions::default())
}

pub fn solve_conditional_spde_with(
    p: &ModelParams,
    vol_path: &CirPath,
    w0: &[f64],
    grid: &Grid1D,
    u0: &[f64],
    opts: Pde1dOptions,
) -> Result<Grid1D> {
    let n = grid.n_x + 1;
    if u0.len() != n {
        return Err(LpsvError::InvalidArgument(format!(
            "u0 has {} values, grid has {n} nodes",
            u0.len()
        )));
    }
    if u0[0] != 0.0 {
        return Err(LpsvError::InvalidArgument(format!(
            "u0 must vanish at x = 0, got {}",
            u0[0]
        )));
    }
    if u0.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(LpsvError::InvalidArgument(
            "u0 must be finite and nonnegative".into(),
        ));
    }
    let m0 = grid.integrate(u0);
    if m0 > 1.0 + 1e-9 {
        return Err(LpsvError::InvalidArgument(format!("u0 has mass {m0} > 1")));
    }
    if ((vol_path.dt - grid.dt) / grid.dt).abs() > 1e-12 {
        return Err(LpsvError::InvalidArgument(format!(
            "variance path step {} differs from grid step {}",
            vol_path.dt, grid.dt
        )));
    }
    if vol_path.sigma.len() < w0.len() + 1 {
        return Err(LpsvError::Horizon {
            t: w0.len() as f64 * grid.dt,
            horizon: vol_path.horizon(),
        });
    }
    let every = opts.record_every.max(1);

    let (dx, dt) = (grid.dx(), grid.dt);
    let mut out = grid.geometry();
    let mut u = u0.to_vec();
    out.times.push(0.0);
    out.u.push(u.clone());
    out.mass.push(m0);

    let m = n - 1; // unknowns are nodes 1..=n_x
    let (mut lower, mut diag, mut upper) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut scratch = vec![0.0; m];
    let mut flux = Vec::new();
    let mut courant = vec![0.0; n - 1];
    let diffusion_share = match opts.scheme {
        TransportScheme::Limited => 1.0 - p.rho1 * p.rho1,
        TransportScheme::Upwind => 1.0,
    };

    for (step, &dw) in w0.iter().enumerate() {
        let h = p.h(vol_path.sigma[step]);

        let c = p.rho1 * h * dw / dx;
        if c.abs() > 1.0 {
            return Err(LpsvError::Cfl {
                step,
                term: "w0_transport",
                ratio: c.abs(),
            });
        }
        if c != 0.0 {
            courant.iter_mut().for_each(|v| *v = c);
            debug_assert!(max_courant(&courant) <= 1.0);
            transport_step(&mut u, &courant, opts.scheme.limited(), true, &mut flux);
        }

        // Face flux F = α u_left + β u_right, identical on every face.
        let mu = p.r - 0.5 * h * h;
        let d = 0.5 * h * h * diffusion_share;
        let alpha = mu.max(0.0) + d / dx;
        let beta = mu.min(0.0) - d / dx;
        for k in 0..m {
            let last = k + 1 == m;
            let vol = if last { 0.5 * dx } else { dx };
            let lam = dt / vol;
            // Right face missing at x_max.
            let a_diag = if last { beta } else { beta - alpha };
            diag[k] = 1.0 - lam * a_diag;
            lower[k] = -lam * alpha;
            upper[k] = if last { 0.0 } else { lam * beta };
        }
        solve_tridiagonal(&lower, &diag, &upper, &mut u[1..], &mut scratch);
        u[0] = 0.0;

        if let Some(&v) = u
            .iter()
            .filter(|v| **v < POSITIVITY_TOL)
            .min_by(|a, b| a.total_cmp(b))
        {
            return Err(LpsvError::Positivity {
                step: step + 1,
                value: v,
            });
        }
        out.mass.push(grid.integrate(&u));
        if (step + 1) % every == 0 || step + 1 == w0.len() {
            out.times.push((step + 1) as f64 * dt);
            out.u.push(u.clone());
        }
    }
    Ok(out)
}

/// Node derivative: centered inside, one-sided at the ends.
pub fn node_derivative(u: &[f64], dx: f64) -> Vec<f64> {
    let n = u.len();
    (0..n)
        .map(|j| {
            if j == 0 {
                (u[1] - u[0]) / dx
            } else if j + 1 == n {
                (u[n - 1] - u[n - 2]) / dx
            } else {
                (u[j + 1] - u[j - 1]) / (2.0 * dx)
            }
        })
        .collect()
}

/// `Σ_x w²(x) u_x² Δx` of one snapshot.
pub fn weighted_derivative_norm(u: &[f64], dx: f64) -> f64 {
    let n = u.len();
    node_derivative(u, dx)
        .iter()
        .enumerate()
        .map(|(j, d)| {
            let wx = w(j as f64 * dx);
            wx * wx * d * d * trap_weight(j, n, dx)
        })
        .sum()
}

/// Sup over recorded times of `Σ_x w²(x) u_x² Δx`.
pub fn derivative_energy(sol: &Grid1D) -> f64 {
    let dx = sol.dx();
    sol.u
        .iter()
        .map(|u| weighted_derivative_norm(u, dx))
        .fold(0.0, f64::max)
}

/// Sup over recorded `(t, x)` of `u²`.
pub fn max_principle_stat(sol: &Grid1D) -> f64 {
    sol.u
        .iter()
        .flat_map(|u| u.iter())
        .fold(0.0, |m: f64, v| m.max(v * v))
}

/// Density at `x` of `x0 + μt + cW_t` killed at 0, by the method of images.
pub fn absorbed_bm_density(x0: f64, mu: f64, c: f64, t: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let s = c * t.sqrt();
    let direct = norm_pdf((x - x0 - mu * t) / s);
    let image = (-2.0 * mu * x0 / (c * c)).exp() * norm_pdf((x + x0 - mu * t) / s);
    (direct - image) / s
}

/// Probability that `x0 + μs + cW_s` has hit 0 by time `t`.
pub fn first_passage_probability(x0: f64, mu: f64, c: f64, t: f64) -> f64 {
    let s = c * t.sqrt();
    norm_cdf((-x0 - mu * t) / s) + (-2.0 * mu * x0 / (c * c)).exp() * norm_cdf((-x0 + mu * t) / s)
}

/// Smallest `M ≥ 0` with `M e^{MT} ≥ ratio`.
pub fn fit_growth_constant(ratio: f64, horizon: f64) -> f64 {
    if !(ratio > 0.0) {
        return 0.0;
    }
    let g = |m: f64| m * (m * horizon).exp() - ratio;
    let (mut lo, mut hi) = (0.0, ratio.max(1.0));
    while g(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Setup of a multi-scenario study of the two statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyStudy {
    pub x_max: f64,
    pub n_x: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub scenarios: Vec<u64>,
    pub init: InitialVariance,
    pub options: Pde1dOptions,
}

/// Per-scenario statistics and the fitted growth constant of the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub energies: Vec<f64>,
    pub max_principle: Vec<f64>,
    pub mean_energy: f64,
    pub mean_max_principle: f64,
    /// `‖w(u₀)_x‖² + ‖u₀‖²`.
    pub initial_norm: f64,
    pub fitted_m: f64,
}

/// Runs one conditional solve per scenario. The variance path is particle 0
/// of the scenario's bundle; `u0` is sampled on the study grid.
pub fn run_energy_study(
    p: &ModelParams,
    lineage: SeedLineage,
    study: &EnergyStudy,
    u0: impl Fn(f64) -> f64 + Sync,
) -> Result<EnergyReport> {
    if study.scenarios.is_empty() {
        return Err(LpsvError::Empty("scenarios"));
    }
    let grid = Grid1D::new(study.x_max, study.n_x, study.dt)?;
    let mut init = grid.sample(&u0);
    init[0] = 0.0;
    let dx = grid.dx();
    let initial_norm = weighted_derivative_norm(&init, dx)
        + grid.integrate(&init.iter().map(|v| v * v).collect::<Vec<_>>());

    let stats: Vec<(f64, f64)> = study
        .scenarios
        .par_iter()
        .map(|&s| {
            let noise = NoiseBundle::generate(lineage, s, study.dt, study.n_steps, p.rho3)?;
            let path = sample_cir_paths(p, &noise, 1, study.init)?.remove(0);
            let sol = solve_conditional_spde_with(
                p,
                &path,
                &noise.common_w0,
                &grid,
                &init,
                study.options,
            )?;
            Ok((derivative_energy(&sol), max_principle_stat(&sol)))
        })
        .collect::<Result<_>>()?;
    let energies: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let max_principle: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let n = energies.len() as f64;
    let mean_energy = energies.iter().sum::<f64>() / n;
    let mean_max_principle = max_principle.iter().sum::<f64>() / n;
    let horizon = study.dt * study.n_steps as f64;
    Ok(EnergyReport {
        fitted_m: fit_growth_constant(mean_energy / initial_norm, horizon),
        energies,
        max_principle,
        mean_energy,
        mean_max_principle,
        initial_norm,
    })
}
