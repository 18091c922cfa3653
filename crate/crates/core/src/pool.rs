//! The finite pool: `n` distances to default driven by common and
//! idiosyncratic noise, absorbed at zero.
//!
//! ```text
//! dX = (r − h²(σ)/2) dt + h(σ)(√(1−ρ₁²) dW^i + ρ₁ dW⁰),
//! ```
//!
//! with `σ` advanced by the same square-root scheme as [`crate::cirlab`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cirlab::{cir_step, mixed_increment, InitialVariance};
use crate::error::{LpsvError, Result};
use crate::grid::TensorGrid;
use crate::kde::{reflected_cell_weights, silverman_bandwidth};
use crate::noise::{NoiseBundle, StreamPurpose};
use crate::params::ModelParams;

/// Fewest alive particles for which [`empirical_density_2d`] is considered
/// meaningful.
pub const MIN_ALIVE_FOR_DENSITY: usize = 1000;

/// Bins of [`factorized_density`] holding fewer particles are flagged.
pub const MIN_BIN_PARTICLES: usize = 50;

/// Law of the initial distance to default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum X0Law {
    /// `shift + exp(log_mean + log_sd · Z)`.
    ShiftedLognormal {
        shift: f64,
        log_mean: f64,
        log_sd: f64,
    },
    Fixed {
        value: f64,
    },
}

impl X0Law {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            X0Law::ShiftedLognormal {
                shift,
                log_mean,
                log_sd,
            } => {
                let z: f64 = StandardNormal.sample(rng);
                shift + (log_mean + log_sd * z).exp()
            }
            X0Law::Fixed { value } => value,
        }
    }

    /// Density of the law, `None` for a point mass.
    pub fn density(&self, x: f64) -> Option<f64> {
        match *self {
            X0Law::ShiftedLognormal {
                shift,
                log_mean,
                log_sd,
            } => {
                let s = x - shift;
                if s <= 0.0 {
                    return Some(0.0);
                }
                let z = (s.ln() - log_mean) / log_sd;
                Some((-0.5 * z * z).exp() / (s * log_sd * (2.0 * std::f64::consts::PI).sqrt()))
            }
            X0Law::Fixed { .. } => None,
        }
    }
}

/// Joint initial law: `X₀` and `σ₀` independent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialLaw {
    pub x0: X0Law,
    pub sigma0: InitialVariance,
}

impl InitialLaw {
    /// Default law for a parameter set: a shifted lognormal distance to
    /// default and `σ₀` uniform on its admissible interval.
    pub fn default_for(_p: &ModelParams) -> Self {
        Self {
            x0: X0Law::ShiftedLognormal {
                shift: 0.05,
                log_mean: 0.2_f64.ln(),
                log_sd: 0.3,
            },
            sigma0: InitialVariance::Uniform,
        }
    }

    /// Joint density at `(x, y)`, `None` when either marginal is atomic.
    pub fn density(&self, p: &ModelParams, x: f64, y: f64) -> Option<f64> {
        let fx = self.x0.density(x)?;
        let fy = match self.sigma0 {
            InitialVariance::Uniform => {
                if y >= p.sigma0_lo && y <= p.sigma0_hi {
                    1.0 / (p.sigma0_hi - p.sigma0_lo)
                } else {
                    0.0
                }
            }
            InitialVariance::Fixed(_) => return None,
        };
        Some(fx * fy)
    }
}

impl InitialLaw {
    /// Initial density on a tensor grid: the `x` density at the nodes
    /// (zero on `x = 0`) times the cell average of the `σ₀` density over
    /// each node's dual cell, so the uniform law keeps its mass exactly.
    pub fn grid_field(&self, p: &ModelParams, grid: &TensorGrid) -> Result<Vec<f64>> {
        let (lo, hi) = match self.sigma0 {
            InitialVariance::Uniform => (p.sigma0_lo, p.sigma0_hi),
            InitialVariance::Fixed(_) => {
                return Err(LpsvError::InvalidArgument(
                    "a point-mass initial variance has no grid density".into(),
                ))
            }
        };
        if self.x0.density(1.0).is_none() {
            return Err(LpsvError::InvalidArgument(
                "a point-mass initial distance to default has no grid density".into(),
            ));
        }
        let dy = grid.dy();
        let fy: Vec<f64> = (0..grid.ny_nodes())
            .map(|j| {
                let (a, b) = (
                    (grid.y(j) - 0.5 * dy).max(0.0),
                    (grid.y(j) + 0.5 * dy).min(grid.y_max),
                );
                let overlap = (b.min(hi) - a.max(lo)).max(0.0);
                overlap / ((b - a) * (hi - lo))
            })
            .collect();
        let mut u = vec![0.0; grid.len()];
        for i in 1..grid.nx_nodes() {
            let fx = self.x0.density(grid.x(i)).unwrap_or(0.0);
            for j in 0..grid.ny_nodes() {
                u[grid.idx(i, j)] = fx * fy[j];
            }
        }
        let m = grid.integrate(&u);
        if m > 1.0 {
            u.iter_mut().for_each(|v| *v /= m);
        }
        Ok(u)
    }
}

/// How absorption at zero is detected between grid times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Absorption {
    /// Only `X_{n+1} ≤ 0` kills.
    Discrete,
    /// Also kill with the Brownian-bridge crossing probability
    /// `exp(−2 X_n X_{n+1} / (h² dt))` when both endpoints are positive.
    #[default]
    Bridge,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoolOptions {
    pub absorption: Absorption,
    /// Grid indices at which the full state is kept. Step 0 and the final
    /// step are always kept.
    pub snapshot_steps: Vec<usize>,
}

/// Per-particle state at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolState {
    pub t: f64,
    pub x: Vec<f64>,
    pub sigma: Vec<f64>,
    pub alive: Vec<bool>,
}

impl PoolState {
    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn alive_fraction(&self) -> f64 {
        self.alive_count() as f64 / self.n() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolTrajectory {
    pub dt: f64,
    pub steps: Vec<usize>,
    pub states: Vec<PoolState>,
    /// Alive count after every step, `alive_counts[0] = n`.
    pub alive_counts: Vec<usize>,
}

impl PoolTrajectory {
    pub fn n(&self) -> usize {
        self.alive_counts[0]
    }

    pub fn last(&self) -> &PoolState {
        self.states
            .last()
            .expect("trajectory has at least one state")
    }

    /// Snapshot at grid step `step`, if recorded.
    pub fn at_step(&self, step: usize) -> Option<&PoolState> {
        self.steps
            .iter()
            .position(|&s| s == step)
            .map(|k| &self.states[k])
    }
}

struct ParticleRun {
    death: Option<usize>,
    snaps: Vec<(f64, f64)>,
}

struct Scratch {
    dbi: Vec<f64>,
    dwi: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_particle(
    p: &ModelParams,
    noise: &NoiseBundle,
    id: u64,
    law: &InitialLaw,
    absorption: Absorption,
    steps: &[usize],
    scratch: &mut Scratch,
) -> Result<ParticleRun> {
    let n_steps = noise.n_steps;
    let dt = noise.dt;
    let mut init = noise.idio_rng(id, StreamPurpose::Initial);
    let mut sigma = law.sigma0.draw(p, &mut init);
    let mut x = law.x0.draw(&mut init);
    if !(x > 0.0) {
        return Err(LpsvError::InvalidArgument(format!(
            "initial distance to default {x} of particle {id} is not positive"
        )));
    }
    if !(sigma > 0.0) {
        return Err(LpsvError::Positivity {
            step: 0,
            value: sigma,
        });
    }
    scratch.dbi.resize(n_steps, 0.0);
    scratch.dwi.resize(n_steps, 0.0);
    noise.fill_idio(id, StreamPurpose::IdioVol, &mut scratch.dbi);
    noise.fill_idio(id, StreamPurpose::IdioAsset, &mut scratch.dwi);
    let mut bridge = noise.idio_rng(id, StreamPurpose::Bridge);
    let loading = (1.0 - p.rho1 * p.rho1).sqrt();

    let mut snaps = Vec::with_capacity(steps.len());
    let mut next = 0;
    if steps.first() == Some(&0) {
        snaps.push((x, sigma));
        next = 1;
    }
    let mut death = None;
    for j in 0..n_steps {
        if death.is_none() {
            let h = p.h(sigma);
            let dw = loading * scratch.dwi[j] + p.rho1 * noise.common_w0[j];
            let x_new = x + p.x_drift(sigma) * dt + h * dw;
            let killed = x_new <= 0.0
                || (absorption == Absorption::Bridge && {
                    let cross = (-2.0 * x * x_new / (h * h * dt)).exp();
                    bridge.gen::<f64>() < cross
                });
            x = x_new;
            if killed {
                death = Some(j + 1);
            }
        }
        let db = mixed_increment(p.rho2, noise.common_b0[j], scratch.dbi[j]);
        sigma = cir_step(p, sigma, db, dt);
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(LpsvError::Positivity {
                step: j + 1,
                value: sigma,
            });
        }
        while next < steps.len() && steps[next] == j + 1 {
            snaps.push((x, sigma));
            next += 1;
        }
    }
    Ok(ParticleRun { death, snaps })
}

/// Simulates the particles with the given identifiers. Particle `id` always
/// draws from the streams addressed by `id`, so any permutation of `ids`
/// permutes the output and leaves every aggregate unchanged.
pub fn simulate_pool_ids(
    p: &ModelParams,
    noise: &NoiseBundle,
    ids: &[u64],
    law: &InitialLaw,
    opts: &PoolOptions,
) -> Result<PoolTrajectory> {
    if ids.is_empty() {
        return Err(LpsvError::Empty("particles"));
    }
    let mut steps: Vec<usize> = opts
        .snapshot_steps
        .iter()
        .copied()
        .filter(|&s| s <= noise.n_steps)
        .chain([0, noise.n_steps])
        .collect();
    steps.sort_unstable();
    steps.dedup();

    let runs: Vec<ParticleRun> = ids
        .par_iter()
        .map_init(
            || Scratch {
                dbi: Vec::new(),
                dwi: Vec::new(),
            },
            |scratch, &id| run_particle(p, noise, id, law, opts.absorption, &steps, scratch),
        )
        .collect::<Result<_>>()?;

    let n = ids.len();
    let mut deaths = vec![0usize; noise.n_steps + 1];
    for run in &runs {
        if let Some(d) = run.death {
            deaths[d] += 1;
        }
    }
    let mut alive_counts = Vec::with_capacity(noise.n_steps + 1);
    let mut alive = n;
    for d in deaths {
        alive -= d;
        alive_counts.push(alive);
    }

    let states = steps
        .iter()
        .enumerate()
        .map(|(k, &s)| PoolState {
            t: s as f64 * noise.dt,
            x: runs.iter().map(|r| r.snaps[k].0).collect(),
            sigma: runs.iter().map(|r| r.snaps[k].1).collect(),
            alive: runs
                .iter()
                .map(|r| r.death.filter(|&d| d <= s).is_none())
                .collect(),
        })
        .collect();
    Ok(PoolTrajectory {
        dt: noise.dt,
        steps,
        states,
        alive_counts,
    })
}

/// Simulates particles `0..n` under one common-noise scenario.
pub fn simulate_pool(
    p: &ModelParams,
    noise: &NoiseBundle,
    n: usize,
    law: &InitialLaw,
    opts: &PoolOptions,
) -> Result<PoolTrajectory> {
    let ids: Vec<u64> = (0..n as u64).collect();
    simulate_pool_ids(p, noise, &ids, law, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub times: Vec<f64>,
    pub loss: Vec<f64>,
}

/// `L(t) = 1 − alive fraction` on every grid time.
pub fn loss_curve(traj: &PoolTrajectory) -> LossCurve {
    let n = traj.n() as f64;
    LossCurve {
        times: (0..traj.alive_counts.len())
            .map(|j| j as f64 * traj.dt)
            .collect(),
        loss: traj
            .alive_counts
            .iter()
            .map(|&a| 1.0 - a as f64 / n)
            .collect(),
    }
}

/// Kernel-smoothed particle measure on a tensor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Empirical2D {
    pub grid: TensorGrid,
    /// Node densities, x-major.
    pub values: Vec<f64>,
    /// Alive fraction of the pool.
    pub total_mass: f64,
    pub bandwidths: [f64; 2],
    pub n_alive: usize,
    pub warning: Option<String>,
}

impl Empirical2D {
    pub fn grid_mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    /// Correlation of `x` and `y` under the (normalized) estimate.
    pub fn correlation(&self) -> f64 {
        let g = &self.grid;
        let (mut m, mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..g.nx_nodes() {
            for j in 0..g.ny_nodes() {
                let w = g.weight(i, j) * self.values[g.idx(i, j)];
                let (x, y) = (g.x(i), g.y(j));
                m += w;
                mx += w * x;
                my += w * y;
                mxx += w * x * x;
                myy += w * y * y;
                mxy += w * x * y;
            }
        }
        let (ex, ey) = (mx / m, my / m);
        let cov = mxy / m - ex * ey;
        cov / ((mxx / m - ex * ex) * (myy / m - ey * ey)).sqrt()
    }
}

fn alive_coords(state: &PoolState) -> (Vec<f64>, Vec<f64>) {
    state
        .x
        .iter()
        .zip(&state.sigma)
        .zip(&state.alive)
        .filter(|(_, &a)| a)
        .map(|((&x, &s), _)| (x, s))
        .unzip()
}

fn deposit(values: &mut [f64], grid: &TensorGrid, x: f64, y: f64, h: [f64; 2], scale: f64) {
    let (ix, wx) = reflected_cell_weights(x, h[0], grid.dx(), grid.nx_nodes());
    let (iy, wy) = reflected_cell_weights(y, h[1], grid.dy(), grid.ny_nodes());
    for (a, &vx) in wx.iter().enumerate() {
        let base = grid.idx(ix + a, iy);
        for (b, &vy) in wy.iter().enumerate() {
            values[base + b] += scale * vx * vy;
        }
    }
}

/// Product-Gaussian estimate of the alive particle measure, reflected at
/// both lower edges and normalized to the alive fraction. `bandwidths =
/// None` uses Silverman's rule on each axis.
pub fn empirical_density_2d(
    state: &PoolState,
    grid: &TensorGrid,
    bandwidths: Option<[f64; 2]>,
) -> Result<Empirical2D> {
    if state.n() == 0 {
        return Err(LpsvError::Empty("particles"));
    }
    let (xs, ys) = alive_coords(state);
    let n_alive = xs.len();
    let h = match bandwidths {
        Some(h) => h,
        None if n_alive >= 2 => [silverman_bandwidth(&xs), silverman_bandwidth(&ys)],
        None => [grid.dx(), grid.dy()],
    };
    if !(h[0] > 0.0 && h[1] > 0.0) {
        return Err(LpsvError::InvalidArgument(format!(
            "bandwidths {h:?} must be positive"
        )));
    }
    let mut values = vec![0.0; grid.len()];
    let scale = 1.0 / state.n() as f64;
    for (&x, &y) in xs.iter().zip(&ys) {
        deposit(&mut values, grid, x, y, h, scale);
    }
    let warning = (n_alive < MIN_ALIVE_FOR_DENSITY)
        .then(|| format!("only {n_alive} alive particles, estimate is unreliable"));
    Ok(Empirical2D {
        grid: *grid,
        values,
        total_mass: n_alive as f64 / state.n() as f64,
        bandwidths: h,
        n_alive,
        warning,
    })
}

/// Output of [`factorized_density`].
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedDensity {
    pub density: Empirical2D,
    /// Variance marginal `p̂_t(y | B⁰)` on the y nodes, over all particles.
    pub vol_density: Vec<f64>,
    /// Alive x sub-density per y bin, on the x nodes.
    pub bin_x_density: Vec<Vec<f64>>,
    pub bin_counts: Vec<usize>,
    pub reliable: Vec<bool>,
}

/// Builds `u(x, y) = p̂(y) · g_b(x)`, where `p̂` is the variance density of
/// the whole pool and `g_b` the alive x sub-density of the particles whose
/// variance falls in the bin `b` containing `y`.
pub fn factorized_density(
    state: &PoolState,
    grid: &TensorGrid,
    y_edges: &[f64],
    bandwidths: Option<[f64; 2]>,
) -> Result<FactorizedDensity> {
    if state.n() == 0 {
        return Err(LpsvError::Empty("particles"));
    }
    if y_edges.len() < 2 || y_edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(LpsvError::InvalidArgument(
            "y bin edges must be increasing with at least two entries".into(),
        ));
    }
    let n = state.n();
    let h = match bandwidths {
        Some(h) => h,
        None => {
            let (xs, _) = alive_coords(state);
            let hx = if xs.len() >= 2 {
                silverman_bandwidth(&xs)
            } else {
                grid.dx()
            };
            [hx, silverman_bandwidth(&state.sigma)]
        }
    };
    if !(h[0] > 0.0 && h[1] > 0.0) {
        return Err(LpsvError::InvalidArgument(format!(
            "bandwidths {h:?} must be positive"
        )));
    }
    let n_bins = y_edges.len() - 1;
    let bin_of = |y: f64| -> Option<usize> {
        if y < y_edges[0] || y > y_edges[n_bins] {
            return None;
        }
        Some(y_edges.partition_point(|&e| e <= y).clamp(1, n_bins) - 1)
    };

    let mut vol_density = vec![0.0; grid.ny_nodes()];
    for &s in &state.sigma {
        let (iy, wy) = reflected_cell_weights(s, h[1], grid.dy(), grid.ny_nodes());
        for (b, v) in wy.iter().enumerate() {
            vol_density[iy + b] += v / n as f64;
        }
    }

    let mut bin_counts = vec![0usize; n_bins];
    let mut bin_x_density = vec![vec![0.0; grid.nx_nodes()]; n_bins];
    for k in 0..n {
        let Some(b) = bin_of(state.sigma[k]) else {
            continue;
        };
        bin_counts[b] += 1;
        if state.alive[k] {
            let (ix, wx) = reflected_cell_weights(state.x[k], h[0], grid.dx(), grid.nx_nodes());
            for (a, v) in wx.iter().enumerate() {
                bin_x_density[b][ix + a] += v;
            }
        }
    }
    for (dens, &c) in bin_x_density.iter_mut().zip(&bin_counts) {
        if c > 0 {
            dens.iter_mut().for_each(|v| *v /= c as f64);
        }
    }

    let mut values = vec![0.0; grid.len()];
    for j in 0..grid.ny_nodes() {
        if let Some(b) = bin_of(grid.y(j)) {
            for i in 0..grid.nx_nodes() {
                values[grid.idx(i, j)] = vol_density[j] * bin_x_density[b][i];
            }
        }
    }
    let n_alive = state.alive_count();
    let reliable = bin_counts.iter().map(|&c| c >= MIN_BIN_PARTICLES).collect();
    Ok(FactorizedDensity {
        density: Empirical2D {
            grid: *grid,
            values,
            total_mass: n_alive as f64 / n as f64,
            bandwidths: h,
            n_alive,
            warning: None,
        },
        vol_density,
        bin_x_density,
        bin_counts,
        reliable,
    })
}
