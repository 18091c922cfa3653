//! Finite-volume solver for the limiting density `u(t, x, y)` of the pool,
//! one common-noise scenario at a time.
//!
//! In Itô form the equation reads
//!
//! ```text
//! du = [ −(r − h²/2) u_x + ½h² u_xx − kθ u_y + k(yu)_y + (ξ²/2)(yu)_yy
//!        + ρ (h√y u)_xy ] dt − ρ₁ h u_x dW⁰ − ξρ₂ (√y u)_y dB⁰
//! ```
//!
//! with `h = h(y)`. A step is split into
//!
//! 1. the stochastic shift in `x` by `ρ₁ h(y) ΔW⁰`, row by row;
//! 2. the stochastic shift in `y` with velocity `ξρ₂√y ΔB⁰`;
//! 3. the explicit mixed term;
//! 4. one implicit solve in `x` per `y` row (diffusion, upwinded drift);
//! 5. one implicit solve in `y` per `x` column.
//!
//! With [`TransportScheme::Limited`] the shifts are second order and carry
//! their own Itô corrections, so steps 3 to 5 use the Stratonovich
//! coefficients: `x` diffusion `½h²(1 − ρ₁²)`, `y` flux
//! `[k(θ − y) − ξ²ρ₂²/4] u − (ξ²/2)(1 − ρ₂²)(yu)_y`, and the mixed
//! coefficient `ρ − ξρ₃ρ₁ρ₂`. Because the `x` shift is applied before the
//! `y` shift, their composition reproduces the `ξρ₁ρ₂ρ₃ (h√y u)_xy` cross
//! correction. With [`TransportScheme::Upwind`] everything keeps its Itô
//! coefficient.
//!
//! Boundaries: `u = 0` at `x = 0` (or zero flux in the reflecting test
//! mode), zero flux at `x_max` and `y_max`. Nothing is imposed at `y = 0`;
//! the face flux there is set to zero and the net outward flux that the
//! interior would push through it is reported as a diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{LpsvError, Result};
use crate::grid::TensorGrid;
use crate::noise::NoiseBundle;
use crate::numerics::{solve_tridiagonal, trap_weight};
use crate::params::ModelParams;
use crate::pde1d::POSITIVITY_TOL;
use crate::transport::{transport_step, TransportScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XBoundary {
    #[default]
    Absorbing,
    /// Zero flux at `x = 0`. Only for conservation tests.
    Reflecting,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpdeOptions {
    pub scheme: TransportScheme,
    /// Keep every `record_every`-th step; step 0 and the last step are
    /// always kept.
    pub record_every: usize,
    pub x_boundary: XBoundary,
    /// Mixed-derivative coefficient; defaults to `ξρ₃ρ₁ρ₂`.
    pub rho: Option<f64>,
    /// A transport step whose Courant number exceeds 1 is split into at
    /// most this many equal sub-shifts before a CFL fault is raised.
    pub max_substeps: usize,
}

impl Default for SpdeOptions {
    fn default() -> Self {
        Self {
            scheme: TransportScheme::Limited,
            record_every: 100,
            x_boundary: XBoundary::Absorbing,
            rho: None,
            max_substeps: 1,
        }
    }
}

/// Solution of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub grid: TensorGrid,
    pub dt: f64,
    pub scenario: u64,
    pub rho: f64,
    pub times: Vec<f64>,
    /// Snapshots at `times`, x-major like [`TensorGrid::idx`].
    pub u: Vec<Vec<f64>>,
    /// Total mass after every step, starting with the initial mass.
    pub mass: Vec<f64>,
    /// Outward flux through `y = 0` per unit time, after every step.
    pub y0_flux: Vec<f64>,
    /// Largest Courant ratio met by any explicit term.
    pub max_cfl: f64,
}

impl GridField {
    pub fn n_steps(&self) -> usize {
        self.mass.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps() as f64
    }

    fn step_of(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if t < -1e-12 || k as usize > self.n_steps() {
            return Err(LpsvError::Horizon {
                t,
                horizon: self.horizon(),
            });
        }
        Ok(k as usize)
    }

    /// Snapshot recorded at time `t`.
    pub fn at(&self, t: f64) -> Result<&[f64]> {
        let k = self.step_of(t)?;
        self.times
            .iter()
            .position(|s| (s / self.dt).round() as usize == k)
            .map(|i| self.u[i].as_slice())
            .ok_or_else(|| LpsvError::InvalidArgument(format!("time {t} was not recorded")))
    }

    pub fn last(&self) -> &[f64] {
        self.u
            .last()
            .expect("a solved field has at least one snapshot")
    }

    /// Largest `y = 0` flux relative to the mass at the same step.
    pub fn max_relative_y0_flux(&self) -> f64 {
        self.y0_flux
            .iter()
            .zip(&self.mass)
            .map(|(f, m)| if *m > 0.0 { f / m } else { 0.0 })
            .fold(0.0, f64::max)
    }
}

/// Trapezoid mass of `field` at time `t` (any step; not only recorded ones).
pub fn mass(field: &GridField, t: f64) -> Result<f64> {
    Ok(field.mass[field.step_of(t)?])
}

/// What the observer sees after each step.
pub struct StepView<'a> {
    /// Number of steps taken; 0 is the initial condition.
    pub step: usize,
    pub t: f64,
    pub u: &'a [f64],
    /// Increments used to reach this step (zero at step 0).
    pub dw0: f64,
    pub db0: f64,
}

pub fn solve_spde(
    p: &ModelParams,
    noise: &NoiseBundle,
    grid: &TensorGrid,
    u0: &[f64],
) -> Result<GridField> {
    solve_spde_with(p, noise, grid, u0, SpdeOptions::default())
}

pub fn solve_spde_with(
    p: &ModelParams,
    noise: &NoiseBundle,
    grid: &TensorGrid,
    u0: &[f64],
    opts: SpdeOptions,
) -> Result<GridField> {
    solve_spde_observed(p, noise, grid, u0, opts, |_| {})
}

/// Row and column coefficients that do not change in time.
struct Operators {
    ny: usize,
    nx: usize,
    /// Per `y` row: `h(y_j)`.
    h_row: Vec<f64>,
    /// x tridiagonals per row, over the unknown nodes.
    x_lower: Vec<Vec<f64>>,
    x_diag: Vec<Vec<f64>>,
    x_upper: Vec<Vec<f64>>,
    y_lower: Vec<f64>,
    y_diag: Vec<f64>,
    y_upper: Vec<f64>,
    /// `D_y` of the `y` diffusion and the advection speed at `y = 0`, for
    /// the boundary diagnostic.
    dy_coef: f64,
    a_y0: f64,
    /// `√y` at the `y` faces.
    sqrt_y_face: Vec<f64>,
    /// `h(y_j)√y_j`, for the mixed term.
    g_mixed: Vec<f64>,
    first_x: usize,
}

impl Operators {
    fn new(p: &ModelParams, grid: &TensorGrid, dt: f64, opts: &SpdeOptions) -> Self {
        let (nx, ny) = (grid.nx_nodes(), grid.ny_nodes());
        let (dx, dy) = (grid.dx(), grid.dy());
        let limited = opts.scheme.limited();
        let first_x = match opts.x_boundary {
            XBoundary::Absorbing => 1,
            XBoundary::Reflecting => 0,
        };
        let h_row: Vec<f64> = (0..ny).map(|j| p.h(grid.y(j))).collect();

        let x_share = if limited { 1.0 - p.rho1 * p.rho1 } else { 1.0 };
        let m = nx - first_x;
        let (mut x_lower, mut x_diag, mut x_upper) = (Vec::new(), Vec::new(), Vec::new());
        for &h in &h_row {
            let mu = p.r - 0.5 * h * h;
            let d = 0.5 * h * h * x_share;
            let alpha = mu.max(0.0) + d / dx;
            let beta = mu.min(0.0) - d / dx;
            let (mut lo, mut di, mut up) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
            for k in 0..m {
                let i = k + first_x;
                let has_left = i > 0;
                let has_right = i + 1 < nx;
                let vol = if has_left && has_right { dx } else { 0.5 * dx };
                let lam = dt / vol;
                let mut a = 0.0;
                if has_right {
                    a -= alpha;
                    up[k] = lam * beta;
                }
                if has_left {
                    a += beta;
                    lo[k] = -lam * alpha;
                }
                di[k] = 1.0 - lam * a;
            }
            x_lower.push(lo);
            x_diag.push(di);
            x_upper.push(up);
        }

        let (dy_coef, shift) = if limited {
            (
                0.5 * p.xi * p.xi * (1.0 - p.rho2 * p.rho2),
                0.25 * p.xi * p.xi * p.rho2 * p.rho2,
            )
        } else {
            (0.5 * p.xi * p.xi, 0.0)
        };
        // Face f between nodes f and f+1: F = A_f u_f + B_f u_{f+1}.
        let mut fa = vec![0.0; ny - 1];
        let mut fb = vec![0.0; ny - 1];
        for f in 0..ny - 1 {
            let (yl, yr) = (grid.y(f), grid.y(f + 1));
            let a = p.k * (p.theta - 0.5 * (yl + yr)) - shift;
            let dl = dy_coef * yl / dy;
            let dr = dy_coef * yr / dy;
            let central_ok = 0.5 * a - dr <= 0.0 && 0.5 * a + dl >= 0.0;
            let (adv_a, adv_b) = if central_ok {
                (0.5 * a, 0.5 * a)
            } else if a > 0.0 {
                (a, 0.0)
            } else {
                (0.0, a)
            };
            fa[f] = adv_a + dl;
            fb[f] = adv_b - dr;
        }
        let (mut y_lower, mut y_diag, mut y_upper) = (vec![0.0; ny], vec![0.0; ny], vec![0.0; ny]);
        for j in 0..ny {
            let vol = if j == 0 || j + 1 == ny { 0.5 * dy } else { dy };
            let lam = dt / vol;
            let mut d = 1.0;
            if j + 1 < ny {
                d += lam * fa[j];
                y_upper[j] = lam * fb[j];
            }
            if j > 0 {
                d -= lam * fb[j - 1];
                y_lower[j] = -lam * fa[j - 1];
            }
            y_diag[j] = d;
        }

        let sqrt_y_face = (0..ny - 1).map(|f| (grid.y(f) + 0.5 * dy).sqrt()).collect();
        let g_mixed = (0..ny).map(|j| h_row[j] * grid.y(j).sqrt()).collect();
        Self {
            ny,
            nx,
            h_row,
            x_lower,
            x_diag,
            x_upper,
            y_lower,
            y_diag,
            y_upper,
            dy_coef,
            a_y0: p.k * p.theta - shift,
            sqrt_y_face,
            g_mixed,
            first_x,
        }
    }
}

/// Number of equal sub-shifts needed for Courant `ratio`, or a CFL fault.
fn substeps(ratio: f64, max_substeps: usize, step: usize, term: &'static str) -> Result<usize> {
    if ratio <= 1.0 {
        return Ok(1);
    }
    let m = ratio.ceil() as usize;
    if m > max_substeps.max(1) {
        return Err(LpsvError::Cfl { step, term, ratio });
    }
    Ok(m)
}

/// Full solver; `observer` is called at step 0 and after every step.
pub fn solve_spde_observed(
    p: &ModelParams,
    noise: &NoiseBundle,
    grid: &TensorGrid,
    u0: &[f64],
    opts: SpdeOptions,
    mut observer: impl FnMut(&StepView),
) -> Result<GridField> {
    if u0.len() != grid.len() {
        return Err(LpsvError::InvalidArgument(format!(
            "U0 has {} values, grid has {} nodes",
            u0.len(),
            grid.len()
        )));
    }
    if u0.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(LpsvError::InvalidArgument(
            "U0 must be finite and nonnegative".into(),
        ));
    }
    let absorbing = opts.x_boundary == XBoundary::Absorbing;
    if absorbing && (0..grid.ny_nodes()).any(|j| u0[grid.idx(0, j)] != 0.0) {
        return Err(LpsvError::InvalidArgument("U0 must vanish at x = 0".into()));
    }
    let dt = noise.dt;
    let ops = Operators::new(p, grid, dt, &opts);
    let (nx, ny) = (ops.nx, ops.ny);
    let (dx, dy) = (grid.dx(), grid.dy());
    let limited = opts.scheme.limited();
    let rho = opts.rho.unwrap_or_else(|| p.rho_mixed());
    let rho_explicit = if limited { rho - p.rho_mixed() } else { rho };
    let mixed_ratio =
        rho_explicit.abs() * ops.g_mixed.iter().fold(0.0_f64, |m, g| m.max(*g)) * dt / (dx * dy);
    if mixed_ratio > 1.0 {
        return Err(LpsvError::Cfl {
            step: 0,
            term: "mixed",
            ratio: mixed_ratio,
        });
    }
    let every = opts.record_every.max(1);

    let mut u = u0.to_vec();
    let mut field = GridField {
        grid: *grid,
        dt,
        scenario: noise.scenario,
        rho,
        times: vec![0.0],
        u: vec![u.clone()],
        mass: vec![grid.integrate(&u)],
        y0_flux: vec![y0_flux(grid, &u, &ops)],
        max_cfl: mixed_ratio,
    };
    observer(&StepView {
        step: 0,
        t: 0.0,
        u: &u,
        dw0: 0.0,
        db0: 0.0,
    });

    let mut line = vec![0.0; nx.max(ny)];
    let mut courant = vec![0.0; nx.max(ny)];
    let mut flux = Vec::new();
    let mut scratch = vec![0.0; nx.max(ny)];
    let mut mixed = vec![0.0; u.len()];

    for step in 0..noise.n_steps {
        let (dw, db) = (noise.common_w0[step], noise.common_b0[step]);

        // 1. x shift.
        let x_ratio =
            p.rho1.abs() * ops.h_row.iter().fold(0.0_f64, |m, h| m.max(*h)) * dw.abs() / dx;
        field.max_cfl = field.max_cfl.max(x_ratio);
        if x_ratio > 0.0 {
            let m = substeps(x_ratio, opts.max_substeps, step, "w0_transport")?;
            for j in 0..ny {
                let c = p.rho1 * ops.h_row[j] * dw / (dx * m as f64);
                for i in 0..nx {
                    line[i] = u[grid.idx(i, j)];
                }
                courant[..nx - 1].iter_mut().for_each(|v| *v = c);
                for _ in 0..m {
                    transport_step(
                        &mut line[..nx],
                        &courant[..nx - 1],
                        limited,
                        absorbing,
                        &mut flux,
                    );
                }
                for i in 0..nx {
                    u[grid.idx(i, j)] = line[i];
                }
            }
        }

        // 2. y shift.
        let y_ratio =
            (p.xi * p.rho2).abs() * ops.sqrt_y_face.last().copied().unwrap_or(0.0) * db.abs() / dy;
        field.max_cfl = field.max_cfl.max(y_ratio);
        if y_ratio > 0.0 {
            let m = substeps(y_ratio, opts.max_substeps, step, "b0_transport")?;
            for (f, c) in courant[..ny - 1].iter_mut().enumerate() {
                *c = p.xi * p.rho2 * ops.sqrt_y_face[f] * db / (dy * m as f64);
            }
            for i in 0..nx {
                let col = &mut u[i * ny..(i + 1) * ny];
                for _ in 0..m {
                    transport_step(col, &courant[..ny - 1], limited, false, &mut flux);
                }
            }
        }

        // 3. Mixed term, centred on interior nodes.
        if rho_explicit != 0.0 {
            let s = rho_explicit * dt / (4.0 * dx * dy);
            mixed.iter_mut().for_each(|v| *v = 0.0);
            for i in 1..nx - 1 {
                for j in 1..ny - 1 {
                    let g = |a: usize, b: usize| ops.g_mixed[b] * u[grid.idx(a, b)];
                    mixed[grid.idx(i, j)] =
                        s * (g(i + 1, j + 1) - g(i + 1, j - 1) - g(i - 1, j + 1) + g(i - 1, j - 1));
                }
            }
            for (v, d) in u.iter_mut().zip(&mixed) {
                *v += d;
            }
        }

        // 4. Implicit x, row by row.
        let fx = ops.first_x;
        for j in 0..ny {
            for i in fx..nx {
                line[i - fx] = u[grid.idx(i, j)];
            }
            let m = nx - fx;
            solve_tridiagonal(
                &ops.x_lower[j],
                &ops.x_diag[j],
                &ops.x_upper[j],
                &mut line[..m],
                &mut scratch[..m],
            );
            for i in fx..nx {
                u[grid.idx(i, j)] = line[i - fx];
            }
            if absorbing {
                u[grid.idx(0, j)] = 0.0;
            }
        }

        // 5. Implicit y, column by column.
        for i in 0..nx {
            let col = &mut u[i * ny..(i + 1) * ny];
            solve_tridiagonal(
                &ops.y_lower,
                &ops.y_diag,
                &ops.y_upper,
                col,
                &mut scratch[..ny],
            );
        }
        if absorbing {
            for j in 0..ny {
                u[grid.idx(0, j)] = 0.0;
            }
        }

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
        field.mass.push(grid.integrate(&u));
        field.y0_flux.push(y0_flux(grid, &u, &ops));
        let n = step + 1;
        observer(&StepView {
            step: n,
            t: n as f64 * dt,
            u: &u,
            dw0: dw,
            db0: db,
        });
        if n % every == 0 || n == noise.n_steps {
            field.times.push(n as f64 * dt);
            field.u.push(u.clone());
        }
    }
    Ok(field)
}

/// Outward part of the flux `a(0) u − D_y (yu)_y` at `y = 0`, with a
/// one-sided difference, integrated in `x`.
fn y0_flux(grid: &TensorGrid, u: &[f64], ops: &Operators) -> f64 {
    let nx = grid.nx_nodes();
    (0..nx)
        .map(|i| {
            let outward = ops.dy_coef * u[grid.idx(i, 1)] - ops.a_y0 * u[grid.idx(i, 0)];
            outward.max(0.0) * trap_weight(i, nx, grid.dx())
        })
        .sum()
}
