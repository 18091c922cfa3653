//! Post-processing of solved fields: mollification, weighted norms, the
//! term-by-term `δ`-identity and the particle/grid comparison.
//!
//! The `δ`-identity holds exactly for the density of `(X, √σ)`, so it is
//! evaluated on `ũ(x, s) = 2s·u(x, s²)` over a uniform `s` grid. The
//! mollifier acts in `s`; weights `g` stay functions of the variance `z`
//! and are evaluated at `z = s²`, so `z^{±1/2}` become `s^{±1}`. The
//! weighted inner products use `w²(x) s^δ'`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LpsvError, Result};
use crate::grid::TensorGrid;
use crate::noise::NoiseBundle;
use crate::numerics::{interp_uniform, trap_weight};
use crate::params::ModelParams;
use crate::pde1d::{node_derivative, w};
use crate::pool::Empirical2D;
use crate::spde2d::{solve_spde_observed, GridField, SpdeOptions, StepView};

/// `∫_{−1}^{1} exp(−1/(1−s²)) ds`.
pub const BUMP_MASS: f64 = 0.443_993_816_168_079_4;

/// Unnormalized bump `exp(−1/(1−s²))` on `|s| < 1`.
#[inline]
pub fn bump(s: f64) -> f64 {
    if s.abs() < 1.0 {
        (-1.0 / (1.0 - s * s)).exp()
    } else {
        0.0
    }
}

#[inline]
fn bump_prime(s: f64) -> f64 {
    if s.abs() < 1.0 {
        let d = 1.0 - s * s;
        -2.0 * s / (d * d) * bump(s)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifierSpec {
    pub epsilon: f64,
}

impl MollifierSpec {
    /// `φ_ε(z, y) = ε⁻¹ φ((z − y)/ε)` with `∫φ = 1`.
    pub fn kernel(&self, z: f64, y: f64) -> f64 {
        bump((z - y) / self.epsilon) / (self.epsilon * BUMP_MASS)
    }
}

/// Mollifier sampled on a uniform lattice: `out_j = Σ_k src_k K_{k−j}`.
/// The weights are normalized so that they sum to one over the infinite
/// lattice; nodes below the first grid node simply do not exist.
#[derive(Debug, Clone)]
struct LatticeKernel {
    half: usize,
    w: Vec<f64>,
    /// Weights of `∂_y φ_ε(z, y)`.
    dw: Vec<f64>,
}

impl LatticeKernel {
    fn new(epsilon: f64, spacing: f64) -> Result<Self> {
        if !(epsilon >= 2.0 * spacing) {
            return Err(LpsvError::Mollifier {
                epsilon,
                min: 2.0 * spacing,
            });
        }
        let half = (epsilon / spacing).ceil() as usize;
        let offsets = -(half as isize)..=half as isize;
        let raw: Vec<f64> = offsets
            .clone()
            .map(|o| bump(o as f64 * spacing / epsilon))
            .collect();
        let norm: f64 = raw.iter().sum();
        let w = raw.iter().map(|v| v / norm).collect();
        let raw_dw: Vec<f64> = offsets
            .clone()
            .map(|o| -bump_prime(o as f64 * spacing / epsilon))
            .collect();
        // Scale so that a linear profile has slope exactly one.
        let slope: f64 = offsets
            .zip(&raw_dw)
            .map(|(o, d)| o as f64 * spacing * d)
            .sum();
        let dw = raw_dw.iter().map(|d| d / slope).collect();
        Ok(Self { half, w, dw })
    }

    fn apply(weights: &[f64], half: usize, src: &[f64], out: &mut [f64]) {
        let n = src.len() as isize;
        for (j, o) in out.iter_mut().enumerate() {
            let j = j as isize;
            let lo = (j - half as isize).max(0);
            let hi = (j + half as isize).min(n - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                acc += src[k as usize] * weights[(k - j + half as isize) as usize];
            }
            *o = acc;
        }
    }

    fn smooth(&self, src: &[f64], out: &mut [f64]) {
        Self::apply(&self.w, self.half, src, out)
    }

    fn smooth_dy(&self, src: &[f64], out: &mut [f64]) {
        Self::apply(&self.dw, self.half, src, out)
    }
}

/// Weight `g(z)` of a smoothed field, as a function of the variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weight {
    One,
    HSquared,
    H,
    SqrtZ,
    InvSqrtZ,
}

impl Weight {
    pub fn eval(self, p: &ModelParams, z: f64) -> f64 {
        match self {
            Weight::One => 1.0,
            Weight::HSquared => p.h(z).powi(2),
            Weight::H => p.h(z),
            Weight::SqrtZ => z.max(0.0).sqrt(),
            Weight::InvSqrtZ => 1.0 / z.sqrt(),
        }
    }
}

/// `I_{ε,g}(t, x, y) = Σ_z u(t, x, z) g(z) φ_ε(z, y) Δz` on the field's own
/// grid. For `g = z^{−1/2}` the nodes with `z < max(2ε, 2Δy)` are left out.
pub fn mollify(
    p: &ModelParams,
    field: &GridField,
    g: Weight,
    spec: &MollifierSpec,
    t: f64,
) -> Result<Vec<f64>> {
    let grid = field.grid;
    mollify_values(p, &grid, field.at(t)?, g, spec)
}

/// [`mollify`] on bare node values.
pub fn mollify_values(
    p: &ModelParams,
    grid: &TensorGrid,
    u: &[f64],
    g: Weight,
    spec: &MollifierSpec,
) -> Result<Vec<f64>> {
    let dy = grid.dy();
    let kernel = LatticeKernel::new(spec.epsilon, dy)?;
    let ny = grid.ny_nodes();
    let cut = if g == Weight::InvSqrtZ {
        (2.0 * spec.epsilon).max(2.0 * dy)
    } else {
        f64::NEG_INFINITY
    };
    let gv: Vec<f64> = (0..ny)
        .map(|j| {
            let z = grid.y(j);
            if z < cut {
                0.0
            } else {
                g.eval(p, z)
            }
        })
        .collect();
    let mut out = vec![0.0; grid.len()];
    let mut src = vec![0.0; ny];
    for i in 0..grid.nx_nodes() {
        let row = &u[i * ny..(i + 1) * ny];
        for j in 0..ny {
            src[j] = row[j] * gv[j];
        }
        kernel.smooth(&src, &mut out[i * ny..(i + 1) * ny]);
    }
    Ok(out)
}

/// Weighted-space norms of a solved field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub alpha: f64,
    pub l_alpha: f64,
    pub h_alpha: f64,
    /// `(x_i, ∫ y^α u²(·, x_i, y) dy averaged over t)`.
    pub boundary_profile: Vec<(f64, f64)>,
    pub uy_norm_alpha: f64,
}

impl NormReport {
    /// Profile value at the smallest interior `x` over its peak.
    pub fn boundary_ratio(&self) -> f64 {
        let peak = self
            .boundary_profile
            .iter()
            .map(|p| p.1)
            .fold(0.0, f64::max);
        match self.boundary_profile.get(1) {
            Some(&(_, v)) if peak > 0.0 => v / peak,
            _ => 0.0,
        }
    }
}

/// Norms of one snapshot: `(L, ∫∫w²y^α u_x², ∫∫ y^α w² u_y², profile)`.
fn snapshot_norms(grid: &TensorGrid, u: &[f64], alpha: f64) -> (f64, f64, f64, Vec<f64>) {
    let (nx, ny) = (grid.nx_nodes(), grid.ny_nodes());
    let (dx, dy) = (grid.dx(), grid.dy());
    let ya: Vec<f64> = grid.ys().iter().map(|y| pow_weight(*y, alpha)).collect();
    let mut l = 0.0;
    let mut hx = 0.0;
    let mut uy = 0.0;
    let mut profile = vec![0.0; nx];
    let mut col = vec![0.0; nx];
    let mut ux = vec![vec![0.0; ny]; nx];
    for j in 0..ny {
        for i in 0..nx {
            col[i] = u[grid.idx(i, j)];
        }
        for (i, d) in node_derivative(&col, dx).into_iter().enumerate() {
            ux[i][j] = d;
        }
    }
    for i in 0..nx {
        let row = &u[i * ny..(i + 1) * ny];
        let dyu = node_derivative(row, dy);
        let wx = trap_weight(i, nx, dx);
        let w2 = w(grid.x(i)).powi(2);
        let mut slice = 0.0;
        for j in 0..ny {
            let wy = trap_weight(j, ny, dy);
            let base = ya[j] * wy;
            slice += base * row[j] * row[j];
            hx += wx * base * w2 * ux[i][j] * ux[i][j];
            uy += wx * base * w2 * dyu[j] * dyu[j];
        }
        profile[i] = slice;
        l += wx * slice;
    }
    (l, hx, uy, profile)
}

/// `y^a` with `0^a = 0` for `a < 0` and `0^0 = 1`.
#[inline]
fn pow_weight(y: f64, a: f64) -> f64 {
    if y > 0.0 {
        y.powf(a)
    } else if a == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Norms averaged over the recorded snapshots (trapezoid in time).
pub fn weighted_norms(field: &GridField, alpha: f64) -> NormReport {
    let grid = field.grid;
    let per: Vec<_> = field
        .u
        .iter()
        .map(|u| snapshot_norms(&grid, u, alpha))
        .collect();
    let weights: Vec<f64> = if field.times.len() < 2 {
        vec![1.0]
    } else {
        let span = field.times.last().unwrap() - field.times[0];
        (0..field.times.len())
            .map(|k| {
                let left = if k > 0 {
                    field.times[k] - field.times[k - 1]
                } else {
                    0.0
                };
                let right = if k + 1 < field.times.len() {
                    field.times[k + 1] - field.times[k]
                } else {
                    0.0
                };
                0.5 * (left + right) / span
            })
            .collect()
    };
    let mut l = 0.0;
    let mut hx = 0.0;
    let mut uy = 0.0;
    let mut profile = vec![0.0; grid.nx_nodes()];
    for (wt, (a, b, c, prof)) in weights.iter().zip(&per) {
        l += wt * a;
        hx += wt * b;
        uy += wt * c;
        for (acc, v) in profile.iter_mut().zip(prof) {
            *acc += wt * v;
        }
    }
    NormReport {
        alpha,
        l_alpha: l,
        h_alpha: l + hx,
        boundary_profile: grid.xs().into_iter().zip(profile).collect(),
        uy_norm_alpha: uy,
    }
}

/// Sup distance between the bivariate CDFs of a particle density and a
/// solved field at time `t`, on the shared grid.
pub fn compare_particle_grid(emp: &Empirical2D, field: &GridField, t: f64) -> Result<f64> {
    if emp.grid != field.grid {
        return Err(LpsvError::InvalidArgument(
            "particle density and field live on different grids".into(),
        ));
    }
    let a = emp.grid.cumulative(&emp.values);
    let b = field.grid.cumulative(field.at(t)?);
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// Setup of the `δ`-identity evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaSpec {
    /// Mollifier width in `s = √σ` units.
    pub mollifier: MollifierSpec,
    pub delta: f64,
    /// Cells of the `s` grid on `[0, √y_max]`.
    pub n_s: usize,
}

/// Every term of the `δ`-identity at time `t`, plus the two stochastic
/// integrals of its pathwise form.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaTerms {
    pub lhs: f64,
    pub initial: f64,
    pub extra_transport: f64,
    pub xdrift_pair: f64,
    pub y_drift_delta: f64,
    pub y_drift_deriv: f64,
    pub y_meanrev_delta: f64,
    pub y_meanrev_deriv: f64,
    pub x_diffusion: f64,
    pub extra_boundary_strip: f64,
    pub mixed_delta: f64,
    pub w0_quadratic: f64,
    pub y_quadratic_delta: f64,
    pub y_diffusion_net: f64,
    pub mismatch: f64,
    pub stoch_w0: f64,
    pub stoch_b0: f64,
    pub residual: f64,
}

/// Names of the drift terms, in the order of [`DeltaTerms::drift_terms`].
pub const DRIFT_TERM_NAMES: [&str; 13] = [
    "extra_transport",
    "xdrift_pair",
    "y_drift_delta",
    "y_drift_deriv",
    "y_meanrev_delta",
    "y_meanrev_deriv",
    "x_diffusion",
    "extra_boundary_strip",
    "mixed_delta",
    "w0_quadratic",
    "y_quadratic_delta",
    "y_diffusion_net",
    "mismatch",
];

impl DeltaTerms {
    pub fn drift_terms(&self) -> [f64; 13] {
        [
            self.extra_transport,
            self.xdrift_pair,
            self.y_drift_delta,
            self.y_drift_deriv,
            self.y_meanrev_delta,
            self.y_meanrev_deriv,
            self.x_diffusion,
            self.extra_boundary_strip,
            self.mixed_delta,
            self.w0_quadratic,
            self.y_quadratic_delta,
            self.y_diffusion_net,
            self.mismatch,
        ]
    }

    fn drift_terms_mut(&mut self) -> [&mut f64; 13] {
        [
            &mut self.extra_transport,
            &mut self.xdrift_pair,
            &mut self.y_drift_delta,
            &mut self.y_drift_deriv,
            &mut self.y_meanrev_delta,
            &mut self.y_meanrev_deriv,
            &mut self.x_diffusion,
            &mut self.extra_boundary_strip,
            &mut self.mixed_delta,
            &mut self.w0_quadratic,
            &mut self.y_quadratic_delta,
            &mut self.y_diffusion_net,
            &mut self.mismatch,
        ]
    }

    /// `(name, value)` for every entry, residual last.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("lhs", self.lhs), ("initial", self.initial)];
        v.extend(DRIFT_TERM_NAMES.iter().copied().zip(self.drift_terms()));
        v.push(("stoch_w0", self.stoch_w0));
        v.push(("stoch_b0", self.stoch_b0));
        v.push(("residual", self.residual));
        v
    }

    /// `lhs − initial − Σ terms`, stochastic integrals included.
    pub fn compute_residual(&self) -> f64 {
        self.lhs
            - self.initial
            - self.drift_terms().iter().sum::<f64>()
            - self.stoch_w0
            - self.stoch_b0
    }

    /// Largest absolute value among the right-hand-side terms.
    pub fn largest_term(&self) -> f64 {
        self.drift_terms()
            .iter()
            .chain([self.initial, self.stoch_w0, self.stoch_b0].iter())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    pub fn relative_residual(&self) -> f64 {
        let big = self.largest_term();
        if big > 0.0 {
            self.residual.abs() / big
        } else {
            self.residual.abs()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, v)| v.is_finite())
    }
}

/// Per-scenario pathwise terms and their scenario average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub t: f64,
    pub delta: f64,
    pub pathwise: Vec<DeltaTerms>,
    /// Scenario means with the stochastic integrals dropped.
    pub averaged: DeltaTerms,
    /// Scenario means of the two stochastic integrals.
    pub mean_stochastic: [f64; 2],
}

impl DeltaReport {
    pub fn from_pathwise(t: f64, delta: f64, pathwise: Vec<DeltaTerms>) -> Result<Self> {
        if pathwise.is_empty() {
            return Err(LpsvError::Empty("scenarios"));
        }
        let n = pathwise.len() as f64;
        let mut avg = DeltaTerms::default();
        let mut stoch = [0.0; 2];
        for d in &pathwise {
            avg.lhs += d.lhs / n;
            avg.initial += d.initial / n;
            for (a, v) in avg.drift_terms_mut().into_iter().zip(d.drift_terms()) {
                *a += v / n;
            }
            stoch[0] += d.stoch_w0 / n;
            stoch[1] += d.stoch_b0 / n;
        }
        avg.residual = avg.compute_residual();
        Ok(Self {
            t,
            delta,
            pathwise,
            averaged: avg,
            mean_stochastic: stoch,
        })
    }

    pub fn max_relative_pathwise_residual(&self) -> f64 {
        self.pathwise
            .iter()
            .map(|d| d.relative_residual())
            .fold(0.0, f64::max)
    }

    pub fn mean_relative_pathwise_residual(&self) -> f64 {
        self.pathwise
            .iter()
            .map(|d| d.relative_residual())
            .sum::<f64>()
            / self.pathwise.len() as f64
    }
}

/// Integrands of one step, per unit time (drift) or per unit increment.
#[derive(Debug, Clone, Copy, Default)]
struct Integrands {
    norm: f64,
    drift: [f64; 13],
    stoch_w: f64,
    stoch_b: f64,
}

/// Streaming evaluation of the identity: feed it every step of one solve.
#[derive(Debug, Clone)]
pub struct DeltaAccumulator {
    p: ModelParams,
    rho: f64,
    delta: f64,
    grid: TensorGrid,
    ns: usize,
    ds: f64,
    kernel: LatticeKernel,
    s_nodes: Vec<f64>,
    /// Weights `s^δ`, `s^{δ−1}`, `s^{δ−2}` times the `s` quadrature weight.
    ws: [Vec<f64>; 3],
    w2x: Vec<f64>,
    strip: Vec<f64>,
    g_h2: Vec<f64>,
    g_h: Vec<f64>,
    g_sqrt: Vec<f64>,
    g_inv: Vec<f64>,
    terms: DeltaTerms,
    pending: Option<Integrands>,
    dt: f64,
    bufs: Buffers,
}

#[derive(Debug, Clone, Default)]
struct Buffers {
    ut: Vec<f64>,
    i1: Vec<f64>,
    ih2: Vec<f64>,
    ih: Vec<f64>,
    isq: Vec<f64>,
    iinv: Vec<f64>,
    dyi1: Vec<f64>,
    src: Vec<f64>,
}

impl DeltaAccumulator {
    pub fn new(
        p: &ModelParams,
        grid: &TensorGrid,
        dt: f64,
        rho: f64,
        spec: &DeltaSpec,
    ) -> Result<Self> {
        if !(spec.delta > 1.0) {
            return Err(LpsvError::InvalidArgument(format!(
                "delta = {} must exceed 1",
                spec.delta
            )));
        }
        if spec.n_s < 2 {
            return Err(LpsvError::InvalidArgument(
                "s grid needs at least 2 cells".into(),
            ));
        }
        let ns = spec.n_s + 1;
        let ds = grid.y_max.sqrt() / spec.n_s as f64;
        let kernel = LatticeKernel::new(spec.mollifier.epsilon, ds)?;
        let s_nodes: Vec<f64> = (0..ns).map(|j| j as f64 * ds).collect();
        let d = spec.delta;
        let ws = [d, d - 1.0, d - 2.0].map(|a| {
            s_nodes
                .iter()
                .enumerate()
                .map(|(j, &s)| pow_weight(s, a) * trap_weight(j, ns, ds))
                .collect::<Vec<f64>>()
        });
        let nx = grid.nx_nodes();
        let w2x = (0..nx).map(|i| w(grid.x(i)).powi(2)).collect();
        let strip = (0..nx)
            .map(|i| if grid.x(i) <= 1.0 + 1e-12 { 1.0 } else { 0.0 })
            .collect();
        let g = |wt: Weight| -> Vec<f64> {
            s_nodes
                .iter()
                .map(|&s| if s > 0.0 { wt.eval(p, s * s) } else { 0.0 })
                .collect()
        };
        let n = nx * ns;
        Ok(Self {
            p: *p,
            rho,
            delta: d,
            grid: *grid,
            ns,
            ds,
            kernel,
            g_h2: g(Weight::HSquared),
            g_h: g(Weight::H),
            g_sqrt: g(Weight::SqrtZ),
            g_inv: g(Weight::InvSqrtZ),
            s_nodes,
            ws,
            w2x,
            strip,
            terms: DeltaTerms::default(),
            pending: None,
            dt,
            bufs: Buffers {
                ut: vec![0.0; n],
                i1: vec![0.0; n],
                ih2: vec![0.0; n],
                ih: vec![0.0; n],
                isq: vec![0.0; n],
                iinv: vec![0.0; n],
                dyi1: vec![0.0; n],
                src: vec![0.0; ns],
            },
        })
    }

    /// Spacing of the `s` grid.
    pub fn ds(&self) -> f64 {
        self.ds
    }

    fn evaluate(&mut self, u: &[f64]) -> Integrands {
        let grid = self.grid;
        let (nx, ns, ny) = (grid.nx_nodes(), self.ns, grid.ny_nodes());
        let dx = grid.dx();
        let b = &mut self.bufs;

        // ũ(x, s) = 2s u(x, s²).
        for i in 0..nx {
            let row = &u[i * ny..(i + 1) * ny];
            for (k, &s) in self.s_nodes.iter().enumerate() {
                b.ut[i * ns + k] = 2.0 * s * interp_uniform(row, 0.0, grid.dy(), s * s);
            }
        }
        for i in 0..nx {
            let ut = &b.ut[i * ns..(i + 1) * ns];
            let r = i * ns..(i + 1) * ns;
            self.kernel.smooth(ut, &mut b.i1[r.clone()]);
            self.kernel.smooth_dy(ut, &mut b.dyi1[r.clone()]);
            for (gv, out) in [
                (&self.g_h2, &mut b.ih2),
                (&self.g_h, &mut b.ih),
                (&self.g_sqrt, &mut b.isq),
                (&self.g_inv, &mut b.iinv),
            ] {
                for k in 0..ns {
                    b.src[k] = ut[k] * gv[k];
                }
                self.kernel.smooth(&b.src, &mut out[r.clone()]);
            }
        }

        let p = &self.p;
        let d = self.delta;
        let dxi = |f: &[f64], i: usize, k: usize| -> f64 {
            if i == 0 {
                (f[ns + k] - f[k]) / dx
            } else if i + 1 == nx {
                (f[i * ns + k] - f[(i - 1) * ns + k]) / dx
            } else {
                (f[(i + 1) * ns + k] - f[(i - 1) * ns + k]) / (2.0 * dx)
            }
        };
        let ktx = p.k * p.theta - 0.25 * p.xi * p.xi;
        let mut sums = [0.0; 16];
        for i in 0..nx {
            let wx = trap_weight(i, nx, dx);
            let w2 = self.w2x[i];
            let strip = self.strip[i];
            for k in 0..ns {
                let at = i * ns + k;
                let (i1, dy1) = (b.i1[at], b.dyi1[at]);
                let dx_h2 = dxi(&b.ih2, i, k);
                let dx_h = dxi(&b.ih, i, k);
                let dx_1 = dxi(&b.i1, i, k);
                let (a0, a1, a2) = (self.ws[0][k] * wx, self.ws[1][k] * wx, self.ws[2][k] * wx);
                sums[0] += w2 * a0 * i1 * i1;
                sums[1] += strip * a0 * i1 * i1;
                sums[2] += w2 * a0 * dx_h2 * i1;
                sums[3] += w2 * a1 * b.iinv[at] * i1;
                sums[4] += w2 * a0 * b.iinv[at] * dy1;
                sums[5] += w2 * a1 * b.isq[at] * i1;
                sums[6] += w2 * a0 * b.isq[at] * dy1;
                sums[7] += w2 * a0 * dx_h2 * dx_1;
                sums[8] += strip * a0 * dx_h2 * i1;
                sums[9] += w2 * a1 * dx_h * i1;
                sums[10] += w2 * a0 * dx_h * dx_h;
                sums[11] += w2 * a2 * i1 * i1;
                sums[12] += w2 * a0 * dy1 * dy1;
                sums[13] += w2 * a0 * dx_h * dy1;
                sums[14] += w2 * a0 * dx_h * i1;
                sums[15] += w2 * a0 * dy1 * i1;
            }
        }
        let xi2 = p.xi * p.xi;
        Integrands {
            norm: sums[0],
            drift: [
                p.r * sums[1],
                sums[2],
                d * ktx * sums[3],
                ktx * sums[4],
                -d * p.k * sums[5],
                -p.k * sums[6],
                -sums[7],
                -sums[8],
                -d * self.rho * sums[9],
                p.rho1 * p.rho1 * sums[10],
                d * (d - 1.0) * xi2 / 8.0 * sums[11],
                -0.25 * xi2 * (1.0 - p.rho2 * p.rho2) * sums[12],
                -(self.rho - p.rho_mixed()) * sums[13],
            ],
            stoch_w: -2.0 * p.rho1 * sums[14],
            stoch_b: -p.xi * p.rho2 * sums[15],
        }
    }

    /// Feeds the state after `view.step` steps. Steps must arrive in order.
    pub fn observe(&mut self, view: &StepView) {
        let now = self.evaluate(view.u);
        if view.step == 0 {
            self.terms = DeltaTerms {
                initial: now.norm,
                ..Default::default()
            };
        } else if let Some(prev) = self.pending {
            let dt = self.dt;
            for (acc, v) in self.terms.drift_terms_mut().into_iter().zip(prev.drift) {
                *acc += v * dt;
            }
            self.terms.stoch_w0 += prev.stoch_w * view.dw0;
            self.terms.stoch_b0 += prev.stoch_b * view.db0;
        }
        self.pending = Some(now);
    }

    pub fn finish(self) -> DeltaTerms {
        let mut t = self.terms;
        t.lhs = self.pending.map(|p| p.norm).unwrap_or(0.0);
        t.residual = t.compute_residual();
        t
    }
}

/// Evaluates the identity from fields recorded at every step, with the
/// increments of the bundles that produced them.
pub fn delta_identity_terms(
    p: &ModelParams,
    fields: &[GridField],
    noises: &[NoiseBundle],
    spec: &DeltaSpec,
) -> Result<DeltaReport> {
    if fields.len() != noises.len() {
        return Err(LpsvError::InvalidArgument(
            "one noise bundle per field is required".into(),
        ));
    }
    let pathwise = fields
        .par_iter()
        .zip(noises.par_iter())
        .map(|(f, noise)| {
            if f.u.len() != f.n_steps() + 1 {
                return Err(LpsvError::InvalidArgument(
                    "the identity needs fields recorded at every step".into(),
                ));
            }
            let mut acc = DeltaAccumulator::new(p, &f.grid, f.dt, f.rho, spec)?;
            for (n, u) in f.u.iter().enumerate() {
                let (dw0, db0) = if n == 0 {
                    (0.0, 0.0)
                } else {
                    (noise.common_w0[n - 1], noise.common_b0[n - 1])
                };
                acc.observe(&StepView {
                    step: n,
                    t: n as f64 * f.dt,
                    u,
                    dw0,
                    db0,
                });
            }
            Ok(acc.finish())
        })
        .collect::<Result<Vec<_>>>()?;
    let t = fields.first().map(|f| f.horizon()).unwrap_or(0.0);
    DeltaReport::from_pathwise(t, spec.delta, pathwise)
}

/// Solves every scenario and evaluates the identity on the fly, without
/// storing the per-step fields.
pub fn delta_identity_streaming(
    p: &ModelParams,
    noises: &[NoiseBundle],
    grid: &TensorGrid,
    u0: &[f64],
    opts: SpdeOptions,
    spec: &DeltaSpec,
) -> Result<DeltaReport> {
    let rho = opts.rho.unwrap_or_else(|| p.rho_mixed());
    let pathwise = noises
        .par_iter()
        .map(|noise| {
            let mut acc = DeltaAccumulator::new(p, grid, noise.dt, rho, spec)?;
            let quiet = SpdeOptions {
                record_every: usize::MAX,
                ..opts
            };
            solve_spde_observed(p, noise, grid, u0, quiet, |v| acc.observe(v))?;
            Ok(acc.finish())
        })
        .collect::<Result<Vec<_>>>()?;
    let t = noises.first().map(|n| n.horizon()).unwrap_or(0.0);
    DeltaReport::from_pathwise(t, spec.delta, pathwise)
}
