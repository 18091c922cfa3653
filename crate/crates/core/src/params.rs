//! Model coefficients, the mean-reversion gate `kθ/ξ² > x*`, and the
//! Hölder exponent sets that make the conditional volatility density bound
//! work.

use serde::{Deserialize, Serialize};

use crate::error::{LpsvError, Result};

/// Coefficients of one name in the pool, plus the common-noise correlation
/// and the clamp bounds of the volatility map `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Mean-reversion rate of the variance.
    pub k: f64,
    /// Long-run variance.
    pub theta: f64,
    /// Vol-of-vol.
    pub xi: f64,
    /// Risk-free drift of the distance to default.
    pub r: f64,
    /// Loading of the distance to default on the common noise `W⁰`.
    pub rho1: f64,
    /// Loading of the variance on the common noise `B⁰`.
    pub rho2: f64,
    /// Correlation between `W⁰` and `B⁰`.
    pub rho3: f64,
    pub h_lo: f64,
    pub h_hi: f64,
    pub sigma0_lo: f64,
    pub sigma0_hi: f64,
}

impl ModelParams {
    /// `x = kθ/ξ²`.
    pub fn ratio(&self) -> f64 {
        self.k * self.theta / (self.xi * self.xi)
    }

    /// Volatility map `h(y) = clamp(√y, h_lo, h_hi)`.
    #[inline]
    pub fn h(&self, y: f64) -> f64 {
        y.max(0.0).sqrt().clamp(self.h_lo, self.h_hi)
    }

    /// Drift of the distance to default, `r − h²(y)/2`.
    #[inline]
    pub fn x_drift(&self, y: f64) -> f64 {
        let h = self.h(y);
        self.r - 0.5 * h * h
    }

    /// Mixed-derivative coefficient `ξ ρ₃ ρ₁ ρ₂` carried by the limiting density.
    pub fn rho_mixed(&self) -> f64 {
        self.xi * self.rho3 * self.rho1 * self.rho2
    }

    /// Truncation of the variance axis at ten stationary standard deviations.
    pub fn default_y_max(&self) -> f64 {
        self.theta + 10.0 * self.xi * (self.theta / (2.0 * self.k)).sqrt()
    }

    /// Unit-scale `x = 4` configuration: `k = 2`, `θ = 1`, `ξ = √0.5`.
    pub fn unit_benchmark() -> Self {
        Self {
            k: 2.0,
            theta: 1.0,
            xi: 0.5_f64.sqrt(),
            r: 0.0,
            rho1: 0.0,
            rho2: 0.0,
            rho3: 0.0,
            h_lo: 0.1,
            h_hi: 2.0,
            sigma0_lo: 0.8,
            sigma0_hi: 1.2,
        }
    }

    /// Desk-scale benchmark used throughout the tests: `k = 2`, `θ = 0.04`, `ξ² = 0.02`
    /// so that `x = 4`.
    pub fn benchmark() -> Self {
        Self {
            k: 2.0,
            theta: 0.04,
            xi: 0.02_f64.sqrt(),
            r: 0.03,
            rho1: 0.3,
            rho2: 0.5,
            rho3: 0.0,
            h_lo: 0.05,
            h_hi: 0.5,
            sigma0_lo: 0.03,
            sigma0_hi: 0.05,
        }
    }
}

/// The cubic `16x³ − 60x² + 24x − 3` whose root is the gate `x*`.
#[inline]
pub fn gate_cubic(x: f64) -> f64 {
    ((16.0 * x - 60.0) * x + 24.0) * x - 3.0
}

#[inline]
fn gate_cubic_prime(x: f64) -> f64 {
    (48.0 * x - 120.0) * x + 24.0
}

/// Abscissa of the cubic's local maximum, `(120 − √9792)/96`.
pub fn gate_cubic_local_max() -> f64 {
    (120.0 - 9792.0_f64.sqrt()) / 96.0
}

/// Largest (and only) real root `x* ≈ 3.315` of the gate cubic.
///
/// Bisection on `[3, 4]` followed by one Newton polish. The cubic's local
/// maximum is negative, so the root found in the bracket is the unique real
/// root.
pub fn cubic_root_xstar() -> f64 {
    let local_max = gate_cubic(gate_cubic_local_max());
    assert!(
        local_max < 0.0,
        "gate cubic has a positive local maximum {local_max}"
    );

    let (mut lo, mut hi) = (3.0_f64, 4.0_f64);
    debug_assert!(gate_cubic(lo) < 0.0 && gate_cubic(hi) > 0.0);
    while hi - lo > 1e-14 {
        let mid = 0.5 * (lo + hi);
        if gate_cubic(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = 0.5 * (lo + hi);
    x - gate_cubic(x) / gate_cubic_prime(x)
}

/// One line of a [`ValidationReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub x: f64,
    pub x_star: f64,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "x = k*theta/xi^2 = {:.6}, x* = {:.6}",
            self.x, self.x_star
        )?;
        for c in &self.checks {
            let mark = if c.passed { "pass" } else { "FAIL" };
            writeln!(f, "  [{mark}] {}: {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

fn open_unit(v: f64) -> bool {
    v > -1.0 && v < 1.0
}

/// Checks the standing assumptions. Failures are report entries, never
/// faults.
pub fn validate_params(p: &ModelParams) -> ValidationReport {
    let x_star = cubic_root_xstar();
    let x = p.ratio();
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        })
    };

    push(
        "positive coefficients",
        p.k > 0.0 && p.theta > 0.0 && p.xi > 0.0,
        format!("k = {}, theta = {}, xi = {}", p.k, p.theta, p.xi),
    );
    push(
        "ratio above x*",
        x.is_finite() && x > x_star,
        if x > x_star {
            format!("{x:.6} > {x_star:.6}")
        } else {
            format!("ratio below x*: {x:.6} <= {x_star:.6}")
        },
    );
    let feller = 2.0 * p.k * p.theta / (p.xi * p.xi);
    push(
        "Feller condition",
        feller > 1.0,
        format!("2k*theta/xi^2 = {feller:.6}"),
    );
    for (name, v) in [("rho1", p.rho1), ("rho2", p.rho2), ("rho3", p.rho3)] {
        let ok = open_unit(v);
        push(
            &format!("{name} in (-1, 1)"),
            ok,
            if ok {
                format!("{name} = {v}")
            } else {
                format!("{name} outside open interval: {v}")
            },
        );
    }
    push(
        "h clamp bounds",
        p.h_lo > 0.0 && p.h_lo <= p.h_hi && p.h_hi.is_finite(),
        format!("[{}, {}]", p.h_lo, p.h_hi),
    );
    push(
        "initial variance bounds",
        p.sigma0_lo > 0.0 && p.sigma0_lo <= p.sigma0_hi && p.sigma0_hi.is_finite(),
        format!("[{}, {}]", p.sigma0_lo, p.sigma0_hi),
    );

    ValidationReport { x, x_star, checks }
}

/// Exponents of the Hölder chain behind the weighted density bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentSet {
    pub q: f64,
    /// `q̃` with `1/q + 1/q̃ = 1` (infinite for `q = 1`).
    pub q_conj: f64,
    pub r: f64,
    pub r_tilde: f64,
    /// Stored for completeness; only the `q, r, r̃` constraints are checked.
    pub lambda: f64,
    pub lambda_tilde: f64,
    pub alpha: f64,
    pub v: f64,
}

/// Default scan for "all sufficiently small `q > 1`".
pub const DEFAULT_Q_SCAN: [f64; 6] = [1.001, 1.01, 1.05, 1.1, 1.5, 2.0];

/// Admissible open interval for `r̃` at ratio `x` and exponent `q`:
/// `q r < 4x/3` and `q r̃ < (2x−1)²/(2(4x−1))`.
///
/// The interval may be empty (`lo >= hi`).
pub fn rtilde_interval(x: f64, q: f64) -> (f64, f64) {
    let lo = if 4.0 * x > 3.0 * q {
        4.0 * x / (4.0 * x - 3.0 * q)
    } else {
        f64::INFINITY
    };
    let hi = (2.0 * x - 1.0).powi(2) / (2.0 * q * (4.0 * x - 1.0));
    (lo, hi)
}

/// `v = ½(−(2x−1) + √((2x−1)² − 2 q r̃ (4x−1)))`, or `None` when the root
/// is imaginary.
pub fn v_exponent(x: f64, q: f64, r_tilde: f64) -> Option<f64> {
    let a = 2.0 * x - 1.0;
    let disc = a * a - 2.0 * q * r_tilde * (4.0 * x - 1.0);
    (disc >= 0.0).then(|| 0.5 * (-a + disc.sqrt()))
}

/// `(2x−1)²/(2(4x−1)) < x + ½`, the weight condition at `q = 1`, `α = 0`.
pub fn weight_condition_holds(x: f64) -> bool {
    -(2.0 * x - 1.0).powi(2) / (2.0 * (4.0 * x - 1.0)) > -2.0 * x + 0.5 * (2.0 * x - 1.0)
}

/// Picks `r̃` at the midpoint of its admissible interval and derives the
/// rest of the exponent set, or reports the violated constraint.
pub fn feasible_exponents(x: f64, alpha: f64, q: f64) -> Result<ExponentSet> {
    if !(x > 1.0) {
        return Err(LpsvError::InvalidArgument(format!("x = {x} must exceed 1")));
    }
    if !(alpha >= 0.0) {
        return Err(LpsvError::InvalidArgument(format!("alpha = {alpha} < 0")));
    }
    if !(1.0..=2.0).contains(&q) {
        return Err(LpsvError::InvalidArgument(format!(
            "q = {q} outside [1, 2]"
        )));
    }
    let (lo, hi) = rtilde_interval(x, q);
    if !(lo < hi) || lo <= 1.0 {
        return Err(LpsvError::Infeasible(format!(
            "r_tilde interval ({lo:.6}, {hi:.6}) is empty at x = {x}, q = {q}"
        )));
    }
    let r_tilde = 0.5 * (lo + hi);
    let r = r_tilde / (r_tilde - 1.0);
    let v = v_exponent(x, q, r_tilde).ok_or_else(|| {
        LpsvError::Infeasible(format!("imaginary square root in v at r_tilde = {r_tilde}"))
    })?;
    if !(q * r < 4.0 * x / 3.0) {
        return Err(LpsvError::Infeasible(format!(
            "q*r = {} >= 4x/3 = {}",
            q * r,
            4.0 * x / 3.0
        )));
    }
    if !(q * r_tilde * (alpha - 1.0) > -2.0 * x - v) {
        return Err(LpsvError::Infeasible(format!(
            "q*r_tilde*(alpha-1) = {} <= -2x - v = {}",
            q * r_tilde * (alpha - 1.0),
            -2.0 * x - v
        )));
    }
    let q_conj = if q > 1.0 {
        q / (q - 1.0)
    } else {
        f64::INFINITY
    };
    let lambda = 2.0 * q * r_tilde;
    Ok(ExponentSet {
        q,
        q_conj,
        r,
        r_tilde,
        lambda,
        lambda_tilde: lambda,
        alpha,
        v,
    })
}

/// Every feasible set over a scan of `q` values.
pub fn scan_exponents(x: f64, alpha: f64, qs: &[f64]) -> Vec<ExponentSet> {
    qs.iter()
        .filter_map(|&q| feasible_exponents(x, alpha, q).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn xstar_value_and_residual() {
        let xs = cubic_root_xstar();
        assert!((xs - 3.315).abs() < 1e-3, "x* = {xs}");
        assert!(gate_cubic(xs).abs() < 1e-12);
    }

    #[test]
    fn cubic_at_one_and_bracket() {
        assert_eq!(gate_cubic(1.0), -23.0);
        assert!(gate_cubic(3.0) < 0.0 && gate_cubic(3.5) > 0.0);
        let xs = cubic_root_xstar();
        assert!(xs > 3.0 && xs < 3.5);
    }

    #[test]
    fn local_max_is_negative() {
        let xm = gate_cubic_local_max();
        assert_abs_diff_eq!(gate_cubic_prime(xm), 0.0, epsilon = 1e-12);
        assert!(gate_cubic(xm) < 0.0);
    }

    fn with_xi(k: f64, theta: f64, xi: f64) -> ModelParams {
        ModelParams {
            k,
            theta,
            xi,
            r: 0.0,
            rho1: 0.0,
            rho2: 0.0,
            rho3: 0.0,
            h_lo: 0.1,
            h_hi: 2.0,
            sigma0_lo: 0.5,
            sigma0_hi: 1.5,
        }
    }

    #[test]
    fn validation_examples() {
        let ok = validate_params(&with_xi(2.0, 1.0, 0.5_f64.sqrt()));
        assert_abs_diff_eq!(ok.x, 4.0, epsilon = 1e-12);
        assert!(ok.passed(), "{ok}");

        let low = validate_params(&with_xi(2.0, 1.0, 1.0));
        assert_abs_diff_eq!(low.x, 2.0, epsilon = 1e-12);
        assert!(!low.passed());
        assert!(low.failures().any(|c| c.detail.contains("ratio below x*")));

        let mut p = with_xi(2.0, 1.0, 0.5_f64.sqrt());
        p.rho2 = 1.0;
        let rep = validate_params(&p);
        assert!(rep
            .failures()
            .any(|c| c.detail.contains("rho2 outside open interval")));
    }

    #[test]
    fn benchmark_is_valid() {
        let p = ModelParams::benchmark();
        assert_abs_diff_eq!(p.ratio(), 4.0, epsilon = 1e-12);
        assert!(validate_params(&p).passed());
    }

    #[test]
    fn rtilde_interval_at_four() {
        let (lo, hi) = rtilde_interval(4.0, 1.0);
        assert_abs_diff_eq!(lo, 16.0 / 13.0, epsilon = 1e-14);
        assert_abs_diff_eq!(hi, 49.0 / 30.0, epsilon = 1e-14);
        assert!(lo < hi);
    }

    #[test]
    fn degenerate_at_xstar() {
        let xs = cubic_root_xstar();
        let (lo, hi) = rtilde_interval(xs, 1.0);
        assert!((hi - lo).abs() < 1e-12);
        assert!(feasible_exponents(xs, 0.0, 1.01).is_err());
    }

    #[test]
    fn v_formula_example() {
        let v = v_exponent(4.0, 1.0, 1.5).unwrap();
        assert_abs_diff_eq!(v, -2.5, epsilon = 1e-14);
        assert!(-1.5 > -8.0 - v);
    }

    #[test]
    fn weight_condition_beyond_one() {
        for x in [1.01, 2.0, cubic_root_xstar(), 4.0, 10.0] {
            assert!(weight_condition_holds(x));
        }
    }

    #[test]
    fn infeasible_below_xstar() {
        for x in [2.0, 3.0, 3.3] {
            let (lo, hi) = rtilde_interval(x, 1.0);
            assert!(lo >= hi, "x = {x}: ({lo}, {hi})");
            for q in DEFAULT_Q_SCAN {
                assert!(feasible_exponents(x, 0.0, q).is_err());
            }
        }
    }

    #[test]
    fn width_increases_with_x() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=200 {
            let x = 3.32 + (10.0 - 3.32) * i as f64 / 200.0;
            let (lo, hi) = rtilde_interval(x, 1.0);
            assert!(hi - lo > prev);
            prev = hi - lo;
        }
    }

    #[test]
    fn argument_errors() {
        assert!(feasible_exponents(0.5, 0.0, 1.1).is_err());
        assert!(feasible_exponents(4.0, -1.0, 1.1).is_err());
        assert!(feasible_exponents(4.0, 0.0, 2.5).is_err());
    }

    proptest! {
        #[test]
        fn feasible_above_xstar(x in 3.3155f64..20.0, alpha in 0.0f64..5.0) {
            let sets = scan_exponents(x, alpha, &[1.001, 1.01, 1.05]);
            prop_assert!(!sets.is_empty());
            for e in sets {
                let (lo, hi) = rtilde_interval(x, e.q);
                prop_assert!(e.r_tilde > lo && e.r_tilde < hi);
                prop_assert!(e.q * e.r < 4.0 * x / 3.0);
                prop_assert!(e.q * e.r_tilde * (e.alpha - 1.0) > -2.0 * x - e.v);
                prop_assert!((1.0 / e.r + 1.0 / e.r_tilde - 1.0).abs() < 1e-12);
                prop_assert!((1.0 / e.q + 1.0 / e.q_conj - 1.0).abs() < 1e-12);
                prop_assert!(e.v <= 0.0);
            }
        }
    }
}
