//! Gaussian kernel density estimation, pointwise and cell-integrated.

use crate::error::{LpsvError, Result};
use crate::numerics::{norm_cdf, quantile_sorted, variance};

/// Kernel support cut-off in bandwidths.
const CUTOFF: f64 = 8.0;

/// Silverman's rule, `0.9 · min(sd, IQR/1.34) · n^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return f64::NAN;
    }
    let sd = variance(samples).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (n as f64).powf(-0.2)
}

/// Pointwise Gaussian KDE of `samples` at each grid point.
pub fn gaussian_kde(samples: &[f64], grid: &[f64], bandwidth: f64) -> Result<Vec<f64>> {
    if !(bandwidth > 0.0) {
        return Err(LpsvError::InvalidArgument(format!(
            "bandwidth {bandwidth} must be positive"
        )));
    }
    if samples.is_empty() {
        return Err(LpsvError::Empty("samples"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let norm = 1.0 / (sorted.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let reach = CUTOFF * bandwidth;
    Ok(grid
        .iter()
        .map(|&y| {
            let lo = sorted.partition_point(|&s| s < y - reach);
            let hi = sorted.partition_point(|&s| s <= y + reach);
            let sum: f64 = sorted[lo..hi]
                .iter()
                .map(|&s| {
                    let z = (y - s) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum();
            sum * norm
        })
        .collect())
}

/// Mass a Gaussian bump centred at `c` with width `h` puts in the dual cell
/// of each node of the uniform grid `j·dx`, `j = 0..n_nodes`, divided by
/// the cell width. The end cells are half cells. The bump is reflected at
/// `0`, so the estimate keeps all of its mass on the half line.
///
/// Returns the first node index touched and the per-node densities.
pub fn reflected_cell_weights(c: f64, h: f64, dx: f64, n_nodes: usize) -> (usize, Vec<f64>) {
    let reach = CUTOFF * h;
    let last = n_nodes - 1;
    let lo = (((c - reach) / dx).floor().max(0.0) as usize).min(last);
    let hi = (((c + reach) / dx).ceil().max(0.0) as usize).min(last);
    // Reflected copy at -c only reaches the grid when c is within the cutoff.
    let lo = if c < reach { 0 } else { lo };
    let cdf = |a: f64| norm_cdf((a - c) / h) - norm_cdf((-a - c) / h);
    let mut out = Vec::with_capacity(hi - lo + 1);
    for j in lo..=hi {
        let a = if j == 0 { 0.0 } else { (j as f64 - 0.5) * dx };
        let b = if j == last {
            j as f64 * dx
        } else {
            (j as f64 + 0.5) * dx
        };
        let w = if j == 0 || j == last { 0.5 * dx } else { dx };
        // cdf(a) is the reflected-kernel mass of [0, a].
        out.push((cdf(b) - cdf(a)) / w);
    }
    (lo, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{linspace, trapezoid};
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_sample_is_a_gaussian() {
        let grid = linspace(-1.0, 1.0, 200);
        let d = gaussian_kde(&[0.0], &grid, 0.1).unwrap();
        assert_abs_diff_eq!(
            d[100],
            1.0 / (0.1 * (2.0 * std::f64::consts::PI).sqrt()),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(trapezoid(&d, 0.01), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn bandwidth_must_be_positive() {
        assert!(gaussian_kde(&[0.0], &[0.0], 0.0).is_err());
        assert!(gaussian_kde(&[], &[0.0], 1.0).is_err());
    }

    #[test]
    fn reflected_weights_hold_unit_mass() {
        let dx = 0.01;
        let n = 301;
        for c in [0.0, 0.003, 0.05, 1.0, 2.97] {
            let (lo, w) = reflected_cell_weights(c, 0.02, dx, n);
            let mass: f64 = w
                .iter()
                .enumerate()
                .map(|(i, v)| v * crate::numerics::trap_weight(lo + i, n, dx))
                .sum();
            let expected = norm_cdf((3.0 - c) / 0.02) - norm_cdf((-3.0 - c) / 0.02);
            assert_abs_diff_eq!(mass, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn silverman_scales_with_spread() {
        let s: Vec<f64> = (0..1000).map(|i| (i as f64 / 999.0) - 0.5).collect();
        let s2: Vec<f64> = s.iter().map(|v| 3.0 * v).collect();
        assert_abs_diff_eq!(
            silverman_bandwidth(&s2) / silverman_bandwidth(&s),
            3.0,
            epsilon = 1e-9
        );
    }
}
