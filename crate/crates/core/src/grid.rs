//! Uniform tensor grids on `[0, x_max] × [0, y_max]`.

use serde::{Deserialize, Serialize};

use crate::error::{LpsvError, Result};
use crate::numerics::trap_weight;

/// Node-centred uniform grid with `n_x + 1` by `n_y + 1` nodes. Values on
/// the grid are stored x-major: node `(i, j)` lives at `i * (n_y + 1) + j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorGrid {
    pub n_x: usize,
    pub n_y: usize,
    pub x_max: f64,
    pub y_max: f64,
}

impl TensorGrid {
    pub fn new(n_x: usize, n_y: usize, x_max: f64, y_max: f64) -> Result<Self> {
        if n_x < 2 || n_y < 2 {
            return Err(LpsvError::InvalidArgument(format!(
                "grid needs at least 2 cells per axis, got {n_x} x {n_y}"
            )));
        }
        if !(x_max > 0.0 && y_max > 0.0) {
            return Err(LpsvError::InvalidArgument(format!(
                "grid extents must be positive, got {x_max} x {y_max}"
            )));
        }
        Ok(Self {
            n_x,
            n_y,
            x_max,
            y_max,
        })
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.x_max / self.n_x as f64
    }

    #[inline]
    pub fn dy(&self) -> f64 {
        self.y_max / self.n_y as f64
    }

    #[inline]
    pub fn nx_nodes(&self) -> usize {
        self.n_x + 1
    }

    #[inline]
    pub fn ny_nodes(&self) -> usize {
        self.n_y + 1
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx_nodes() * self.ny_nodes()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.ny_nodes() + j
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx()
    }

    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        j as f64 * self.dy()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx_nodes()).map(|i| self.x(i)).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        (0..self.ny_nodes()).map(|j| self.y(j)).collect()
    }

    /// Trapezoid weight of node `(i, j)`.
    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        trap_weight(i, self.nx_nodes(), self.dx()) * trap_weight(j, self.ny_nodes(), self.dy())
    }

    /// Trapezoid integral of node values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        let mut total = 0.0;
        for i in 0..self.nx_nodes() {
            let wx = trap_weight(i, self.nx_nodes(), self.dx());
            let row = &values[i * self.ny_nodes()..(i + 1) * self.ny_nodes()];
            let s: f64 = row
                .iter()
                .enumerate()
                .map(|(j, v)| v * trap_weight(j, self.ny_nodes(), self.dy()))
                .sum();
            total += wx * s;
        }
        total
    }

    /// Cumulative integral `F(x_i, y_j) = ∫₀^{x_i}∫₀^{y_j} u` of node values,
    /// by the trapezoid rule on each cell.
    pub fn cumulative(&self, values: &[f64]) -> Vec<f64> {
        let (nx, ny) = (self.nx_nodes(), self.ny_nodes());
        let (hx, hy) = (self.dx(), self.dy());
        // First integrate along y within each x row, then along x.
        let mut along_y = vec![0.0; self.len()];
        for i in 0..nx {
            for j in 1..ny {
                let k = self.idx(i, j);
                along_y[k] = along_y[k - 1] + 0.5 * hy * (values[k - 1] + values[k]);
            }
        }
        let mut out = vec![0.0; self.len()];
        for i in 1..nx {
            for j in 0..ny {
                let k = self.idx(i, j);
                let km = self.idx(i - 1, j);
                out[k] = out[km] + 0.5 * hx * (along_y[km] + along_y[k]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bilinear_integrals_are_exact() {
        let g = TensorGrid::new(10, 8, 2.0, 1.0).unwrap();
        let v: Vec<f64> = (0..g.nx_nodes())
            .flat_map(|i| (0..g.ny_nodes()).map(move |j| (i, j)))
            .map(|(i, j)| g.x(i) * g.y(j))
            .collect();
        assert_abs_diff_eq!(g.integrate(&v), 1.0, epsilon = 1e-12);
        let c = g.cumulative(&v);
        assert_abs_diff_eq!(*c.last().unwrap(), 1.0, epsilon = 1e-12);
        // F(1, 0.5) = (1/2)(1/8).
        assert_abs_diff_eq!(c[g.idx(5, 4)], 0.0625, epsilon = 1e-12);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TensorGrid::new(1, 10, 1.0, 1.0).is_err());
        assert!(TensorGrid::new(10, 10, 0.0, 1.0).is_err());
    }
}
