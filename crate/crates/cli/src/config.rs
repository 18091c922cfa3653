//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lpsv_core::pool::{Absorption, InitialLaw};
use lpsv_core::transport::TransportScheme;
use lpsv_core::{ModelParams, TensorGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub n_x: usize,
    pub n_y: usize,
    pub x_max: f64,
    /// Defaults to `θ + 10ξ√(θ/2k)`.
    #[serde(default)]
    pub y_max: Option<f64>,
    pub dt: f64,
    pub horizon: f64,
    /// Number of stored field snapshots after the initial one.
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
}

fn default_snapshots() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloBlock {
    pub n_particles: usize,
    pub n_scenarios: usize,
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExponentBlock {
    pub alpha: Vec<f64>,
    pub q: Vec<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpdeBlock {
    #[serde(default)]
    pub scheme: TransportScheme,
    /// Mixed-derivative coefficient; `null` ties it to `ξρ₃ρ₁ρ₂`.
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default = "one")]
    pub max_substeps: usize,
}

fn one() -> usize {
    1
}

impl Default for SpdeBlock {
    fn default() -> Self {
        Self {
            scheme: TransportScheme::default(),
            rho: None,
            max_substeps: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBlock {
    /// Mollifier width in `√σ` units.
    pub epsilon: f64,
    /// Cells of the `√σ` grid; defaults to `n_y`.
    #[serde(default)]
    pub n_s: Option<usize>,
}

impl Default for VerifyBlock {
    fn default() -> Self {
        Self {
            epsilon: 0.02,
            n_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityBlock {
    pub times: Vec<f64>,
    /// Variance paths per scenario; defaults to `n_particles`.
    #[serde(default)]
    pub n_paths: Option<usize>,
}

impl Default for DensityBlock {
    fn default() -> Self {
        Self {
            times: vec![0.05, 0.1, 0.2, 0.4],
            n_paths: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelParams,
    pub grid: GridBlock,
    pub monte_carlo: MonteCarloBlock,
    pub exponents: ExponentBlock,
    #[serde(default = "default_initial")]
    pub initial: InitialLaw,
    #[serde(default)]
    pub absorption: Absorption,
    #[serde(default)]
    pub spde: SpdeBlock,
    #[serde(default)]
    pub verify: VerifyBlock,
    #[serde(default)]
    pub density: DensityBlock,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

fn default_initial() -> InitialLaw {
    InitialLaw::default_for(&ModelParams::benchmark())
}

fn default_out() -> PathBuf {
    PathBuf::from("lpsv-out")
}

impl RunConfig {
    /// The desk-scale `x = 4` benchmark.
    pub fn benchmark() -> Self {
        let model = ModelParams::benchmark();
        Self {
            model,
            grid: GridBlock {
                n_x: 120,
                n_y: 80,
                x_max: 3.0,
                y_max: None,
                dt: 1e-4,
                horizon: 0.1,
                snapshots: 10,
            },
            monte_carlo: MonteCarloBlock {
                n_particles: 20_000,
                n_scenarios: 4,
                base_seed: 20_240_601,
            },
            exponents: ExponentBlock {
                alpha: vec![0.0, 1.0, 2.0],
                q: vec![1.01, 1.05],
                delta: 2.0,
            },
            initial: InitialLaw::default_for(&model),
            absorption: Absorption::default(),
            spde: SpdeBlock::default(),
            verify: VerifyBlock::default(),
            density: DensityBlock::default(),
            output_dir: default_out(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn y_max(&self) -> f64 {
        self.grid
            .y_max
            .unwrap_or_else(|| self.model.default_y_max())
    }

    pub fn tensor_grid(&self) -> lpsv_core::Result<TensorGrid> {
        TensorGrid::new(self.grid.n_x, self.grid.n_y, self.grid.x_max, self.y_max())
    }

    pub fn n_steps(&self) -> usize {
        (self.grid.horizon / self.grid.dt).round() as usize
    }

    /// Structural checks that serde cannot express.
    pub fn check(&self) -> Result<(), String> {
        let g = &self.grid;
        let mc = &self.monte_carlo;
        let mut bad = Vec::new();
        if g.n_x < 2 || g.n_y < 2 {
            bad.push("grid.n_x and grid.n_y must be at least 2".to_string());
        }
        if !(g.x_max > 0.0) || !(self.y_max() > 0.0) {
            bad.push("grid extents must be positive".into());
        }
        if !(g.dt > 0.0) || !(g.horizon > 0.0) || self.n_steps() == 0 {
            bad.push("grid.dt and grid.horizon must be positive with horizon >= dt".into());
        }
        if g.snapshots == 0 {
            bad.push("grid.snapshots must be positive".into());
        }
        if mc.n_particles == 0 || mc.n_scenarios == 0 {
            bad.push("monte_carlo counts must be positive".into());
        }
        if mc.base_seed == 0 {
            bad.push("monte_carlo.base_seed must be positive".into());
        }
        if self.exponents.alpha.is_empty() || self.exponents.q.is_empty() {
            bad.push("exponents.alpha and exponents.q must be non-empty".into());
        }
        if !(self.exponents.delta > 1.0) {
            bad.push("exponents.delta must exceed 1".into());
        }
        if self.spde.max_substeps == 0 {
            bad.push("spde.max_substeps must be positive".into());
        }
        if self.density.times.is_empty() || self.density.times.iter().any(|t| !(*t > 0.0)) {
            bad.push("density.times must be non-empty and positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad.join("; "))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let c = RunConfig::benchmark();
        let again = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.to_json(), c.to_json());
    }

    #[test]
    fn unknown_keys_are_named() {
        let mut v: serde_json::Value =
            serde_json::from_str(&RunConfig::benchmark().to_json()).unwrap();
        v["grid"]["n_xx"] = 3.into();
        let err = RunConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.contains("n_xx"), "{err}");
        let mut v: serde_json::Value =
            serde_json::from_str(&RunConfig::benchmark().to_json()).unwrap();
        v["colour"] = "red".into();
        assert!(RunConfig::from_json(&v.to_string())
            .unwrap_err()
            .contains("colour"));
    }

    #[test]
    fn missing_block_is_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&RunConfig::benchmark().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("monte_carlo");
        assert!(RunConfig::from_json(&v.to_string())
            .unwrap_err()
            .contains("monte_carlo"));
    }

    #[test]
    fn structural_checks() {
        let mut c = RunConfig::benchmark();
        assert!(c.check().is_ok());
        c.monte_carlo.n_scenarios = 0;
        c.exponents.delta = 1.0;
        let err = c.check().unwrap_err();
        assert!(err.contains("counts") && err.contains("delta"));
    }
}
