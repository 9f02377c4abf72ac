//! Experiment configuration (TOML). The schema is documented in the README.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use jhol_core::almost_complex::{AlmostComplexStructure, StructureFile};
use jhol_core::beltrami::{Seed, SolveConfig};
use jhol_core::hyperbolic::{Constants, Cover, Domain};
use jhol_core::linking::LinkingConfig;
use jhol_core::schwarz::BrodyConfig;
use jhol_core::{Error, Result};
use num_complex::Complex64;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StructureSource {
    #[default]
    Standard,
    /// A structure file, relative to the config file.
    File { path: PathBuf },
    Inline { definition: StructureFile },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub structure: StructureSource,
    pub resolution: Option<usize>,
    /// Sets the structure's scale `ε` (the structure is `J(ε z)`).
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub solve: SolveConfig,
    pub solve_disk: Option<SolveDiskSection>,
    pub metric: Option<MetricSection>,
    pub completeness: Option<CompletenessSection>,
    pub schwarz_scan: Option<SchwarzSection>,
    pub gauge_scan: Option<GaugeSection>,
    pub linking: Option<LinkingSection>,
    pub operators_selftest: Option<SelftestSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveDiskSection {
    pub first: Seed,
    pub second: Option<Seed>,
    /// Brody-normalize the solution to this weighted-gradient value.
    pub brody: Option<f64>,
    #[serde(default)]
    pub brody_config: BrodyConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricPoint {
    pub point: [Complex64; 2],
    pub direction: [Complex64; 2],
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSection {
    pub domain: Domain,
    pub points: Vec<MetricPoint>,
    #[serde(default)]
    pub constants: Option<Constants>,
    /// Replace the constants by ones calibrated on `points`.
    #[serde(default = "default_true")]
    pub calibrate: bool,
    pub bisection_steps: Option<usize>,
    pub validity_radius: Option<f64>,
    pub slack: Option<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PathMetricKind {
    Lower,
    Estimate,
}

fn default_start() -> f64 {
    0.3
}

fn default_per_decade() -> usize {
    16
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletenessSection {
    #[serde(default = "default_start")]
    pub start: f64,
    pub deltas: Vec<f64>,
    #[serde(default = "default_per_decade")]
    pub per_decade: usize,
    #[serde(default)]
    pub second: Complex64,
    pub metric: PathMetricKind,
    /// `K₁` for the lower-bound metric; calibrated on `calibration_moduli` when absent.
    pub k1: Option<f64>,
    #[serde(default = "default_calibration_moduli")]
    pub calibration_moduli: Vec<f64>,
}

fn default_calibration_moduli() -> Vec<f64> {
    vec![0.01, 0.05, 0.1, 0.2]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchwarzSection {
    pub samples: usize,
    #[serde(default)]
    pub restrict_eta: bool,
    pub base_radius: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaugeSection {
    pub cover: Cover,
    pub samples: usize,
    pub base_radius: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiskSpec {
    pub first: Seed,
    pub second: Seed,
    /// Solve with the configured structure instead of using the seeds as is.
    #[serde(default)]
    pub solve: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkingPair {
    pub name: String,
    pub first: DiskSpec,
    pub second: DiskSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkingSection {
    pub radii: Vec<f64>,
    pub pairs: Vec<LinkingPair>,
    #[serde(default)]
    pub options: LinkingConfig,
    #[serde(default)]
    pub export_slices: bool,
}

fn default_selftest_resolutions() -> Vec<usize> {
    vec![64, 128]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelftestSection {
    #[serde(default = "default_selftest_resolutions")]
    pub resolutions: Vec<usize>,
    #[serde(default = "default_inverse_tolerance")]
    pub inverse_tolerance: f64,
    #[serde(default = "default_composition_tolerance")]
    pub composition_tolerance: f64,
    #[serde(default = "default_shrink")]
    pub min_shrink: f64,
}

fn default_inverse_tolerance() -> f64 {
    1e-2
}

fn default_composition_tolerance() -> f64 {
    2e-2
}

fn default_shrink() -> f64 {
    1.5
}

impl Default for SelftestSection {
    fn default() -> Self {
        SelftestSection {
            resolutions: default_selftest_resolutions(),
            inverse_tolerance: default_inverse_tolerance(),
            composition_tolerance: default_composition_tolerance(),
            min_shrink: default_shrink(),
        }
    }
}

pub const DEFAULT_RESOLUTION: usize = 16;

impl Config {
    pub fn load(path: &Path) -> Result<(Config, PathBuf)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Config = toml::from_str(&text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, dir))
    }

    pub fn resolution(&self) -> usize {
        self.resolution.unwrap_or(DEFAULT_RESOLUTION)
    }

    /// Seed required by the sampling commands.
    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::InvalidInput("sampling commands need `seed` in the config or --seed".into()))
    }

    pub fn structure(&self, dir: &Path) -> Result<Arc<AlmostComplexStructure>> {
        let mut j = match &self.structure {
            StructureSource::Standard => AlmostComplexStructure::standard(),
            StructureSource::File { path } => {
                let full = dir.join(path);
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", full.display())))?;
                AlmostComplexStructure::from_toml(&text)?
            }
            StructureSource::Inline { definition } => AlmostComplexStructure::from_file(definition)?,
        };
        if let Some(eps) = self.epsilon {
            if eps.is_nan() || eps <= 0.0 || !eps.is_finite() {
                return Err(Error::InvalidInput(format!("epsilon must be positive, got {eps}")));
            }
            j = j.rescale(eps / j.epsilon())?;
        }
        Ok(Arc::new(j))
    }
}
