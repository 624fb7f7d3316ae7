//! Experiment configuration (TOML) and its content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conformal::CalibrationConfig;
use crate::dynamics::WorldConfig;
use crate::ensemble::{EnsembleTrainConfig, MarginTrainConfig};
use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::gridsolver::SolveConfig;
use crate::safelearn::TrainRunConfig;
use crate::uncertainty::UncertaintyMethod;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub n_expert: usize,
    pub n_random: usize,
    pub horizon: usize,
    /// Expert switches to the fallback below this ground-truth value.
    pub boundary: f64,
    pub n_calib: usize,
    pub seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            n_expert: 1000,
            n_random: 50,
            horizon: 100,
            boundary: 0.1,
            n_calib: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarginKind {
    #[default]
    Analytic,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct MarginConfig {
    pub source: MarginKind,
    pub train: MarginTrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OodConfig {
    pub kappa: f64,
    pub bbox_exempt: bool,
    pub method: UncertaintyMethod,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            bbox_exempt: false,
            method: UncertaintyMethod::Jrd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub delta: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { delta: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_challenging: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_challenging: 181,
            horizon: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub grid: Grid3,
    pub datagen: DatagenConfig,
    pub ensemble: EnsembleTrainConfig,
    pub margin: MarginConfig,
    pub calibration: CalibrationConfig,
    pub solver: SolveConfig,
    pub ood: OodConfig,
    pub qtrain: TrainRunConfig,
    pub filter: FilterConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.grid.validate()?;
        self.ensemble.validate()?;
        self.calibration.validate()?;
        self.solver.validate()?;
        self.qtrain.validate()?;
        let d = &self.datagen;
        if !(d.boundary > 0.0) {
            return Err(Error::InvalidConfig("datagen boundary must be > 0".into()));
        }
        if d.n_calib >= d.n_expert + d.n_random {
            return Err(Error::InsufficientData {
                requested: d.n_calib,
                available: d.n_expert + d.n_random,
            });
        }
        if !(self.ood.kappa >= 0.0) {
            return Err(Error::InvalidConfig("ood kappa must be >= 0".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }
}
