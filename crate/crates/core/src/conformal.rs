//! Trajectory-level conformal calibration of the OOD threshold.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::datagen::{Dataset, Trajectory};
use crate::dynamics::{ActionId, NUM_ACTIONS};
use crate::ensemble::EnsembleParams;
use crate::error::{Error, Result};
use crate::uncertainty::{EnsembleModel, TransitionModel, UncertaintyMethod};

/// Parameter convention for the dataset-conditional Beta law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaLaw {
    /// `C = floor((N + 1) alpha_trans)`.
    #[default]
    AlphaTrans,
    /// `C = floor((N + 1) alpha_cal)`.
    AlphaCal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub alpha_cal: f64,
    pub alpha_trans: f64,
    pub beta_law: BetaLaw,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            alpha_cal: 0.05,
            alpha_trans: 0.05,
            beta_law: BetaLaw::AlphaTrans,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_cal > 0.0 && self.alpha_cal < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha_cal must be in (0, 1), got {}",
                self.alpha_cal
            )));
        }
        if !(self.alpha_trans >= 0.0 && self.alpha_trans < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha_trans must be in [0, 1), got {}",
                self.alpha_trans
            )));
        }
        Ok(())
    }
}

// guards ceil() against products like 0.95 * 20 = 19.000000000000004
const RANK_SLACK: f64 = 1e-9;

fn ceil_rank(x: f64) -> usize {
    (x - RANK_SLACK).ceil().max(0.0) as usize
}

fn kth_smallest(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[k - 1]
}

/// The `ceil((1 - alpha_trans) T)`-th smallest uncertainty of a trajectory.
pub fn traj_score(us: &[f64], alpha_trans: f64) -> Result<f64> {
    if us.is_empty() {
        return Err(Error::EmptySequence);
    }
    let r = ceil_rank((1.0 - alpha_trans) * us.len() as f64).clamp(1, us.len());
    Ok(kth_smallest(us, r))
}

/// `ceil((1 - alpha_cal)(N + 1))`.
pub fn calibration_rank(n: usize, alpha_cal: f64) -> usize {
    ceil_rank((1.0 - alpha_cal) * (n as f64 + 1.0)).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// `+inf` when the rank exceeds N; stored as `null` on disk.
    #[serde(with = "inf_as_null")]
    pub epsilon_hat: f64,
    pub traj_scores: Vec<f64>,
    pub n: usize,
    pub config: CalibrationConfig,
    /// Not enough calibration trajectories for the requested level.
    pub degenerate: bool,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

pub fn calibrate(traj_scores: Vec<f64>, config: CalibrationConfig) -> Result<CalibrationResult> {
    config.validate()?;
    if traj_scores.is_empty() {
        return Err(Error::InsufficientData {
            requested: 1,
            available: 0,
        });
    }
    let n = traj_scores.len();
    let r = calibration_rank(n, config.alpha_cal);
    let (epsilon_hat, degenerate) = if r <= n {
        (kth_smallest(&traj_scores, r), false)
    } else {
        (f64::INFINITY, true)
    };
    Ok(CalibrationResult {
        epsilon_hat,
        traj_scores,
        n,
        config,
        degenerate,
    })
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    format: String,
    v: u32,
    config_hash: Option<String>,
    #[serde(flatten)]
    result: CalibrationResult,
}

const CALIBRATION_FORMAT: &str = "reachguard-calibration";

impl CalibrationResult {
    pub fn rank(&self) -> usize {
        calibration_rank(self.n, self.config.alpha_cal)
    }

    pub fn to_bytes(&self, config_hash: Option<&str>) -> Result<Vec<u8>> {
        let f = CalibrationFile {
            format: CALIBRATION_FORMAT.into(),
            v: artifact::FORMAT_VERSION,
            config_hash: config_hash.map(str::to_string),
            result: self.clone(),
        };
        let mut out = serde_json::to_vec_pretty(&f)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<String>)> {
        let f: CalibrationFile = serde_json::from_slice(bytes)?;
        if f.format != CALIBRATION_FORMAT || f.v != artifact::FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported calibration {} v{}", f.format, f.v)));
        }
        if f.result.traj_scores.len() != f.result.n {
            return Err(Error::Format("score count disagrees with n".into()));
        }
        Ok((f.result, f.config_hash))
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        artifact::write_atomic(path, &self.to_bytes(config_hash)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Uncertainty of every transition of `traj`, in time order.
pub fn uncertainty_sequence(model: &dyn TransitionModel, traj: &Trajectory) -> Result<Vec<f64>> {
    let mut us = vec![0.0; traj.len()];
    for a in ActionId::ALL {
        let idx: Vec<usize> = (0..traj.len()).filter(|&t| traj.actions[t] == a).collect();
        if idx.is_empty() {
            continue;
        }
        let states: Vec<_> = idx.iter().map(|&t| traj.states[t]).collect();
        for (&t, p) in idx.iter().zip(model.predict(&states, a)?) {
            us[t] = p.u;
        }
    }
    debug_assert_eq!(ActionId::ALL.len(), NUM_ACTIONS);
    Ok(us)
}

/// One nonconformity score per trajectory, in dataset order.
pub fn score_trajectories(model: &dyn TransitionModel, calib: &Dataset, alpha_trans: f64) -> Result<Vec<f64>> {
    if calib.is_empty() {
        return Err(Error::EmptyDataset);
    }
    calib
        .trajectories
        .par_iter()
        .map(|t| traj_score(&uncertainty_sequence(model, t)?, alpha_trans))
        .collect()
}

pub fn score_dataset(
    ens: &EnsembleParams,
    method: UncertaintyMethod,
    calib: &Dataset,
    alpha_trans: f64,
) -> Result<Vec<f64>> {
    score_trajectories(&EnsembleModel { ens, method }, calib, alpha_trans)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Fraction of test scores at or below the threshold.
    pub empirical: f64,
    pub beta_params: (f64, f64),
}

pub fn beta_params(n: usize, config: &CalibrationConfig) -> (f64, f64) {
    let alpha = match config.beta_law {
        BetaLaw::AlphaTrans => config.alpha_trans,
        BetaLaw::AlphaCal => config.alpha_cal,
    };
    let c = ((n as f64 + 1.0) * alpha + RANK_SLACK).floor();
    (n as f64 + 1.0 - c, c)
}

pub fn coverage_check(result: &CalibrationResult, test_scores: &[f64]) -> Result<Coverage> {
    if test_scores.is_empty() {
        return Err(Error::EmptySequence);
    }
    let covered = test_scores.iter().filter(|&&s| s <= result.epsilon_hat).count();
    Ok(Coverage {
        empirical: covered as f64 / test_scores.len() as f64,
        beta_params: beta_params(result.n, &result.config),
    })
}
