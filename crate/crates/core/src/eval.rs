//! Metrics against the ground-truth value function, safety rates,
//! challenging-start selection and report files.
//!
//! The positive class is SAFE: a true positive is a node that is safe under
//! the ground truth and predicted safe; a false positive is an unsafe node
//! predicted safe.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::dynamics::{ActionId, DubinsState, FailureSpec, WorldConfig, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::filter::{rollout, FilterContext, Outcome, TaskPolicy};
use crate::grid::{Grid3, ValueGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ConfusionStats {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tpr: f64,
    pub tnr: f64,
    pub precision: f64,
    pub f1: f64,
    pub bacc: f64,
}

// empty denominators give 0
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionStats {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let tpr = ratio(tp, tp + fn_);
        let tnr = ratio(tn, tn + fp);
        let precision = ratio(tp, tp + fp);
        let f1 = if precision + tpr > 0.0 {
            2.0 * precision * tpr / (precision + tpr)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            tn,
            fn_,
            tpr,
            tnr,
            precision,
            f1,
            bacc: 0.5 * (tpr + tnr),
        }
    }

    /// Unsafe nodes predicted safe, as a fraction of unsafe nodes.
    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    /// True when every rate matches its recomputation from the counts.
    pub fn is_consistent(&self) -> bool {
        *self == Self::from_counts(self.tp, self.fp, self.tn, self.fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub stats: ConfusionStats,
    /// Nodes skipped because `|V_gt| < slack`.
    pub excluded: usize,
    pub slack: f64,
    pub threshold: f64,
}

/// Compare predicted values (one per node of `grid`) with the ground truth.
pub fn classify_values(pred: &[f64], gt: &ValueGrid, threshold: f64, slack: f64) -> Result<Classification> {
    if pred.len() != gt.values.len() {
        return Err(Error::GridMismatch(format!(
            "{} predictions for {} ground-truth nodes",
            pred.len(),
            gt.values.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_, mut excluded) = (0, 0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(&gt.values) {
        if g.abs() < slack {
            excluded += 1;
            continue;
        }
        match (g >= 0.0, p > threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(Classification {
        stats: ConfusionStats::from_counts(tp, fp, tn, fn_),
        excluded,
        slack,
        threshold,
    })
}

/// Monitor classification over the nodes of `grid`, which must be the
/// ground truth's grid. `slack` defaults to one grid cell.
pub fn classify_vs_ground_truth(
    values_at: &(dyn Fn(&[DubinsState]) -> Vec<f64> + Sync),
    gt: &ValueGrid,
    grid: &Grid3,
    threshold: f64,
    slack: Option<f64>,
) -> Result<Classification> {
    if *grid != gt.grid {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", grid, gt.grid)));
    }
    let nodes: Vec<DubinsState> = grid.nodes().collect();
    classify_values(&values_at(&nodes), gt, threshold, slack.unwrap_or_else(|| grid.cell()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub n: usize,
    pub safe: usize,
    pub failures: usize,
    pub halted: usize,
    pub interventions: usize,
    /// Fraction of rollouts that did not fail; halts count as non-failures.
    pub rate: f64,
}

/// Roll out from every start; `policy_for(i)` builds the task policy of
/// rollout `i`, seeded with `seed + i`.
pub fn safety_rate(
    starts: &[DubinsState],
    policy_for: &(dyn Fn(usize) -> Box<TaskPolicy<'static>> + Sync),
    filter: Option<&FilterContext<'_>>,
    horizon: usize,
    world: &WorldConfig,
    seed: u64,
) -> Result<SafetyReport> {
    if starts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outcomes: Vec<(Outcome, usize)> = starts
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut p = policy_for(i);
            let r = rollout(*s, &mut *p, filter, horizon, world, seed.wrapping_add(i as u64))?;
            Ok((r.outcome, r.interventions))
        })
        .collect::<Result<_>>()?;
    let count = |o: Outcome| outcomes.iter().filter(|(x, _)| *x == o).count();
    let failures = count(Outcome::Failure);
    Ok(SafetyReport {
        n: starts.len(),
        safe: count(Outcome::Safe),
        failures,
        halted: count(Outcome::Halted),
        interventions: outcomes.iter().map(|(_, k)| k).sum(),
        rate: 1.0 - failures as f64 / starts.len() as f64,
    })
}

/// Task policy picking a uniformly random action every tick.
pub fn uniform_task_policy(_rollout: usize) -> Box<TaskPolicy<'static>> {
    Box::new(|_: usize, _: &DubinsState, rng: &mut ChaCha8Rng| ActionId::ALL[rng.gen_range(0..NUM_ACTIONS)])
}

const RAY_LENGTH: f64 = 1.5;
const RAY_STEP: f64 = 0.005;

/// Whether the heading ray from `s` enters the failure set within 1.5 m.
pub fn heading_hits_failure(s: &DubinsState, f: &FailureSpec) -> bool {
    let (c, sn) = (s.theta.cos(), s.theta.sin());
    let n = (RAY_LENGTH / RAY_STEP).round() as usize;
    (0..=n).any(|i| {
        let r = i as f64 * RAY_STEP;
        f.margin_xy(s.px + r * c, s.py + r * sn) < 0.0
    })
}

/// Uniform sample of grid nodes that are safe under the ground truth but
/// pointed at the failure set.
pub fn challenging_starts(gt: &ValueGrid, f: &FailureSpec, count: usize, seed: u64) -> Result<Vec<DubinsState>> {
    let candidates: Vec<DubinsState> = (0..gt.grid.len())
        .into_par_iter()
        .filter(|&i| gt.values[i] > 0.0)
        .map(|i| gt.grid.node(i))
        .filter(|s| heading_hits_failure(s, f))
        .collect();
    if count > candidates.len() {
        return Err(Error::SamplingExhausted(format!(
            "{count} challenging starts requested, {} available",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, candidates.len(), count).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| candidates[i]).collect())
}

/// Flat metric record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Report {
    pub config_hash: Option<String>,
    pub metrics: BTreeMap<String, serde_json::Value>,
}

impl Report {
    pub fn insert<T: Serialize>(&mut self, key: &str, value: T) -> Result<()> {
        self.metrics.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn add_classification(&mut self, prefix: &str, c: &Classification) -> Result<()> {
        let s = &c.stats;
        for (k, v) in [
            ("tp", s.tp),
            ("fp", s.fp),
            ("tn", s.tn),
            ("fn", s.fn_),
            ("excluded", c.excluded),
        ] {
            self.insert(&format!("{prefix}.{k}"), v)?;
        }
        for (k, v) in [
            ("tpr", s.tpr),
            ("tnr", s.tnr),
            ("precision", s.precision),
            ("f1", s.f1),
            ("bacc", s.bacc),
            ("fpr", s.fpr()),
            ("threshold", c.threshold),
            ("slack", c.slack),
        ] {
            self.insert(&format!("{prefix}.{k}"), v)?;
        }
        Ok(())
    }

    pub fn add_safety(&mut self, prefix: &str, r: &SafetyReport) -> Result<()> {
        for (k, v) in [
            ("n", r.n),
            ("safe", r.safe),
            ("failures", r.failures),
            ("halted", r.halted),
            ("interventions", r.interventions),
        ] {
            self.insert(&format!("{prefix}.{k}"), v)?;
        }
        self.insert(&format!("{prefix}.rate"), r.rate)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_atomic(path, &self.to_bytes()?)
    }
}
