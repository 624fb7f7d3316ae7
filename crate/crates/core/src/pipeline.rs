//! Pipeline stages driven by an [`ExperimentConfig`], shared by the CLI
//! and the end-to-end tests.

use crate::config::{ExperimentConfig, MarginKind};
use crate::conformal::{calibrate, score_trajectories, CalibrationResult};
use crate::datagen::{gen_expert, gen_random, split, Dataset, Provenance};
use crate::ensemble::{train, train_margin_classifier, EnsembleParams, MarginModel, MarginSource};
use crate::error::{Error, Result};
use crate::filter::SafetySolution;
use crate::grid::ValueGrid;
use crate::gridsolver::{solve_ground_truth, solve_uncertainty_aware, OodPenalty, SolveConfig};
use crate::safelearn::{train_q, QFunction, TrainStats};
use crate::uncertainty::EnsembleModel;

/// Undiscounted ground truth; `solver.gamma` only applies to the learned side.
pub fn ground_truth(cfg: &ExperimentConfig) -> Result<ValueGrid> {
    let sc = SolveConfig {
        gamma: 1.0,
        ..cfg.solver
    };
    let vg = solve_ground_truth(&cfg.grid, &cfg.world, &sc)?;
    vg.require_converged()?;
    Ok(vg)
}

/// Expert and random trajectories, split into (train, calib).
pub fn generate_data(cfg: &ExperimentConfig, gt: &ValueGrid) -> Result<(Dataset, Dataset)> {
    let d = &cfg.datagen;
    let mut trajectories = gen_expert(gt, d.n_expert, d.horizon, d.boundary, &cfg.world, d.seed)?;
    trajectories.extend(gen_random(d.n_random, d.horizon, &cfg.world, d.seed));
    let all = Dataset {
        trajectories,
        seed: d.seed,
        provenance: Provenance {
            n_expert: d.n_expert,
            n_random: d.n_random,
            horizon: d.horizon,
        },
    };
    split(&all, d.n_calib, d.seed)
}

pub fn train_ensemble(cfg: &ExperimentConfig, train_set: &Dataset) -> Result<EnsembleParams> {
    train(&train_set.transitions(), &cfg.ensemble)
}

/// The learned classifier when configured, else `None`.
pub fn train_margin(cfg: &ExperimentConfig, train_set: &Dataset) -> Result<Option<MarginModel>> {
    match cfg.margin.source {
        MarginKind::Analytic => Ok(None),
        MarginKind::Learned => Ok(Some(train_margin_classifier(
            &train_set.labeled_states(),
            &cfg.margin.train,
        )?)),
    }
}

pub fn margin_source(cfg: &ExperimentConfig, learned: Option<MarginModel>) -> Result<MarginSource> {
    match (cfg.margin.source, learned) {
        (MarginKind::Analytic, _) => Ok(MarginSource::Analytic(cfg.world.failure.clone())),
        (MarginKind::Learned, Some(m)) => Ok(MarginSource::Learned(m)),
        (MarginKind::Learned, None) => Err(Error::InvalidConfig(
            "config asks for a learned margin but no classifier was given".into(),
        )),
    }
}

pub fn calibrate_threshold(cfg: &ExperimentConfig, ens: &EnsembleParams, calib: &Dataset) -> Result<CalibrationResult> {
    let model = EnsembleModel {
        ens,
        method: cfg.ood.method,
    };
    let scores = score_trajectories(&model, calib, cfg.calibration.alpha_trans)?;
    calibrate(scores, cfg.calibration)
}

pub fn ood_penalty(cfg: &ExperimentConfig, epsilon: f64) -> OodPenalty {
    OodPenalty {
        epsilon,
        kappa: cfg.ood.kappa,
        bbox_exempt: cfg.ood.bbox_exempt,
    }
}

pub fn solve_filter(
    cfg: &ExperimentConfig,
    ens: &EnsembleParams,
    marg: &MarginSource,
    epsilon: f64,
) -> Result<ValueGrid> {
    let model = EnsembleModel {
        ens,
        method: cfg.ood.method,
    };
    let vg = solve_uncertainty_aware(
        &cfg.grid,
        &model,
        marg,
        &ood_penalty(cfg, epsilon),
        &cfg.world,
        &cfg.solver,
    )?;
    if !vg.meta.converged {
        log::warn!(
            "uncertainty-aware solve stopped at residual {:e} after {} sweeps",
            vg.meta.residual,
            vg.meta.iterations
        );
    }
    Ok(vg)
}

pub fn grid_solution(cfg: &ExperimentConfig, vg: ValueGrid, epsilon: f64) -> SafetySolution {
    SafetySolution::Grid {
        vg,
        ood: Some(ood_penalty(cfg, epsilon)),
    }
}

pub fn fit_q(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    ens: &EnsembleParams,
    marg: &MarginSource,
    calib: &CalibrationResult,
) -> Result<(QFunction, TrainStats)> {
    train_q(train_set, ens, marg, calib, &cfg.world, &cfg.qtrain)
}
