//! Scalar epistemic-uncertainty measures over ensemble predictions.
//!
//! The primary measure is the Jensen-Renyi divergence of order 2 between
//! the members' diagonal Gaussians, in closed form:
//!
//! ```text
//! JRD = -log[(1/K^2) sum_ij D_ij] + (1/K) sum_i log D_ii
//! D_ij = |Phi|^{-1/2} exp(-0.5 d^T Phi^{-1} d),  Phi = S_i + S_j,  d = m_i - m_j
//! ```
//!
//! The common `(2 pi)^{-d/2}` factor cancels and is omitted.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step, wrap_angle, ActionId, DubinsState, WorldConfig};
use crate::ensemble::{EnsembleParams, GaussianPrediction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMethod {
    #[default]
    Jrd,
    TotalUncertainty,
    MaxAleatoric,
}

impl UncertaintyMethod {
    pub fn apply(self, preds: &[GaussianPrediction]) -> Result<f64> {
        match self {
            UncertaintyMethod::Jrd => jrd(preds),
            UncertaintyMethod::TotalUncertainty => total_uncertainty(preds),
            UncertaintyMethod::MaxAleatoric => max_aleatoric(preds),
        }
    }
}

fn check(preds: &[GaussianPrediction]) -> Result<usize> {
    let first = preds.first().ok_or(Error::TooFewMembers { needed: 1, got: 0 })?;
    let d = first.dim();
    for p in preds {
        if p.mean.len() != d || p.variance.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: p.mean.len().max(p.variance.len()),
            });
        }
        if let Some(&v) = p.variance.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::NonPositiveVariance(v));
        }
    }
    Ok(d)
}

fn log_d(a: &GaussianPrediction, b: &GaussianPrediction) -> f64 {
    let mut acc = 0.0;
    for d in 0..a.dim() {
        let phi = a.variance[d] + b.variance[d];
        let delta = a.mean[d] - b.mean[d];
        acc -= 0.5 * (phi.ln() + delta * delta / phi);
    }
    acc
}

/// Closed-form order-2 Jensen-Renyi divergence without any clamping.
///
/// This can be negative when member variances differ strongly, because the
/// quadratic Renyi entropy is not concave.
pub fn jrd_raw(preds: &[GaussianPrediction]) -> Result<f64> {
    check(preds)?;
    let k = preds.len();
    let mut logs = Vec::with_capacity(k * k);
    let mut self_sum = 0.0;
    for (i, a) in preds.iter().enumerate() {
        for (j, b) in preds.iter().enumerate() {
            let l = log_d(a, b);
            if i == j {
                self_sum += l;
            }
            logs.push(l);
        }
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    let kf = k as f64;
    Ok(-(lse - 2.0 * kf.ln()) + self_sum / kf)
}

/// [`jrd_raw`] clamped at zero, so the result is a valid uncertainty `u >= 0`.
pub fn jrd(preds: &[GaussianPrediction]) -> Result<f64> {
    Ok(jrd_raw(preds)?.max(0.0))
}

/// Population variance of member means, summed over dimensions.
pub fn total_uncertainty(preds: &[GaussianPrediction]) -> Result<f64> {
    if preds.len() < 2 {
        return Err(Error::TooFewMembers {
            needed: 2,
            got: preds.len(),
        });
    }
    let d = check(preds)?;
    let k = preds.len() as f64;
    let mut total = 0.0;
    for dim in 0..d {
        let mean = preds.iter().map(|p| p.mean[dim]).sum::<f64>() / k;
        total += preds.iter().map(|p| (p.mean[dim] - mean).powi(2)).sum::<f64>() / k;
    }
    Ok(total)
}

/// Largest Frobenius norm of a member's diagonal covariance.
pub fn max_aleatoric(preds: &[GaussianPrediction]) -> Result<f64> {
    check(preds)?;
    Ok(preds
        .iter()
        .map(|p| p.variance.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Anything that yields the K member predictions for a transition.
pub trait Predictor {
    fn predict_all(&self, z: &DubinsState, a: ActionId) -> Vec<GaussianPrediction>;
}

impl Predictor for EnsembleParams {
    fn predict_all(&self, z: &DubinsState, a: ActionId) -> Vec<GaussianPrediction> {
        EnsembleParams::predict_all(self, z, a)
    }
}

/// Uncertainty `u = D(z, a)` of one transition.
pub fn measure<P: Predictor + ?Sized>(ens: &P, z: &DubinsState, a: ActionId, method: UncertaintyMethod) -> Result<f64> {
    method.apply(&ens.predict_all(z, a))
}

/// Mean of the member means, as a state.
pub fn mean_of_means(preds: &[GaussianPrediction]) -> DubinsState {
    let k = preds.len() as f64;
    let mut m = [0.0; 3];
    // average headings relative to the first member to stay clear of the wrap
    let anchor = preds[0].mean[2];
    for p in preds {
        m[0] += p.mean[0];
        m[1] += p.mean[1];
        m[2] += wrap_angle(p.mean[2] - anchor);
    }
    DubinsState::new(m[0] / k, m[1] / k, anchor + m[2] / k)
}

/// A transition prediction: deterministic next state plus its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Predicted {
    pub next: DubinsState,
    pub u: f64,
}

/// Batched deterministic transition with uncertainty, as consumed by the
/// grid solver, the filter and the serve loop.
pub trait TransitionModel: Sync {
    fn predict(&self, states: &[DubinsState], a: ActionId) -> Result<Vec<Predicted>>;

    fn predict_one(&self, z: &DubinsState, a: ActionId) -> Result<Predicted> {
        Ok(self.predict(std::slice::from_ref(z), a)?[0])
    }
}

/// The true dynamics, with zero uncertainty.
#[derive(Debug, Clone)]
pub struct KnownDynamics(pub WorldConfig);

impl TransitionModel for KnownDynamics {
    fn predict(&self, states: &[DubinsState], a: ActionId) -> Result<Vec<Predicted>> {
        Ok(states
            .iter()
            .map(|s| Predicted {
                next: step(s, a, &self.0),
                u: 0.0,
            })
            .collect())
    }
}

/// An ensemble's mean-of-means transition with the selected uncertainty.
#[derive(Debug, Clone, Copy)]
pub struct EnsembleModel<'a> {
    pub ens: &'a EnsembleParams,
    pub method: UncertaintyMethod,
}

impl TransitionModel for EnsembleModel<'_> {
    fn predict(&self, states: &[DubinsState], a: ActionId) -> Result<Vec<Predicted>> {
        let chunks: Vec<Result<Vec<Predicted>>> = states
            .par_chunks(2048)
            .map(|c| {
                self.ens
                    .predict_all_batch(c, a)
                    .iter()
                    .map(|preds| {
                        Ok(Predicted {
                            next: mean_of_means(preds),
                            u: self.method.apply(preds)?,
                        })
                    })
                    .collect()
            })
            .collect();
        let mut out = Vec::with_capacity(states.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

/// An owned transition model.
#[derive(Debug, Clone)]
pub enum TransitionSource {
    Known(KnownDynamics),
    Ensemble {
        ens: EnsembleParams,
        method: UncertaintyMethod,
    },
}

impl TransitionModel for TransitionSource {
    fn predict(&self, states: &[DubinsState], a: ActionId) -> Result<Vec<Predicted>> {
        match self {
            TransitionSource::Known(k) => k.predict(states, a),
            TransitionSource::Ensemble { ens, method } => EnsembleModel { ens, method: *method }.predict(states, a),
        }
    }
}

/// Wraps a predictor and counts member-set evaluations.
#[derive(Debug)]
pub struct CountingPredictor<P> {
    pub inner: P,
    pub calls: AtomicUsize,
}

impl<P> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<P: Predictor> Predictor for CountingPredictor<P> {
    fn predict_all(&self, z: &DubinsState, a: ActionId) -> Vec<GaussianPrediction> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_all(z, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{Normalizer, DEFAULT_VAR_FLOOR};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(mean: &[f64], var: &[f64]) -> GaussianPrediction {
        GaussianPrediction::new(mean.to_vec(), var.to_vec())
    }

    #[test]
    fn jrd_examples() {
        let a = g(&[0.3, -1.0], &[0.5, 2.0]);
        assert!(jrd(&[a.clone(), a.clone()]).unwrap().abs() < 1e-12);
        assert_eq!(jrd(&[a]).unwrap(), 0.0);
        // D11 = D22 = 1/sqrt2, D12 = e^-1/sqrt2
        let hand = (2.0 / (1.0 + (-1.0f64).exp())).ln();
        let v = jrd(&[g(&[0.0], &[1.0]), g(&[2.0], &[1.0])]).unwrap();
        assert!((v - hand).abs() < 1e-12);
        assert!((v - 0.380).abs() < 1e-3);
    }

    #[test]
    fn jrd_rejects_bad_input() {
        assert!(matches!(jrd(&[g(&[0.0], &[0.0])]), Err(Error::NonPositiveVariance(_))));
        assert!(matches!(
            jrd(&[g(&[0.0], &[1.0]), g(&[0.0, 1.0], &[1.0, 1.0])]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn jrd_nonnegative_for_shared_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let k = rng.gen_range(1..=5);
            let d = rng.gen_range(1..=3);
            let var: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..2.0)).collect();
            let preds: Vec<_> = (0..k)
                .map(|_| g(&(0..d).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>(), &var))
                .collect();
            assert!(jrd_raw(&preds).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn jrd_raw_can_be_negative_and_jrd_clamps() {
        let preds = [g(&[0.0], &[1e-4]), g(&[0.0], &[1.0])];
        assert!(jrd_raw(&preds).unwrap() < -0.5);
        assert_eq!(jrd(&preds).unwrap(), 0.0);
    }

    #[test]
    fn jrd_zero_only_for_identical_members() {
        let a = g(&[0.1, 0.2], &[0.3, 0.4]);
        let mut b = a.clone();
        assert!(jrd(&[a.clone(), b.clone()]).unwrap() < 1e-12);
        b.mean[1] += 1e-3;
        assert!(jrd(&[a, b]).unwrap() > 0.0);
    }

    #[test]
    fn total_uncertainty_examples() {
        assert_eq!(total_uncertainty(&[g(&[1.0], &[1.0]), g(&[1.0], &[5.0])]).unwrap(), 0.0);
        assert_eq!(total_uncertainty(&[g(&[0.0], &[1.0]), g(&[2.0], &[1.0])]).unwrap(), 1.0);
        assert_eq!(total_uncertainty(&[g(&[0.0], &[1.0]), g(&[2.0], &[9.0])]).unwrap(), 1.0);
        assert!(matches!(
            total_uncertainty(&[g(&[0.0], &[1.0])]),
            Err(Error::TooFewMembers { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn max_aleatoric_examples() {
        let a = g(&[0.0, 0.0], &[1.0, 4.0]);
        assert!((max_aleatoric(&[a.clone()]).unwrap() - 17f64.sqrt()).abs() < 1e-12);
        assert_eq!(max_aleatoric(&[a.clone(), a.clone()]).unwrap(), 17f64.sqrt());
        let small = g(&[1.0, 1.0], &[0.5, 0.5]);
        assert_eq!(max_aleatoric(&[a, small]).unwrap(), 17f64.sqrt());
    }

    proptest! {
        #[test]
        fn measures_are_permutation_invariant(
            means in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 2..6),
            vars in prop::collection::vec(prop::collection::vec(0.1f64..2.0, 2), 6),
            shift in 0usize..5,
        ) {
            let preds: Vec<_> = means.iter().zip(&vars).map(|(m, v)| g(m, v)).collect();
            let mut rotated = preds.clone();
            let n = rotated.len();
            rotated.rotate_left(shift % n);
            rotated.reverse();
            for m in [UncertaintyMethod::Jrd, UncertaintyMethod::TotalUncertainty, UncertaintyMethod::MaxAleatoric] {
                let a = m.apply(&preds).unwrap();
                let b = m.apply(&rotated).unwrap();
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn total_uncertainty_scales_quadratically(
            means in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..6),
            c in -3.0f64..3.0,
        ) {
            let preds: Vec<_> = means.iter().map(|m| g(m, &[1.0, 1.0, 1.0])).collect();
            let scaled: Vec<_> = means
                .iter()
                .map(|m| g(&m.iter().map(|x| c * x).collect::<Vec<_>>(), &[1.0, 1.0, 1.0]))
                .collect();
            let a = total_uncertainty(&preds).unwrap();
            let b = total_uncertainty(&scaled).unwrap();
            prop_assert!((b - c * c * a).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn measure_uses_one_prediction_pass_per_call() {
        let ens = EnsembleParams::init(4, Normalizer::identity(), DEFAULT_VAR_FLOOR, 3);
        let counting = CountingPredictor::new(ens.clone());
        let z = DubinsState::new(0.2, -0.1, 1.0);
        let mut values = Vec::new();
        for m in [
            UncertaintyMethod::Jrd,
            UncertaintyMethod::TotalUncertainty,
            UncertaintyMethod::MaxAleatoric,
        ] {
            values.push(measure(&counting, &z, ActionId::LEFT, m).unwrap());
            let preds = ens.predict_all(&z, ActionId::LEFT);
            assert_eq!(*values.last().unwrap(), m.apply(&preds).unwrap());
        }
        assert_eq!(counting.calls(), 3);
    }

    #[test]
    fn identical_members_have_zero_jrd() {
        let mut ens = EnsembleParams::init(3, Normalizer::identity(), DEFAULT_VAR_FLOOR, 3);
        let first = ens.members[0].clone();
        for m in &mut ens.members {
            *m = first.clone();
        }
        let u = measure(
            &ens,
            &DubinsState::new(0.0, 0.0, 0.0),
            ActionId::RIGHT,
            UncertaintyMethod::Jrd,
        )
        .unwrap();
        assert!(u.abs() < 1e-12);
    }

    #[test]
    fn member_permutation_leaves_uncertainty_unchanged() {
        let ens = EnsembleParams::init(5, Normalizer::identity(), DEFAULT_VAR_FLOOR, 8);
        let mut perm = ens.clone();
        perm.members.reverse();
        let z = DubinsState::new(0.4, 0.1, -2.0);
        for m in [
            UncertaintyMethod::Jrd,
            UncertaintyMethod::TotalUncertainty,
            UncertaintyMethod::MaxAleatoric,
        ] {
            let a = measure(&ens, &z, ActionId::STRAIGHT, m).unwrap();
            let b = measure(&perm, &z, ActionId::STRAIGHT, m).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        let pa = ens.predict_all(&z, ActionId::STRAIGHT);
        let pb = perm.predict_all(&z, ActionId::STRAIGHT);
        assert_eq!(pa[0], pb[4]);
    }

    #[test]
    fn mean_of_means_handles_heading_wrap() {
        let preds = [g(&[0.0, 0.0, 3.1], &[1.0; 3]), g(&[0.0, 0.0, -3.1 + 0.0], &[1.0; 3])];
        let m = mean_of_means(&preds);
        assert!((m.theta.abs() - std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn ensemble_model_matches_single_predictions() {
        let ens = EnsembleParams::init(3, Normalizer::identity(), DEFAULT_VAR_FLOOR, 5);
        let model = EnsembleModel {
            ens: &ens,
            method: UncertaintyMethod::Jrd,
        };
        let states = vec![DubinsState::new(0.1, 0.2, 0.3), DubinsState::new(-0.5, 0.9, -3.0)];
        let out = model.predict(&states, ActionId::LEFT).unwrap();
        for (s, p) in states.iter().zip(&out) {
            let preds = ens.predict_all(s, ActionId::LEFT);
            assert!((p.u - jrd(&preds).unwrap()).abs() < 1e-12);
            let m = mean_of_means(&preds);
            assert!((p.next.px - m.px).abs() < 1e-12);
        }
    }
}
