//! Fitted double-Q iteration of the uncertainty-augmented safety value over
//! imagined ensemble rollouts.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::conformal::CalibrationResult;
use crate::datagen::Dataset;
use crate::dynamics::{in_bbox, ActionId, DubinsState, WorldConfig, NUM_ACTIONS};
use crate::ensemble::{EnsembleParams, MarginSource};
use crate::error::{Error, Result};
use crate::gridsolver::{OodPenalty, TabularChain};
use crate::nn::{Activation, Adam, Mlp, MlpSpec};
use crate::uncertainty::UncertaintyMethod;

const QFUNC_MAGIC: &str = "RGQFUNC";

/// `min(lz, kappa (eps - u))`, or `lz` when exempt or `kappa == 0`.
pub fn augmented_margin(lz: f64, u: f64, eps: f64, kappa: f64, exempt: bool) -> f64 {
    if exempt || kappa == 0.0 {
        lz
    } else {
        lz.min(kappa * (eps - u))
    }
}

/// `(1 - gamma) l + gamma min(l, max_q_next)`.
pub fn bellman_target(ltilde: f64, gamma: f64, max_q_next: f64) -> f64 {
    (1.0 - gamma) * ltilde + gamma * ltilde.min(max_q_next)
}

/// A state together with the uncertainty of the transition that reached it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub z: DubinsState,
    pub u: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImaginedTransition {
    pub from: AugmentedState,
    pub a: ActionId,
    /// Augmented margin at `to`.
    pub ltilde: f64,
    pub to: AugmentedState,
}

/// What the Q network reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QInput {
    /// `[px, py, cos theta, sin theta]`.
    Dubins,
    /// One-hot over `n` discrete states.
    Tabular { n: usize },
}

impl QInput {
    pub fn dim(self) -> usize {
        match self {
            QInput::Dubins => 4,
            QInput::Tabular { n } => n,
        }
    }
}

fn dubins_features(z: &DubinsState) -> [f64; 4] {
    [z.px, z.py, z.theta.cos(), z.theta.sin()]
}

/// A simulated environment for value learning.
pub trait ImaginedEnv {
    type State: Clone;

    fn num_actions(&self) -> usize;
    fn input(&self) -> QInput;
    fn features(&self, s: &Self::State, out: &mut Vec<f64>);
    fn reset(&self, rng: &mut ChaCha8Rng) -> Self::State;
    /// Successor and its augmented margin.
    fn step(&self, s: &Self::State, a: usize, rng: &mut ChaCha8Rng) -> Result<(Self::State, f64)>;
}

/// Ensemble imagination starting from dataset states.
pub struct DubinsImagination<'a> {
    pub ens: &'a EnsembleParams,
    pub marg: &'a MarginSource,
    pub method: UncertaintyMethod,
    pub ood: OodPenalty,
    pub world: &'a WorldConfig,
    pub starts: Vec<DubinsState>,
}

impl DubinsImagination<'_> {
    /// Sample `z'` from a uniformly chosen member; `u'` from all members.
    pub fn transition(&self, z: &DubinsState, a: ActionId, rng: &mut ChaCha8Rng) -> Result<(AugmentedState, f64)> {
        let preds = self.ens.predict_all(z, a);
        let u = self.method.apply(&preds)?;
        let m = &preds[rng.gen_range(0..preds.len())];
        let mut x = [0.0; 3];
        for (d, xd) in x.iter_mut().enumerate() {
            let xi: f64 = rng.sample(StandardNormal);
            *xd = m.mean[d] + m.variance[d].sqrt() * xi;
        }
        let next = DubinsState::new(x[0], x[1], x[2]);
        let exempt = self.ood.bbox_exempt && !in_bbox(&next, self.world);
        let lt = augmented_margin(self.marg.margin(&next), u, self.ood.epsilon, self.ood.kappa, exempt);
        Ok((AugmentedState { z: next, u }, lt))
    }
}

impl ImaginedEnv for DubinsImagination<'_> {
    type State = AugmentedState;

    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn input(&self) -> QInput {
        QInput::Dubins
    }

    fn features(&self, s: &AugmentedState, out: &mut Vec<f64>) {
        out.extend(dubins_features(&s.z));
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> AugmentedState {
        AugmentedState {
            z: *self.starts.choose(rng).expect("non-empty starts"),
            u: 0.0,
        }
    }

    fn step(&self, s: &AugmentedState, a: usize, rng: &mut ChaCha8Rng) -> Result<(AugmentedState, f64)> {
        self.transition(&s.z, ActionId::new(a).expect("action index"), rng)
    }
}

/// Roll the ensemble forward `steps` times from `start` under `policy`.
pub fn imagine_rollout(
    env: &DubinsImagination<'_>,
    start: DubinsState,
    policy: &mut dyn FnMut(&AugmentedState, &mut ChaCha8Rng) -> ActionId,
    steps: usize,
    seed: u64,
) -> Result<Vec<ImaginedTransition>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = AugmentedState { z: start, u: 0.0 };
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a = policy(&s, &mut rng);
        let (to, ltilde) = env.transition(&s.z, a, &mut rng)?;
        out.push(ImaginedTransition { from: s, a, ltilde, to });
        s = to;
    }
    Ok(out)
}

/// Deterministic tabular chain with the augmented margin of each transition.
pub struct ChainEnv<'a> {
    pub chain: &'a TabularChain,
    pub ood: Option<OodPenalty>,
}

impl ImaginedEnv for ChainEnv<'_> {
    type State = usize;

    fn num_actions(&self) -> usize {
        self.chain.next[0].len()
    }

    fn input(&self) -> QInput {
        QInput::Tabular {
            n: self.chain.margin.len(),
        }
    }

    fn features(&self, s: &usize, out: &mut Vec<f64>) {
        let n = self.chain.margin.len();
        out.extend((0..n).map(|i| if i == *s { 1.0 } else { 0.0 }));
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(0..self.chain.margin.len())
    }

    fn step(&self, s: &usize, a: usize, _rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
        Ok((
            self.chain.next[*s][a],
            self.chain.transition_margin(*s, a, self.ood.as_ref()),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub gamma: f64,
    /// Imagined rollouts collected.
    pub iterations: usize,
    pub buffer_size: usize,
    pub batch_size: usize,
    pub max_imagine_steps: usize,
    /// Gradient steps between target-network copies.
    pub target_sync_period: usize,
    pub grad_steps_per_iter: usize,
    /// Rollouts collected before the first gradient step.
    pub warmup_rollouts: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub kappa: f64,
    /// Replaces the calibrated threshold when set.
    pub epsilon_override: Option<f64>,
    pub delta: f64,
    pub bbox_exempt: bool,
    pub explore_start: f64,
    pub explore_end: f64,
    pub seed: u64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9999,
            iterations: 4000,
            buffer_size: 20_000,
            batch_size: 256,
            max_imagine_steps: 20,
            target_sync_period: 500,
            grad_steps_per_iter: 5,
            warmup_rollouts: 50,
            learning_rate: 1e-3,
            hidden: vec![100, 100],
            kappa: 1.0,
            epsilon_override: None,
            delta: 0.1,
            bbox_exempt: false,
            explore_start: 1.0,
            explore_end: 0.1,
            seed: 0,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("qtrain gamma must be in [0, 1)");
        }
        if !(self.kappa > 0.0) {
            return bad("qtrain kappa must be > 0");
        }
        if self.max_imagine_steps == 0 || self.batch_size == 0 || self.buffer_size == 0 {
            return bad("imagine steps, batch size and buffer size must be >= 1");
        }
        if self.target_sync_period == 0 || self.iterations == 0 {
            return bad("target sync period and iterations must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("qtrain learning rate must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    pub net: Mlp,
    pub input: QInput,
}

#[derive(Serialize, Deserialize)]
struct QHeader {
    spec: MlpSpec,
    input: QInput,
    config_hash: Option<String>,
}

fn argmax_first(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

impl QFunction {
    pub fn new(input: QInput, hidden: &[usize], num_actions: usize, seed: u64) -> Self {
        let mut sizes = vec![input.dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(num_actions);
        let spec = MlpSpec {
            sizes,
            layer_norm: false,
            activation: Activation::Silu,
        };
        Self {
            net: Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)),
            input,
        }
    }

    pub fn q_values_features(&self, x: &[f64]) -> Vec<f64> {
        self.net.forward(x, 1)
    }

    pub fn q_values(&self, z: &DubinsState) -> Vec<f64> {
        self.q_values_features(&dubins_features(z))
    }

    pub fn monitor_value(&self, z: &DubinsState) -> f64 {
        self.q_values(z).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Arg-max action, ties to the lowest index.
    pub fn fallback_action(&self, z: &DubinsState) -> ActionId {
        ActionId::new(argmax_first(&self.q_values(z))).expect("three outputs")
    }

    /// `max_a Q` for a batch of states.
    pub fn monitor_values(&self, states: &[DubinsState]) -> Vec<f64> {
        let x: Vec<f64> = states.iter().flat_map(dubins_features).collect();
        let k = self.net.output_dim();
        self.net
            .forward(&x, states.len())
            .chunks(k)
            .map(|q| q.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    pub fn to_bytes(&self, config_hash: Option<&str>) -> Result<Vec<u8>> {
        let h = QHeader {
            spec: self.net.spec().clone(),
            input: self.input,
            config_hash: config_hash.map(str::to_string),
        };
        artifact::encode_framed(QFUNC_MAGIC, &h, &artifact::f64s_to_le(&self.net.params))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<String>)> {
        let (h, payload): (QHeader, _) = artifact::decode_framed(QFUNC_MAGIC, bytes)?;
        if h.spec.input_dim() != h.input.dim() {
            return Err(Error::Format(
                "Q network input width disagrees with its input kind".into(),
            ));
        }
        let net = Mlp::from_params(h.spec, artifact::f64s_from_le(payload)?)
            .ok_or_else(|| Error::Format("Q network parameter count mismatch".into()))?;
        Ok((Self { net, input: h.input }, h.config_hash))
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        artifact::write_atomic(path, &self.to_bytes(config_hash)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    /// Mean squared TD error of the last gradient step.
    pub final_loss: f64,
    pub grad_steps: usize,
    pub transitions: usize,
}

struct Replay {
    dim: usize,
    cap: usize,
    s: Vec<f64>,
    a: Vec<usize>,
    l: Vec<f64>,
    s2: Vec<f64>,
    len: usize,
    head: usize,
}

impl Replay {
    fn new(dim: usize, cap: usize) -> Self {
        Self {
            dim,
            cap,
            s: vec![0.0; dim * cap],
            a: vec![0; cap],
            l: vec![0.0; cap],
            s2: vec![0.0; dim * cap],
            len: 0,
            head: 0,
        }
    }

    fn push(&mut self, s: &[f64], a: usize, l: f64, s2: &[f64]) {
        let i = self.head;
        let d = self.dim;
        self.s[i * d..(i + 1) * d].copy_from_slice(s);
        self.s2[i * d..(i + 1) * d].copy_from_slice(s2);
        self.a[i] = a;
        self.l[i] = l;
        self.head = (self.head + 1) % self.cap;
        self.len = (self.len + 1).min(self.cap);
    }
}

/// Fitted double-Q iteration on an arbitrary imagined environment.
pub fn fit_q<E: ImaginedEnv>(env: &E, cfg: &TrainRunConfig) -> Result<(QFunction, TrainStats)> {
    cfg.validate()?;
    let na = env.num_actions();
    let mut online = QFunction::new(env.input(), &cfg.hidden, na, cfg.seed);
    let mut target = online.clone();
    let dim = env.input().dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0071_f17e);
    let mut adam = Adam::new(online.net.num_params(), cfg.learning_rate);
    let mut replay = Replay::new(dim, cfg.buffer_size);
    let mut feat = Vec::with_capacity(dim);
    let mut feat2 = Vec::with_capacity(dim);
    let mut stats = TrainStats {
        final_loss: f64::NAN,
        grad_steps: 0,
        transitions: 0,
    };
    let b = cfg.batch_size;
    let mut xs = vec![0.0; b * dim];
    let mut xs2 = vec![0.0; b * dim];
    let mut grad = vec![0.0; online.net.num_params()];

    for it in 0..cfg.iterations {
        let frac = it as f64 / (cfg.iterations.max(2) - 1) as f64;
        let explore = cfg.explore_start + (cfg.explore_end - cfg.explore_start) * frac;
        let mut s = env.reset(&mut rng);
        for _ in 0..cfg.max_imagine_steps {
            feat.clear();
            env.features(&s, &mut feat);
            let a = if rng.gen::<f64>() < explore {
                rng.gen_range(0..na)
            } else {
                argmax_first(&online.q_values_features(&feat))
            };
            let (s2, lt) = env.step(&s, a, &mut rng)?;
            feat2.clear();
            env.features(&s2, &mut feat2);
            replay.push(&feat, a, lt, &feat2);
            stats.transitions += 1;
            s = s2;
        }
        if it + 1 < cfg.warmup_rollouts.min(cfg.iterations) || replay.len == 0 {
            continue;
        }
        for _ in 0..cfg.grad_steps_per_iter {
            let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..replay.len)).collect();
            for (r, &i) in idx.iter().enumerate() {
                xs[r * dim..(r + 1) * dim].copy_from_slice(&replay.s[i * dim..(i + 1) * dim]);
                xs2[r * dim..(r + 1) * dim].copy_from_slice(&replay.s2[i * dim..(i + 1) * dim]);
            }
            let q_next_online = online.net.forward(&xs2, b);
            let q_next_target = target.net.forward(&xs2, b);
            let (q, cache) = online.net.forward_cached(&xs, b);
            let mut d_out = vec![0.0; b * na];
            let mut loss = 0.0;
            for (r, &i) in idx.iter().enumerate() {
                let row = r * na;
                let a_star = argmax_first(&q_next_online[row..row + na]);
                let y = bellman_target(replay.l[i], cfg.gamma, q_next_target[row + a_star]);
                let err = q[row + replay.a[i]] - y;
                loss += err * err;
                d_out[row + replay.a[i]] = 2.0 * err / b as f64;
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            online.net.backward(&cache, &d_out, &mut grad);
            adam.step(&mut online.net.params, &grad);
            stats.final_loss = loss / b as f64;
            stats.grad_steps += 1;
            if stats.grad_steps.is_multiple_of(cfg.target_sync_period) {
                target = online.clone();
            }
        }
        if it % 500 == 0 {
            log::debug!("q iteration {it}: td loss {:.3e}", stats.final_loss);
        }
    }
    Ok((online, stats))
}

/// Learn the augmented safety Q function from imagination seeded at the
/// training set's states.
pub fn train_q(
    train: &Dataset,
    ens: &EnsembleParams,
    marg: &MarginSource,
    calib: &CalibrationResult,
    world: &WorldConfig,
    cfg: &TrainRunConfig,
) -> Result<(QFunction, TrainStats)> {
    let epsilon = cfg.epsilon_override.unwrap_or(calib.epsilon_hat);
    if epsilon.is_nan() || (cfg.epsilon_override.is_none() && !epsilon.is_finite()) {
        return Err(Error::UncalibratedThreshold);
    }
    let starts: Vec<DubinsState> = train
        .trajectories
        .iter()
        .flat_map(|t| t.states.iter().cloned())
        .collect();
    if starts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let env = DubinsImagination {
        ens,
        marg,
        method: UncertaintyMethod::Jrd,
        ood: OodPenalty {
            epsilon,
            kappa: cfg.kappa,
            bbox_exempt: cfg.bbox_exempt,
        },
        world,
        starts,
    };
    fit_q(&env, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_random, Provenance};
    use crate::ensemble::Normalizer;
    use crate::gridsolver::SolveConfig;
    use crate::uncertainty::measure;

    #[test]
    fn augmented_margin_examples() {
        assert!((augmented_margin(1.0, 0.7, 0.5, 1.0, false) + 0.2).abs() < 1e-12);
        assert_eq!(augmented_margin(0.3, 0.0, 0.5, 1.0, false), 0.3);
        assert_eq!(augmented_margin(0.9, 0.0, 0.5, 1.0, false), 0.5);
        assert_eq!(augmented_margin(0.4, 1e9, 0.5, 1.0, true), 0.4);
        assert_eq!(augmented_margin(0.4, f64::INFINITY, f64::INFINITY, 1.0, false), 0.4);
    }

    #[test]
    fn bellman_target_examples() {
        assert_eq!(bellman_target(1.0, 0.5, 2.0), 1.0);
        assert!((bellman_target(-1.0, 0.9999, 5.0) + 1.0).abs() < 1e-12);
        assert_eq!(bellman_target(0.7, 0.0, -3.0), 0.7);
    }

    #[test]
    fn bellman_target_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let g = rng.gen::<f64>();
            let (l, q, d) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen::<f64>());
            assert!(bellman_target(l, g, q + d) >= bellman_target(l, g, q));
            assert!(bellman_target(l + d, g, q) >= bellman_target(l, g, q));
        }
    }

    #[test]
    fn uncertain_transition_has_negative_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let eps = rng.gen::<f64>();
            let u = eps + rng.gen_range(1e-6..1.0);
            let lt = augmented_margin(rng.gen_range(0.0..2.0), u, eps, rng.gen_range(0.1..10.0), false);
            assert!(lt < 0.0);
            let g = rng.gen_range(0.0..1.0);
            assert!(bellman_target(lt, g, rng.gen_range(-5.0..5.0)) < 0.0);
        }
    }

    #[test]
    fn monitor_and_fallback() {
        // hand-built linear net: Q = bias only
        let spec = MlpSpec {
            sizes: vec![4, 3],
            layer_norm: false,
            activation: Activation::Silu,
        };
        let n = Mlp::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0)).num_params();
        let mut params = vec![0.0; n];
        let z = DubinsState::new(0.2, 0.1, 0.5);
        params[n - 3..].copy_from_slice(&[0.1, 0.3, 0.2]);
        let q = QFunction {
            net: Mlp::from_params(spec.clone(), params.clone()).unwrap(),
            input: QInput::Dubins,
        };
        assert!((q.monitor_value(&z) - 0.3).abs() < 1e-12);
        assert_eq!(q.fallback_action(&z), ActionId::STRAIGHT);
        params[n - 3..].copy_from_slice(&[0.2, 0.2, 0.2]);
        let q = QFunction {
            net: Mlp::from_params(spec, params).unwrap(),
            input: QInput::Dubins,
        };
        assert_eq!(q.fallback_action(&z), ActionId::RIGHT);
        let qn = QFunction::new(QInput::Dubins, &[8], 3, 4);
        for v in qn.q_values(&z) {
            assert!(qn.monitor_value(&z) >= v);
        }
        assert_eq!(qn.monitor_values(&[z])[0], qn.monitor_value(&z));
    }

    fn toy_env_parts() -> (WorldConfig, EnsembleParams, MarginSource, Vec<DubinsState>) {
        let w = WorldConfig::default();
        let ens = EnsembleParams::init(4, Normalizer::identity(), 1e-6, 3);
        let starts = gen_random(5, 10, &w, 1).into_iter().flat_map(|t| t.states).collect();
        let marg = MarginSource::Analytic(w.failure.clone());
        (w, ens, marg, starts)
    }

    #[test]
    fn imagine_rollout_is_deterministic_and_consistent() {
        let (w, ens, marg, starts) = toy_env_parts();
        let env = DubinsImagination {
            ens: &ens,
            marg: &marg,
            method: UncertaintyMethod::Jrd,
            ood: OodPenalty {
                epsilon: 0.01,
                kappa: 1.0,
                bbox_exempt: false,
            },
            world: &w,
            starts: starts.clone(),
        };
        let mut pol = |_: &AugmentedState, _: &mut ChaCha8Rng| ActionId::LEFT;
        let a = imagine_rollout(&env, starts[0], &mut pol, 1, 7).unwrap();
        let b = imagine_rollout(&env, starts[0], &mut pol, 1, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        let long = imagine_rollout(&env, starts[0], &mut pol, 6, 7).unwrap();
        assert_eq!(long.len(), 6);
        for (i, tr) in long.iter().enumerate() {
            let u = measure(&ens, &tr.from.z, tr.a, UncertaintyMethod::Jrd).unwrap();
            assert_eq!(tr.to.u, u);
            assert!(tr.ltilde <= marg.margin(&tr.to.z));
            if i > 0 {
                assert_eq!(tr.from, long[i - 1].to);
            }
        }
        assert_eq!(long[0].from.u, 0.0);

        let open = DubinsImagination {
            ood: OodPenalty {
                epsilon: f64::INFINITY,
                kappa: 1.0,
                bbox_exempt: false,
            },
            ..env
        };
        for tr in imagine_rollout(&open, starts[3], &mut pol, 10, 2).unwrap() {
            assert_eq!(tr.ltilde, marg.margin(&tr.to.z));
        }
    }

    fn toy_chain() -> (TabularChain, OodPenalty) {
        (
            TabularChain {
                next: vec![vec![0, 1], vec![1, 0]],
                uncertainty: vec![vec![0.3, 0.05], vec![0.0, 0.6]],
                margin: vec![0.8, -0.4],
            },
            OodPenalty {
                epsilon: 0.25,
                kappa: 1.5,
                bbox_exempt: false,
            },
        )
    }

    fn chain_cfg(seed: u64) -> TrainRunConfig {
        TrainRunConfig {
            gamma: 0.9,
            iterations: 1500,
            buffer_size: 2000,
            batch_size: 64,
            max_imagine_steps: 5,
            target_sync_period: 100,
            grad_steps_per_iter: 2,
            warmup_rollouts: 10,
            learning_rate: 1e-3,
            hidden: vec![32, 32],
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn chain_q_matches_exact_dp() {
        let (chain, ood) = toy_chain();
        let cfg = chain_cfg(11);
        let exact = chain.solve_reduced(
            Some(&ood),
            &SolveConfig {
                gamma: cfg.gamma,
                tol: 1e-14,
                max_sweeps: 100_000,
            },
        );
        let env = ChainEnv {
            chain: &chain,
            ood: Some(ood),
        };
        let (q, _) = fit_q(&env, &cfg).unwrap();
        for s in 0..2 {
            let mut x = Vec::new();
            env.features(&s, &mut x);
            let qs = q.q_values_features(&x);
            for a in 0..2 {
                let lt = chain.transition_margin(s, a, Some(&ood));
                let want = bellman_target(lt, cfg.gamma, exact[chain.next[s][a]]);
                assert!((qs[a] - want).abs() < 0.05, "Q({s},{a}) = {} vs {want}", qs[a]);
            }
            let v = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((v - exact[s]).abs() < 0.05, "V({s}) = {v} vs {}", exact[s]);
        }
    }

    #[test]
    fn fit_q_is_reproducible() {
        let (chain, ood) = toy_chain();
        let env = ChainEnv {
            chain: &chain,
            ood: Some(ood),
        };
        let mut cfg = chain_cfg(5);
        cfg.iterations = 200;
        let (qa, sa) = fit_q(&env, &cfg).unwrap();
        let (qb, sb) = fit_q(&env, &cfg).unwrap();
        assert!((sa.final_loss - sb.final_loss).abs() <= 1e-9);
        assert_eq!(qa, qb);
    }

    #[test]
    fn train_q_guards() {
        let (w, ens, marg, _) = toy_env_parts();
        let d = Dataset {
            trajectories: gen_random(3, 5, &w, 2),
            seed: 2,
            provenance: Provenance::default(),
        };
        let inf = crate::conformal::calibrate(vec![1.0; 3], Default::default()).unwrap();
        let cfg = TrainRunConfig {
            iterations: 3,
            warmup_rollouts: 1,
            ..Default::default()
        };
        assert!(matches!(
            train_q(&d, &ens, &marg, &inf, &w, &cfg),
            Err(Error::UncalibratedThreshold)
        ));
        let over = TrainRunConfig {
            epsilon_override: Some(0.5),
            ..cfg.clone()
        };
        let (q, stats) = train_q(&d, &ens, &marg, &inf, &w, &over).unwrap();
        assert!(stats.grad_steps > 0);
        let bytes = q.to_bytes(Some("x")).unwrap();
        let (back, h) = QFunction::from_bytes(&bytes).unwrap();
        assert_eq!(back, q);
        assert_eq!(h.as_deref(), Some("x"));
        let empty = Dataset {
            trajectories: vec![],
            ..d
        };
        assert!(matches!(
            train_q(&empty, &ens, &marg, &inf, &w, &over),
            Err(Error::EmptyDataset)
        ));
        let bad = TrainRunConfig { gamma: 1.0, ..over };
        assert!(bad.validate().is_err());
    }
}
