//! Probabilistic ensemble of diagonal-Gaussian next-state predictors and
//! the learned failure classifier.
//!
//! A member maps `[px, py, cos theta, sin theta, one_hot(a)]` (normalized)
//! through `7 -> 7 -> 14 -> 21 -> 7 -> 6` with layer norm and SiLU on the
//! hidden layers. The head holds a scaled mean increment and a raw
//! variance for each state dimension:
//!
//! ```text
//! mean = z + s * h[0..3]         (heading left unwrapped)
//! var  = softplus(h[3..6]) * s^2 + var_floor
//! ```
//!
//! The heading mean is not wrapped so that member disagreement is measured
//! without spurious `2*pi` jumps; it is wrapped when converted to a state.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::dynamics::{wrap_angle, ActionId, DubinsState, FailureSpec, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{sgd_step, sigmoid, softplus, Activation, Adam, Mlp, MlpSpec};

pub const STATE_DIM: usize = 3;
pub const FEATURE_DIM: usize = 4 + NUM_ACTIONS;
pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;
const ENSEMBLE_MAGIC: &str = "RGENSEM";
const MARGIN_MAGIC: &str = "RGMARGIN";

/// Diagonal Gaussian over the next state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianPrediction {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Self {
        Self { mean, variance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// The mean as a state (heading wrapped). Requires dimension 3.
    pub fn mean_state(&self) -> DubinsState {
        DubinsState::from_slice(&self.mean)
    }
}

/// `(mu - x)^T Sigma^{-1} (mu - x) + log det Sigma` for diagonal `Sigma`.
pub fn nll_loss(pred: &GaussianPrediction, target: &[f64]) -> Result<f64> {
    if target.len() != pred.dim() || pred.variance.len() != pred.dim() {
        return Err(Error::DimensionMismatch {
            expected: pred.dim(),
            got: target.len(),
        });
    }
    Ok(pred
        .mean
        .iter()
        .zip(&pred.variance)
        .zip(target)
        .map(|((m, v), t)| (t - m) * (t - m) / v + v.ln())
        .sum())
}

/// Residual `target - mean` with the heading component wrapped.
pub fn state_residual(mean: &[f64], target: &[f64]) -> [f64; STATE_DIM] {
    [
        target[0] - mean[0],
        target[1] - mean[1],
        wrap_angle(target[2] - mean[2]),
    ]
}

/// One observed transition `(z, a, z')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionSample {
    pub z: DubinsState,
    pub a: ActionId,
    pub next: DubinsState,
}

pub fn raw_features(z: &DubinsState, a: ActionId) -> [f64; FEATURE_DIM] {
    let oh = a.one_hot();
    [z.px, z.py, z.theta.cos(), z.theta.sin(), oh[0], oh[1], oh[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleTrainConfig {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Learning rate multiplier reached at the last epoch (geometric schedule).
    pub lr_decay: f64,
    pub var_floor: f64,
    pub seed: u64,
}

impl Default for EnsembleTrainConfig {
    fn default() -> Self {
        Self {
            k: 10,
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            lr_decay: 1.0,
            var_floor: DEFAULT_VAR_FLOOR,
            seed: 0,
        }
    }
}

impl EnsembleTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidConfig("k, epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.var_floor > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::InvalidConfig(
                "learning_rate, lr_decay and var_floor must be > 0".into(),
            ));
        }
        Ok(())
    }
}

pub fn member_spec() -> MlpSpec {
    let d = FEATURE_DIM;
    MlpSpec {
        sizes: vec![d, d, 2 * d, 3 * d, d, 2 * STATE_DIM],
        layer_norm: true,
        activation: Activation::Silu,
    }
}

/// Input normalization and output scaling shared by all members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            input_shift: vec![0.0; FEATURE_DIM],
            input_scale: vec![1.0; FEATURE_DIM],
            output_scale: vec![1.0; STATE_DIM],
        }
    }

    pub fn fit(data: &[TransitionSample]) -> Self {
        let n = data.len().max(1) as f64;
        let mut shift = vec![0.0; FEATURE_DIM];
        let mut sq = vec![0.0; FEATURE_DIM];
        let mut out_sq = [0.0; STATE_DIM];
        for t in data {
            let f = raw_features(&t.z, t.a);
            for j in 0..FEATURE_DIM {
                shift[j] += f[j];
                sq[j] += f[j] * f[j];
            }
            let r = state_residual(&t.z.to_array(), &t.next.to_array());
            for j in 0..STATE_DIM {
                out_sq[j] += r[j] * r[j];
            }
        }
        let usable = |s: f64| if s > 1e-6 { s } else { 1.0 };
        let mut scale = vec![0.0; FEATURE_DIM];
        for j in 0..FEATURE_DIM {
            shift[j] /= n;
            scale[j] = usable((sq[j] / n - shift[j] * shift[j]).max(0.0).sqrt());
        }
        let output_scale = out_sq.iter().map(|s| usable((s / n).sqrt())).collect();
        Self {
            input_shift: shift,
            input_scale: scale,
            output_scale,
        }
    }

    fn features(&self, z: &DubinsState, a: ActionId, out: &mut [f64]) {
        let f = raw_features(z, a);
        for j in 0..FEATURE_DIM {
            out[j] = (f[j] - self.input_shift[j]) / self.input_scale[j];
        }
    }
}

/// Trained (or freshly initialized) ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleParams {
    pub members: Vec<Mlp>,
    pub norm: Normalizer,
    pub var_floor: f64,
    pub seed: u64,
    /// Mean training loss of each member's last epoch.
    pub final_losses: Vec<f64>,
}

fn member_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    rng
}

impl EnsembleParams {
    /// `k` members with distinct random initial parameters.
    pub fn init(k: usize, norm: Normalizer, var_floor: f64, seed: u64) -> Self {
        let members = (0..k)
            .map(|i| Mlp::new(member_spec(), &mut member_rng(seed, i)))
            .collect();
        Self {
            members,
            norm,
            var_floor,
            seed,
            final_losses: vec![f64::NAN; k],
        }
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn in_dim(&self) -> usize {
        FEATURE_DIM
    }

    pub fn out_dim(&self) -> usize {
        STATE_DIM
    }

    fn head_to_prediction(&self, z: &[f64], head: &[f64]) -> GaussianPrediction {
        let s = &self.norm.output_scale;
        let mut mean = vec![0.0; STATE_DIM];
        let mut variance = vec![0.0; STATE_DIM];
        for d in 0..STATE_DIM {
            mean[d] = z[d] + s[d] * head[d];
            variance[d] = softplus(head[STATE_DIM + d]) * s[d] * s[d] + self.var_floor;
        }
        GaussianPrediction { mean, variance }
    }

    fn batch_features(&self, states: &[DubinsState], a: ActionId) -> Vec<f64> {
        let mut x = vec![0.0; states.len() * FEATURE_DIM];
        for (row, s) in x.chunks_exact_mut(FEATURE_DIM).zip(states) {
            self.norm.features(s, a, row);
        }
        x
    }

    pub fn predict_member(&self, k: usize, z: &DubinsState, a: ActionId) -> GaussianPrediction {
        self.predict_member_batch(k, std::slice::from_ref(z), a).remove(0)
    }

    pub fn predict_member_batch(&self, k: usize, states: &[DubinsState], a: ActionId) -> Vec<GaussianPrediction> {
        let x = self.batch_features(states, a);
        let out = self.members[k].forward(&x, states.len());
        states
            .iter()
            .zip(out.chunks_exact(2 * STATE_DIM))
            .map(|(s, h)| self.head_to_prediction(&s.to_array(), h))
            .collect()
    }

    /// All member predictions for one transition, in member order.
    pub fn predict_all(&self, z: &DubinsState, a: ActionId) -> Vec<GaussianPrediction> {
        (0..self.k()).map(|k| self.predict_member(k, z, a)).collect()
    }

    /// `out[i][k]` is member `k`'s prediction for `states[i]`.
    pub fn predict_all_batch(&self, states: &[DubinsState], a: ActionId) -> Vec<Vec<GaussianPrediction>> {
        let per_member: Vec<Vec<GaussianPrediction>> =
            (0..self.k()).map(|k| self.predict_member_batch(k, states, a)).collect();
        let mut out: Vec<Vec<GaussianPrediction>> = (0..states.len()).map(|_| Vec::with_capacity(self.k())).collect();
        for preds in per_member {
            for (slot, p) in out.iter_mut().zip(preds) {
                slot.push(p);
            }
        }
        out
    }

    /// Mean loss of member `k` on `batch` and its gradient.
    pub fn member_loss_gradient(&self, k: usize, batch: &[TransitionSample]) -> Result<(f64, Vec<f64>)> {
        member_loss_gradient(&self.members[k], &self.norm, self.var_floor, batch)
    }

    pub fn member_loss(&self, k: usize, batch: &[TransitionSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut total = 0.0;
        for t in batch {
            let p = self.predict_member(k, &t.z, t.a);
            let r = state_residual(&p.mean, &t.next.to_array());
            total += r.iter().zip(&p.variance).map(|(r, v)| r * r / v + v.ln()).sum::<f64>();
        }
        Ok(total / batch.len() as f64)
    }

    pub fn to_bytes(&self, config_hash: Option<&str>) -> Result<Vec<u8>> {
        let header = EnsembleHeader {
            k: self.k(),
            in_dim: self.in_dim(),
            out_dim: self.out_dim(),
            seed: self.seed,
            var_floor: self.var_floor,
            spec: member_spec(),
            norm: self.norm.clone(),
            final_losses: self.final_losses.clone(),
            params_per_member: self.members.first().map_or(0, |m| m.num_params()),
            config_hash: config_hash.map(str::to_string),
        };
        let flat: Vec<f64> = self.members.iter().flat_map(|m| m.params.iter().cloned()).collect();
        artifact::encode_framed(ENSEMBLE_MAGIC, &header, &artifact::f64s_to_le(&flat))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<String>)> {
        let (h, payload): (EnsembleHeader, _) = artifact::decode_framed(ENSEMBLE_MAGIC, bytes)?;
        let flat = artifact::f64s_from_le(payload)?;
        if flat.len() != h.k * h.params_per_member || h.in_dim != FEATURE_DIM || h.out_dim != STATE_DIM {
            return Err(Error::Format("ensemble payload does not match header".into()));
        }
        let members = flat
            .chunks(h.params_per_member.max(1))
            .take(h.k)
            .map(|c| {
                Mlp::from_params(h.spec.clone(), c.to_vec())
                    .ok_or_else(|| Error::Format("member parameter count mismatch".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Self {
                members,
                norm: h.norm,
                var_floor: h.var_floor,
                seed: h.seed,
                final_losses: h.final_losses,
            },
            h.config_hash,
        ))
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        artifact::write_atomic(path, &self.to_bytes(config_hash)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct EnsembleHeader {
    k: usize,
    in_dim: usize,
    out_dim: usize,
    seed: u64,
    var_floor: f64,
    spec: MlpSpec,
    norm: Normalizer,
    #[serde(with = "nan_as_null")]
    final_losses: Vec<f64>,
    params_per_member: usize,
    config_hash: Option<String>,
}

/// JSON has no NaN; untrained losses are stored as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let o: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        o.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let o: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(o.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

fn member_loss_gradient(
    net: &Mlp,
    norm: &Normalizer,
    var_floor: f64,
    batch: &[TransitionSample],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let b = batch.len();
    let mut x = vec![0.0; b * FEATURE_DIM];
    for (row, t) in x.chunks_exact_mut(FEATURE_DIM).zip(batch) {
        norm.features(&t.z, t.a, row);
    }
    let (out, cache) = net.forward_cached(&x, b);
    let s = &norm.output_scale;
    let mut d_out = vec![0.0; out.len()];
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, t) in batch.iter().enumerate() {
        let h = &out[i * 2 * STATE_DIM..(i + 1) * 2 * STATE_DIM];
        let g = &mut d_out[i * 2 * STATE_DIM..(i + 1) * 2 * STATE_DIM];
        let z = t.z.to_array();
        let target = t.next.to_array();
        let mut mean = [0.0; STATE_DIM];
        for d in 0..STATE_DIM {
            mean[d] = z[d] + s[d] * h[d];
        }
        let r = state_residual(&mean, &target);
        for d in 0..STATE_DIM {
            let raw = h[STATE_DIM + d];
            let var = softplus(raw) * s[d] * s[d] + var_floor;
            loss += r[d] * r[d] / var + var.ln();
            g[d] = -2.0 * r[d] / var * s[d] * inv_b;
            let dvar = -r[d] * r[d] / (var * var) + 1.0 / var;
            g[STATE_DIM + d] = dvar * sigmoid(raw) * s[d] * s[d] * inv_b;
        }
    }
    let mut grad = vec![0.0; net.num_params()];
    net.backward(&cache, &d_out, &mut grad);
    Ok((loss * inv_b, grad))
}

/// Train each member independently on shuffled minibatches of `data`.
pub fn train(data: &[TransitionSample], cfg: &EnsembleTrainConfig) -> Result<EnsembleParams> {
    Ok(train_with_history(data, cfg)?.0)
}

/// [`train`], also returning each member's per-epoch mean loss.
pub fn train_with_history(
    data: &[TransitionSample],
    cfg: &EnsembleTrainConfig,
) -> Result<(EnsembleParams, Vec<Vec<f64>>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let norm = Normalizer::fit(data);
    let init = EnsembleParams::init(cfg.k, norm.clone(), cfg.var_floor, cfg.seed);
    let trained: Vec<(Mlp, Vec<f64>)> = init
        .members
        .into_par_iter()
        .enumerate()
        .map(|(k, mut net)| {
            let mut rng = member_rng(cfg.seed ^ 0x5e_ed0f_da7a, k);
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut adam = Adam::new(net.num_params(), cfg.learning_rate);
            let mut history = Vec::with_capacity(cfg.epochs);
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for epoch in 0..cfg.epochs {
                let frac = epoch as f64 / (cfg.epochs.max(2) - 1) as f64;
                let lr = cfg.learning_rate * cfg.lr_decay.powf(frac);
                adam.lr = lr;
                order.shuffle(&mut rng);
                let mut sum = 0.0;
                let mut count = 0usize;
                for chunk in order.chunks(cfg.batch_size) {
                    batch.clear();
                    batch.extend(chunk.iter().map(|&i| data[i]));
                    let (loss, grad) =
                        member_loss_gradient(&net, &norm, cfg.var_floor, &batch).expect("non-empty batch");
                    match cfg.optimizer {
                        Optimizer::Adam => adam.step(&mut net.params, &grad),
                        Optimizer::Sgd => sgd_step(&mut net.params, &grad, lr),
                    }
                    sum += loss * chunk.len() as f64;
                    count += chunk.len();
                }
                let mean = sum / count as f64;
                log::debug!("member {k} epoch {epoch}: loss {mean:.5}");
                history.push(mean);
            }
            (net, history)
        })
        .collect();
    let (members, history): (Vec<Mlp>, Vec<Vec<f64>>) = trained.into_iter().unzip();
    let final_losses = history.iter().map(|h| *h.last().expect("epochs >= 1")).collect();
    Ok((
        EnsembleParams {
            members,
            norm,
            var_floor: cfg.var_floor,
            seed: cfg.seed,
            final_losses,
        },
        history,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Reweight classes so each contributes half of the loss.
    pub balance_classes: bool,
    pub seed: u64,
}

impl Default for MarginTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 30,
            batch_size: 256,
            learning_rate: 3e-3,
            balance_classes: true,
            seed: 0,
        }
    }
}

/// Binary failure classifier over `[px, py, cos theta, sin theta]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginModel {
    pub net: Mlp,
    /// Trained on a single class; predictions carry no information.
    pub degenerate: bool,
}

fn margin_features(z: &DubinsState) -> [f64; 4] {
    [z.px, z.py, z.theta.cos(), z.theta.sin()]
}

impl MarginModel {
    pub fn p_fail_batch(&self, states: &[DubinsState]) -> Vec<f64> {
        let x: Vec<f64> = states.iter().flat_map(margin_features).collect();
        self.net.forward(&x, states.len()).into_iter().map(sigmoid).collect()
    }

    pub fn p_fail(&self, z: &DubinsState) -> f64 {
        self.p_fail_batch(std::slice::from_ref(z))[0]
    }

    /// `1 - 2 p_fail`: negative where failure is predicted.
    pub fn margin_of(&self, z: &DubinsState) -> f64 {
        1.0 - 2.0 * self.p_fail(z)
    }

    pub fn to_bytes(&self, config_hash: Option<&str>) -> Result<Vec<u8>> {
        let header = serde_json::json!({
            "spec": self.net.spec(),
            "degenerate": self.degenerate,
            "config_hash": config_hash,
        });
        artifact::encode_framed(MARGIN_MAGIC, &header, &artifact::f64s_to_le(&self.net.params))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<String>)> {
        #[derive(Deserialize)]
        struct H {
            spec: MlpSpec,
            degenerate: bool,
            config_hash: Option<String>,
        }
        let (h, payload): (H, _) = artifact::decode_framed(MARGIN_MAGIC, bytes)?;
        let net = Mlp::from_params(h.spec, artifact::f64s_from_le(payload)?)
            .ok_or_else(|| Error::Format("margin model parameter count mismatch".into()))?;
        Ok((
            Self {
                net,
                degenerate: h.degenerate,
            },
            h.config_hash,
        ))
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        artifact::write_atomic(path, &self.to_bytes(config_hash)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Train the failure classifier on `(state, label)` pairs, label `-1` failing.
pub fn train_margin_classifier(samples: &[(DubinsState, i8)], cfg: &MarginTrainConfig) -> Result<MarginModel> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let spec = MlpSpec {
        sizes: vec![4, cfg.hidden, cfg.hidden, 1],
        layer_norm: false,
        activation: Activation::Silu,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::new(spec, &mut rng);
    let n_fail = samples.iter().filter(|(_, l)| *l < 0).count();
    let n_safe = samples.len() - n_fail;
    let degenerate = n_fail == 0 || n_safe == 0;
    let (w_fail, w_safe) = if cfg.balance_classes && !degenerate {
        let n = samples.len() as f64;
        (n / (2.0 * n_fail as f64), n / (2.0 * n_safe as f64))
    } else {
        (1.0, 1.0)
    };
    let mut adam = Adam::new(net.num_params(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x: Vec<f64> = chunk.iter().flat_map(|&i| margin_features(&samples[i].0)).collect();
            let (out, cache) = net.forward_cached(&x, chunk.len());
            let d_out: Vec<f64> = chunk
                .iter()
                .zip(&out)
                .map(|(&i, &logit)| {
                    let fail = samples[i].1 < 0;
                    let (y, w) = if fail { (1.0, w_fail) } else { (0.0, w_safe) };
                    w * (sigmoid(logit) - y) / chunk.len() as f64
                })
                .collect();
            let mut grad = vec![0.0; net.num_params()];
            net.backward(&cache, &d_out, &mut grad);
            adam.step(&mut net.params, &grad);
        }
    }
    Ok(MarginModel { net, degenerate })
}

/// Where the failure margin `l(z)` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum MarginSource {
    Analytic(FailureSpec),
    Learned(MarginModel),
}

impl MarginSource {
    pub fn margin(&self, z: &DubinsState) -> f64 {
        match self {
            MarginSource::Analytic(f) => f.margin(z),
            MarginSource::Learned(m) => m.margin_of(z),
        }
    }

    pub fn margins(&self, states: &[DubinsState]) -> Vec<f64> {
        match self {
            MarginSource::Analytic(f) => states.iter().map(|s| f.margin(s)).collect(),
            MarginSource::Learned(m) => states
                .par_chunks(4096)
                .flat_map_iter(|c| m.p_fail_batch(c).into_iter().map(|p| 1.0 - 2.0 * p))
                .collect(),
        }
    }
}
