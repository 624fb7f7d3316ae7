//! Small dense networks with a flat parameter vector.
//!
//! Every network here is a stack of `Linear -> [LayerNorm] -> activation`
//! blocks followed by a plain linear head. Parameters live in one `Vec<f64>`
//! so optimizers, finite-difference checks and serialization can treat a
//! network as a point in `R^n`.
//!
//! Batches are row-major `batch x features` slices.

use rand::Rng;
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of an [`Mlp`]: `sizes[0]` inputs, `sizes.last()` outputs.
/// Every layer but the last gets the optional layer norm and the activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub layer_norm: bool,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
    /// Offset of layer-norm gain; bias follows at `ln + n_out`.
    ln: Option<usize>,
    act: Activation,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layout: Vec<LayerLayout>,
    pub params: Vec<f64>,
}

/// Intermediate values kept by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Default)]
pub struct ForwardCache {
    batch: usize,
    inputs: Vec<Vec<f64>>,
    xhat: Vec<Vec<f64>>,
    inv_std: Vec<Vec<f64>>,
    pre_act: Vec<Vec<f64>>,
}

fn layout_for(spec: &MlpSpec) -> (Vec<LayerLayout>, usize) {
    assert!(spec.sizes.len() >= 2, "an MLP needs at least one layer");
    let mut off = 0;
    let mut layout = Vec::with_capacity(spec.sizes.len() - 1);
    let last = spec.sizes.len() - 2;
    for (i, pair) in spec.sizes.windows(2).enumerate() {
        let (n_in, n_out) = (pair[0], pair[1]);
        let w = off;
        off += n_in * n_out;
        let b = off;
        off += n_out;
        let hidden = i < last;
        let ln = if hidden && spec.layer_norm {
            let o = off;
            off += 2 * n_out;
            Some(o)
        } else {
            None
        };
        let act = if hidden { spec.activation } else { Activation::Identity };
        layout.push(LayerLayout {
            n_in,
            n_out,
            w,
            b,
            ln,
            act,
        });
    }
    (layout, off)
}

/// `c = alpha * a * b + beta * c` for row-major `a: m x k`, `b: k x n`,
/// with arbitrary strides supplied by the caller.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds asserted above; strides describe dense matrices inside
    // those slices and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and biases,
    /// unit layer-norm gains.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let (layout, n) = layout_for(&spec);
        let mut params = vec![0.0; n];
        for l in &layout {
            let bound = 1.0 / (l.n_in as f64).sqrt();
            for p in &mut params[l.w..l.w + l.n_in * l.n_out] {
                *p = rng.gen_range(-bound..bound);
            }
            for p in &mut params[l.b..l.b + l.n_out] {
                *p = rng.gen_range(-bound..bound);
            }
            if let Some(o) = l.ln {
                params[o..o + l.n_out].fill(1.0);
            }
        }
        Self { spec, layout, params }
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Option<Self> {
        let (layout, n) = layout_for(&spec);
        (params.len() == n).then_some(Self { spec, layout, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        self.run(x, batch, None)
    }

    pub fn forward_cached(&self, x: &[f64], batch: usize) -> (Vec<f64>, ForwardCache) {
        let mut cache = ForwardCache {
            batch,
            ..Default::default()
        };
        let out = self.run(x, batch, Some(&mut cache));
        (out, cache)
    }

    fn run(&self, x: &[f64], batch: usize, mut cache: Option<&mut ForwardCache>) -> Vec<f64> {
        assert_eq!(x.len(), batch * self.input_dim(), "input shape");
        let mut cur = x.to_vec();
        for l in &self.layout {
            let w = &self.params[l.w..l.w + l.n_in * l.n_out];
            let bias = &self.params[l.b..l.b + l.n_out];
            let mut z = Vec::with_capacity(batch * l.n_out);
            for _ in 0..batch {
                z.extend_from_slice(bias);
            }
            // z = x * W^T + b
            gemm(
                batch,
                l.n_in,
                l.n_out,
                &cur,
                l.n_in as isize,
                1,
                w,
                1,
                l.n_in as isize,
                1.0,
                &mut z,
            );
            let mut xhat = Vec::new();
            let mut inv_std = Vec::new();
            if let Some(o) = l.ln {
                let gain = &self.params[o..o + l.n_out];
                let shift = &self.params[o + l.n_out..o + 2 * l.n_out];
                xhat.resize(batch * l.n_out, 0.0);
                inv_std.resize(batch, 0.0);
                for r in 0..batch {
                    let row = &mut z[r * l.n_out..(r + 1) * l.n_out];
                    let mean = row.iter().sum::<f64>() / l.n_out as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l.n_out as f64;
                    let is = 1.0 / (var + LN_EPS).sqrt();
                    inv_std[r] = is;
                    for (j, v) in row.iter_mut().enumerate() {
                        let h = (*v - mean) * is;
                        xhat[r * l.n_out + j] = h;
                        *v = gain[j] * h + shift[j];
                    }
                }
            }
            let out: Vec<f64> = if l.act == Activation::Identity {
                z.clone()
            } else {
                z.iter().map(|&v| l.act.apply(v)).collect()
            };
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(std::mem::take(&mut cur));
                c.xhat.push(xhat);
                c.inv_std.push(inv_std);
                c.pre_act.push(z);
            }
            cur = out;
        }
        cur
    }

    /// Accumulate `d loss / d params` into `grad` given `d loss / d output`.
    /// Returns `d loss / d input`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.params.len());
        let batch = cache.batch;
        let mut delta = d_out.to_vec();
        for (li, l) in self.layout.iter().enumerate().rev() {
            let pre = &cache.pre_act[li];
            if l.act != Activation::Identity {
                for (d, &p) in delta.iter_mut().zip(pre) {
                    *d *= l.act.derivative(p);
                }
            }
            if let Some(o) = l.ln {
                let xhat = &cache.xhat[li];
                let inv_std = &cache.inv_std[li];
                let n = l.n_out as f64;
                let (g_gain, g_rest) = grad[o..o + 2 * l.n_out].split_at_mut(l.n_out);
                for r in 0..batch {
                    let dy = &delta[r * l.n_out..(r + 1) * l.n_out];
                    let xh = &xhat[r * l.n_out..(r + 1) * l.n_out];
                    for j in 0..l.n_out {
                        g_gain[j] += dy[j] * xh[j];
                        g_rest[j] += dy[j];
                    }
                }
                let gain = &self.params[o..o + l.n_out];
                for r in 0..batch {
                    let dy = &mut delta[r * l.n_out..(r + 1) * l.n_out];
                    let xh = &xhat[r * l.n_out..(r + 1) * l.n_out];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..l.n_out {
                        let dxh = dy[j] * gain[j];
                        mean_d += dxh;
                        mean_dx += dxh * xh[j];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    for j in 0..l.n_out {
                        let dxh = dy[j] * gain[j];
                        dy[j] = inv_std[r] * (dxh - mean_d - xh[j] * mean_dx);
                    }
                }
            }
            let input = &cache.inputs[li];
            // dW = delta^T * x
            gemm(
                l.n_out,
                batch,
                l.n_in,
                &delta,
                1,
                l.n_out as isize,
                input,
                l.n_in as isize,
                1,
                1.0,
                &mut grad[l.w..l.w + l.n_in * l.n_out],
            );
            let gb = &mut grad[l.b..l.b + l.n_out];
            for r in 0..batch {
                for j in 0..l.n_out {
                    gb[j] += delta[r * l.n_out + j];
                }
            }
            // dx = delta * W
            let mut dx = vec![0.0; batch * l.n_in];
            gemm(
                batch,
                l.n_out,
                l.n_in,
                &delta,
                l.n_out as isize,
                1,
                &self.params[l.w..l.w + l.n_in * l.n_out],
                l.n_in as isize,
                1,
                0.0,
                &mut dx,
            );
            delta = dx;
        }
        delta
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

/// Adam with optional decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Plain stochastic gradient descent.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(spec: MlpSpec, batch: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(spec, &mut rng);
        let x: Vec<f64> = (0..batch * net.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..batch * net.output_dim())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        // loss = sum(w * out^2) / 2
        let loss = |n: &Mlp| -> f64 {
            n.forward(&x, batch)
                .iter()
                .zip(&weights)
                .map(|(o, w)| 0.5 * w * o * o)
                .sum()
        };
        let (out, cache) = net.forward_cached(&x, batch);
        let d_out: Vec<f64> = out.iter().zip(&weights).map(|(o, w)| w * o).collect();
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&cache, &d_out, &mut grad);
        let h = 1e-5;
        for i in 0..net.num_params() {
            let mut p = net.clone();
            p.params[i] += h;
            let up = loss(&p);
            p.params[i] -= 2.0 * h;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-5, "param {i}: analytic {} fd {fd}", grad[i]);
        }
    }

    #[test]
    fn backward_matches_finite_differences_with_layer_norm() {
        fd_check(
            MlpSpec {
                sizes: vec![4, 5, 6, 3],
                layer_norm: true,
                activation: Activation::Silu,
            },
            7,
            1,
        );
    }

    #[test]
    fn backward_matches_finite_differences_plain() {
        fd_check(
            MlpSpec {
                sizes: vec![3, 8, 2],
                layer_norm: false,
                activation: Activation::Silu,
            },
            5,
            2,
        );
    }

    #[test]
    fn forward_batch_rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(
            MlpSpec {
                sizes: vec![2, 4, 1],
                layer_norm: true,
                activation: Activation::Silu,
            },
            &mut rng,
        );
        let both = net.forward(&[0.1, 0.2, -0.5, 0.9], 2);
        let first = net.forward(&[0.1, 0.2], 1);
        let second = net.forward(&[-0.5, 0.9], 1);
        assert_eq!(both[0], first[0]);
        assert_eq!(both[1], second[0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * (p[1] - 1.0)];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3 && (p[1] - 1.0).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
