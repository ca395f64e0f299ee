//! Dense layers with hand-written backward passes, AdamW, clipping and the
//! learning-rate schedule. Everything is `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh-approximation GELU:
/// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `y = W x + b`, with `W` stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }

    /// Weights uniform in `±gain / sqrt(inputs)`, zero bias.
    pub fn random<R: Rng>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain / (inputs.max(1) as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self {
            inputs,
            outputs,
            w,
            b: vec![0.0; outputs],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.outputs];
        self.forward_into(x, &mut y);
        y
    }

    pub fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.inputs, "dense input width");
        assert_eq!(y.len(), self.outputs, "dense output width");
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w[o * self.inputs..(o + 1) * self.inputs];
            *yo = self.b[o] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    /// Adds `dL/dW`, `dL/db` into `grad` and, if asked, writes `dL/dx` into `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense, dx: Option<&mut [f64]>) {
        assert_eq!(dy.len(), self.outputs, "dense output gradient width");
        for (o, &g) in dy.iter().enumerate() {
            grad.b[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &mut grad.w[o * self.inputs..(o + 1) * self.inputs];
            for (gw, &xi) in row.iter_mut().zip(x) {
                *gw += g * xi;
            }
        }
        if let Some(dx) = dx {
            dx.iter_mut().for_each(|v| *v = 0.0);
            for (o, &g) in dy.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &self.w[o * self.inputs..(o + 1) * self.inputs];
                for (d, &w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }
}

/// `y = x + fc2(gelu(fc1(x)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub fc1: Dense,
    pub fc2: Dense,
}

/// Intermediate values of one block's forward pass.
#[derive(Debug, Clone, Default)]
pub struct BlockCache {
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
}

impl ResidualBlock {
    pub fn random<R: Rng>(width: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Dense::random(width, hidden, 1.0, rng),
            fc2: Dense::random(hidden, width, 0.5, rng),
        }
    }

    pub fn zeros(width: usize, hidden: usize) -> Self {
        Self {
            fc1: Dense::zeros(width, hidden),
            fc2: Dense::zeros(hidden, width),
        }
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, BlockCache) {
        let pre = self.fc1.forward(x);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let mut y = self.fc2.forward(&act);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += xi;
        }
        (y, BlockCache { pre, act })
    }

    /// Returns `dL/dx`.
    pub fn backward(
        &self,
        x: &[f64],
        cache: &BlockCache,
        dy: &[f64],
        grad: &mut ResidualBlock,
    ) -> Vec<f64> {
        let mut d_act = vec![0.0; self.fc1.outputs];
        self.fc2.backward(&cache.act, dy, &mut grad.fc2, Some(&mut d_act));
        for (d, &p) in d_act.iter_mut().zip(&cache.pre) {
            *d *= gelu_grad(p);
        }
        let mut dx = vec![0.0; self.fc1.inputs];
        self.fc1.backward(x, &d_act, &mut grad.fc1, Some(&mut dx));
        for (d, g) in dx.iter_mut().zip(dy) {
            *d += g;
        }
        dx
    }
}

/// Mean absolute error and its gradient. The subgradient at a zero residual is 0.
pub fn l1_loss(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len(), "l1 operand lengths");
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            loss += r.abs();
            if r > 0.0 {
                1.0 / n
            } else if r < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (loss / n, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW moments for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. Weight decay is applied to the parameters directly,
    /// separately from the adaptive step.
    pub fn step(&mut self, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("optimizer tensors", self.m.len(), params.len()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::dim("optimizer tensor", m.len(), p.len()));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                p[i] -= lr * c.weight_decay * p[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// L2 norm over all tensors taken together.
pub fn global_norm(grads: &[&[f64]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all tensors so their joint norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Linear warmup from 0 to `base_lr`, then constant, then `base_lr * decay_factor`
/// from `decay_step` on.
pub fn lr_at(
    step: usize,
    base_lr: f64,
    warmup_steps: usize,
    decay_step: usize,
    decay_factor: f64,
) -> Result<f64> {
    if warmup_steps >= decay_step {
        return Err(Error::Config(format!(
            "warmup_steps ({warmup_steps}) must be below decay_step ({decay_step})"
        )));
    }
    Ok(if step >= decay_step {
        base_lr * decay_factor
    } else if step < warmup_steps {
        base_lr * step as f64 / warmup_steps as f64
    } else {
        base_lr
    })
}

/// A named tensor as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// SHA-256 over names, shapes and little-endian values, as lowercase hex.
pub fn content_hash(tensors: &[Tensor]) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update((t.name.len() as u64).to_le_bytes());
        h.update(t.name.as_bytes());
        h.update((t.shape.len() as u64).to_le_bytes());
        for &d in &t.shape {
            h.update((d as u64).to_le_bytes());
        }
        for &v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        let x: f64 = 1.0;
        let oracle = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        assert!((gelu(1.0) - oracle).abs() < 1e-15);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
    }

    #[test]
    fn dense_identity() {
        let mut d = Dense::zeros(2, 2);
        d.w = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(d.forward(&[0.3, -0.7]), vec![0.3, -0.7]);
    }

    #[test]
    fn l1_example() {
        let (loss, grad) = l1_loss(&[0.0; 32], &[0.5; 32]);
        assert_eq!(loss, 0.5);
        assert!(grad.iter().all(|&g| g == -1.0 / 32.0));
        let (_, g0) = l1_loss(&[0.2], &[0.2]);
        assert_eq!(g0, vec![0.0]);
    }

    #[test]
    fn adamw_scalar_step() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[1]);
        let mut theta = [1.0];
        opt.step(1e-3, &mut [&mut theta], &[&[1.0]]).unwrap();
        // decay: 1 - 1e-3 * 0.01 = 0.99999; m_hat = v_hat = 1
        let expected = 0.99999 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_grad_no_decay() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[3]);
        let mut p = [0.5, -1.0, 2.0];
        for _ in 0..5 {
            opt.step(1e-2, &mut [&mut p], &[&[0.0; 3]]).unwrap();
        }
        assert_eq!(p, [0.5, -1.0, 2.0]);
    }

    #[test]
    fn clipping() {
        let mut a = [1.2, 0.0];
        let mut b = [1.6];
        let n = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert!((n - 2.0).abs() < 1e-15);
        assert!((global_norm(&[&a, &b]) - 1.0).abs() < 1e-15);

        let mut c = [0.3, 0.4];
        clip_global_norm(&mut [&mut c], 1.0);
        assert_eq!(c, [0.3, 0.4]);
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_at(0, 2e-4, 500, 10_000, 0.1).unwrap(), 0.0);
        assert_eq!(lr_at(500, 2e-4, 500, 10_000, 0.1).unwrap(), 2e-4);
        assert!((lr_at(250, 2e-4, 500, 10_000, 0.1).unwrap() - 1e-4).abs() < 1e-20);
        assert!((lr_at(10_000, 2e-4, 500, 10_000, 0.1).unwrap() - 2e-5).abs() < 1e-20);
        assert!(lr_at(5, 2e-4, 10, 10, 0.1).is_err());
    }
}
