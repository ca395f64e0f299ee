//! Action-chunk policies and the health projector.
//!
//! ```text
//! x = obs_embed(obs) + [proprio_embed(proprio) + f_h] + query
//! x = block_K(...block_1(x))
//! chunk = head(x)                      (C x A, normalized units)
//! f_h = layer2(gelu(layer1(h)))        (layer2 starts at zero)
//! ```
//!
//! The baseline has no projector. Adding a freshly initialized projector to a
//! baseline leaves every output bit-identical, since `p + 0 = p`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{content_hash, gelu, gelu_grad, BlockCache, Dense, ResidualBlock, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyMode {
    /// No projector; blind to health.
    Baseline,
    /// Projector present, every tensor trained from scratch.
    Health,
    /// Projector and query trained on top of a frozen baseline.
    FrozenTrunk,
}

impl PolicyMode {
    pub fn conditioned(self) -> bool {
        !matches!(self, PolicyMode::Baseline)
    }
}

impl std::str::FromStr for PolicyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "health" => Ok(Self::Health),
            "frozen-trunk" => Ok(Self::FrozenTrunk),
            _ => Err(Error::Config(format!(
                "unknown policy mode {s:?} (expected baseline, health or frozen-trunk)"
            ))),
        }
    }
}

impl std::fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Health => "health",
            Self::FrozenTrunk => "frozen-trunk",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub proprio_dim: usize,
    pub joints: usize,
    pub embed_dim: usize,
    pub projector_hidden: usize,
    pub blocks: usize,
    pub block_hidden: usize,
    pub chunk: usize,
    pub action_dim: usize,
}

impl PolicyConfig {
    /// Desk-scale dims: D = H = 64, four blocks, chunks of 8 four-dimensional actions.
    pub fn desk(obs_dim: usize, joints: usize) -> Self {
        Self {
            obs_dim,
            proprio_dim: 4,
            joints,
            embed_dim: 64,
            projector_hidden: 64,
            blocks: 4,
            block_hidden: 64,
            chunk: 8,
            action_dim: 4,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.chunk * self.action_dim
    }
}

/// Two-layer MLP from health to the embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthProjector {
    pub layer1: Dense,
    pub layer2: Dense,
}

impl HealthProjector {
    /// Random first layer, all-zero second layer.
    pub fn new<R: rand::Rng>(joints: usize, hidden: usize, embed: usize, rng: &mut R) -> Self {
        Self {
            layer1: Dense::random(joints, hidden, 1.0, rng),
            layer2: Dense::zeros(hidden, embed),
        }
    }

    pub fn zeros(joints: usize, hidden: usize, embed: usize) -> Self {
        Self {
            layer1: Dense::zeros(joints, hidden),
            layer2: Dense::zeros(hidden, embed),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer1.param_count() + self.layer2.param_count()
    }

    pub fn forward(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.layer1.inputs {
            return Err(Error::dim("health vector", self.layer1.inputs, h.len()));
        }
        let act: Vec<f64> = self.layer1.forward(h).into_iter().map(gelu).collect();
        Ok(self.layer2.forward(&act))
    }
}

/// Per-feature standardization fitted on training data. Not trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column means and standard deviations; near-constant columns keep unit scale.
    pub fn fit(rows: &[Vec<f64>], dim: usize) -> Self {
        if rows.is_empty() {
            return Self::identity(dim);
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < 1e-6 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub config: PolicyConfig,
    pub obs_norm: InputNorm,
    pub proprio_norm: InputNorm,
    pub obs_embed: Dense,
    pub proprio_embed: Dense,
    pub query: Vec<f64>,
    pub blocks: Vec<ResidualBlock>,
    pub head: Dense,
    pub projector: Option<HealthProjector>,
}

/// Forward-pass intermediates needed by [`Policy::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    obs: Vec<f64>,
    proprio: Vec<f64>,
    health: Vec<f64>,
    proj_pre: Vec<f64>,
    proj_act: Vec<f64>,
    block_inputs: Vec<Vec<f64>>,
    block_caches: Vec<BlockCache>,
    last: Vec<f64>,
}

/// Trainable scalars per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ParamCounts {
    pub obs_embed: usize,
    pub proprio_embed: usize,
    pub query: usize,
    pub trunk: usize,
    pub head: usize,
    pub projector: usize,
    pub total: usize,
}

impl Policy {
    /// Baseline policy: seeded random embeddings and trunk, zero head, identity input scaling.
    pub fn baseline(config: PolicyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        Self {
            config,
            obs_norm: InputNorm::identity(config.obs_dim),
            proprio_norm: InputNorm::identity(config.proprio_dim),
            obs_embed: Dense::random(config.obs_dim, d, 1.0, &mut rng),
            proprio_embed: Dense::random(config.proprio_dim, d, 1.0, &mut rng),
            query: vec![0.0; d],
            blocks: (0..config.blocks)
                .map(|_| ResidualBlock::random(d, config.block_hidden, &mut rng))
                .collect(),
            head: Dense::zeros(d, config.output_dim()),
            projector: None,
        }
    }

    /// A fresh policy for `mode`. Conditioned policies are the baseline with the
    /// same seed plus a zero-output projector.
    pub fn new(config: PolicyConfig, mode: PolicyMode, seed: u64) -> Self {
        let base = Self::baseline(config, seed);
        if mode.conditioned() {
            base.with_projector(seed ^ 0x9E37_79B9_7F4A_7C15)
        } else {
            base
        }
    }

    /// This policy plus a freshly initialized projector; all shared weights are kept.
    pub fn with_projector(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.config;
        self.projector = Some(HealthProjector::new(
            c.joints,
            c.projector_hidden,
            c.embed_dim,
            &mut rng,
        ));
        self
    }

    /// Same shapes, every value zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn check_inputs(&self, obs: &[f64], proprio: &[f64], health: &[f64]) -> Result<()> {
        let c = &self.config;
        if obs.len() != c.obs_dim {
            return Err(Error::dim("observation features", c.obs_dim, obs.len()));
        }
        if proprio.len() != c.proprio_dim {
            return Err(Error::dim("proprio", c.proprio_dim, proprio.len()));
        }
        if self.projector.is_some() && health.len() != c.joints {
            return Err(Error::dim("health vector", c.joints, health.len()));
        }
        Ok(())
    }

    /// Normalized action chunk, flattened row-major as `chunk x action_dim`.
    /// `health` is ignored by the baseline.
    pub fn forward(&self, obs: &[f64], proprio: &[f64], health: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(obs, proprio, health)?;
        Ok(self.forward_tape(obs, proprio, health).0)
    }

    /// Forward pass that records what the backward pass needs. Inputs must
    /// already be checked.
    pub fn forward_tape(&self, obs: &[f64], proprio: &[f64], health: &[f64]) -> (Vec<f64>, Tape) {
        let obs = self.obs_norm.apply(obs);
        let proprio = self.proprio_norm.apply(proprio);
        let mut p = self.proprio_embed.forward(&proprio);
        let (mut proj_pre, mut proj_act) = (Vec::new(), Vec::new());
        if let Some(proj) = &self.projector {
            proj_pre = proj.layer1.forward(health);
            proj_act = proj_pre.iter().map(|&v| gelu(v)).collect();
            let f_h = proj.layer2.forward(&proj_act);
            for (pi, fi) in p.iter_mut().zip(&f_h) {
                *pi += fi;
            }
        }
        let mut x = self.obs_embed.forward(&obs);
        for ((xi, pi), qi) in x.iter_mut().zip(&p).zip(&self.query) {
            *xi += pi + qi;
        }
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(&x);
            block_inputs.push(std::mem::replace(&mut x, y));
            block_caches.push(cache);
        }
        let out = self.head.forward(&x);
        let tape = Tape {
            obs,
            proprio,
            health: health.to_vec(),
            proj_pre,
            proj_act,
            block_inputs,
            block_caches,
            last: x,
        };
        (out, tape)
    }

    /// Accumulates parameter gradients of `L` into `grad` given `dL/d(output)`,
    /// and returns `dL/dh` (empty for the baseline).
    pub fn backward(&self, tape: &Tape, d_out: &[f64], grad: &mut Policy) -> Vec<f64> {
        let d = self.config.embed_dim;
        let mut dx = vec![0.0; d];
        self.head.backward(&tape.last, d_out, &mut grad.head, Some(&mut dx));
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dx = block.backward(
                &tape.block_inputs[i],
                &tape.block_caches[i],
                &dx,
                &mut grad.blocks[i],
            );
        }
        for (g, v) in grad.query.iter_mut().zip(&dx) {
            *g += v;
        }
        self.obs_embed.backward(&tape.obs, &dx, &mut grad.obs_embed, None);
        self.proprio_embed
            .backward(&tape.proprio, &dx, &mut grad.proprio_embed, None);
        let (Some(proj), Some(gproj)) = (&self.projector, grad.projector.as_mut()) else {
            return Vec::new();
        };
        let mut d_act = vec![0.0; proj.layer1.outputs];
        proj.layer2
            .backward(&tape.proj_act, &dx, &mut gproj.layer2, Some(&mut d_act));
        for (da, &pre) in d_act.iter_mut().zip(&tape.proj_pre) {
            *da *= gelu_grad(pre);
        }
        let mut dh = vec![0.0; proj.layer1.inputs];
        proj.layer1
            .backward(&tape.health, &d_act, &mut gproj.layer1, Some(&mut dh));
        dh
    }

    /// Visits every trainable tensor in a fixed order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[f64])) {
        let dense = |f: &mut dyn FnMut(&str, &[f64]), name: &str, l: &Dense| {
            f(&format!("{name}.w"), &l.w);
            f(&format!("{name}.b"), &l.b);
        };
        dense(&mut f, "obs_embed", &self.obs_embed);
        dense(&mut f, "proprio_embed", &self.proprio_embed);
        f("query", &self.query);
        for (i, b) in self.blocks.iter().enumerate() {
            dense(&mut f, &format!("blocks.{i}.fc1"), &b.fc1);
            dense(&mut f, &format!("blocks.{i}.fc2"), &b.fc2);
        }
        dense(&mut f, "head", &self.head);
        if let Some(p) = &self.projector {
            dense(&mut f, "projector.layer1", &p.layer1);
            dense(&mut f, "projector.layer2", &p.layer2);
        }
    }

    /// Mutable counterpart of [`Policy::for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        let dense = |f: &mut dyn FnMut(&str, &mut [f64]), name: &str, l: &mut Dense| {
            f(&format!("{name}.w"), &mut l.w);
            f(&format!("{name}.b"), &mut l.b);
        };
        dense(&mut f, "obs_embed", &mut self.obs_embed);
        dense(&mut f, "proprio_embed", &mut self.proprio_embed);
        f("query", &mut self.query);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            dense(&mut f, &format!("blocks.{i}.fc1"), &mut b.fc1);
            dense(&mut f, &format!("blocks.{i}.fc2"), &mut b.fc2);
        }
        dense(&mut f, "head", &mut self.head);
        if let Some(p) = &mut self.projector {
            dense(&mut f, "projector.layer1", &mut p.layer1);
            dense(&mut f, "projector.layer2", &mut p.layer2);
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        fn push_dense<'a>(out: &mut Vec<&'a mut [f64]>, l: &'a mut Dense) {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        let Policy {
            obs_embed,
            proprio_embed,
            query,
            blocks,
            head,
            projector,
            ..
        } = self;
        push_dense(&mut out, obs_embed);
        push_dense(&mut out, proprio_embed);
        out.push(query.as_mut_slice());
        for b in blocks.iter_mut() {
            push_dense(&mut out, &mut b.fc1);
            push_dense(&mut out, &mut b.fc2);
        }
        push_dense(&mut out, head);
        if let Some(p) = projector {
            push_dense(&mut out, &mut p.layer1);
            push_dense(&mut out, &mut p.layer2);
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_tensor(|n, _| names.push(n.to_string()));
        names
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.for_each_tensor(|_, t| v.extend_from_slice(t));
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut i = 0;
        self.for_each_tensor_mut(|_, t| {
            t.copy_from_slice(&flat[i..i + t.len()]);
            i += t.len();
        });
    }

    /// Named tensors with shapes, in visit order.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        let mut dense = |name: String, l: &Dense| {
            out.push(Tensor {
                name: format!("{name}.w"),
                shape: vec![l.outputs, l.inputs],
                data: l.w.clone(),
            });
            out.push(Tensor {
                name: format!("{name}.b"),
                shape: vec![l.outputs],
                data: l.b.clone(),
            });
        };
        dense("obs_embed".into(), &self.obs_embed);
        dense("proprio_embed".into(), &self.proprio_embed);
        let query_at = 4;
        for (i, b) in self.blocks.iter().enumerate() {
            dense(format!("blocks.{i}.fc1"), &b.fc1);
            dense(format!("blocks.{i}.fc2"), &b.fc2);
        }
        dense("head".into(), &self.head);
        if let Some(p) = &self.projector {
            dense("projector.layer1".into(), &p.layer1);
            dense("projector.layer2".into(), &p.layer2);
        }
        out.insert(
            query_at,
            Tensor {
                name: "query".into(),
                shape: vec![self.query.len()],
                data: self.query.clone(),
            },
        );
        out
    }
}

/// Exact trainable-scalar count per component.
pub fn count_parameters(policy: &Policy) -> ParamCounts {
    let trunk = policy.blocks.iter().map(ResidualBlock::param_count).sum();
    let projector = policy
        .projector
        .as_ref()
        .map_or(0, HealthProjector::param_count);
    let mut c = ParamCounts {
        obs_embed: policy.obs_embed.param_count(),
        proprio_embed: policy.proprio_embed.param_count(),
        query: policy.query.len(),
        trunk,
        head: policy.head.param_count(),
        projector,
        total: 0,
    };
    c.total = c.obs_embed + c.proprio_embed + c.query + c.trunk + c.head + c.projector;
    c
}

/// Tensor names updated in `mode`.
pub fn is_trainable(mode: PolicyMode, name: &str) -> bool {
    match mode {
        PolicyMode::Baseline | PolicyMode::Health => true,
        PolicyMode::FrozenTrunk => name == "query" || name.starts_with("projector."),
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub mode: PolicyMode,
    pub step: usize,
    pub config: PolicyConfig,
    pub obs_norm: InputNorm,
    pub proprio_norm: InputNorm,
    pub tensors: Vec<Tensor>,
    pub sha256: String,
}

impl Checkpoint {
    pub fn from_policy(policy: &Policy, mode: PolicyMode, step: usize) -> Self {
        let tensors = policy.tensors();
        let sha256 = content_hash(&tensors);
        Self {
            format_version: CHECKPOINT_VERSION,
            mode,
            step,
            config: policy.config,
            obs_norm: policy.obs_norm.clone(),
            proprio_norm: policy.proprio_norm.clone(),
            tensors,
            sha256,
        }
    }

    /// Rebuilds the policy, validating names, shapes and the content hash.
    pub fn to_policy(&self) -> Result<Policy> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        let hash = content_hash(&self.tensors);
        if hash != self.sha256 {
            return Err(Error::Checkpoint(format!(
                "content hash mismatch: stored {}, computed {hash}",
                self.sha256
            )));
        }
        let c = self.config;
        let mut policy = Policy::baseline(c, 0);
        if self.mode.conditioned() {
            policy.projector = Some(HealthProjector::zeros(c.joints, c.projector_hidden, c.embed_dim));
        }
        let expected = policy.tensors();
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (e, t) in expected.iter().zip(&self.tensors) {
            if e.name != t.name || e.shape != t.shape || t.data.len() != e.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {} {:?}",
                    t.name, t.shape, e.name, e.shape
                )));
            }
        }
        let flat: Vec<f64> = self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect();
        policy.set_flat_params(&flat);
        if self.obs_norm.mean.len() != c.obs_dim || self.proprio_norm.mean.len() != c.proprio_dim {
            return Err(Error::Checkpoint("input normalization has the wrong width".into()));
        }
        policy.obs_norm = self.obs_norm.clone();
        policy.proprio_norm = self.proprio_norm.clone();
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
