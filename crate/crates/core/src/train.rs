//! Behavior cloning with L1 chunk loss, gradient accumulation, clipping and
//! the warmup/decay schedule.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, l1_loss, lr_at, AdamW, AdamWConfig};
use crate::norm::NormStats;
use crate::policy::{is_trainable, Checkpoint, InputNorm, Policy, PolicyConfig, PolicyMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub accumulation: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub decay_step: usize,
    pub decay_factor: f64,
    pub clip_norm: f64,
    pub optimizer: AdamWConfig,
    /// Write `ckpt_<step>.json` every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            accumulation: 2,
            lr: 2e-4,
            warmup_steps: 100,
            decay_step: 2000,
            decay_factor: 0.1,
            clip_norm: 1.0,
            optimizer: AdamWConfig::default(),
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.accumulation == 0 {
            return Err(Error::Config("batch and accumulation must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr must be >= 0 and clip_norm > 0".into()));
        }
        lr_at(0, self.lr, self.warmup_steps, self.decay_step, self.decay_factor)?;
        Ok(())
    }
}

/// One training example: inputs at step `t` and the normalized chunk from `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub obs: Vec<f64>,
    pub proprio: Vec<f64>,
    pub health: Vec<f64>,
    pub target: Vec<f64>,
}

/// Normalized actions `t .. t + chunk`, repeating the final action past the end.
pub fn chunk_target(episode: &Episode, t: usize, chunk: usize, stats: &NormStats) -> Vec<f64> {
    let last = episode.steps.len() - 1;
    (0..chunk)
        .flat_map(|k| stats.normalize(&episode.steps[(t + k).min(last)].action.to_array()))
        .collect()
}

pub fn sample_at(episode: &Episode, t: usize, chunk: usize, stats: &NormStats) -> Sample {
    let step = &episode.steps[t];
    Sample {
        obs: step.observation.features(),
        proprio: step.proprio.to_vec(),
        health: step.health.as_slice().to_vec(),
        target: chunk_target(episode, t, chunk, stats),
    }
}

/// Endless seeded stream of batches, each step drawn uniformly over the dataset.
pub struct BatchSampler<'a> {
    episodes: &'a [Episode],
    stats: &'a NormStats,
    index: Vec<(usize, usize)>,
    batch: usize,
    chunk: usize,
    rng: ChaCha8Rng,
}

impl Iterator for BatchSampler<'_> {
    type Item = Vec<Sample>;

    fn next(&mut self) -> Option<Vec<Sample>> {
        let batch = (0..self.batch)
            .map(|_| {
                let (e, t) = self.index[self.rng.gen_range(0..self.index.len())];
                sample_at(&self.episodes[e], t, self.chunk, self.stats)
            })
            .collect();
        Some(batch)
    }
}

pub fn make_batches<'a>(
    episodes: &'a [Episode],
    stats: &'a NormStats,
    batch: usize,
    chunk: usize,
    seed: u64,
) -> Result<BatchSampler<'a>> {
    let index: Vec<(usize, usize)> = episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.steps.len()).map(move |t| (e, t)))
        .collect();
    if index.is_empty() {
        return Err(Error::InsufficientData("no steps to train on".into()));
    }
    Ok(BatchSampler {
        episodes,
        stats,
        index,
        batch,
        chunk,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

/// Fresh policy for `mode` with input scaling fitted on `episodes`. Frozen-trunk
/// training starts from `base` plus a new projector and keeps its scaling.
pub fn init_policy(
    mode: PolicyMode,
    config: PolicyConfig,
    episodes: &[Episode],
    seed: u64,
    base: Option<&Policy>,
) -> Result<Policy> {
    if mode == PolicyMode::FrozenTrunk {
        let base = base.ok_or_else(|| {
            Error::Config("frozen-trunk training needs a baseline checkpoint".into())
        })?;
        if base.projector.is_some() {
            return Err(Error::Config(
                "frozen-trunk training needs a baseline (projector-free) checkpoint".into(),
            ));
        }
        return Ok(base.clone().with_projector(seed));
    }
    let mut policy = Policy::new(config, mode, seed);
    let obs: Vec<Vec<f64>> = episodes
        .iter()
        .flat_map(|e| e.steps.iter().map(|s| s.observation.features()))
        .collect();
    let proprio: Vec<Vec<f64>> = episodes
        .iter()
        .flat_map(|e| e.steps.iter().map(|s| s.proprio.to_vec()))
        .collect();
    policy.obs_norm = InputNorm::fit(&obs, config.obs_dim);
    policy.proprio_norm = InputNorm::fit(&proprio, config.proprio_dim);
    Ok(policy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub metrics: Vec<MetricRow>,
}

/// Mean L1 loss and its gradient over `samples`, with every per-sample
/// gradient scaled by `scale` and added into `grads`.
pub fn accumulate(policy: &Policy, samples: &[Sample], scale: f64, grads: &mut Policy) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let (out, tape) = policy.forward_tape(&s.obs, &s.proprio, &s.health);
        let (loss, mut d_out) = l1_loss(&out, &s.target);
        d_out.iter_mut().for_each(|g| *g *= scale);
        policy.backward(&tape, &d_out, grads);
        total += loss;
    }
    total / samples.len() as f64
}

/// Trains `policy` in place of a copy. With `out_dir`, writes `metrics.csv`,
/// periodic checkpoints and `final.json`.
pub fn train(
    mut policy: Policy,
    mode: PolicyMode,
    episodes: &[Episode],
    stats: &NormStats,
    config: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    stats.validate(policy.config.action_dim)?;
    if mode.conditioned() != policy.projector.is_some() {
        return Err(Error::Config(format!(
            "mode {mode} does not match the policy's projector"
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let chunk = policy.config.chunk;
    let mut sampler = make_batches(episodes, stats, config.batch, chunk, seed)?;
    if let Some(s) = episodes.iter().flat_map(|e| e.steps.first()).next() {
        policy.check_inputs(&s.observation.features(), &s.proprio, s.health.as_slice())?;
    }

    let names = policy.tensor_names();
    let trainable: Vec<bool> = names.iter().map(|n| is_trainable(mode, n)).collect();
    let sizes: Vec<usize> = policy
        .tensors_mut()
        .iter()
        .zip(&trainable)
        .filter(|(_, &t)| t)
        .map(|(p, _)| p.len())
        .collect();
    let mut opt = AdamW::new(config.optimizer, &sizes);
    let mut grads = policy.zeros_like();
    let scale = 1.0 / (config.batch * config.accumulation) as f64;
    let mut metrics = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let lr = lr_at(
            step,
            config.lr,
            config.warmup_steps,
            config.decay_step,
            config.decay_factor,
        )?;
        grads.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v = 0.0));
        let mut loss = 0.0;
        for _ in 0..config.accumulation {
            let batch = sampler.next().expect("sampler is endless");
            loss += accumulate(&policy, &batch, scale, &mut grads);
        }
        loss /= config.accumulation as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }

        let mut g: Vec<&mut [f64]> = grads
            .tensors_mut()
            .into_iter()
            .zip(&trainable)
            .filter(|(_, &t)| t)
            .map(|(g, _)| g)
            .collect();
        clip_global_norm(&mut g, config.clip_norm);
        let g: Vec<&[f64]> = g.into_iter().map(|x| &*x).collect();
        let mut p: Vec<&mut [f64]> = policy
            .tensors_mut()
            .into_iter()
            .zip(&trainable)
            .filter(|(_, &t)| t)
            .map(|(p, _)| p)
            .collect();
        opt.step(lr, &mut p, &g)?;
        metrics.push(MetricRow { step, lr, loss });

        if let Some(dir) = out_dir {
            let done = step + 1;
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.steps {
                Checkpoint::from_policy(&policy, mode, done)
                    .save(&dir.join(format!("ckpt_{done}.json")))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        Checkpoint::from_policy(&policy, mode, config.steps).save(&dir.join("final.json"))?;
        write_metrics(&metrics, &dir.join("metrics.csv"))?;
    }
    Ok(TrainOutcome { policy, metrics })
}

/// `step,lr,loss` CSV.
pub fn write_metrics(metrics: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in metrics {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}
