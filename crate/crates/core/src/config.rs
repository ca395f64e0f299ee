//! Run configuration shared by every subcommand. Loaded from JSON; unknown
//! keys are rejected. Command-line flags override file values, which override
//! these defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{default_scene, SceneConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    /// Task ids; `None` means every task in the scene.
    pub tasks: Option<Vec<usize>>,
    pub levels: Vec<f64>,
    pub per_cell: usize,
    pub healthy: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            tasks: None,
            levels: vec![0.3, 0.5, 0.7, 0.9],
            per_cell: 16,
            healthy: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub low_quantile: f64,
    pub high_quantile: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            low_quantile: 0.01,
            high_quantile: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub levels: Vec<f64>,
    /// Joints to degrade; `None` means all.
    pub joints: Option<Vec<usize>>,
    pub tasks: Option<Vec<usize>>,
    pub episodes_per_task: usize,
    pub replan_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            levels: vec![0.3, 0.5, 0.7, 0.9],
            joints: None,
            tasks: None,
            episodes_per_task: 10,
            replan_every: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Scene JSON; `None` uses the built-in desk scene.
    pub scene: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    pub seed: u64,
    /// Parallel workers; `None` uses every core.
    pub workers: Option<usize>,
    pub collect: CollectConfig,
    pub stats: StatsConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: None,
            data_dir: "data".into(),
            checkpoint_dir: "ckpt".into(),
            report_dir: "report".into(),
            seed: 0,
            workers: None,
            collect: CollectConfig::default(),
            stats: StatsConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn check_levels(what: &str, levels: &[f64]) -> Result<()> {
    if let Some(w) = levels.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::Config(format!("{what} level {w} is outside [0, 1]")));
    }
    Ok(())
}

fn check_ids(what: &str, ids: &Option<Vec<usize>>, bound: usize) -> Result<()> {
    if let Some(bad) = ids.iter().flatten().find(|&&i| i >= bound) {
        return Err(Error::Config(format!("{what} id {bad} out of range (< {bound})")));
    }
    if ids.as_ref().is_some_and(Vec::is_empty) {
        return Err(Error::Config(format!("{what} list is empty")));
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_scene(&self) -> Result<SceneConfig> {
        match &self.scene {
            Some(p) => SceneConfig::load(p),
            None => Ok(default_scene()),
        }
    }

    /// Checks every section against `scene`.
    pub fn validate(&self, scene: &SceneConfig) -> Result<()> {
        check_levels("collect", &self.collect.levels)?;
        check_levels("eval", &self.eval.levels)?;
        check_ids("collect task", &self.collect.tasks, scene.num_tasks())?;
        check_ids("eval task", &self.eval.tasks, scene.num_tasks())?;
        check_ids("eval joint", &self.eval.joints, scene.joints())?;
        let s = &self.stats;
        if !(0.0..=1.0).contains(&s.low_quantile)
            || !(0.0..=1.0).contains(&s.high_quantile)
            || s.low_quantile > s.high_quantile
        {
            return Err(Error::Config("stats quantiles must satisfy 0 <= low <= high <= 1".into()));
        }
        self.train.validate()?;
        if self.eval.episodes_per_task == 0 {
            return Err(Error::Config("eval.episodes_per_task must be positive".into()));
        }
        if self.eval.replan_every == 0 {
            return Err(Error::Config("eval.replan_every must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }

    pub fn collect_tasks(&self, scene: &SceneConfig) -> Vec<usize> {
        self.collect
            .tasks
            .clone()
            .unwrap_or_else(|| (0..scene.num_tasks()).collect())
    }

    pub fn eval_tasks(&self, scene: &SceneConfig) -> Vec<usize> {
        self.eval
            .tasks
            .clone()
            .unwrap_or_else(|| (0..scene.num_tasks()).collect())
    }

    pub fn eval_joints(&self, scene: &SceneConfig) -> Vec<usize> {
        self.eval
            .joints
            .clone()
            .unwrap_or_else(|| (0..scene.joints()).collect())
    }
}
