//! Closed-loop rollouts and the joint x weakness success matrix.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::Expert;
use crate::health::{DegradationConfig, HealthVector};
use crate::norm::NormStats;
use crate::policy::Policy;
use crate::sim::{Action, ArmState, Sim};

/// Anything that can drive the arm for one episode.
pub trait Controller {
    fn reset(&mut self);
    fn act(&mut self, sim: &Sim, state: &ArmState, health: &HealthVector) -> Result<Action>;
}

/// Runs a trained policy, executing `replan_every` actions of each predicted
/// chunk before querying again.
pub struct PolicyController<'a> {
    policy: &'a Policy,
    stats: &'a NormStats,
    replan_every: usize,
    queue: VecDeque<Action>,
}

impl<'a> PolicyController<'a> {
    pub fn new(policy: &'a Policy, stats: &'a NormStats, replan_every: usize) -> Result<Self> {
        let chunk = policy.config.chunk;
        if replan_every == 0 || replan_every > chunk {
            return Err(Error::Config(format!(
                "replan_every must be in 1..={chunk}, got {replan_every}"
            )));
        }
        stats.validate(policy.config.action_dim)?;
        Ok(Self {
            policy,
            stats,
            replan_every,
            queue: VecDeque::new(),
        })
    }
}

impl Controller for PolicyController<'_> {
    fn reset(&mut self) {
        self.queue.clear();
    }

    fn act(&mut self, sim: &Sim, state: &ArmState, health: &HealthVector) -> Result<Action> {
        if self.queue.is_empty() {
            let obs = sim.observe(state);
            let out = self
                .policy
                .forward(&obs.features(), &obs.proprio, health.as_slice())?;
            let a = self.policy.config.action_dim;
            for row in out.chunks(a).take(self.replan_every) {
                self.queue
                    .push_back(Action::from_slice(&self.stats.denormalize(row)));
            }
        }
        Ok(self.queue.pop_front().expect("queue was just filled"))
    }
}

/// The scripted demonstrator behind the controller interface. `believed`
/// overrides the health it plans with.
#[derive(Default)]
pub struct ExpertController {
    expert: Expert,
    pub believed: Option<HealthVector>,
}

impl Controller for ExpertController {
    fn reset(&mut self) {
        self.expert = Expert::default();
    }

    fn act(&mut self, sim: &Sim, state: &ArmState, health: &HealthVector) -> Result<Action> {
        if state.tick > 0 {
            self.expert.observe(sim, state);
        }
        let plan = self.believed.as_ref().unwrap_or(health);
        self.expert.act(sim, state, plan)
    }
}

/// Rolls out until success or the horizon. Returns `(success, ticks)`.
pub fn rollout(
    sim: &Sim,
    controller: &mut dyn Controller,
    task_id: usize,
    seed: u64,
    health: &HealthVector,
) -> Result<(bool, usize)> {
    controller.reset();
    let mut state = sim.reset(task_id, seed, health)?;
    for tick in 0..sim.scene().horizon {
        let action = controller.act(sim, &state, health)?;
        state = sim.step(&state, &action, health)?;
        if sim.is_success(&state) {
            return Ok((true, tick + 1));
        }
    }
    Ok((false, sim.scene().horizon))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub successes: usize,
    pub episodes: usize,
}

impl Tally {
    pub fn rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }

    fn add(&mut self, success: bool) {
        self.episodes += 1;
        self.successes += success as usize;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub degradation: DegradationConfig,
    pub total: Tally,
    /// `(task_id, tally)` in task order.
    pub per_task: Vec<(usize, Tally)>,
}

impl CellResult {
    pub fn rate(&self) -> f64 {
        self.total.rate()
    }
}

/// Reset seed for episode `index` of `task_id`. Every cell reuses the same
/// seeds, so cells differ only in degradation.
pub fn eval_seed(seed_base: u64, task_id: usize, index: usize) -> u64 {
    let mut x = seed_base ^ 0xD1B5_4A32_D192_ED03;
    x = x.wrapping_add((task_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    x ^= x >> 32;
    x = x.wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    x ^= x >> 29;
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPlan {
    pub episodes_per_task: usize,
    pub seed_base: u64,
}

/// Evaluates several degradation configs at once, returned in input order.
pub fn run_cells<C, F>(
    sim: &Sim,
    make: &F,
    configs: &[DegradationConfig],
    tasks: &[usize],
    plan: EvalPlan,
) -> Result<Vec<CellResult>>
where
    C: Controller,
    F: Fn() -> Result<C> + Sync,
{
    if tasks.is_empty() || plan.episodes_per_task == 0 {
        return Err(Error::Config("evaluation needs tasks and episodes".into()));
    }
    let mut healths = Vec::with_capacity(configs.len());
    for cfg in configs {
        healths.push(cfg.to_health_vector(sim.joints())?);
    }
    let jobs: Vec<(usize, usize, usize)> = (0..configs.len())
        .flat_map(|c| {
            tasks.iter().flat_map(move |&t| (0..plan.episodes_per_task).map(move |i| (c, t, i)))
        })
        .collect();
    let outcomes: Vec<Result<bool>> = jobs
        .par_iter()
        .map(|&(c, t, i)| {
            let mut ctrl = make()?;
            let seed = eval_seed(plan.seed_base, t, i);
            rollout(sim, &mut ctrl, t, seed, &healths[c]).map(|r| r.0)
        })
        .collect();

    let mut cells: Vec<CellResult> = configs
        .iter()
        .map(|cfg| CellResult {
            degradation: cfg.clone(),
            total: Tally::default(),
            per_task: tasks.iter().map(|&t| (t, Tally::default())).collect(),
        })
        .collect();
    for (&(c, t, _), ok) in jobs.iter().zip(outcomes) {
        let ok = ok?;
        let cell = &mut cells[c];
        cell.total.add(ok);
        let slot = tasks.iter().position(|&x| x == t).expect("task in list");
        cell.per_task[slot].1.add(ok);
    }
    Ok(cells)
}

pub fn run_cell<C, F>(
    sim: &Sim,
    make: &F,
    degradation: &DegradationConfig,
    tasks: &[usize],
    plan: EvalPlan,
) -> Result<CellResult>
where
    C: Controller,
    F: Fn() -> Result<C> + Sync,
{
    let mut cells = run_cells(sim, make, std::slice::from_ref(degradation), tasks, plan)?;
    Ok(cells.remove(0))
}

/// Success rates for the healthy cell and every `(joint, level)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub levels: Vec<f64>,
    pub joints: Vec<usize>,
    pub tasks: Vec<usize>,
    pub healthy: CellResult,
    /// `cells[j][l]` is joint `joints[j]` at weakness `levels[l]`.
    pub cells: Vec<Vec<CellResult>>,
}

impl EvalMatrix {
    pub fn cell_count(&self) -> usize {
        1 + self.cells.iter().map(Vec::len).sum::<usize>()
    }

    /// Mean of the joint's per-level rates.
    pub fn joint_average(&self, row: usize) -> f64 {
        let cells = &self.cells[row];
        if cells.is_empty() {
            return 0.0;
        }
        cells.iter().map(CellResult::rate).sum::<f64>() / cells.len() as f64
    }

    pub fn cell(&self, joint: usize, level: f64) -> Option<&CellResult> {
        let j = self.joints.iter().position(|&x| x == joint)?;
        let l = self.levels.iter().position(|&x| x == level)?;
        Some(&self.cells[j][l])
    }
}

pub fn run_matrix<C, F>(
    sim: &Sim,
    make: &F,
    joints: &[usize],
    levels: &[f64],
    tasks: &[usize],
    plan: EvalPlan,
) -> Result<EvalMatrix>
where
    C: Controller,
    F: Fn() -> Result<C> + Sync,
{
    let mut configs = vec![DegradationConfig::healthy()];
    for &j in joints {
        for &w in levels {
            configs.push(DegradationConfig::single(j, w));
        }
    }
    let mut results = run_cells(sim, make, &configs, tasks, plan)?.into_iter();
    let healthy = results.next().expect("healthy cell");
    let cells = joints
        .iter()
        .map(|_| results.by_ref().take(levels.len()).collect())
        .collect();
    Ok(EvalMatrix {
        levels: levels.to_vec(),
        joints: joints.to_vec(),
        tasks: tasks.to_vec(),
        healthy,
        cells,
    })
}
