//! Scripted pick-and-place demonstrator that plans around degraded joints.
//!
//! The waypoint schedule is fixed. What changes with health is the hand
//! orientation: at every phase change the expert rolls the rest of the
//! episode forward for a fan of yaw goals around hand-down and keeps the one
//! that gets furthest. Position commands are projected onto what the
//! health-scaled Jacobian can realize, so a locked arm is commanded nothing.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{Episode, EpisodeMeta, EpisodeSource, StepRecord};
use crate::error::Result;
use crate::health::{DegradationConfig, HealthVector};
use crate::sim::{dist, jacobian, wrap_angle, Action, ArmState, Point, SceneConfig, Sim};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExpertPhase {
    ApproachAbove,
    Descend,
    Grasp,
    Lift,
    Transport,
    PlaceDescend,
    Release,
    Retreat,
}

impl ExpertPhase {
    pub const ALL: [ExpertPhase; 8] = [
        ExpertPhase::ApproachAbove,
        ExpertPhase::Descend,
        ExpertPhase::Grasp,
        ExpertPhase::Lift,
        ExpertPhase::Transport,
        ExpertPhase::PlaceDescend,
        ExpertPhase::Release,
        ExpertPhase::Retreat,
    ];

    pub fn next(self) -> Self {
        use ExpertPhase::*;
        match self {
            ApproachAbove => Descend,
            Descend => Grasp,
            Grasp => Lift,
            Lift => Transport,
            Transport => PlaceDescend,
            PlaceDescend => Release,
            Release => Retreat,
            Retreat => Retreat,
        }
    }

    fn gripper_closed(self) -> bool {
        use ExpertPhase::*;
        matches!(self, Grasp | Lift | Transport | PlaceDescend)
    }

    fn dwells(self) -> bool {
        matches!(self, ExpertPhase::Grasp | ExpertPhase::Release)
    }
}

/// Cartesian waypoint the expert is chasing in `phase`.
pub fn waypoint(scene: &SceneConfig, state: &ArmState, ee: Point, phase: ExpertPhase) -> Point {
    use ExpertPhase::*;
    let cfg = &scene.expert;
    let (o, t) = (state.object_pos, state.target_pos);
    match phase {
        ApproachAbove => [o[0], o[1] + cfg.hover],
        Descend | Grasp => o,
        Lift => [ee[0], t[1] + cfg.lift],
        Transport => [t[0], t[1] + cfg.lift],
        PlaceDescend | Release => t,
        Retreat => [t[0], t[1] + cfg.hover],
    }
}

/// The expert's command for one tick: chase the phase waypoint and steer the
/// hand toward `yaw_goal`.
pub fn expert_action(
    sim: &Sim,
    state: &ArmState,
    health: &HealthVector,
    phase: ExpertPhase,
    yaw_goal: f64,
) -> Result<Action> {
    let scene = sim.scene();
    let bounds = scene.bounds;
    let pose = sim.ee_pose(state);
    let ee = [pose[0], pose[1]];
    let wp = waypoint(scene, state, ee, phase);

    let mut d = [wp[0] - ee[0], wp[1] - ee[1]];
    let m = d[0].abs().max(d[1].abs());
    if m > bounds.ee {
        d = [d[0] * bounds.ee / m, d[1] * bounds.ee / m];
    }
    let d_yaw = wrap_angle(yaw_goal - pose[2]).clamp(-bounds.yaw, bounds.yaw);

    // Project onto the span of the health-scaled Jacobian.
    let mut jac = jacobian(sim.model(), &state.q)?;
    for (c, &h) in health.as_slice().iter().enumerate() {
        for r in 0..3 {
            jac[(r, c)] *= h;
        }
    }
    let twist = Vector3::new(d[0], d[1], d_yaw);
    let gram: Matrix3<f64> = &jac * jac.transpose() + Matrix3::identity() * 1e-6;
    let realizable = gram
        .cholesky()
        .map(|c| &jac * (jac.transpose() * c.solve(&twist)))
        .unwrap_or_else(Vector3::zeros);

    let d_grip = if phase.gripper_closed() { -1.0 } else { 1.0 };
    Ok(Action {
        d_ee: [realizable[0], realizable[1]],
        d_yaw: realizable[2],
        d_grip,
    }
    .clamped(&bounds))
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct Progress {
    success: bool,
    phase: usize,
    /// Negated waypoint distance at the end of the rollout, in 5 mm buckets.
    closeness: f64,
}

fn rollout(
    sim: &Sim,
    state: &ArmState,
    health: &HealthVector,
    mut expert: Expert,
    yaw_goal: f64,
    ticks: usize,
) -> Result<Progress> {
    let mut state = state.clone();
    for _ in 0..ticks {
        let action = expert_action(sim, &state, health, expert.phase, yaw_goal)?;
        state = sim.step(&state, &action, health)?;
        if sim.is_success(&state) {
            return Ok(Progress {
                success: true,
                phase: ExpertPhase::ALL.len(),
                closeness: 0.0,
            });
        }
        expert.advance(sim, &state);
    }
    let pose = sim.ee_pose(&state);
    let ee = [pose[0], pose[1]];
    let gap = dist(ee, waypoint(sim.scene(), &state, ee, expert.phase));
    Ok(Progress {
        success: false,
        phase: expert.phase as usize,
        closeness: -(gap / 0.005).round(),
    })
}

/// Picks the hand yaw to hold from here on by simulating the rest of the
/// episode under `health` for each candidate yaw. The best rollout wins; ties
/// go to the candidate closest to the preferred yaw.
pub fn plan_yaw(
    sim: &Sim,
    state: &ArmState,
    health: &HealthVector,
    expert: &Expert,
) -> Result<f64> {
    let scene = sim.scene();
    let cfg = &scene.expert;
    let ticks = cfg
        .planner_horizon
        .min(scene.horizon.saturating_sub(state.tick));
    let mut best: Option<(Progress, f64)> = None;
    for k in 0..=2 * cfg.yaw_steps {
        let offset = if k % 2 == 1 { -(k as f64 + 1.0) / 2.0 } else { k as f64 / 2.0 };
        let yaw = wrap_angle(cfg.preferred_yaw + offset * cfg.yaw_step);
        let mut probe = expert.clone();
        probe.yaw_goal = Some(yaw);
        let score = rollout(sim, state, health, probe, yaw, ticks)?;
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, yaw));
        }
        if score.success {
            break;
        }
    }
    Ok(best.map_or(cfg.preferred_yaw, |b| b.1))
}

/// Phase transition after a step. Geometric phases advance once the end
/// effector is within `waypoint_tolerance` of the waypoint; Grasp and Release
/// advance after `dwell_ticks`, Release additionally only with the gripper open.
pub fn advance_phase(
    sim: &Sim,
    state: &ArmState,
    phase: ExpertPhase,
    ticks_in_phase: usize,
) -> ExpertPhase {
    let scene = sim.scene();
    let cfg = &scene.expert;
    match phase {
        ExpertPhase::Retreat => phase,
        ExpertPhase::Grasp if ticks_in_phase >= cfg.dwell_ticks => phase.next(),
        ExpertPhase::Release if ticks_in_phase >= cfg.dwell_ticks && state.gripper >= 0.5 => {
            phase.next()
        }
        p if p.dwells() => p,
        p => {
            let pose = sim.ee_pose(state);
            let ee = [pose[0], pose[1]];
            if dist(ee, waypoint(scene, state, ee, p)) < cfg.waypoint_tolerance {
                p.next()
            } else {
                p
            }
        }
    }
}

/// Phase bookkeeping and the current yaw plan for one rollout.
#[derive(Debug, Clone)]
pub struct Expert {
    pub phase: ExpertPhase,
    pub ticks_in_phase: usize,
    /// Replanned whenever the phase changes.
    pub yaw_goal: Option<f64>,
}

impl Default for Expert {
    fn default() -> Self {
        Self {
            phase: ExpertPhase::ApproachAbove,
            ticks_in_phase: 0,
            yaw_goal: None,
        }
    }
}

impl Expert {
    /// `health` is what the expert believes; it plans against it.
    pub fn act(&mut self, sim: &Sim, state: &ArmState, health: &HealthVector) -> Result<Action> {
        let yaw = match self.yaw_goal {
            Some(y) => y,
            None => {
                let y = plan_yaw(sim, state, health, self)?;
                self.yaw_goal = Some(y);
                y
            }
        };
        expert_action(sim, state, health, self.phase, yaw)
    }

    /// Call after every step.
    pub fn observe(&mut self, sim: &Sim, state: &ArmState) {
        if self.advance(sim, state) {
            self.yaw_goal = None;
        }
    }

    fn advance(&mut self, sim: &Sim, state: &ArmState) -> bool {
        self.ticks_in_phase += 1;
        let next = advance_phase(sim, state, self.phase, self.ticks_in_phase);
        if next == self.phase {
            return false;
        }
        self.phase = next;
        self.ticks_in_phase = 0;
        true
    }
}

/// Runs the expert once. `plan_health` is what the expert believes; the sim
/// always degrades with `true_health`.
pub fn run_expert_episode(
    sim: &Sim,
    task_id: usize,
    seed: u64,
    degradation: &DegradationConfig,
    plan_health: Option<&HealthVector>,
) -> Result<Episode> {
    let health = degradation.to_health_vector(sim.joints())?;
    let plan = plan_health.unwrap_or(&health);
    let mut state = sim.reset(task_id, seed, &health)?;
    let mut expert = Expert::default();
    let mut steps = Vec::new();
    let mut success = false;
    for _ in 0..sim.scene().horizon {
        let obs = sim.observe(&state);
        let action = expert.act(sim, &state, plan)?;
        steps.push(StepRecord {
            proprio: obs.proprio,
            observation: obs,
            action,
            health: health.clone(),
        });
        state = sim.step(&state, &action, &health)?;
        if sim.is_success(&state) {
            success = true;
            break;
        }
        expert.observe(sim, &state);
    }
    Ok(Episode {
        meta: EpisodeMeta {
            task_id,
            seed,
            degradation: degradation.clone(),
            success,
            source: EpisodeSource::Expert,
        },
        steps,
    })
}

/// One batch of expert rollouts under a single degradation config.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectJob {
    pub degradation: DegradationConfig,
    pub episodes: usize,
}

#[derive(Debug, Clone, Default)]
pub struct CollectReport {
    /// `(config, attempted, kept)` in job order.
    pub per_job: Vec<(DegradationConfig, usize, usize)>,
}

/// Seed for episode `index` of job `job` under a global `seed`.
pub fn episode_seed(seed: u64, job: usize, index: usize) -> u64 {
    let mut x = seed ^ 0xA076_1D64_78BD_642F;
    x = x.wrapping_add((job as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    x ^= x >> 29;
    x = x.wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    x ^= x >> 31;
    x
}

/// Runs every job, cycling through `tasks`, and keeps only successful
/// episodes. Output order is fixed by `(job, index)`, independent of how the
/// work is scheduled.
pub fn collect_episodes(
    sim: &Sim,
    tasks: &[usize],
    jobs: &[CollectJob],
    seed: u64,
) -> Result<(Vec<Episode>, CollectReport)> {
    let work: Vec<(usize, usize)> = jobs
        .iter()
        .enumerate()
        .flat_map(|(j, job)| (0..job.episodes).map(move |i| (j, i)))
        .collect();
    let results: Vec<Result<Episode>> = work
        .par_iter()
        .map(|&(j, i)| {
            let task = tasks[i % tasks.len()];
            run_expert_episode(sim, task, episode_seed(seed, j, i), &jobs[j].degradation, None)
        })
        .collect();

    let mut report = CollectReport::default();
    for job in jobs {
        report.per_job.push((job.degradation.clone(), job.episodes, 0));
    }
    let mut kept = Vec::new();
    for (&(j, _), ep) in work.iter().zip(results) {
        let ep = ep?;
        if ep.meta.success {
            report.per_job[j].2 += 1;
            kept.push(ep);
        }
    }
    for (cfg, attempted, k) in &report.per_job {
        if *k == 0 {
            log::warn!("no successful expert episodes for {cfg} ({attempted} attempted)");
        }
    }
    Ok((kept, report))
}

/// Default collection plan: `healthy` healthy rollouts plus `per_cell`
/// rollouts for every `(joint, level)` pair.
pub fn default_jobs(joints: usize, levels: &[f64], per_cell: usize, healthy: usize) -> Vec<CollectJob> {
    let mut jobs = vec![CollectJob {
        degradation: DegradationConfig::healthy(),
        episodes: healthy,
    }];
    for j in 0..joints {
        for &w in levels {
            jobs.push(CollectJob {
                degradation: DegradationConfig::single(j, w),
                episodes: per_cell,
            });
        }
    }
    jobs
}
