//! The authoritative teleop session: one simulator, one operator, at most
//! one recording in progress. Independent of any transport.

use std::path::{Path, PathBuf};

use faultarm::episode::{self, Episode, EpisodeMeta, EpisodeSource, StepRecord};
use faultarm::sim::{Action, Point};
use faultarm::{ArmState, DegradationConfig, HealthVector, Sim};

use crate::protocol::{Command, Geometry, Saved, ServerMessage, StateFrame};

struct Recording {
    task_id: usize,
    seed: u64,
    degradation: DegradationConfig,
    steps: Vec<StepRecord>,
    /// Set at the first successful tick; nothing is captured afterwards.
    success: bool,
}

pub struct Session {
    sim: Sim,
    out_dir: PathBuf,
    seed: u64,
    degradation: DegradationConfig,
    health: HealthVector,
    state: ArmState,
    pointer: Option<Point>,
    pending_grip: f64,
    pending_yaw: f64,
    recording: Option<Recording>,
}

impl Session {
    pub fn new(sim: Sim, out_dir: PathBuf, seed: u64) -> faultarm::Result<Self> {
        let health = HealthVector::healthy(sim.joints());
        let state = sim.reset(0, seed, &health)?;
        Ok(Self {
            sim,
            out_dir,
            seed,
            degradation: DegradationConfig::healthy(),
            health,
            state,
            pointer: None,
            pending_grip: 0.0,
            pending_yaw: 0.0,
            recording: None,
        })
    }

    pub fn geometry(&self) -> Geometry {
        let scene = self.sim.scene();
        Geometry {
            link_lengths: scene.arm.link_lengths.clone(),
            nominal_limits: scene.arm.nominal_limits.clone(),
            grasp_radius: scene.grasp_radius,
            success_tolerance: scene.success_tolerance,
            table_height: scene.tasks.first().map_or(0.0, |t| t.object.y.0),
            tasks: scene.tasks.iter().map(|t| t.name.clone()).collect(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording.is_some()
    }

    pub fn frame(&self) -> StateFrame {
        let s = &self.state;
        StateFrame {
            task_id: s.task_id,
            episode_tick: s.tick,
            q: s.q.clone(),
            ee_pose: self.sim.ee_pose(s),
            gripper: s.gripper,
            object_pos: s.object_pos,
            target_pos: s.target_pos,
            attached: s.object_attached,
            health: self.health.as_slice().to_vec(),
            recording: self.recording.is_some(),
            recorded_steps: self.recording.as_ref().map_or(0, |r| r.steps.len()),
            success: self.sim.is_success(s),
            geometry: None,
        }
    }

    fn reset_to(&mut self, task_id: usize) -> Result<(), String> {
        self.state = self
            .sim
            .reset(task_id, self.seed, &self.health)
            .map_err(|e| e.to_string())?;
        self.pointer = None;
        self.pending_grip = 0.0;
        self.pending_yaw = 0.0;
        Ok(())
    }

    /// Applies one command. `Ok(Some(_))` is a reply for the sender only;
    /// `Err` becomes an error frame and leaves the session unchanged.
    pub fn apply(&mut self, cmd: Command) -> Result<Option<ServerMessage>, String> {
        let busy = |what: &str| Err(format!("cannot {what} while recording"));
        match cmd {
            Command::SetPointerTarget(p) => {
                if !(p.x.is_finite() && p.y.is_finite()) {
                    return Err("pointer target must be finite".into());
                }
                let reach: f64 = self.sim.model().link_lengths.iter().sum();
                self.pointer = Some([p.x.clamp(-reach, reach), p.y.clamp(-reach, reach)]);
            }
            Command::GripperDelta(d) if d.d.is_finite() => self.pending_grip += d.d,
            Command::YawDelta(d) if d.d.is_finite() => self.pending_yaw += d.d,
            Command::GripperDelta(_) | Command::YawDelta(_) => {
                return Err("delta must be finite".into());
            }
            Command::SetDegradation(cfg) => {
                if self.is_recording() {
                    return busy("change degradation");
                }
                let health = cfg.to_health_vector(self.sim.joints()).map_err(|e| e.to_string())?;
                self.degradation = cfg;
                self.health = health;
                self.reset_to(self.state.task_id)?;
            }
            Command::ResetScene { seed } => {
                if self.is_recording() {
                    return busy("reset the scene");
                }
                self.seed = seed;
                self.reset_to(self.state.task_id)?;
            }
            Command::StartRecording { task_id } => {
                if self.is_recording() {
                    return Err("already recording".into());
                }
                self.reset_to(task_id)?;
                self.recording = Some(Recording {
                    task_id,
                    seed: self.seed,
                    degradation: self.degradation.clone(),
                    steps: Vec::new(),
                    success: false,
                });
            }
            Command::StopRecording { save } => {
                let rec = self.recording.take().ok_or("not recording")?;
                if !save {
                    return Ok(Some(ServerMessage::RecordingDiscarded { steps: rec.steps.len() }));
                }
                if rec.steps.is_empty() {
                    return Err("nothing recorded; recording discarded".into());
                }
                return self.save(rec).map(|s| Some(ServerMessage::RecordingSaved(s)));
            }
        }
        Ok(None)
    }

    fn save(&self, rec: Recording) -> Result<Saved, String> {
        let path = free_path(&self.out_dir, rec.task_id, rec.seed);
        let steps = rec.steps.len();
        let success = rec.success;
        let ep = Episode {
            meta: EpisodeMeta {
                task_id: rec.task_id,
                seed: rec.seed,
                degradation: rec.degradation,
                success,
                source: EpisodeSource::Teleop,
            },
            steps: rec.steps,
        };
        let scene = self.sim.scene();
        episode::save(&[ep], &path, scene.joints(), scene.num_tasks()).map_err(|e| e.to_string())?;
        Ok(Saved {
            path: path.display().to_string(),
            steps,
            success,
        })
    }

    /// Drops an unsaved recording, e.g. when the operator disconnects.
    pub fn discard_recording(&mut self) -> bool {
        self.recording.take().is_some()
    }

    /// The command for this tick: chase the pointer (no health weighting),
    /// plus any queued gripper and yaw deltas, all within action bounds.
    fn command(&mut self) -> Action {
        let bounds = self.sim.scene().bounds;
        let pose = self.sim.ee_pose(&self.state);
        let mut d_ee = [0.0, 0.0];
        if let Some(p) = self.pointer {
            d_ee = [p[0] - pose[0], p[1] - pose[1]];
            let m = d_ee[0].abs().max(d_ee[1].abs());
            if m > bounds.ee {
                d_ee = [d_ee[0] * bounds.ee / m, d_ee[1] * bounds.ee / m];
            }
        }
        let action = Action {
            d_ee,
            d_yaw: self.pending_yaw,
            d_grip: self.pending_grip,
        }
        .clamped(&bounds);
        self.pending_yaw = 0.0;
        self.pending_grip = 0.0;
        action
    }

    /// Advances the simulation one tick and returns the new frame.
    pub fn tick(&mut self) -> faultarm::Result<StateFrame> {
        let action = self.command();
        let before = self.state.clone();
        self.state = self.sim.step(&before, &action, &self.health)?;
        let success = self.sim.is_success(&self.state);
        if let Some(rec) = self.recording.as_mut().filter(|r| !r.success) {
            let obs = self.sim.observe(&before);
            rec.steps.push(StepRecord {
                proprio: obs.proprio,
                observation: obs,
                action,
                health: self.health.clone(),
            });
            rec.success = success;
        }
        Ok(self.frame())
    }
}

fn free_path(dir: &Path, task_id: usize, seed: u64) -> PathBuf {
    (0..)
        .map(|n| dir.join(format!("teleop_t{task_id}_s{seed}_{n:03}.jsonl")))
        .find(|p| !p.exists())
        .expect("unbounded search")
}
