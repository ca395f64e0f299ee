//! Planar revolute-chain manipulator with an operational-space command layer.
//!
//! The arm lives in a vertical plane: `x` forward, `y` up, base joint at the
//! origin. Commands are end-effector deltas `(dx, dy, dyaw)` plus a gripper
//! delta; damped least squares maps them to joint steps, which are then
//! capped, scaled by joint health and clamped into the degraded joint range.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3xX, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::health::{apply_gain, degraded_limits, HealthVector};

pub type Point = [f64; 2];

/// End-effector pose `(x, y, yaw)`; yaw is the unwrapped sum of joint angles.
pub type Pose = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmModel {
    pub link_lengths: Vec<f64>,
    pub nominal_limits: Vec<(f64, f64)>,
    /// DLS damping `lambda`.
    pub osc_damping: f64,
    /// Per-tick cap on each joint step, radians.
    pub max_joint_step: f64,
}

impl ArmModel {
    pub fn joints(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.link_lengths.is_empty() {
            return Err(Error::Config("arm needs at least one link".into()));
        }
        if self.nominal_limits.len() != self.link_lengths.len() {
            return Err(Error::dim(
                "nominal_limits",
                self.link_lengths.len(),
                self.nominal_limits.len(),
            ));
        }
        if let Some(l) = self.link_lengths.iter().find(|&&l| !(l > 0.0)) {
            return Err(Error::Config(format!("link length {l} must be positive")));
        }
        for &(min, max) in &self.nominal_limits {
            if !(min < max) {
                return Err(Error::InvalidInterval { min, max });
            }
        }
        if !(self.osc_damping > 0.0) || !(self.max_joint_step > 0.0) {
            return Err(Error::Config(
                "osc_damping and max_joint_step must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Joint intervals after degradation.
    pub fn limits(&self, health: &HealthVector) -> Result<Vec<(f64, f64)>> {
        health.check_len(self.joints())?;
        self.nominal_limits
            .iter()
            .zip(health.as_slice())
            .map(|(&nominal, &h)| degraded_limits(nominal, h))
            .collect()
    }

    fn check_q(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.joints() {
            return Err(Error::dim("joint vector", self.joints(), q.len()));
        }
        Ok(())
    }
}

/// `x = sum L_i cos(theta_i)`, `y = sum L_i sin(theta_i)`, `theta_i = q_0 + ... + q_i`.
pub fn forward_kinematics(model: &ArmModel, q: &[f64]) -> Result<Pose> {
    model.check_q(q)?;
    Ok(fk_unchecked(&model.link_lengths, q))
}

fn fk_unchecked(lengths: &[f64], q: &[f64]) -> Pose {
    let (mut x, mut y, mut theta) = (0.0, 0.0, 0.0);
    for (l, qi) in lengths.iter().zip(q) {
        theta += qi;
        x += l * theta.cos();
        y += l * theta.sin();
    }
    [x, y, theta]
}

/// Analytic `d(x, y, yaw) / dq`, a `3 x J` matrix. The yaw row is all ones.
pub fn jacobian(model: &ArmModel, q: &[f64]) -> Result<Matrix3xX<f64>> {
    model.check_q(q)?;
    Ok(jacobian_unchecked(&model.link_lengths, q))
}

fn jacobian_unchecked(lengths: &[f64], q: &[f64]) -> Matrix3xX<f64> {
    let n = q.len();
    let mut thetas = Vec::with_capacity(n);
    let mut acc = 0.0;
    for qi in q {
        acc += qi;
        thetas.push(acc);
    }
    let mut jac = Matrix3xX::zeros(n);
    // column i collects every link at or beyond joint i
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in (0..n).rev() {
        sx += lengths[i] * thetas[i].cos();
        sy += lengths[i] * thetas[i].sin();
        jac[(0, i)] = -sy;
        jac[(1, i)] = sx;
        jac[(2, i)] = 1.0;
    }
    jac
}

/// Damped least-squares joint step `J^T (J J^T + lambda^2 I)^-1 twist`.
pub fn dls_step(jac: &Matrix3xX<f64>, twist: Vector3<f64>, damping: f64) -> Vec<f64> {
    let gram: Matrix3<f64> = jac * jac.transpose() + Matrix3::identity() * (damping * damping);
    // gram is symmetric positive definite for damping > 0
    let y = gram
        .cholesky()
        .map(|c| c.solve(&twist))
        .unwrap_or_else(Vector3::zeros);
    (jac.transpose() * y).iter().copied().collect()
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// One tick of command: end-effector delta, yaw delta, gripper delta.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub d_ee: [f64; 2],
    pub d_yaw: f64,
    pub d_grip: f64,
}

impl Action {
    pub const DIM: usize = 4;

    pub fn to_array(&self) -> [f64; 4] {
        [self.d_ee[0], self.d_ee[1], self.d_yaw, self.d_grip]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            d_ee: [v[0], v[1]],
            d_yaw: v[2],
            d_grip: v[3],
        }
    }

    pub fn clamped(&self, bounds: &ActionBounds) -> Self {
        let c = |v: f64, b: f64| if v.is_finite() { v.clamp(-b, b) } else { 0.0 };
        Self {
            d_ee: [c(self.d_ee[0], bounds.ee), c(self.d_ee[1], bounds.ee)],
            d_yaw: c(self.d_yaw, bounds.yaw),
            d_grip: c(self.d_grip, bounds.grip),
        }
    }
}

/// Per-tick command bounds, applied per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionBounds {
    pub ee: f64,
    pub yaw: f64,
    pub grip: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self {
            ee: 0.05,
            yaw: 0.2,
            grip: 1.0,
        }
    }
}

/// Axis-aligned spawn rectangle. Degenerate extents are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Region {
    pub fn contains(&self, p: Point) -> bool {
        (self.x.0..=self.x.1).contains(&p[0]) && (self.y.0..=self.y.1).contains(&p[1])
    }

    fn sample(&self, rng: &mut impl Rng) -> Point {
        [draw(self.x, rng), draw(self.y, rng)]
    }
}

fn draw((lo, hi): (f64, f64), rng: &mut impl Rng) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub object: Region,
    pub target: Region,
}

/// Waypoint schedule and planning knobs for the scripted demonstrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    /// Approach height above the object.
    pub hover: f64,
    /// Carry height above the target surface.
    pub lift: f64,
    pub waypoint_tolerance: f64,
    pub dwell_ticks: usize,
    /// Preferred end-effector yaw (hand pointing down).
    pub preferred_yaw: f64,
    /// Candidate yaw goals are `preferred_yaw + k * yaw_step` for `|k| <= yaw_steps`.
    pub yaw_step: f64,
    pub yaw_steps: usize,
    /// Lookahead, in ticks, of each candidate rollout.
    pub planner_horizon: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            hover: 0.08,
            lift: 0.08,
            waypoint_tolerance: 0.02,
            dwell_ticks: 3,
            preferred_yaw: -PI / 2.0,
            yaw_step: 0.15,
            yaw_steps: 6,
            planner_horizon: 200,
        }
    }
}

/// Everything that defines a scene: arm, tasks, thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub arm: ArmModel,
    pub home: Vec<f64>,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub bounds: ActionBounds,
    pub grasp_radius: f64,
    pub success_tolerance: f64,
    pub horizon: usize,
    #[serde(default)]
    pub expert: ExpertConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        default_scene()
    }
}

/// The default desk-scale scene: a 4-joint arm, four pick-and-place tasks.
pub fn default_scene() -> SceneConfig {
    let table = -0.29;
    let region = |lo: f64, hi: f64| Region {
        x: (lo, hi),
        y: (table, table),
    };
    SceneConfig {
        arm: ArmModel {
            link_lengths: vec![0.05, 0.44, 0.45, 0.21],
            nominal_limits: vec![(1.10, 2.04), (-4.87, 0.0), (-3.39, 0.23), (-1.45, 1.45)],
            osc_damping: 0.1,
            max_joint_step: 0.3,
        },
        home: vec![1.57, -0.45, -1.95, -0.75],
        tasks: vec![
            TaskSpec {
                name: "near-to-far".into(),
                object: region(0.35, 0.45),
                target: region(0.60, 0.70),
            },
            TaskSpec {
                name: "far-to-near".into(),
                object: region(0.60, 0.70),
                target: region(0.35, 0.45),
            },
            TaskSpec {
                name: "mid-to-outer".into(),
                object: region(0.45, 0.55),
                target: region(0.65, 0.75),
            },
            TaskSpec {
                name: "outer-to-mid".into(),
                object: region(0.65, 0.75),
                target: region(0.45, 0.55),
            },
        ],
        bounds: ActionBounds::default(),
        grasp_radius: 0.08,
        success_tolerance: 0.05,
        horizon: 300,
        expert: ExpertConfig::default(),
    }
}

impl SceneConfig {
    pub fn joints(&self) -> usize {
        self.arm.joints()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        self.arm.check_q(&self.home)?;
        if self.tasks.is_empty() {
            return Err(Error::Config("scene needs at least one task".into()));
        }
        for t in &self.tasks {
            for r in [t.object, t.target] {
                if r.x.0 > r.x.1 || r.y.0 > r.y.1 {
                    return Err(Error::Config(format!("task {}: empty region", t.name)));
                }
            }
        }
        if !(self.grasp_radius > 0.0) || !(self.success_tolerance >= 0.0) || self.horizon == 0 {
            return Err(Error::Config("grasp_radius, success_tolerance, horizon".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scene: SceneConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn observation_dim(&self) -> usize {
        Observation::feature_dim(self.joints(), self.num_tasks())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub task_id: usize,
    pub q: Vec<f64>,
    /// 0 closed, 1 open.
    pub gripper: f64,
    pub object_pos: Point,
    pub target_pos: Point,
    pub object_attached: bool,
    pub tick: usize,
}

/// What a policy sees. `proprio` repeats `ee_pose` and `gripper`; it is the
/// slot health features are fused into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub joint_sin_cos: Vec<f64>,
    pub ee_pose: Pose,
    pub gripper: f64,
    pub object_pos: Point,
    pub target_pos: Point,
    pub task_onehot: Vec<f64>,
    pub proprio: [f64; 4],
}

impl Observation {
    pub const PROPRIO_DIM: usize = 4;

    pub fn feature_dim(joints: usize, tasks: usize) -> usize {
        2 * joints + 3 + 1 + 2 + 2 + 4 + tasks
    }

    /// Flat non-proprio feature vector: joint sin/cos, ee pose, gripper, object,
    /// target, object - ee, target - ee, task one-hot.
    pub fn features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.joint_sin_cos.len() + 12 + self.task_onehot.len());
        v.extend_from_slice(&self.joint_sin_cos);
        v.extend_from_slice(&self.ee_pose);
        v.push(self.gripper);
        v.extend_from_slice(&self.object_pos);
        v.extend_from_slice(&self.target_pos);
        for p in [self.object_pos, self.target_pos] {
            v.push(p[0] - self.ee_pose[0]);
            v.push(p[1] - self.ee_pose[1]);
        }
        v.extend_from_slice(&self.task_onehot);
        v
    }

    pub fn task_id(&self) -> usize {
        self.task_onehot
            .iter()
            .position(|&v| v != 0.0)
            .unwrap_or_default()
    }
}

/// Simulator bound to one scene.
#[derive(Debug, Clone)]
pub struct Sim {
    scene: SceneConfig,
}

impl Sim {
    pub fn new(scene: SceneConfig) -> Result<Self> {
        scene.validate()?;
        Ok(Self { scene })
    }

    pub fn scene(&self) -> &SceneConfig {
        &self.scene
    }

    pub fn model(&self) -> &ArmModel {
        &self.scene.arm
    }

    pub fn joints(&self) -> usize {
        self.scene.joints()
    }

    /// Deterministic in `(task_id, seed)`. The home pose is clamped into the
    /// degraded joint range so the state starts valid.
    pub fn reset(&self, task_id: usize, seed: u64, health: &HealthVector) -> Result<ArmState> {
        let task = self.scene.tasks.get(task_id).ok_or(Error::UnknownTask {
            task: task_id,
            tasks: self.scene.tasks.len(),
        })?;
        let limits = self.scene.arm.limits(health)?;
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(task_id, seed));
        let object_pos = task.object.sample(&mut rng);
        let target_pos = task.target.sample(&mut rng);
        let q = self
            .scene
            .home
            .iter()
            .zip(&limits)
            .map(|(&q, &(lo, hi))| q.clamp(lo, hi))
            .collect();
        Ok(ArmState {
            task_id,
            q,
            gripper: 1.0,
            object_pos,
            target_pos,
            object_attached: false,
            tick: 0,
        })
    }

    pub fn ee_pose(&self, state: &ArmState) -> Pose {
        fk_unchecked(&self.scene.arm.link_lengths, &state.q)
    }

    /// Operational-space step under degradation.
    pub fn step(&self, state: &ArmState, action: &Action, health: &HealthVector) -> Result<ArmState> {
        health.check_len(self.joints())?;
        self.scene.arm.check_q(&state.q)?;
        let limits = self.scene.arm.limits(health)?;
        let dq = self.commanded_joint_step(state, action);
        let mut q = state.q.clone();
        for j in 0..q.len() {
            let step = apply_gain(health.get(j), dq[j])?;
            let (lo, hi) = limits[j];
            q[j] = (q[j] + step).clamp(lo, hi);
        }
        Ok(self.finish_step(state, action, q))
    }

    /// The same step with no degradation code path at all: nominal limits, full gain.
    pub fn step_nominal(&self, state: &ArmState, action: &Action) -> Result<ArmState> {
        self.scene.arm.check_q(&state.q)?;
        let dq = self.commanded_joint_step(state, action);
        let q = state
            .q
            .iter()
            .zip(&dq)
            .zip(&self.scene.arm.nominal_limits)
            .map(|((&q, &d), &(lo, hi))| (q + d).clamp(lo, hi))
            .collect();
        Ok(self.finish_step(state, action, q))
    }

    /// DLS joint step for a (bounded) action, capped per joint.
    fn commanded_joint_step(&self, state: &ArmState, action: &Action) -> Vec<f64> {
        let a = action.clamped(&self.scene.bounds);
        let arm = &self.scene.arm;
        let jac = jacobian_unchecked(&arm.link_lengths, &state.q);
        let twist = Vector3::new(a.d_ee[0], a.d_ee[1], a.d_yaw);
        let cap = arm.max_joint_step;
        dls_step(&jac, twist, arm.osc_damping)
            .into_iter()
            .map(|d| d.clamp(-cap, cap))
            .collect()
    }

    fn finish_step(&self, state: &ArmState, action: &Action, q: Vec<f64>) -> ArmState {
        let a = action.clamped(&self.scene.bounds);
        let gripper = (state.gripper + a.d_grip).clamp(0.0, 1.0);
        let pose = fk_unchecked(&self.scene.arm.link_lengths, &q);
        let ee = [pose[0], pose[1]];
        let mut attached = state.object_attached;
        if !attached && gripper < 0.5 && dist(ee, state.object_pos) <= self.scene.grasp_radius {
            attached = true;
        } else if attached && gripper >= 0.5 {
            attached = false;
        }
        let object_pos = if attached { ee } else { state.object_pos };
        ArmState {
            task_id: state.task_id,
            q,
            gripper,
            object_pos,
            target_pos: state.target_pos,
            object_attached: attached,
            tick: state.tick + 1,
        }
    }

    pub fn is_success(&self, state: &ArmState) -> bool {
        is_success(state, self.scene.success_tolerance)
    }

    pub fn observe(&self, state: &ArmState) -> Observation {
        let pose = self.ee_pose(state);
        let mut joint_sin_cos = Vec::with_capacity(2 * state.q.len());
        for q in &state.q {
            joint_sin_cos.push(q.sin());
            joint_sin_cos.push(q.cos());
        }
        let mut task_onehot = vec![0.0; self.scene.num_tasks()];
        task_onehot[state.task_id] = 1.0;
        Observation {
            joint_sin_cos,
            ee_pose: pose,
            gripper: state.gripper,
            object_pos: state.object_pos,
            target_pos: state.target_pos,
            task_onehot,
            proprio: [pose[0], pose[1], pose[2], state.gripper],
        }
    }
}

/// Released, gripper open, object within `tolerance` (inclusive) of the target.
pub fn is_success(state: &ArmState, tolerance: f64) -> bool {
    !state.object_attached
        && state.gripper >= 0.5
        && dist(state.object_pos, state.target_pos) <= tolerance
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn scene_seed(task_id: usize, seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (task_id as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_link() -> ArmModel {
        ArmModel {
            link_lengths: vec![1.0, 1.0],
            nominal_limits: vec![(-PI, PI), (-PI, PI)],
            osc_damping: 0.1,
            max_joint_step: 0.3,
        }
    }

    #[test]
    fn fk_simple_chains() {
        let m = two_link();
        let p = forward_kinematics(&m, &[0.0, 0.0]).unwrap();
        assert_eq!(p, [2.0, 0.0, 0.0]);
        let p = forward_kinematics(&m, &[PI / 2.0, 0.0]).unwrap();
        assert!(p[0].abs() < 1e-12 && (p[1] - 2.0).abs() < 1e-12 && (p[2] - PI / 2.0).abs() < 1e-12);
        assert!(forward_kinematics(&m, &[0.0]).is_err());
    }

    #[test]
    fn jacobian_at_zero() {
        let j = jacobian(&two_link(), &[0.0, 0.0]).unwrap();
        let expected = [[0.0, 0.0], [2.0, 1.0], [1.0, 1.0]];
        for r in 0..3 {
            for c in 0..2 {
                assert!((j[(r, c)] - expected[r][c]).abs() < 1e-15);
            }
        }
        assert!(jacobian(&two_link(), &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn success_predicate() {
        let mut s = ArmState {
            task_id: 0,
            q: vec![0.0; 4],
            gripper: 1.0,
            object_pos: [0.5, -0.29],
            target_pos: [0.5, -0.29],
            object_attached: false,
            tick: 0,
        };
        assert!(is_success(&s, 0.05));
        s.object_attached = true;
        assert!(!is_success(&s, 0.05));
        s.object_attached = false;
        s.object_pos = [0.5 + 0.05, -0.29];
        s.target_pos = [0.5, -0.29];
        // exactly on the boundary: inclusive
        let d = dist(s.object_pos, s.target_pos);
        assert!(is_success(&s, d));
        s.gripper = 0.4;
        assert!(!is_success(&s, 1.0));
    }

    #[test]
    fn reset_is_deterministic_and_bounded() {
        let sim = Sim::new(default_scene()).unwrap();
        let h = HealthVector::healthy(4);
        assert_eq!(sim.reset(2, 9, &h).unwrap(), sim.reset(2, 9, &h).unwrap());
        assert!(matches!(
            sim.reset(4, 0, &h),
            Err(Error::UnknownTask { task: 4, tasks: 4 })
        ));
    }

    #[test]
    fn zero_action_only_ticks() {
        let sim = Sim::new(default_scene()).unwrap();
        let h = HealthVector::healthy(4);
        let s0 = sim.reset(0, 1, &h).unwrap();
        let s1 = sim.step(&s0, &Action::default(), &h).unwrap();
        assert_eq!(s1.q, s0.q);
        assert_eq!(s1.gripper, s0.gripper);
        assert_eq!(s1.object_pos, s0.object_pos);
        assert_eq!(s1.tick, s0.tick + 1);
    }

    #[test]
    fn locked_arm_never_moves() {
        let sim = Sim::new(default_scene()).unwrap();
        let h = HealthVector::new(vec![0.0; 4]).unwrap();
        let mut s = sim.reset(1, 3, &h).unwrap();
        let q0 = s.q.clone();
        let a = Action {
            d_ee: [0.05, -0.05],
            d_yaw: 0.2,
            d_grip: -1.0,
        };
        for _ in 0..20 {
            s = sim.step(&s, &a, &h).unwrap();
        }
        assert_eq!(s.q, q0);
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -PI, -1.0, 0.0, 1.0, PI, 7.5] {
            let w = wrap_angle(a);
            assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
            assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn scene_json_round_trip() {
        let scene = default_scene();
        let text = serde_json::to_string(&scene).unwrap();
        let back: SceneConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, scene);
        assert!(serde_json::from_str::<SceneConfig>(&text.replacen("\"horizon\"", "\"horizen\"", 1)).is_err());
    }
}
