//! Python bindings: simulator, degradation, expert rollouts, episodes,
//! normalization stats and policies.

use std::collections::BTreeMap;
use std::path::PathBuf;

use faultarm::episode::{self, Episode};
use faultarm::expert::run_expert_episode;
use faultarm::norm::{compute_norm_stats, quantile};
use faultarm::policy::count_parameters;
use faultarm::sim::default_scene;
use faultarm::{
    Action, ArmState, Checkpoint, DegradationConfig, HealthVector, NormStats, Policy, PolicyConfig,
    PolicyMode, SceneConfig, Sim,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: faultarm::Error) -> PyErr {
    match e {
        faultarm::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn degradation(weakness: Option<BTreeMap<usize, f64>>) -> DegradationConfig {
    DegradationConfig {
        weakness: weakness.unwrap_or_default(),
    }
}

fn action(values: [f64; 4]) -> Action {
    Action::from_slice(&values)
}

/// Health vector `h`, one value in [0, 1] per joint.
#[pyfunction]
fn health_from_weakness(joints: usize, weakness: BTreeMap<usize, f64>) -> PyResult<Vec<f64>> {
    let h = degradation(Some(weakness)).to_health_vector(joints).map_err(err)?;
    Ok(h.as_slice().to_vec())
}

/// Linear-interpolation quantile.
#[pyfunction(name = "quantile")]
fn py_quantile(values: Vec<f64>, q: f64) -> PyResult<f64> {
    if values.is_empty() {
        return Err(PyValueError::new_err("quantile of an empty sample"));
    }
    Ok(quantile(&values, q))
}

#[pyclass(name = "ArmState", from_py_object)]
#[derive(Clone)]
struct PyArmState(ArmState);

#[pymethods]
impl PyArmState {
    #[getter]
    fn q(&self) -> Vec<f64> {
        self.0.q.clone()
    }
    #[getter]
    fn task_id(&self) -> usize {
        self.0.task_id
    }
    #[getter]
    fn tick(&self) -> usize {
        self.0.tick
    }
    #[getter]
    fn gripper(&self) -> f64 {
        self.0.gripper
    }
    #[getter]
    fn object_pos(&self) -> [f64; 2] {
        self.0.object_pos
    }
    #[getter]
    fn target_pos(&self) -> [f64; 2] {
        self.0.target_pos
    }
    #[getter]
    fn attached(&self) -> bool {
        self.0.object_attached
    }
    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("state serializes")
    }
    fn __repr__(&self) -> String {
        format!("ArmState(task={}, tick={}, q={:?})", self.0.task_id, self.0.tick, self.0.q)
    }
}

#[pyclass(name = "Sim")]
struct PySim(Sim);

impl PySim {
    fn health(&self, health: Option<Vec<f64>>) -> PyResult<HealthVector> {
        match health {
            Some(h) if h.len() != self.0.joints() => Err(PyValueError::new_err(format!(
                "health has {} values for a {}-joint arm",
                h.len(),
                self.0.joints()
            ))),
            Some(h) => HealthVector::new(h).map_err(err),
            None => Ok(HealthVector::healthy(self.0.joints())),
        }
    }
}

#[pymethods]
impl PySim {
    /// Built-in desk scene, or a scene JSON file.
    #[new]
    #[pyo3(signature = (scene_path=None))]
    fn new(scene_path: Option<PathBuf>) -> PyResult<Self> {
        let scene = match scene_path {
            Some(p) => SceneConfig::load(&p).map_err(err)?,
            None => default_scene(),
        };
        Ok(Self(Sim::new(scene).map_err(err)?))
    }
    #[getter]
    fn joints(&self) -> usize {
        self.0.joints()
    }
    #[getter]
    fn num_tasks(&self) -> usize {
        self.0.scene().num_tasks()
    }
    #[getter]
    fn horizon(&self) -> usize {
        self.0.scene().horizon
    }
    #[getter]
    fn observation_dim(&self) -> usize {
        self.0.scene().observation_dim()
    }
    #[pyo3(signature = (task_id, seed, health=None))]
    fn reset(&self, task_id: usize, seed: u64, health: Option<Vec<f64>>) -> PyResult<PyArmState> {
        let h = self.health(health)?;
        Ok(PyArmState(self.0.reset(task_id, seed, &h).map_err(err)?))
    }
    /// `action` is `[dx, dy, dyaw, dgrip]`.
    #[pyo3(signature = (state, action, health=None))]
    fn step(&self, state: &PyArmState, action: [f64; 4], health: Option<Vec<f64>>) -> PyResult<PyArmState> {
        let h = self.health(health)?;
        let next = self.0.step(&state.0, &self::action(action), &h).map_err(err)?;
        Ok(PyArmState(next))
    }
    fn is_success(&self, state: &PyArmState) -> bool {
        self.0.is_success(&state.0)
    }
    fn ee_pose(&self, state: &PyArmState) -> [f64; 3] {
        self.0.ee_pose(&state.0)
    }
    /// `(features, proprio)` as fed to a policy.
    fn observe(&self, state: &PyArmState) -> (Vec<f64>, Vec<f64>) {
        let obs = self.0.observe(&state.0);
        (obs.features(), obs.proprio.to_vec())
    }
    /// Joint ranges after degradation.
    #[pyo3(signature = (health=None))]
    fn limits(&self, health: Option<Vec<f64>>) -> PyResult<Vec<(f64, f64)>> {
        let h = self.health(health)?;
        self.0.model().limits(&h).map_err(err)
    }
}

#[pyclass(name = "Episode")]
struct PyEpisode(Episode);

#[pymethods]
impl PyEpisode {
    #[getter]
    fn task_id(&self) -> usize {
        self.0.meta.task_id
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.0.meta.seed
    }
    #[getter]
    fn success(&self) -> bool {
        self.0.meta.success
    }
    #[getter]
    fn weakness(&self) -> BTreeMap<usize, f64> {
        self.0.meta.degradation.weakness.clone()
    }
    #[getter]
    fn actions(&self) -> Vec<[f64; 4]> {
        self.0.steps.iter().map(|s| s.action.to_array()).collect()
    }
    fn __len__(&self) -> usize {
        self.0.len()
    }
    /// Re-simulates the actions and reports whether the episode succeeds.
    fn replay(&self, sim: &PySim) -> PyResult<bool> {
        self.0.replay(&sim.0).map_err(err)
    }
}

/// Runs the scripted expert once under `weakness` (joint -> w).
#[pyfunction]
#[pyo3(signature = (sim, task_id, seed, weakness=None))]
fn expert_episode(
    sim: &PySim,
    task_id: usize,
    seed: u64,
    weakness: Option<BTreeMap<usize, f64>>,
) -> PyResult<PyEpisode> {
    let ep = run_expert_episode(&sim.0, task_id, seed, &degradation(weakness), None).map_err(err)?;
    Ok(PyEpisode(ep))
}

#[pyfunction]
fn load_episodes(path: PathBuf) -> PyResult<Vec<PyEpisode>> {
    Ok(episode::load_dir(&path).map_err(err)?.into_iter().map(PyEpisode).collect())
}

#[pyfunction]
fn save_episodes(episodes: Vec<PyRef<'_, PyEpisode>>, path: PathBuf, sim: &PySim) -> PyResult<()> {
    let eps: Vec<Episode> = episodes.iter().map(|e| e.0.clone()).collect();
    episode::save(&eps, &path, sim.0.joints(), sim.0.scene().num_tasks()).map_err(err)
}

#[pyclass(name = "NormStats")]
struct PyNormStats(NormStats);

#[pymethods]
impl PyNormStats {
    /// Stats over every action in `episodes`.
    #[staticmethod]
    #[pyo3(signature = (episodes, low=0.01, high=0.99))]
    fn fit(episodes: Vec<PyRef<'_, PyEpisode>>, low: f64, high: f64) -> PyResult<Self> {
        let eps: Vec<Episode> = episodes.iter().map(|e| e.0.clone()).collect();
        Ok(Self(compute_norm_stats(&eps, low, high).map_err(err)?))
    }
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(NormStats::load(&path).map_err(err)?))
    }
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }
    #[getter]
    fn q_low(&self) -> Vec<f64> {
        self.0.q_low.clone()
    }
    #[getter]
    fn q_high(&self) -> Vec<f64> {
        self.0.q_high.clone()
    }
    fn normalize(&self, a: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(&a)?;
        Ok(self.0.normalize(&a))
    }
    fn denormalize(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(&z)?;
        Ok(self.0.denormalize(&z))
    }
}

impl PyNormStats {
    fn check(&self, v: &[f64]) -> PyResult<()> {
        if v.len() != self.0.dim() {
            return Err(PyValueError::new_err(format!(
                "expected {} values, got {}",
                self.0.dim(),
                v.len()
            )));
        }
        Ok(())
    }
}

#[pyclass(name = "Policy")]
struct PyPolicy {
    policy: Policy,
    mode: PolicyMode,
}

#[pymethods]
impl PyPolicy {
    /// Fresh desk-scale policy for `sim`. `mode` is baseline, health or frozen-trunk.
    #[new]
    #[pyo3(signature = (sim, mode="health", seed=0))]
    fn new(sim: &PySim, mode: &str, seed: u64) -> PyResult<Self> {
        let mode: PolicyMode = mode.parse().map_err(err)?;
        let config = PolicyConfig::desk(sim.0.scene().observation_dim(), sim.0.joints());
        Ok(Self {
            policy: Policy::new(config, mode, seed),
            mode,
        })
    }
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            policy: ckpt.to_policy().map_err(err)?,
            mode: ckpt.mode,
        })
    }
    /// Same weights plus a fresh zero-output health projector.
    fn with_projector(&self, seed: u64) -> PyResult<Self> {
        if self.policy.projector.is_some() {
            return Err(PyValueError::new_err("policy already has a projector"));
        }
        Ok(Self {
            policy: self.policy.clone().with_projector(seed),
            mode: PolicyMode::Health,
        })
    }
    #[getter]
    fn mode(&self) -> String {
        self.mode.to_string()
    }
    /// Flat normalized chunk of `chunk * action_dim` values.
    fn forward(&self, obs: Vec<f64>, proprio: Vec<f64>, health: Vec<f64>) -> PyResult<Vec<f64>> {
        self.policy.forward(&obs, &proprio, &health).map_err(err)
    }
    fn parameter_counts(&self) -> BTreeMap<&'static str, usize> {
        let c = count_parameters(&self.policy);
        BTreeMap::from([
            ("obs_embed", c.obs_embed),
            ("proprio_embed", c.proprio_embed),
            ("query", c.query),
            ("trunk", c.trunk),
            ("head", c.head),
            ("projector", c.projector),
            ("total", c.total),
        ])
    }
    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_policy(&self.policy, self.mode, 0).save(&path).map_err(err)
    }
}

#[pymodule]
fn faultarm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySim>()?;
    m.add_class::<PyArmState>()?;
    m.add_class::<PyEpisode>()?;
    m.add_class::<PyNormStats>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(health_from_weakness, m)?)?;
    m.add_function(wrap_pyfunction!(py_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(expert_episode, m)?)?;
    m.add_function(wrap_pyfunction!(load_episodes, m)?)?;
    m.add_function(wrap_pyfunction!(save_episodes, m)?)?;
    Ok(())
}
