//! Python bindings: the batched environment, trained-policy inference,
//! training/evaluation entry points, and the thrust-stand fit.
//!
//! Build with `cargo build -p vpp-py --release`; the resulting
//! `libvpp_py.so` imports as `vpp_py` once renamed/copied onto the Python
//! path (see `python/smoke_test.py`, which does this automatically).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vpp_core::actuator::{fit_thrust_coeffs, BenchSample};
use vpp_core::config::{Overrides, ResolvedConfig};
use vpp_core::env::{
    DifficultyProfile, EnvConfig, EnvMode, EpisodeOutcome, ObsLayout, TaskName, VecEnv,
};
use vpp_core::learner::{evaluate_policy, train as train_impl, Checkpoint};

fn parse_task(s: &str) -> PyResult<TaskName> {
    s.parse().map_err(PyValueError::new_err)
}

fn parse_setup(s: &str) -> PyResult<ObsLayout> {
    s.parse().map_err(PyValueError::new_err)
}

fn profile_from(name: &str) -> PyResult<DifficultyProfile> {
    match name {
        "nominal" => Ok(DifficultyProfile::eval_nominal()),
        "randomized" => Ok(DifficultyProfile::eval_randomized()),
        "trim" => Ok(DifficultyProfile::trim_start()),
        other => Err(PyValueError::new_err(format!(
            "unknown profile '{other}' (expected nominal, randomized, or trim)"
        ))),
    }
}

fn outcome_dict<'py>(py: Python<'py>, o: &EpisodeOutcome) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("env", o.env)?;
    d.set_item("steps", o.steps)?;
    d.set_item("ep_return", o.ep_return)?;
    d.set_item("crashed", o.crashed)?;
    d.set_item("success", o.success)?;
    d.set_item("timeout", o.timeout)?;
    d.set_item("final_pos_err", o.final_pos_err)?;
    d.set_item("final_ang_err", o.final_ang_err)?;
    d.set_item("upright_pos_err", o.upright_pos_err)?;
    Ok(d)
}

fn chunk(flat: Vec<f64>, dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(dim).map(|c| c.to_vec()).collect()
}

/// Batched training environment over the full control cascade.
#[pyclass(name = "Env")]
struct PyEnv {
    inner: VecEnv,
}

#[pymethods]
impl PyEnv {
    /// Env(task, setup, n_envs=1, seed=0, deployment=False)
    #[new]
    #[pyo3(signature = (task, setup, n_envs = 1, seed = 0, deployment = false))]
    fn new(task: &str, setup: &str, n_envs: usize, seed: u64, deployment: bool) -> PyResult<Self> {
        let mut cfg = EnvConfig::new(parse_task(task)?, parse_setup(setup)?, n_envs, seed);
        if deployment {
            cfg.mode = EnvMode::Deployment;
        }
        let inner = VecEnv::new(cfg).map_err(PyValueError::new_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_envs(&self) -> usize {
        self.inner.n_envs()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    /// Scale the randomization dials; `level` drives success relaxation.
    #[pyo3(signature = (params, init, noise, level))]
    fn set_difficulty(&mut self, params: f64, init: f64, noise: f64, level: f64) {
        self.inner.set_difficulty(DifficultyProfile {
            params,
            init,
            noise,
            level,
        });
    }

    /// Reset all environments; returns (obs, obs_clean) as per-env lists.
    fn reset(&mut self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let dim = self.inner.obs_dim();
        let (obs, clean) = self.inner.reset();
        (chunk(obs, dim), chunk(clean, dim))
    }

    /// Step every environment with one `[thrust, rate]` action each
    /// (normalized to [-1, 1]). Returns a dict with obs, obs_clean,
    /// rewards, dones, crashed, and finished-episode outcome dicts.
    fn step<'py>(
        &mut self,
        py: Python<'py>,
        actions: Vec<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        if actions.len() != self.inner.n_envs() {
            return Err(PyValueError::new_err(format!(
                "expected {} actions, got {}",
                self.inner.n_envs(),
                actions.len()
            )));
        }
        let mut flat = Vec::with_capacity(2 * actions.len());
        for a in &actions {
            if a.len() != 2 {
                return Err(PyValueError::new_err("each action must have 2 entries"));
            }
            flat.extend_from_slice(a);
        }
        let r = self.inner.step(&flat).map_err(PyRuntimeError::new_err)?;
        let dim = self.inner.obs_dim();
        let d = PyDict::new(py);
        d.set_item("obs", chunk(r.obs, dim))?;
        d.set_item("obs_clean", chunk(r.obs_clean, dim))?;
        d.set_item("rewards", r.rewards)?;
        d.set_item("dones", r.dones)?;
        d.set_item("crashed", r.crashed)?;
        let outcomes: Vec<Bound<'py, PyDict>> = r
            .outcomes
            .iter()
            .map(|o| outcome_dict(py, o))
            .collect::<PyResult<_>>()?;
        d.set_item("outcomes", outcomes)?;
        Ok(d)
    }

    /// The open-loop action that balances gravity exactly.
    fn hover_action(&self) -> (f64, f64) {
        let a = self.inner.hover_action();
        (a[0], a[1])
    }

    /// Privileged rigid-body state of one environment.
    fn true_state<'py>(&self, py: Python<'py>, env: usize) -> PyResult<Bound<'py, PyDict>> {
        if env >= self.inner.n_envs() {
            return Err(PyValueError::new_err("environment index out of range"));
        }
        let s = self.inner.true_state(env);
        let d = PyDict::new(py);
        d.set_item("px", s.p[0])?;
        d.set_item("py", s.p[1])?;
        d.set_item("vx", s.v[0])?;
        d.set_item("vy", s.v[1])?;
        d.set_item("theta", s.theta)?;
        d.set_item("q", s.q)?;
        Ok(d)
    }
}

/// A trained policy loaded from a checkpoint; inference only.
#[pyclass(name = "Policy")]
struct PyPolicy {
    ckpt: Checkpoint,
}

#[pymethods]
impl PyPolicy {
    /// Load a `.ckpt` file written by training.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(path).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { ckpt })
    }

    #[getter]
    fn setup(&self) -> String {
        self.ckpt.layout.to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.ckpt.seed
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.ckpt.actor.obs_dim()
    }

    /// Deterministic action (the policy mean) for one observation.
    fn act(&self, obs: Vec<f64>) -> PyResult<(f64, f64)> {
        if obs.len() != self.ckpt.actor.obs_dim() {
            return Err(PyValueError::new_err(format!(
                "expected {} observation entries, got {}",
                self.ckpt.actor.obs_dim(),
                obs.len()
            )));
        }
        let a = self.ckpt.actor.act_mean(&obs);
        Ok((a[0], a[1]))
    }
}

/// Train a policy; returns a summary dict with the artifact paths.
#[pyfunction]
#[pyo3(signature = (out_dir, task = "hover", setup = "All", seed = 0, envs = 256, iterations = 100, deployment = false))]
fn train<'py>(
    py: Python<'py>,
    out_dir: &str,
    task: &str,
    setup: &str,
    seed: u64,
    envs: usize,
    iterations: usize,
    deployment: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let ov = Overrides {
        task: Some(parse_task(task)?),
        setup: Some(parse_setup(setup)?),
        seed: Some(seed),
        envs: Some(envs),
        epochs: Some(iterations),
        deployment_mode: deployment,
        out: Some(out_dir.into()),
        ..Overrides::default()
    };
    let cfg = ResolvedConfig::load(None, &ov).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.write_snapshot(&cfg.run.out_dir)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let tc = cfg
        .train_config()
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let result = py
        .detach(|| train_impl(&tc, |_| {}))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let last = result.curves.last().expect("at least one iteration");
    let d = PyDict::new(py);
    d.set_item("checkpoint", cfg.run.out_dir.join("checkpoint.ckpt"))?;
    d.set_item("curves", cfg.run.out_dir.join("curves.csv"))?;
    d.set_item("iterations", result.curves.len())?;
    d.set_item("final_mean_reward", last.mean_reward)?;
    Ok(d)
}

/// Evaluate a checkpoint (or the analytic hover action when `checkpoint`
/// is None) and return the aggregate metrics.
#[pyfunction]
#[pyo3(signature = (checkpoint = None, task = "hover", episodes = 100, seed = 0, profile = "nominal", deployment = false))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: Option<&str>,
    task: &str,
    episodes: usize,
    seed: u64,
    profile: &str,
    deployment: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let ckpt = match checkpoint {
        Some(p) => Some(Checkpoint::load(p).map_err(|e| PyValueError::new_err(e.to_string()))?),
        None => None,
    };
    let layout = ckpt.as_ref().map(|c| c.layout).unwrap_or(ObsLayout::All);
    let mut cfg = EnvConfig::new(parse_task(task)?, layout, episodes, seed);
    if deployment {
        cfg.mode = EnvMode::Deployment;
    }
    let difficulty = profile_from(profile)?;
    let actor = ckpt.as_ref().map(|c| &c.actor);
    let report = py
        .detach(|| evaluate_policy(actor, &cfg, difficulty, episodes, seed))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("success_rate", report.success_rate)?;
    d.set_item("crash_rate", report.crash_rate)?;
    d.set_item("mean_final_pos_err", report.mean_final_pos_err)?;
    d.set_item("mean_final_ang_err", report.mean_final_ang_err)?;
    d.set_item("mean_upright_pos_err", report.mean_upright_pos_err)?;
    d.set_item("mean_step_reward", report.mean_step_reward)?;
    d.set_item("mean_return", report.mean_return)?;
    d.set_item("mean_ep_len", report.mean_ep_len)?;
    d.set_item("episodes", report.episodes.len())?;
    Ok(d)
}

/// Fit thrust/drag/pitch-estimator coefficients from bench samples given
/// as (omega_rpm, alpha_rad, thrust_n, current_a) tuples.
#[pyfunction]
fn fit_thrust<'py>(
    py: Python<'py>,
    samples: Vec<(f64, f64, f64, f64)>,
) -> PyResult<Bound<'py, PyDict>> {
    let rows: Vec<BenchSample> = samples
        .iter()
        .map(|&(omega_rpm, alpha_rad, thrust_n, current_a)| BenchSample {
            omega_rpm,
            alpha_rad,
            thrust_n,
            current_a,
        })
        .collect();
    let motor = vpp_core::actuator::MotorModel::default();
    let policy = vpp_core::actuator::RpmPolicy::default();
    let fit =
        fit_thrust_coeffs(&rows, &motor, &policy).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("k_t", fit.k_t)?;
    d.set_item("k_d1", fit.k_d1)?;
    d.set_item("k_d2", fit.k_d2)?;
    d.set_item("k_d3", fit.k_d3)?;
    d.set_item("g0", fit.estimator.g0)?;
    d.set_item("g1", fit.estimator.g1)?;
    d.set_item("g2", fit.estimator.g2)?;
    d.set_item("thrust_rms", fit.thrust_rms)?;
    d.set_item("estimator_rms", fit.estimator_rms)?;
    Ok(d)
}

/// Wrap an angle to (-pi, pi].
#[pyfunction]
fn wrap_angle(x: f64) -> f64 {
    vpp_core::wrap_angle(x)
}

#[pymodule]
fn vpp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnv>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_thrust, m)?)?;
    m.add_function(wrap_pyfunction!(wrap_angle, m)?)?;
    Ok(())
}
