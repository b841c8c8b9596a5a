//! Python bindings: poses, the filter update, configs, training, evaluation
//! and checkpoints.

use std::collections::BTreeMap;
use std::path::PathBuf;

use dmn_core::cli::{checkpoint_config, load_checkpoint, RunConfig};
use dmn_core::envgen::{write_dataset, Dataset, DatasetHeader, Style};
use dmn_core::evaluation::{self, run_eval, EvalMode, SUCCESS_THRESHOLD_M};
use dmn_core::filter::{self, ParticleBelief};
use dmn_core::geometry::{self, Egomotion, EnvironmentExtent, PlanarPose};
use dmn_core::gradcheck::{gradcheck as core_gradcheck, passed, GradcheckConfig};
use dmn_core::model::{init_parameters, ModelConfig};
use dmn_core::tensor::{write_checkpoint, ParameterStore};
use dmn_core::training::{episode_for, train_from};
use dmn_core::{rng, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type CurveRows = Vec<(usize, f64, Option<f64>)>;
type GradRows = Vec<(String, usize, f64)>;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Incompatible(_) | Error::Invalid(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn run_config(cfg: Option<BTreeMap<String, String>>) -> PyResult<RunConfig> {
    let mut run = RunConfig::default();
    for (k, v) in cfg.unwrap_or_default() {
        run.set(&k, &v).map_err(err)?;
    }
    Ok(run)
}

/// Planar pose; x and y in normalized units, yaw in radians.
#[pyclass(name = "Pose", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct Pose(PlanarPose);

#[pymethods]
impl Pose {
    #[new]
    fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose(PlanarPose::new(x, y, yaw))
    }
    #[getter]
    fn x(&self) -> f64 {
        self.0.x
    }
    #[getter]
    fn y(&self) -> f64 {
        self.0.y
    }
    #[getter]
    fn yaw(&self) -> f64 {
        self.0.yaw
    }
    /// This pose expressed in the frame of `origin`.
    fn egocentric(&self, origin: &Pose) -> Pose {
        Pose(self.0.egocentric(&origin.0))
    }
    /// Applies a motion `(dx, dy, dyaw)` given in this pose's frame.
    fn compose(&self, motion: (f64, f64, f64)) -> Pose {
        Pose(self.0.compose(&Egomotion { dx: motion.0, dy: motion.1, dyaw: motion.2 }))
    }
    fn compose_pose(&self, other: &Pose) -> Pose {
        Pose(self.0.compose_pose(&other.0))
    }
    // pymethods take `&self`
    #[allow(clippy::wrong_self_convention)]
    fn to_tuple(&self) -> (f64, f64, f64) {
        (self.0.x, self.0.y, self.0.yaw)
    }
    fn __repr__(&self) -> String {
        format!("Pose({}, {}, {})", self.0.x, self.0.y, self.0.yaw)
    }
}

#[pyfunction]
fn wrap_angle(a: f64) -> f64 {
    geometry::wrap_angle(a)
}

/// Planar error in meters between normalized poses.
#[pyfunction]
#[pyo3(signature = (estimate, truth, half_width=20.0))]
fn rmse_xy(estimate: &Pose, truth: &Pose, half_width: f64) -> PyResult<f64> {
    let e = EnvironmentExtent::new(half_width).ok_or_else(|| PyValueError::new_err("half_width must be positive"))?;
    Ok(evaluation::rmse_xy(&estimate.0, &truth.0, &e))
}

#[pyfunction]
#[pyo3(signature = (errors_m, threshold_m=SUCCESS_THRESHOLD_M))]
fn success_rate(errors_m: Vec<f64>, threshold_m: f64) -> PyResult<f64> {
    evaluation::success_rate(&errors_m, threshold_m).map_err(err)
}

/// Posterior log-weights `lw + l - logsumexp(lw + l)`.
#[pyfunction]
fn measurement_update(log_weights: Vec<f64>, loglik: Vec<f64>) -> PyResult<Vec<f64>> {
    let b = ParticleBelief { particles: vec![PlanarPose::origin(); log_weights.len()], log_weights };
    Ok(filter::measurement_update(&b, &loglik).map_err(err)?.log_weights)
}

/// Weighted-mean pose of weighted particles (circular mean for yaw).
#[pyfunction]
fn estimate(particles: Vec<Pose>, log_weights: Vec<f64>) -> PyResult<Pose> {
    let b = ParticleBelief { particles: particles.iter().map(|p| p.0).collect(), log_weights };
    filter::estimate(&b).map(Pose).map_err(err)
}

/// Default run configuration as key/value strings.
#[pyfunction]
fn default_config() -> BTreeMap<String, String> {
    RunConfig::default().pairs().into_iter().collect()
}

/// Writes `count` procedural episodes to a dataset file.
#[pyfunction]
#[pyo3(signature = (seed, count, path, config=None))]
fn generate(py: Python<'_>, seed: u64, count: usize, path: PathBuf, config: Option<BTreeMap<String, String>>) -> PyResult<()> {
    let run = run_config(config)?;
    py.detach(|| -> dmn_core::Result<()> {
        let source = dmn_core::envgen::EpisodeSource::procedural(run.world()?, run.style()?, run.episode_config(run.parse("contexts")?, run.parse("queries")?)?);
        let episodes = (0..count).map(|j| episode_for(&source, rng::derive_seed(seed, &[j as u64]))).collect::<dmn_core::Result<Vec<_>>>()?;
        let style: Style = run.style()?;
        let header = DatasetHeader { image: source.episode.image, contexts: source.episode.contexts, queries: source.episode.queries, extent: run.extent()?, style };
        write_dataset(&Dataset { header, episodes }, &path)
    })
    .map_err(err)
}

/// A model configuration with its parameters.
#[pyclass(name = "Model")]
struct Model {
    run: RunConfig,
    model: ModelConfig,
    params: ParameterStore,
}

#[pymethods]
impl Model {
    /// Freshly initialized parameters for `config`.
    #[staticmethod]
    #[pyo3(signature = (config=None, seed=0))]
    fn init(config: Option<BTreeMap<String, String>>, seed: u64) -> PyResult<Self> {
        let run = run_config(config)?;
        let model = run.model().map_err(err)?;
        let params = init_parameters(&model, seed).map_err(err)?;
        Ok(Model { run, model, params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (run, model, params) = load_checkpoint(&path).map_err(err)?;
        Ok(Model { run, model, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let echo = checkpoint_config(&self.run, &self.model).map_err(err)?;
        write_checkpoint(path, &echo, &self.params).map_err(err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.model.variant.to_string()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn config(&self) -> BTreeMap<String, String> {
        self.run.pairs().into_iter().collect()
    }

    /// Per-step aggregates `[(t, episodes, rmse_m, success_rate)]`.
    #[pyo3(signature = (mode="seq-global", episodes=None, particles=None, contexts=None, steps=None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        mode: &str,
        episodes: Option<usize>,
        particles: Option<usize>,
        contexts: Option<usize>,
        steps: Option<usize>,
    ) -> PyResult<Vec<(usize, usize, f64, f64)>> {
        let mut run = self.run.clone();
        let m: EvalMode = mode.parse().map_err(err)?;
        run.set("eval_mode", &m.to_string()).map_err(err)?;
        for (k, v) in [("eval_episodes", episodes), ("eval_particles", particles), ("eval_contexts", contexts), ("eval_steps", steps)] {
            if let Some(v) = v {
                run.set(k, &v.to_string()).map_err(err)?;
            }
        }
        py.detach(|| -> dmn_core::Result<_> {
            let setting = run.eval_setting()?;
            let report = run_eval(&self.params, &self.model, &run.eval_source(&setting)?, &setting)?;
            Ok(report.aggregate()?.into_iter().map(|a| (a.t, a.episodes, a.rmse_m, a.success_rate)).collect())
        })
        .map_err(err)
    }
}

/// Trains from `config` and returns the best model and the curve rows
/// `[(iter, train_loss, val_loss)]`.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn train(py: Python<'_>, config: Option<BTreeMap<String, String>>) -> PyResult<(Model, CurveRows)> {
    let run = run_config(config)?;
    let (model, out) = py
        .detach(|| -> dmn_core::Result<_> {
            let tc = run.train_config()?;
            Ok((tc.model, train_from(&tc, None, |_| {})?))
        })
        .map_err(err)?;
    let curves = out.curves.iter().map(|r| (r.iter, r.train_loss, r.val_loss)).collect();
    Ok((Model { run, model, params: out.params }, curves))
}

/// Finite-difference check of the training loss on a tiny model.
/// Returns `(passed, [(tensor, entries, max_rel_err)])`.
#[pyfunction]
#[pyo3(signature = (samples=24))]
fn gradcheck(py: Python<'_>, samples: usize) -> PyResult<(bool, GradRows)> {
    let gc = GradcheckConfig { samples_per_param: samples, ..GradcheckConfig::default() };
    let rows = py.detach(|| core_gradcheck(&gc)).map_err(err)?;
    let ok = passed(&rows, gc.tolerance);
    Ok((ok, rows.into_iter().map(|r| (r.name, r.checked, r.max_rel_err)).collect()))
}

#[pymodule]
fn dmn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Pose>()?;
    m.add_class::<Model>()?;
    m.add("SUCCESS_THRESHOLD_M", SUCCESS_THRESHOLD_M)?;
    m.add_function(wrap_pyfunction!(wrap_angle, m)?)?;
    m.add_function(wrap_pyfunction!(rmse_xy, m)?)?;
    m.add_function(wrap_pyfunction!(success_rate, m)?)?;
    m.add_function(wrap_pyfunction!(measurement_update, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
