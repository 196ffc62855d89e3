//! Python bindings for the approximately-equivariant neural process library:
//! task sampling, the exact GP oracles, model construction/prediction,
//! training/evaluation, checkpoint loading, and the operator lab.

use aenp::eqlab;
use aenp::models::{Family, ModelConfig, ModelInstance};
use aenp::taskgen::{self, GibbsProcessConfig, Mode, Task, TaskSamplerConfig};
use aenp::training::{self, EvalMode, TrainConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: aenp::Error) -> PyErr {
    match e {
        aenp::Error::Config(_) | aenp::Error::Json(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_family(name: &str) -> PyResult<Family> {
    Ok(match name {
        "convcnp" => Family::ConvCnp,
        "equivcnp" => Family::EquivCnp,
        "relaxed_convcnp" => Family::RelaxedConvCnp,
        "tetnp" => Family::TeTnp,
        "pt_tetnp" => Family::PtTeTnp,
        "tnp" => Family::Tnp,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown family '{other}' (expected convcnp, equivcnp, relaxed_convcnp, tetnp, pt_tetnp, or tnp)"
            )))
        }
    })
}

fn parse_mode(name: &str) -> PyResult<Mode> {
    Ok(match name {
        "id" => Mode::Id,
        "ood" => Mode::Ood,
        other => return Err(PyValueError::new_err(format!("unknown mode '{other}'"))),
    })
}

fn task_to_dict<'py>(py: Python<'py>, task: &Task) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("x_context", task.x_context.clone())?;
    d.set_item("y_context", task.y_context.clone())?;
    d.set_item("x_target", task.x_target.clone())?;
    d.set_item("y_target", task.y_target.clone())?;
    d.set_item("orientation", task.orientation)?;
    d.set_item("mode", if task.mode == Mode::Id { "id" } else { "ood" })?;
    d.set_item("seed", task.seed)?;
    Ok(d)
}

/// A Gibbs-kernel GP regression task.
#[pyclass(name = "Task")]
#[derive(Clone)]
struct PyTask {
    inner: Task,
}

#[pymethods]
impl PyTask {
    #[getter]
    fn x_context(&self) -> Vec<f64> {
        self.inner.x_context.clone()
    }
    #[getter]
    fn y_context(&self) -> Vec<f64> {
        self.inner.y_context.clone()
    }
    #[getter]
    fn x_target(&self) -> Vec<f64> {
        self.inner.x_target.clone()
    }
    #[getter]
    fn y_target(&self) -> Vec<f64> {
        self.inner.y_target.clone()
    }
    #[getter]
    fn orientation(&self) -> u8 {
        self.inner.orientation
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        task_to_dict(py, &self.inner)
    }
    fn __repr__(&self) -> String {
        format!(
            "Task(seed={}, n_context={}, n_target={})",
            self.inner.seed,
            self.inner.x_context.len(),
            self.inner.x_target.len()
        )
    }
}

/// Sample a task from the Gibbs-kernel generator.
#[pyfunction]
#[pyo3(signature = (seed, mode="id"))]
fn sample_task(seed: u64, mode: &str) -> PyResult<PyTask> {
    let task = taskgen::sample_task(
        seed,
        parse_mode(mode)?,
        &TaskSamplerConfig::default(),
        &GibbsProcessConfig::default(),
    )
    .map_err(err)?;
    Ok(PyTask { inner: task })
}

/// Exact GP predictive log-likelihood with the true changepoint orientation.
#[pyfunction]
fn oracle_loglik(task: &PyTask) -> PyResult<f64> {
    taskgen::gp_posterior_loglik(&task.inner, &GibbsProcessConfig::default()).map_err(err)
}

/// Exact GP predictive log-likelihood marginalised over the orientation.
#[pyfunction]
fn oracle_loglik_mixture(task: &PyTask) -> PyResult<f64> {
    taskgen::gp_posterior_loglik_mixture(&task.inner, &GibbsProcessConfig::default()).map_err(err)
}

/// A conditional neural process model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ModelInstance,
}

#[pymethods]
impl PyModel {
    /// Fresh model. `micro` selects the small test-scale dimensions.
    #[new]
    #[pyo3(signature = (family, tilde=false, micro=false, seed=0))]
    fn new(family: &str, tilde: bool, micro: bool, seed: u64) -> PyResult<Self> {
        let fam = parse_family(family)?;
        let cfg = if micro { ModelConfig::micro(fam, tilde) } else { ModelConfig::new(fam, tilde) };
        let mut rng = taskgen::stream_rng(seed, "init", 0);
        Ok(Self { inner: ModelInstance::new(cfg, &mut rng).map_err(err)? })
    }

    /// Load a trained model from a checkpoint file.
    #[staticmethod]
    fn from_checkpoint(path: &str) -> PyResult<Self> {
        let ckpt = training::Checkpoint::load(std::path::Path::new(path)).map_err(err)?;
        Ok(Self { inner: ckpt.model_instance().map_err(err)? })
    }

    #[getter]
    fn family(&self) -> String {
        format!("{:?}", self.inner.config.family).to_lowercase()
    }

    #[getter]
    fn tilde(&self) -> bool {
        self.inner.config.tilde
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Predictive means and variances at the target points.
    /// `bank_on=False` forces the strict (exactly equivariant) path.
    #[pyo3(signature = (x_context, y_context, x_target, bank_on=true))]
    fn predict(
        &self,
        x_context: Vec<f64>,
        y_context: Vec<f64>,
        x_target: Vec<f64>,
        bank_on: bool,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let pred = self
            .inner
            .predict_at(&x_context, &y_context, &x_target, bank_on)
            .map_err(err)?;
        Ok((pred.mean, pred.variance))
    }

    /// Mean per-point predictive log-likelihood on a task.
    #[pyo3(signature = (task, bank_on=true))]
    fn task_loglik(&self, task: &PyTask, bank_on: bool) -> PyResult<f64> {
        self.inner.task_loglik(&task.inner, bank_on).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(family={}, tilde={}, params={})",
            self.family(),
            self.tilde(),
            self.num_parameters()
        )
    }
}

/// Train a model and return it with its loss curve.
/// Uses the default task generator; dimensions are micro unless stated.
#[pyfunction]
#[pyo3(signature = (family, tilde=false, micro=true, epochs=1, iters_per_epoch=10, batch_size=4, seed=0, lr=5e-4))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    family: &str,
    tilde: bool,
    micro: bool,
    epochs: usize,
    iters_per_epoch: usize,
    batch_size: usize,
    seed: u64,
    lr: f64,
) -> PyResult<(PyModel, Vec<(usize, f64)>)> {
    let fam = parse_family(family)?;
    let cfg = if micro { ModelConfig::micro(fam, tilde) } else { ModelConfig::new(fam, tilde) };
    let train_cfg = TrainConfig {
        epochs,
        iters_per_epoch,
        batch_size,
        seed,
        lr,
        val_tasks: 0,
        ..Default::default()
    };
    let ckpt = py
        .allow_threads(|| {
            training::train(
                cfg,
                train_cfg,
                TaskSamplerConfig::default(),
                GibbsProcessConfig::default(),
                |_| {},
            )
        })
        .map_err(err)?;
    if let Some(abort) = &ckpt.aborted {
        return Err(PyRuntimeError::new_err(format!(
            "training aborted at epoch {} iter {}: {}",
            abort.epoch, abort.iter, abort.message
        )));
    }
    let curve = ckpt.loss_curve.iter().map(|r| (r.epoch, r.train_loss)).collect();
    Ok((PyModel { inner: ckpt.model_instance().map_err(err)? }, curve))
}

/// Evaluate a model over a held-out task stream.
#[pyfunction]
#[pyo3(signature = (model, mode="id", n_tasks=100, zero_bank=false, seed=7))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    mode: &str,
    n_tasks: usize,
    zero_bank: bool,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let eval_mode = match mode {
        "id" => EvalMode::Id,
        "ood" => EvalMode::Ood,
        "context_as_target" => EvalMode::ContextAsTarget,
        other => return Err(PyValueError::new_err(format!("unknown eval mode '{other}'"))),
    };
    let report = py
        .allow_threads(|| {
            training::evaluate(
                &model.inner,
                &TaskSamplerConfig::default(),
                &GibbsProcessConfig::default(),
                eval_mode,
                n_tasks,
                zero_bank,
                seed,
            )
        })
        .map_err(err)?;
    let d = PyDict::new_bound(py);
    d.set_item("mean_loglik", report.mean_loglik)?;
    d.set_item("stderr", report.stderr)?;
    d.set_item("mode", mode)?;
    d.set_item("n_tasks", report.n_tasks)?;
    d.set_item("zero_bank", report.zero_bank)?;
    d.set_item("model_hash", report.model_hash)?;
    Ok(d)
}

/// Measure the equivariance deviation of a tilde model on freshly sampled
/// tasks (bank path vs strict path of the same weights).
#[pyfunction]
#[pyo3(signature = (model, n_tasks=20, seed=11, norm="l1"))]
fn equivariance_deviation<'py>(
    py: Python<'py>,
    model: &PyModel,
    n_tasks: usize,
    seed: u64,
    norm: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let norm = match norm {
        "l1" => eqlab::DeviationNorm::L1,
        "l2" => eqlab::DeviationNorm::L2,
        other => return Err(PyValueError::new_err(format!("unknown norm '{other}'"))),
    };
    let sampler = TaskSamplerConfig::default();
    let process = GibbsProcessConfig::default();
    let report = py
        .allow_threads(|| {
            let tasks: aenp::Result<Vec<Task>> = (0..n_tasks as u64)
                .map(|i| {
                    taskgen::sample_task(
                        taskgen::derive_seed(seed, "deviation", i),
                        Mode::Id,
                        &sampler,
                        &process,
                    )
                })
                .collect();
            eqlab::equivariance_deviation(&model.inner, &tasks?, norm)
        })
        .map_err(err)?;
    let d = PyDict::new_bound(py);
    d.set_item("delta", report.delta)?;
    d.set_item("stderr", report.stderr)?;
    d.set_item("n_tasks", report.n_tasks)?;
    d.set_item("excluded_points", report.excluded_points)?;
    d.set_item("total_points", report.total_points)?;
    Ok(d)
}

/// Run the operator-approximation lab and return its report as a JSON string.
#[pyfunction]
#[pyo3(signature = (n_max=4, n_translations=10, seed=1))]
fn run_operator_lab(n_max: usize, n_translations: usize, seed: u64) -> PyResult<String> {
    let mut rng = taskgen::stream_rng(seed, "eqlab", 0);
    let report = eqlab::run_operator_lab(n_max, n_translations, &mut rng).map_err(err)?;
    report.to_json().map_err(err)
}

#[pymodule]
fn aenp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTask>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sample_task, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_loglik, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_loglik_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(equivariance_deviation, m)?)?;
    m.add_function(wrap_pyfunction!(run_operator_lab, m)?)?;
    Ok(())
}
