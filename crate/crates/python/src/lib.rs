//! Python bindings: calibration problems, fitting, prediction and designs.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sgasp::bench;
use sgasp::cli::builtin_simulator;
use sgasp::design::{self, DesignSet, Provenance};
use sgasp::estimation::{self, FitOptions, OptimizerConfig};
use sgasp::kernel::{KernelSpec, Smoothness};
use sgasp::models::{self, CalibrationProblem, FittedCalibration, LambdaZPolicy, ModelKind, Simulator, Target};
use sgasp::Error;

fn to_py(e: Error) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn design_from(rows: Vec<Vec<f64>>) -> PyResult<DesignSet> {
    DesignSet::from_rows(&rows, Provenance::File).map_err(to_py)
}

fn rows_of(d: &DesignSet) -> Vec<Vec<f64>> {
    d.rows().map(<[f64]>::to_vec).collect()
}

/// Simulator backed by a Python callable `f(x, theta) -> float`.
struct PySimulator {
    q: usize,
    func: Py<PyAny>,
}

impl Simulator for PySimulator {
    fn n_params(&self) -> usize {
        self.q
    }

    fn eval(&self, x: &[f64], theta: &[f64]) -> sgasp::Result<f64> {
        Python::attach(|py| {
            self.func
                .call1(py, (x.to_vec(), theta.to_vec()))
                .and_then(|v| v.extract::<f64>(py))
                .map_err(|e| Error::Simulator(e.to_string()))
        })
    }
}

/// A calibration data set with its model settings.
#[pyclass(name = "CalibrationProblem", module = "sgasp_py", frozen)]
struct PyProblem {
    inner: CalibrationProblem,
}

fn parse_kind(kind: &str) -> PyResult<ModelKind> {
    match kind {
        "gasp" => Ok(ModelKind::Gasp),
        "sgasp" => Ok(ModelKind::Sgasp),
        other => Err(PyValueError::new_err(format!("unknown model {other:?}; expected gasp or sgasp"))),
    }
}

fn parse_policy(policy: &str, lambda_z: Option<f64>, scale: f64) -> PyResult<LambdaZPolicy> {
    match (policy, lambda_z) {
        (_, Some(v)) => Ok(LambdaZPolicy::Fixed(v)),
        ("inv-sqrt-lambda", None) => Ok(LambdaZPolicy::InvSqrtLambda),
        ("sqrt-n", None) => Ok(LambdaZPolicy::SqrtN(scale)),
        (other, None) => Err(PyValueError::new_err(format!(
            "unknown lambda_z policy {other:?}; expected inv-sqrt-lambda or sqrt-n"
        ))),
    }
}

#[pymethods]
impl PyProblem {
    /// `simulator` is a built-in name or a callable `f(x, theta)`; `q` is
    /// required for callables.
    #[new]
    #[pyo3(signature = (design, y, simulator, theta_bounds, q=None, model="sgasp", lambda_z=None,
                        lambda_z_policy="inv-sqrt-lambda", lambda_z_scale=100.0, smoothness="5/2", nugget=1e-8))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        design: Vec<Vec<f64>>,
        y: Vec<f64>,
        simulator: Bound<'_, PyAny>,
        theta_bounds: Vec<(f64, f64)>,
        q: Option<usize>,
        model: &str,
        lambda_z: Option<f64>,
        lambda_z_policy: &str,
        lambda_z_scale: f64,
        smoothness: &str,
        nugget: f64,
    ) -> PyResult<Self> {
        let design = design_from(design)?;
        let sim: Arc<dyn Simulator> = if let Ok(name) = simulator.extract::<String>() {
            builtin_simulator(&name).map_err(to_py)?
        } else if simulator.is_callable() {
            Arc::new(PySimulator {
                q: q.unwrap_or(theta_bounds.len()),
                func: simulator.unbind(),
            })
        } else {
            return Err(PyValueError::new_err("simulator must be a built-in name or a callable"));
        };
        let p = design.p();
        let nu = Smoothness::parse(smoothness).map_err(to_py)?;
        let kernel = KernelSpec::new(vec![nu; p], vec![1.0; p], nugget).map_err(to_py)?;
        let inner = CalibrationProblem::new(
            design,
            y,
            sim,
            theta_bounds,
            kernel,
            parse_kind(model)?,
            parse_policy(lambda_z_policy, lambda_z, lambda_z_scale)?,
        )
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn model(&self) -> &'static str {
        self.inner.kind().name()
    }

    /// Negative log profile likelihood at `(theta, log gamma, log lambda)`.
    fn neg_profile_loglik(&self, theta: Vec<f64>, log_gamma: Vec<f64>, log_lambda: f64) -> PyResult<f64> {
        let lz = self.inner.lambda_z_for(log_lambda.exp());
        models::neg_profile_loglik(&theta, &log_gamma, log_lambda, lz, &self.inner)
            .map(|p| p.neg_loglik)
            .map_err(to_py)
    }

    /// Fits by multistart maximum likelihood; `gamma` and `lambda_` hold
    /// those parameters fixed when both are given.
    #[pyo3(signature = (starts=10, seed=0, gamma=None, lambda_=None))]
    fn fit(&self, py: Python<'_>, starts: usize, seed: u64, gamma: Option<Vec<f64>>, lambda_: Option<f64>) -> PyResult<PyFit> {
        let opts = FitOptions {
            optimizer: OptimizerConfig::default().with_starts(starts).with_seed(seed),
            gamma,
            lambda: lambda_,
            ..FitOptions::default()
        };
        let prob = &self.inner;
        let fit = py
            .detach(|| estimation::fit_with(prob, &opts))
            .map_err(to_py)?
            .fit;
        Ok(PyFit {
            fit,
            problem: self.inner.clone(),
        })
    }

    /// Assembles a fit at given parameters without optimizing.
    fn at(&self, theta: Vec<f64>, gamma: Vec<f64>, lambda_: f64) -> PyResult<PyFit> {
        let fit = FittedCalibration::from_parameters(&self.inner, &theta, &gamma, lambda_).map_err(to_py)?;
        Ok(PyFit {
            fit,
            problem: self.inner.clone(),
        })
    }
}

/// Fitted calibration model.
#[pyclass(name = "FittedCalibration", module = "sgasp_py", frozen)]
struct PyFit {
    fit: FittedCalibration,
    problem: CalibrationProblem,
}

#[pymethods]
impl PyFit {
    #[getter]
    fn model(&self) -> &'static str {
        self.fit.kind.name()
    }
    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.fit.theta.clone()
    }
    #[getter]
    fn gamma(&self) -> Vec<f64> {
        self.fit.gamma.clone()
    }
    #[getter]
    fn lambda_(&self) -> f64 {
        self.fit.lambda
    }
    #[getter]
    fn lambda_z(&self) -> f64 {
        self.fit.lambda_z
    }
    #[getter]
    fn sigma0_sq(&self) -> f64 {
        self.fit.sigma0_sq
    }
    #[getter]
    fn sigma_sq(&self) -> f64 {
        self.fit.sigma_sq
    }
    #[getter]
    fn objective(&self) -> f64 {
        self.fit.objective
    }
    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.fit.weights.clone()
    }

    /// Predictive means and variances at `x` for `target` `"reality"` or `"field"`.
    #[pyo3(signature = (x, target="reality"))]
    fn predict(&self, py: Python<'_>, x: Vec<Vec<f64>>, target: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let target = match target {
            "reality" => Target::Reality,
            "field" => Target::Field,
            other => return Err(PyValueError::new_err(format!("unknown target {other:?}"))),
        };
        let xs = design_from(x)?;
        let (fit, prob) = (&self.fit, &self.problem);
        let pred = py
            .detach(|| models::predict(fit, prob, &xs, target))
            .map_err(to_py)?;
        Ok((pred.mean, pred.variance))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.fit).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "FittedCalibration(model={}, theta={:?}, gamma={:?}, lambda={:e}, lambda_z={:e})",
            self.fit.kind.name(),
            self.fit.theta,
            self.fit.gamma,
            self.fit.lambda,
            self.fit.lambda_z
        )
    }
}

/// Maximin Latin hypercube design as a list of rows.
#[pyfunction]
#[pyo3(signature = (n, p, seed=0, restarts=20))]
fn maximin_lhs(n: usize, p: usize, seed: u64, restarts: usize) -> PyResult<Vec<Vec<f64>>> {
    design::maximin_lhs(n, p, seed, restarts).map(|d| rows_of(&d)).map_err(to_py)
}

/// Uniform random design as a list of rows.
#[pyfunction]
#[pyo3(signature = (n, p, seed=0))]
fn uniform_design(n: usize, p: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    design::uniform(n, p, seed).map(|d| rows_of(&d)).map_err(to_py)
}

/// Reality of a named benchmark at each row.
#[pyfunction]
fn truth(name: &str, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let tf = bench::truth_library(name).map_err(to_py)?;
    Ok(tf.values(&design_from(x)?))
}

/// `(theta_L2, loss)` of a named benchmark.
#[pyfunction]
fn theta_l2(py: Python<'_>, name: &str) -> PyResult<(Vec<f64>, f64)> {
    let tf = bench::truth_library(name).map_err(to_py)?;
    let est = py
        .detach(|| tf.theta_l2(&OptimizerConfig::default()))
        .map_err(to_py)?;
    Ok((est.theta, est.loss))
}

#[pymodule]
fn sgasp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_class::<PyFit>()?;
    m.add_function(wrap_pyfunction!(maximin_lhs, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_design, m)?)?;
    m.add_function(wrap_pyfunction!(truth, m)?)?;
    m.add_function(wrap_pyfunction!(theta_l2, m)?)?;
    m.add("TRUTH_NAMES", bench::TRUTH_NAMES.to_vec())?;
    Ok(())
}
