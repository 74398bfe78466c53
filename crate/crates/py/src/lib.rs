//! Python bindings.

use std::fs::File;
use std::str::FromStr;

use mcsa_dtr::mnboot::{self, CovarianceEstimator};
use mcsa_dtr::simlab::{study, Dgp, OneStageDgp, Scenario, StudyConfig, TwoStageDgp};
use mcsa_dtr::specfile::{self, ModelFile, SensitivityFile};
use mcsa_dtr::{dwols, linmodel, mcsa, rng, CiConfig, ErrorKind, McsaConfig, WeightScheme};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: mcsa_dtr::Error) -> PyErr {
    match e {
        mcsa_dtr::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => match e.kind() {
            ErrorKind::Numerical => PyArithmeticError::new_err(e.to_string()),
            ErrorKind::Config | ErrorKind::Data => PyValueError::new_err(e.to_string()),
        },
    }
}

fn parse<T: FromStr<Err = mcsa_dtr::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// Serializes through JSON into plain Python objects.
fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn builtin_dgp(name: &str) -> PyResult<Dgp> {
    match name {
        "one-stage" => Ok(Dgp::OneStage(OneStageDgp::default())),
        "two-stage" => Ok(Dgp::TwoStage(TwoStageDgp::default())),
        other => Err(PyValueError::new_err(format!("unknown dgp `{other}`"))),
    }
}

/// Panel layout and per-stage model terms.
#[pyclass(module = "mcsa_dtr", frozen)]
struct Model {
    inner: ModelFile,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ModelFile = specfile::from_str(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// The analysis model of a built-in simulation DGP.
    #[staticmethod]
    fn builtin(dgp: &str) -> PyResult<Self> {
        let d = builtin_dgp(dgp)?;
        Ok(Self {
            inner: ModelFile::new(d.layout(), d.model_spec()),
        })
    }

    fn to_json(&self) -> PyResult<String> {
        specfile::to_string(&self.inner).map_err(err)
    }

    #[getter]
    fn n_stages(&self) -> usize {
        self.inner.stages.len()
    }

    /// Columns a panel CSV must provide besides `id` and `y`.
    #[getter]
    fn columns(&self) -> Vec<String> {
        self.inner.layout.data_columns()
    }

    fn __repr__(&self) -> String {
        format!("Model(n_stages={}, columns={:?})", self.n_stages(), self.columns())
    }
}

/// Confounder model and prior.
#[pyclass(module = "mcsa_dtr", frozen)]
struct Sensitivity {
    inner: SensitivityFile,
}

#[pymethods]
impl Sensitivity {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: SensitivityFile = specfile::from_str(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        specfile::to_string(&self.inner).map_err(err)
    }

    #[getter]
    fn is_zero_effect(&self) -> bool {
        self.inner.prior.is_zero_effect()
    }
}

#[pyclass(module = "mcsa_dtr", frozen)]
struct Panel {
    inner: mcsa_dtr::Panel,
}

#[pymethods]
impl Panel {
    #[staticmethod]
    fn read_csv(path: &str, model: &Model) -> PyResult<Self> {
        let f = File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        let inner = mcsa_dtr::Panel::read_csv(f, model.inner.layout.clone()).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_columns(model: &Model, columns: Vec<(String, Vec<f64>)>, y: Vec<f64>) -> PyResult<Self> {
        let inner = mcsa_dtr::Panel::from_columns(model.inner.layout.clone(), columns, y).map_err(err)?;
        Ok(Self { inner })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        let f = File::create(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        self.inner.write_csv(f).map_err(err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn n_stages(&self) -> usize {
        self.inner.n_stages()
    }

    fn outcome(&self) -> Vec<f64> {
        self.inner.outcome().to_vec()
    }

    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        self.inner.column(name).map(<[f64]>::to_vec).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }
}

/// Generates `n` patients from a built-in DGP. Returns the panel and the
/// latent confounder.
#[pyfunction]
#[pyo3(signature = (dgp, n, seed = 1))]
fn simulate(dgp: &str, n: usize, seed: u64) -> PyResult<(Panel, Vec<f64>)> {
    let sim = builtin_dgp(dgp)?.generate(n, seed).map_err(err)?;
    Ok((Panel { inner: sim.panel }, sim.u))
}

/// Unadjusted dWOLS fit; one dict per stage.
#[pyfunction]
#[pyo3(signature = (panel, model, weights = "overlap"))]
fn fit_dwols(py: Python<'_>, panel: &Panel, model: &Model, weights: &str) -> PyResult<Py<PyAny>> {
    let fit = dwols::fit(&panel.inner, &model.inner.spec(), parse(weights)?).map_err(err)?;
    to_py(py, &fit.stages)
}

/// Monte Carlo sensitivity analysis, with m-out-of-n bootstrap intervals
/// unless `intervals` is false.
#[pyfunction]
#[pyo3(signature = (
    panel, model, sensitivity, b = 200, seed = 1, weights = "overlap", intervals = true,
    kappa = 0.05, nu = 0.05, vartheta = vec![0.05], covariance = "sandwich"
))]
#[allow(clippy::too_many_arguments)]
fn sensitivity_analysis<'py>(
    py: Python<'py>,
    panel: &Panel,
    model: &Model,
    sensitivity: &Sensitivity,
    b: usize,
    seed: u64,
    weights: &str,
    intervals: bool,
    kappa: f64,
    nu: f64,
    vartheta: Vec<f64>,
    covariance: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = model.inner.spec();
    let scheme: WeightScheme = parse(weights)?;
    let covariance: CovarianceEstimator = parse(covariance)?;
    let cfg = McsaConfig {
        b,
        seed,
        scheme,
        prior: sensitivity.inner.prior.clone(),
        confounder: sensitivity.inner.confounder.clone(),
        tolerances: Default::default(),
    };
    let (fit, report) = py.detach(|| -> mcsa_dtr::Result<_> {
        if intervals {
            let ci = CiConfig {
                kappa,
                nu,
                vartheta,
                b,
                seed: rng::derive_seed(seed, &[rng::tag::CI_FINAL]),
                covariance,
            };
            let (f, r) = mnboot::intervals(&panel.inner, &spec, &cfg, &ci)?;
            Ok((f, Some(r)))
        } else {
            Ok((mcsa::run(&panel.inner, &spec, &cfg)?, None))
        }
    })
    .map_err(err)?;

    let out = PyDict::new(py);
    out.set_item("mean", to_py(py, &fit.mean)?)?;
    out.set_item("adjusted", to_py(py, &fit.adjusted)?)?;
    out.set_item("draws", to_py(py, &fit.draws)?)?;
    out.set_item("failures", fit.failures.len())?;
    if let Some(r) = report {
        let bounds: Vec<Vec<(f64, f64)>> = r
            .intervals
            .iter()
            .map(|s| s.iter().map(|i| (i.lower, i.upper)).collect())
            .collect();
        out.set_item("intervals", bounds)?;
        out.set_item("p_hat", r.p_hat)?;
        out.set_item("m", r.m)?;
    }
    Ok(out)
}

/// Repeated-sampling study on a built-in DGP. Returns per-scenario metrics.
#[pyfunction]
#[pyo3(signature = (dgp, reps, n = 1000, b = 200, seed = 1, scenarios = None, n_eval = 10_000, zeta_n = 1_000_000, intervals = true))]
#[allow(clippy::too_many_arguments)]
fn run_study(
    py: Python<'_>,
    dgp: &str,
    reps: usize,
    n: usize,
    b: usize,
    seed: u64,
    scenarios: Option<Vec<String>>,
    n_eval: usize,
    zeta_n: usize,
    intervals: bool,
) -> PyResult<Py<PyAny>> {
    let mut cfg = StudyConfig::desk(builtin_dgp(dgp)?, seed);
    cfg.reps = reps;
    cfg.n = n;
    cfg.b = b;
    cfg.n_eval = n_eval;
    cfg.zeta_n = zeta_n;
    cfg.intervals = intervals;
    if let Some(list) = scenarios {
        cfg.scenarios = list.iter().map(|s| parse::<Scenario>(s)).collect::<PyResult<_>>()?;
    }
    let res = py.detach(|| study::run_study(&cfg)).map_err(err)?;
    to_py(py, &res.metrics)
}

/// Resample size for the m-out-of-n bootstrap.
#[pyfunction]
#[pyo3(signature = (p_hat, n, kappa = 0.05))]
fn resample_size(p_hat: f64, n: usize, kappa: f64) -> usize {
    mnboot::resample_size(p_hat, n, kappa)
}

#[pyfunction]
#[pyo3(signature = (pi, a, scheme = "overlap"))]
fn balance_weights(pi: Vec<f64>, a: Vec<f64>, scheme: &str) -> PyResult<Vec<f64>> {
    linmodel::balance_weights(&pi, &a, parse(scheme)?).map_err(err)
}

#[pymodule]
#[pyo3(name = "mcsa_dtr")]
fn mcsa_dtr_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Model>()?;
    m.add_class::<Sensitivity>()?;
    m.add_class::<Panel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_dwols, m)?)?;
    m.add_function(wrap_pyfunction!(sensitivity_analysis, m)?)?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    m.add_function(wrap_pyfunction!(resample_size, m)?)?;
    m.add_function(wrap_pyfunction!(balance_weights, m)?)?;
    Ok(())
}
