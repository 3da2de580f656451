//! Python module `igsaft`: datasets, fitting and simulation.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use igsaft_core::data::{read_csv, ColumnConfig, Observation, TimeScale};
use igsaft_core::gel::RhoFamily;
use igsaft_core::pipeline::{self, FitReport};
use igsaft_core::simulate::{self, Estimator};

fn to_py(err: igsaft_core::Error) -> PyErr {
    match &err {
        igsaft_core::Error::Domain(_) | igsaft_core::Error::Stage { stage: "config", .. } => PyValueError::new_err(err.to_string()),
        e if e.is_input_error() => PyValueError::new_err(err.to_string()),
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

/// Observations of `(Y, delta, D, Z)`, with `Y` on the log scale.
#[pyclass(frozen)]
struct Dataset {
    inner: igsaft_core::data::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    fn new(time: Vec<f64>, status: Vec<bool>, exposure: Vec<f64>, instruments: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = igsaft_core::data::Dataset::from_columns(&time, &status, &exposure, instruments).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Read a CSV; `raw_time` takes the log of the time column on load.
    #[staticmethod]
    #[pyo3(signature = (path, time, status, exposure, instruments, raw_time = false))]
    fn from_csv(path: &str, time: &str, status: &str, exposure: &str, instruments: Vec<String>, raw_time: bool) -> PyResult<Self> {
        let cols = ColumnConfig {
            time: time.into(),
            status: status.into(),
            exposure: exposure.into(),
            instruments,
            time_scale: if raw_time { TimeScale::Raw } else { TimeScale::Log },
        };
        Ok(Self {
            inner: read_csv(path, &cols).map_err(to_py)?.dataset,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn censoring_rate(&self) -> f64 {
        self.inner.censoring_rate()
    }

    fn time(&self) -> Vec<f64> {
        self.inner.outcome()
    }

    fn status(&self) -> Vec<bool> {
        self.inner.iter().map(|o: &Observation| o.delta).collect()
    }

    fn exposure(&self) -> Vec<f64> {
        self.inner.exposure()
    }

    fn instruments(&self) -> Vec<Vec<f64>> {
        self.inner.iter().map(|o| o.z.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, p={}, censoring_rate={:.3})", self.inner.n(), self.inner.p(), self.inner.censoring_rate())
    }
}

/// Fit options; any field of the JSON configuration can be passed as JSON.
#[pyclass]
struct FitConfig {
    inner: pipeline::FitConfig,
}

#[pymethods]
impl FitConfig {
    #[new]
    #[pyo3(signature = (q = 2, families = vec!["el".to_string()], screening = true, max_keep = 100, seed = 0, km_conditioning = None))]
    fn new(q: usize, families: Vec<String>, screening: bool, max_keep: usize, seed: u64, km_conditioning: Option<String>) -> PyResult<Self> {
        let families = families
            .iter()
            .map(|f| f.parse::<RhoFamily>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_py)?;
        let mut inner = pipeline::FitConfig {
            q,
            families,
            screening,
            max_keep,
            seed,
            ..Default::default()
        };
        if let Some(c) = km_conditioning {
            inner.kernel.conditioning = Some(c.parse().map_err(to_py)?);
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    fn __repr__(&self) -> String {
        format!("FitConfig({})", self.to_json())
    }
}

/// Result of [`fit`].
#[pyclass(frozen)]
struct FitResult {
    inner: FitReport,
}

#[pymethods]
impl FitResult {
    #[getter]
    fn beta_hat(&self) -> f64 {
        self.inner.gel_fit().beta_hat
    }

    #[getter]
    fn se(&self) -> f64 {
        self.inner.gel_fit().se
    }

    #[getter]
    fn ci(&self) -> (f64, f64) {
        self.inner.gel_fit().ci
    }

    /// `(exp(beta_hat), delta-method SE)`.
    #[getter]
    fn exp_beta(&self) -> (f64, f64) {
        let e = &self.inner.gel_fit().exp_scale;
        (e.estimate, e.se)
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }

    #[getter]
    fn p_f(&self) -> Option<f64> {
        self.inner.relevance_f.as_ref().map(|t| t.p_value)
    }

    #[getter]
    fn p_overid(&self) -> Option<f64> {
        self.inner.over_id.first().and_then(|t| t.as_ref().map(|t| t.p_value))
    }

    /// `(family, beta_hat, se)` for every requested family.
    fn estimates(&self) -> Vec<(String, f64, f64)> {
        self.inner.fits.iter().map(|f| (f.family.to_string(), f.beta_hat, f.se)).collect()
    }

    /// Time ratio for an exposure change with its SE.
    fn predict_effect(&self, delta_d: f64) -> (f64, f64) {
        pipeline::predict_effect(self.inner.gel_fit(), delta_d)
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("report serializes")
    }

    fn __repr__(&self) -> String {
        let f = self.inner.gel_fit();
        format!("FitResult({}: beta_hat={:.4}, se={:.4}, m={})", f.family, f.beta_hat, f.se, self.inner.m)
    }
}

#[pyfunction]
#[pyo3(signature = (data, config = None))]
fn fit(py: Python<'_>, data: &Dataset, config: Option<&FitConfig>) -> PyResult<FitResult> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let d = data.inner.clone();
    let inner = py.detach(move || pipeline::fit_igsaft(&d, &cfg)).map_err(to_py)?;
    Ok(FitResult { inner })
}

/// One simulated replication.
#[pyfunction]
#[pyo3(signature = (case = 1, n = 2000, p = 10, cr = 0.2, seed = 1, rep = 0, c_weak = 4.0, null_interactions = false))]
#[allow(clippy::too_many_arguments)]
fn simulate_dataset(case: u8, n: usize, p: usize, cr: f64, seed: u64, rep: usize, c_weak: f64, null_interactions: bool) -> PyResult<Dataset> {
    let sim = simulate::SimConfig {
        case,
        n,
        p,
        target_cr: cr,
        seed,
        c_weak,
        null_interactions,
        ..Default::default()
    };
    sim.validate().map_err(to_py)?;
    Ok(Dataset {
        inner: simulate::generate(&sim, rep).map_err(to_py)?.0,
    })
}

/// Monte Carlo summary table as CSV text.
#[pyfunction]
#[pyo3(signature = (case = 1, n = 2000, p = 10, cr = 0.2, reps = 10, seed = 1, config = None, aft = true))]
#[allow(clippy::too_many_arguments)]
fn monte_carlo(
    py: Python<'_>,
    case: u8,
    n: usize,
    p: usize,
    cr: f64,
    reps: usize,
    seed: u64,
    config: Option<&FitConfig>,
    aft: bool,
) -> PyResult<String> {
    let sim = simulate::SimConfig {
        case,
        n,
        p,
        target_cr: cr,
        reps,
        seed,
        ..Default::default()
    };
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let mut est: Vec<Estimator> = cfg.families.iter().map(|&f| Estimator::Gel(f)).collect();
    if aft {
        est.push(Estimator::Aft);
    }
    let summary = py.detach(move || simulate::run_monte_carlo(&sim, &cfg, &est)).map_err(to_py)?;
    Ok(summary.to_csv())
}

#[pymodule]
fn igsaft(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<FitConfig>()?;
    m.add_class::<FitResult>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
