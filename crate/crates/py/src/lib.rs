//! Python bindings for `twoscale`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use twoscale::data;
use twoscale::inference::{self, ChainConfig, PoolDataset, ShotRecord};
use twoscale::kernel;
use twoscale::simulate::{self as sim, CoherentErrorConfig, SimConfig, SimMode};
use twoscale::two_scale;
use twoscale::{Colatitude, DiffusionExposure, GateCount, PoolAngle, Probability, SeriesConfig};

fn err(e: twoscale::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn exposure(tau: f64) -> PyResult<DiffusionExposure> {
    DiffusionExposure::new(tau).map_err(err)
}

fn prob(p: f64) -> PyResult<Probability> {
    Probability::new(p).map_err(err)
}

fn to_python<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Diffusion rates `(d_ini, d_n, d_q)`, all non-negative.
#[pyclass(name = "DiffusionRates", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyRates(two_scale::DiffusionRates);

#[pymethods]
impl PyRates {
    #[new]
    #[pyo3(signature = (d_ini=0.0, d_n=0.0, d_q=0.0))]
    fn new(d_ini: f64, d_n: f64, d_q: f64) -> PyResult<Self> {
        two_scale::DiffusionRates::new(d_ini, d_n, d_q)
            .map(PyRates)
            .map_err(err)
    }

    #[getter]
    fn d_ini(&self) -> f64 {
        self.0.d_ini
    }

    #[getter]
    fn d_n(&self) -> f64 {
        self.0.d_n
    }

    #[getter]
    fn d_q(&self) -> f64 {
        self.0.d_q
    }

    fn __repr__(&self) -> String {
        format!(
            "DiffusionRates(d_ini={:e}, d_n={:e}, d_q={:e})",
            self.0.d_ini, self.0.d_n, self.0.d_q
        )
    }
}

/// Shot records for one qubit.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset(PoolDataset);

#[pymethods]
impl PyDataset {
    #[new]
    fn new(gates: Vec<u64>, shots: Vec<u64>, zeros: Vec<u64>) -> PyResult<Self> {
        if gates.len() != shots.len() || gates.len() != zeros.len() {
            return Err(PyValueError::new_err(
                "gates, shots and zeros differ in length",
            ));
        }
        let records = gates
            .iter()
            .zip(&shots)
            .zip(&zeros)
            .map(|((&g, &n), &z)| ShotRecord::new(GateCount(g), n, z, None))
            .collect::<twoscale::Result<Vec<_>>>()
            .map_err(err)?;
        PoolDataset::new(records).map(PyDataset).map_err(err)
    }

    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        data::parse_dataset(path).map(PyDataset).map_err(err)
    }

    /// `(gates, shots, zeros)` per record.
    fn records(&self) -> Vec<(u64, u64, u64)> {
        self.0
            .records
            .iter()
            .map(|r| (r.gates.0, r.shots, r.zeros))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyfunction]
fn theta_pdf(theta: f64, tau: f64) -> PyResult<f64> {
    let th = Colatitude::new(theta).map_err(err)?;
    kernel::theta_pdf(th, exposure(tau)?, &SeriesConfig::default()).map_err(err)
}

#[pyfunction]
fn prob_pdf(p: f64, tau: f64) -> PyResult<f64> {
    kernel::prob_pdf(prob(p)?, exposure(tau)?, &SeriesConfig::default()).map_err(err)
}

#[pyfunction]
fn mean_prob(tau: f64) -> PyResult<f64> {
    Ok(kernel::mean_prob(exposure(tau)?).value())
}

/// `{"mean", "second_raw", "variance"}` of the readout probability.
#[pyfunction]
fn moments<'py>(py: Python<'py>, tau: f64) -> PyResult<Bound<'py, PyDict>> {
    let m = kernel::moments(exposure(tau)?);
    let d = PyDict::new(py);
    d.set_item("mean", m.mean.value())?;
    d.set_item("second_raw", m.second_raw)?;
    d.set_item("variance", m.variance)?;
    Ok(d)
}

#[pyfunction]
fn bounds(rates: &PyRates, gates: u64) -> (f64, f64) {
    let (lo, hi) = two_scale::bounds(&rates.0, GateCount(gates));
    (lo.value(), hi.value())
}

#[pyfunction]
fn reduced_length(rates: &PyRates, gates: u64) -> f64 {
    two_scale::reduced_length(&rates.0, GateCount(gates))
}

#[pyfunction]
fn pool_prob(theta: f64, rates: &PyRates, gates: u64) -> PyResult<f64> {
    let th = PoolAngle::new(theta).map_err(err)?;
    Ok(two_scale::pool_prob(th, &rates.0, GateCount(gates)).value())
}

#[pyfunction]
fn pool_mean(rates: &PyRates, gates: u64) -> f64 {
    two_scale::pool_mean(&rates.0, GateCount(gates)).value()
}

#[pyfunction]
fn pool_variance(rates: &PyRates, gates: u64) -> f64 {
    two_scale::contracted_overdispersion_variance(&rates.0, GateCount(gates))
}

#[pyfunction]
fn pool_pdf(p: f64, rates: &PyRates, gates: u64) -> PyResult<f64> {
    two_scale::pool_pdf(
        prob(p)?,
        &rates.0,
        GateCount(gates),
        &SeriesConfig::default(),
    )
    .map_err(err)
}

/// Bounds, pool mean and percentiles of `P̄_q` for each gate count.
#[pyfunction]
#[pyo3(signature = (rates, gates, levels=vec![0.05, 0.25, 0.5, 0.75, 0.95]))]
fn band_curve<'py>(
    py: Python<'py>,
    rates: &PyRates,
    gates: Vec<u64>,
    levels: Vec<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let gs: Vec<GateCount> = gates.into_iter().map(GateCount).collect();
    let band =
        two_scale::band_curve(&rates.0, &gs, &levels, &SeriesConfig::default()).map_err(err)?;
    to_python(py, &band)
}

/// Simulated frequency draws as a list of dicts.
#[pyfunction]
#[pyo3(signature = (rates, gates, shots, pools, seed, mode="distributional", coherent_fraction=None, over_rotation=None))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    rates: &PyRates,
    gates: Vec<u64>,
    shots: u64,
    pools: usize,
    seed: u64,
    mode: &str,
    coherent_fraction: Option<f64>,
    over_rotation: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let mode = match mode {
        "stepwise" => SimMode::Stepwise,
        "distributional" => SimMode::Distributional,
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    };
    let cfg = SimConfig::new(
        rates.0,
        gates.into_iter().map(GateCount).collect(),
        shots,
        pools,
        seed,
        mode,
    );
    let draws = match (coherent_fraction, over_rotation, mode) {
        (None, None, SimMode::Distributional) => sim::simulate_distributional(&cfg),
        (None, None, SimMode::Stepwise) => sim::simulate_stepwise(&cfg),
        (Some(f), Some(w), SimMode::Stepwise) => {
            let c = CoherentErrorConfig::new(f, w).map_err(err)?;
            sim::resample_runs(&cfg, &c)
                .map(|runs| runs.into_iter().flat_map(|r| r.draws).collect())
        }
        _ => {
            return Err(PyValueError::new_err(
                "coherent_fraction and over_rotation go together and need mode='stepwise'",
            ))
        }
    }
    .map_err(err)?;
    to_python(py, &draws)
}

/// Dataset built from simulated draws.
#[pyfunction]
#[pyo3(signature = (rates, gates, shots, seed))]
fn synthetic_dataset(
    rates: &PyRates,
    gates: Vec<u64>,
    shots: u64,
    seed: u64,
) -> PyResult<PyDataset> {
    let cfg = SimConfig::new(
        rates.0,
        gates.into_iter().map(GateCount).collect(),
        shots,
        1,
        seed,
        SimMode::Distributional,
    );
    let draws = sim::simulate_distributional(&cfg).map_err(err)?;
    data::dataset_from_draws(&draws).map(PyDataset).map_err(err)
}

#[pyfunction]
fn log_likelihood(data: &PyDataset, rates: &PyRates, thetas: Vec<f64>) -> PyResult<f64> {
    let th = thetas
        .into_iter()
        .map(PoolAngle::new)
        .collect::<twoscale::Result<Vec<_>>>()
        .map_err(err)?;
    inference::log_likelihood(&data.0, &rates.0, &th).map_err(err)
}

/// Log-likelihood with every pool angle integrated out.
#[pyfunction]
fn marginal_log_likelihood(data: &PyDataset, rates: &PyRates) -> PyResult<f64> {
    inference::marginal_log_likelihood(&data.0, &rates.0, &SeriesConfig::default()).map_err(err)
}

/// Runs both chains and returns the fit report as a dict.
#[pyfunction]
#[pyo3(signature = (data, iterations=1_000_000, burn_in=100_000, thin=20, seed=0))]
fn fit<'py>(
    py: Python<'py>,
    data: &PyDataset,
    iterations: u64,
    burn_in: u64,
    thin: u64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ChainConfig {
        total_iterations: iterations,
        burn_in,
        thin,
        seed,
        ..ChainConfig::default()
    };
    let report = py
        .detach(|| inference::fit_report(&data.0, &cfg))
        .map_err(err)?;
    to_python(py, &report)
}

#[pymodule]
fn pytwoscale(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRates>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(theta_pdf, m)?)?;
    m.add_function(wrap_pyfunction!(prob_pdf, m)?)?;
    m.add_function(wrap_pyfunction!(mean_prob, m)?)?;
    m.add_function(wrap_pyfunction!(moments, m)?)?;
    m.add_function(wrap_pyfunction!(bounds, m)?)?;
    m.add_function(wrap_pyfunction!(reduced_length, m)?)?;
    m.add_function(wrap_pyfunction!(pool_prob, m)?)?;
    m.add_function(wrap_pyfunction!(pool_mean, m)?)?;
    m.add_function(wrap_pyfunction!(pool_variance, m)?)?;
    m.add_function(wrap_pyfunction!(pool_pdf, m)?)?;
    m.add_function(wrap_pyfunction!(band_curve, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(marginal_log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    Ok(())
}
