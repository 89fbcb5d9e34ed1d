//! Python bindings. Series cross the boundary as lists of rows and
//! configurations as JSON strings in the same format the CLI reads.

// `!(x > 0.0)` is how configs reject NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use aepoison::detector::{self, DetectorConfig};
use aepoison::harness::{self, GridOptions, GridSpec, Scenario, SweepConfig};
use aepoison::nn::TrainConfig;
use aepoison::poisoning::{self, Algorithm, InitMode, PoisonConfig};
use aepoison::signals::{self, AttackSpec, SignalSpec};
use aepoison::timeseries::SeriesMatrix;
use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;

type Rows = Vec<Vec<f64>>;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: DeserializeOwned>(json: &str) -> PyResult<T> {
    serde_json::from_str(json).map_err(err)
}

fn to_series(rows: &Rows) -> PyResult<SeriesMatrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(err("rows have different lengths"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let a = Array2::from_shape_vec((rows.len(), cols), flat).map_err(err)?;
    SeriesMatrix::from_array(a).map_err(err)
}

fn to_rows(s: &SeriesMatrix) -> Rows {
    s.values().outer_iter().map(|r| r.to_vec()).collect()
}

fn algorithm(name: &str) -> PyResult<Algorithm> {
    match name {
        "interp" => Ok(Algorithm::Interp),
        "backgrad" => Ok(Algorithm::Backgrad),
        _ => Err(err(format!("unknown algorithm {name:?}"))),
    }
}

fn init_mode(name: &str) -> PyResult<InitMode> {
    match name {
        "benign" => Ok(InitMode::Benign),
        "attack" => Ok(InitMode::AttackBased),
        _ => Err(err(format!("unknown init mode {name:?}"))),
    }
}

/// Synthetic series from a signal spec.
#[pyfunction]
#[pyo3(signature = (spec, clean = false))]
fn generate(spec: &str, clean: bool) -> PyResult<Rows> {
    let spec: SignalSpec = parse(spec)?;
    let s = if clean {
        signals::generate_clean(&spec)
    } else {
        signals::generate(&spec)
    }
    .map_err(err)?;
    Ok(to_rows(&s))
}

/// Returns the attacked series and the `(start, end)` rows it touched.
#[pyfunction]
#[pyo3(signature = (series, attack, signal = None, feature = 0))]
fn inject_attack(series: Rows, attack: &str, signal: Option<&str>, feature: usize) -> PyResult<(Rows, (usize, usize))> {
    let attack: AttackSpec = parse(attack)?;
    let signal: Option<SignalSpec> = signal.map(parse).transpose()?;
    let (out, range) = signals::inject_attack(&to_series(&series)?, feature, &attack, signal.as_ref()).map_err(err)?;
    Ok((to_rows(&out), (range.start, range.end)))
}

/// A trained detector.
#[pyclass]
struct Detector {
    inner: detector::Detector,
}

#[pymethods]
impl Detector {
    #[staticmethod]
    fn fit(config: &str, train_config: &str, series: Vec<Rows>) -> PyResult<Self> {
        let config: DetectorConfig = parse(config)?;
        let train_cfg: TrainConfig = parse(train_config)?;
        let data = series.iter().map(to_series).collect::<PyResult<Vec<_>>>()?;
        let (inner, _) = detector::Detector::fit(&config, &data, &train_cfg).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: detector::Detector::load_json(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_json(path).map_err(err)
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.config.threshold
    }

    #[setter]
    fn set_threshold(&mut self, t: f64) -> PyResult<()> {
        if !(t > 0.0) {
            return Err(err("threshold must be positive"));
        }
        self.inner.config.threshold = t;
        Ok(())
    }

    /// Per-point residuals.
    fn residuals(&self, series: Rows) -> PyResult<Vec<f64>> {
        Ok(self.inner.score(&to_series(&series)?).map_err(err)?.residuals)
    }

    /// Indices of the alerting points.
    fn alerts(&self, series: Rows) -> PyResult<Vec<usize>> {
        Ok(self.inner.score(&to_series(&series)?).map_err(err)?.alert_indices)
    }

    fn reconstruct(&self, series: Rows) -> PyResult<Rows> {
        Ok(to_rows(&self.inner.reconstruct(&to_series(&series)?).map_err(err)?))
    }
}

/// Poison a synthetic scenario; returns the result as JSON.
#[pyfunction]
#[pyo3(signature = (scenario, algo = "interp", init = "benign", config = None))]
fn poison(py: Python<'_>, scenario: &str, algo: &str, init: &str, config: Option<&str>) -> PyResult<String> {
    let sc: Scenario = parse(scenario)?;
    let mut cfg: PoisonConfig = config.map(parse).transpose()?.unwrap_or_default();
    cfg.init_mode = init_mode(init)?;
    cfg.seed = harness::derive_seed(sc.seed, harness::STREAM_POISON, 0);
    let algo = algorithm(algo)?;
    py.detach(|| {
        let problem = sc.build()?;
        poisoning::run_poisoning(&problem, algo, &cfg)
    })
    .map_err(err)?
    .canonical_json()
    .map_err(err)
}

/// Largest magnitude on the sweep that the algorithm still poisons.
#[pyfunction]
#[pyo3(signature = (scenario, algo = "interp", step = 0.05, max_magnitude = 1.0, config = None))]
fn max_poisonable_magnitude(
    py: Python<'_>,
    scenario: &str,
    algo: &str,
    step: f64,
    max_magnitude: f64,
    config: Option<&str>,
) -> PyResult<f64> {
    let sc: Scenario = parse(scenario)?;
    let cfg: PoisonConfig = config.map(parse).transpose()?.unwrap_or_default();
    let algo = algorithm(algo)?;
    let sweep = SweepConfig {
        step,
        max_magnitude,
        exhaustive: false,
    };
    let r = py
        .detach(|| harness::max_poisonable_magnitude(&sc, algo, &cfg, &sweep))
        .map_err(err)?;
    Ok(r.max_magnitude)
}

/// Run a grid spec; returns the metric records as JSON.
#[pyfunction]
#[pyo3(signature = (spec, workers = 0))]
fn run_grid(py: Python<'_>, spec: &str, workers: usize) -> PyResult<String> {
    let spec: GridSpec = parse(spec)?;
    let runs = py
        .detach(|| harness::run_grid(&spec, &GridOptions { workers, journal: None }))
        .map_err(err)?;
    let records: Vec<_> = runs.into_iter().map(|r| r.record).collect();
    serde_json::to_string(&records).map_err(err)
}

#[pymodule]
fn aepoison_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Detector>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(inject_attack, m)?)?;
    m.add_function(wrap_pyfunction!(poison, m)?)?;
    m.add_function(wrap_pyfunction!(max_poisonable_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(run_grid, m)?)?;
    Ok(())
}
