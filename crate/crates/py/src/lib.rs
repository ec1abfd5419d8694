//! Python bindings: statistics, classification, kernel density, synthetic scenarios and
//! the staged pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mmequity::geo::{self, Extent, ProjectedPoint, SearchRadius};
use mmequity::model::{self, GeoPoint, IncomeThresholds, Instant, Mode};
use mmequity::pipeline::{self as core_pipeline, ModeSelect, PipelineError, Stage};
use mmequity::stats;
use mmequity::synth::{generate_scenario, ScenarioSpec, SynthError};
use mmequity::tripinfer::{self, FilterOutcome, Trip, TripFilterRules};

create_exception!(mmequity, DataError, PyValueError);

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pipeline_err(e: PipelineError) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => DataError::new_err(e.to_string()),
        _ => PyOSError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn point(p: (f64, f64)) -> PyResult<GeoPoint> {
    GeoPoint::new(p.0, p.1).map_err(value_err)
}

#[pyclass(frozen, get_all, module = "mmequity")]
struct WelchResult {
    t: f64,
    df: f64,
    p: f64,
    alpha: f64,
    significant: bool,
    mean_a: f64,
    mean_b: f64,
    n_a: usize,
    n_b: usize,
}

#[pymethods]
impl WelchResult {
    fn __repr__(&self) -> String {
        format!("WelchResult(t={}, df={}, p={}, significant={})", self.t, self.df, self.p, self.significant)
    }
}

impl From<stats::WelchResult> for WelchResult {
    fn from(r: stats::WelchResult) -> Self {
        WelchResult {
            t: r.t,
            df: r.df,
            p: r.p,
            alpha: r.alpha,
            significant: r.significant,
            mean_a: r.mean_a,
            mean_b: r.mean_b,
            n_a: r.n_a,
            n_b: r.n_b,
        }
    }
}

/// Welch's two-sample t-test, two-sided.
#[pyfunction]
#[pyo3(signature = (a, b, alpha = 0.05))]
fn welch_t(a: Vec<f64>, b: Vec<f64>, alpha: f64) -> PyResult<WelchResult> {
    stats::welch_t(&a, &b, alpha).map(Into::into).map_err(value_err)
}

#[pyfunction]
fn t_cdf(t: f64, df: f64) -> PyResult<f64> {
    stats::t_cdf(t, df).map_err(value_err)
}

/// "Low", "Middle", "High" or "Unknown".
#[pyfunction]
#[pyo3(signature = (median_income, low_max = 49_222.0, high_min = 130_615.0))]
fn classify_income(median_income: Option<f64>, low_max: f64, high_min: f64) -> PyResult<&'static str> {
    let th = IncomeThresholds::new(low_max, high_min).map_err(value_err)?;
    Ok(model::classify_income(median_income, &th).label())
}

/// Majority label such as "Black-Majority", or "No-Majority".
#[pyfunction]
fn classify_race(shares: Option<BTreeMap<String, f64>>) -> String {
    model::classify_race(shares.as_ref()).label()
}

/// Great-circle distance in meters between two (lon, lat) points.
#[pyfunction]
fn haversine(a: (f64, f64), b: (f64, f64)) -> PyResult<f64> {
    Ok(geo::haversine(point(a)?, point(b)?))
}

#[pyfunction]
fn quartic_kernel(d: f64, r: f64) -> f64 {
    geo::quartic_kernel(d, r)
}

/// Kernel density in points per km² over projected (x, y) meters. Rows run south to north.
#[pyfunction]
#[pyo3(signature = (points, radius_m, origin, cell_size_m, nrows, ncols, weights = None))]
#[allow(clippy::too_many_arguments)]
fn kde_raster(
    py: Python<'_>,
    points: Vec<(f64, f64)>,
    radius_m: f64,
    origin: (f64, f64),
    cell_size_m: f64,
    nrows: usize,
    ncols: usize,
    weights: Option<Vec<f64>>,
) -> PyResult<Vec<Vec<f64>>> {
    let radius = SearchRadius::new(radius_m).map_err(value_err)?;
    let extent = Extent::new(ProjectedPoint::new(origin.0, origin.1), cell_size_m, nrows, ncols).map_err(value_err)?;
    if weights.as_ref().is_some_and(|w| w.len() != points.len()) {
        return Err(PyValueError::new_err("weights and points differ in length"));
    }
    let pts: Vec<(ProjectedPoint, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, (x, y))| (ProjectedPoint::new(*x, *y), weights.as_ref().map_or(1.0, |w| w[i])))
        .collect();
    let raster = py.detach(|| geo::kde_raster_weighted(&pts, radius, extent)).map_err(value_err)?;
    Ok(raster.values.chunks(ncols).map(<[f64]>::to_vec).collect())
}

/// Σ w·m / Σ w over (weight, value) pairs; None when the weights sum to zero.
#[pyfunction]
fn weighted_mean(pairs: Vec<(f64, f64)>) -> Option<f64> {
    mmequity::metrics::weighted_mean(&pairs)
}

/// "keep" or the rejection reason for a scooter trip between two (lon, lat) points.
#[pyfunction]
#[pyo3(signature = (duration_min, start, end, docked = false))]
fn filter_trip(duration_min: f64, start: (f64, f64), end: (f64, f64), docked: bool) -> PyResult<&'static str> {
    let rules = if docked { TripFilterRules::default().docked() } else { TripFilterRules::default() };
    let trip = Trip {
        mode: if docked { Mode::Bike } else { Mode::Scooter },
        operator: String::new(),
        vehicle_id: None,
        start_time: Instant(0),
        end_time: Instant((duration_min * 60.0).round() as i64),
        start_point: point(start)?,
        end_point: point(end)?,
        start_station: None,
        end_station: None,
        duration_min,
        distance_m: None,
        linked: true,
    };
    Ok(match tripinfer::filter_trip(&trip, &rules) {
        FilterOutcome::Keep => "keep",
        FilterOutcome::Reject(r) => r.as_str(),
    })
}

/// Writes a synthetic city to `out_dir`. `config` is scenario TOML text. Returns the
/// number of files written.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = None, config = None))]
fn synth(py: Python<'_>, out_dir: PathBuf, seed: Option<u64>, config: Option<&str>) -> PyResult<usize> {
    let mut spec: ScenarioSpec = match config {
        Some(text) => toml::from_str(text).map_err(value_err)?,
        None => ScenarioSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let result = py.detach(|| generate_scenario(&spec).and_then(|s| s.write(&out_dir)));
    match result {
        Ok(m) => Ok(m.manifest.files.len() + 1),
        Err(e @ SynthError::Io { .. }) => Err(PyOSError::new_err(e.to_string())),
        Err(e) => Err(value_err(e)),
    }
}

/// Staged analysis pipeline over a run configuration file.
#[pyclass(frozen, module = "mmequity")]
struct Pipeline {
    inner: core_pipeline::Pipeline,
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (config, out = None, mode = "both"))]
    fn new(config: PathBuf, out: Option<PathBuf>, mode: &str) -> PyResult<Self> {
        let select = ModeSelect::parse(mode).ok_or_else(|| PyValueError::new_err(format!("unknown mode {mode:?}")))?;
        let inner = core_pipeline::Pipeline::from_config_file(&config, out, select).map_err(pipeline_err)?;
        Ok(Pipeline { inner })
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir().to_path_buf()
    }

    #[getter]
    fn modes(&self) -> Vec<&'static str> {
        self.inner.modes().iter().map(|m| m.as_str()).collect()
    }

    /// Runs every stage, or up to `stage`, and returns the run report.
    #[pyo3(signature = (stage = None))]
    fn run<'py>(&self, py: Python<'py>, stage: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let last = match stage {
            Some(s) => Stage::parse(s).ok_or_else(|| PyValueError::new_err(format!("unknown stage {s:?}")))?,
            None => Stage::Report,
        };
        let report = py.detach(|| self.inner.run_through(last)).map_err(pipeline_err)?;
        json_to_py(py, &report)
    }

    /// Runs one stage against existing upstream outputs and returns its manifest.
    fn run_stage<'py>(&self, py: Python<'py>, stage: &str) -> PyResult<Bound<'py, PyAny>> {
        let stage = Stage::parse(stage).ok_or_else(|| PyValueError::new_err(format!("unknown stage {stage:?}")))?;
        let manifest = py.detach(|| self.inner.run_stage(stage)).map_err(pipeline_err)?;
        json_to_py(py, &manifest)
    }
}

#[pymodule]
#[pyo3(name = "mmequity")]
fn mmequity_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DataError", m.py().get_type::<DataError>())?;
    m.add_class::<WelchResult>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(welch_t, m)?)?;
    m.add_function(wrap_pyfunction!(t_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(classify_income, m)?)?;
    m.add_function(wrap_pyfunction!(classify_race, m)?)?;
    m.add_function(wrap_pyfunction!(haversine, m)?)?;
    m.add_function(wrap_pyfunction!(quartic_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(kde_raster, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_mean, m)?)?;
    m.add_function(wrap_pyfunction!(filter_trip, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}
