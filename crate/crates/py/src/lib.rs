//! Python bindings.
//!
//! Structured values (schemas, delta specifications, fits, reports) cross the
//! boundary as plain dicts and lists; datasets and imputation sets stay on the
//! Rust side behind opaque handles.

use std::str::FromStr;

use od::analysis::{fit_copies, ModelKind, OutcomeFit};
use od::data::{read_csv, write_csv, Schema};
use od::design::References;
use od::diagnostics::{delta_grid_scan, missing_category_profile};
use od::dist::Link;
use od::impute::{fit_observed, write_imputations, GibbsConfig};
use od::simlab::{self, DesignKind, Scenario, ScenarioConfig};
use ordelta_core as od;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(ordelta_py, NumericalError, PyException);

fn err(e: od::Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        NumericalError::new_err(e.to_string())
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse<T: FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

fn refs(pairs: Option<Vec<String>>) -> PyResult<References> {
    let pairs = pairs.unwrap_or_default();
    References::parse(pairs.iter().map(String::as_str)).map_err(err)
}

/// Dataset with one partially observed ordinal covariate.
#[pyclass(module = "ordelta_py", frozen)]
pub struct Dataset {
    inner: od::Dataset,
}

#[pymethods]
impl Dataset {
    /// Parse CSV text using a schema dict.
    #[staticmethod]
    fn from_csv(text: &str, schema: &Bound<'_, PyAny>) -> PyResult<Self> {
        let schema: Schema = from_py(schema)?;
        let inner = read_csv(text.as_bytes(), &schema).map_err(err)?;
        Ok(Self { inner })
    }

    /// Read a CSV file using a schema dict.
    #[staticmethod]
    fn load(path: &str, schema: &Bound<'_, PyAny>) -> PyResult<Self> {
        let schema: Schema = from_py(schema)?;
        let inner = od::data::load_csv(path, &schema).map_err(err)?;
        Ok(Self { inner })
    }

    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        write_csv(&self.inner, &mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn schema<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &od::data::schema_of(&self.inner))
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn k(&self) -> u32 {
        self.inner.k()
    }

    #[getter]
    fn n_missing(&self) -> usize {
        self.inner.n_missing()
    }

    /// The ordinal column, with `None` for missing cells.
    #[getter]
    fn x1(&self) -> Vec<Option<u32>> {
        self.inner.x1().to_vec()
    }

    #[getter]
    fn outcome(&self) -> Vec<f64> {
        self.inner.outcome().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, k={}, missing={})",
            self.inner.n(),
            self.inner.k(),
            self.inner.n_missing()
        )
    }
}

/// `M` completed versions of the ordinal column.
#[pyclass(module = "ordelta_py", frozen)]
pub struct ImputationSet {
    inner: od::ImputationSet,
}

#[pymethods]
impl ImputationSet {
    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }

    #[getter]
    fn missing_rows(&self) -> Vec<usize> {
        self.inner.missing_rows.clone()
    }

    /// Completed columns, one list per copy.
    #[getter]
    fn copies(&self) -> Vec<Vec<u32>> {
        self.inner.copies.clone()
    }

    fn provenance<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.provenance)
    }

    /// Long CSV: every completed row of every copy, tagged with its imputation number.
    fn to_csv(&self, data: &Dataset) -> PyResult<String> {
        let mut buf = Vec::new();
        write_imputations(&self.inner, &data.inner, &mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "ImputationSet(m={}, missing={})",
            self.inner.m,
            self.inner.missing_rows.len()
        )
    }
}

/// Cumulative-link fit of x1 on the observed rows, as a dict.
#[pyfunction]
#[pyo3(signature = (data, link = "probit", refs = None))]
fn fit_ordinal<'py>(
    py: Python<'py>,
    data: &Dataset,
    link: &str,
    refs: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let link: Link = parse(link)?;
    let refs = self::refs(refs)?;
    let (fit, _) = py
        .detach(|| fit_observed(&data.inner, link, &refs))
        .map_err(err)?;
    to_py(py, &fit)
}

/// MAR imputation, flat or (with `hier=True`) by the random-intercept sampler.
#[pyfunction]
#[pyo3(signature = (data, m = 10, seed = 1, link = "probit", hier = false, burn_in = 1000, between = 100, refs = None))]
#[allow(clippy::too_many_arguments)]
fn impute(
    py: Python<'_>,
    data: &Dataset,
    m: usize,
    seed: u64,
    link: &str,
    hier: bool,
    burn_in: usize,
    between: usize,
    refs: Option<Vec<String>>,
) -> PyResult<ImputationSet> {
    let link: Link = parse(link)?;
    let refs = self::refs(refs)?;
    let ds = &data.inner;
    let inner = py
        .detach(|| {
            if hier {
                let gibbs = GibbsConfig {
                    burn_in,
                    between,
                    seed,
                };
                od::impute_mar_hier(ds, m, &gibbs, &refs)
            } else {
                od::impute_mar_flat(ds, m, link, &refs, seed)
            }
        })
        .map_err(err)?;
    Ok(ImputationSet { inner })
}

/// Delta-adjust an imputation set. `delta` is a list or a spec dict
/// (`{"default": [...], "strata": {...}, "sigma2": ...}`).
#[pyfunction]
#[pyo3(signature = (data, imputations, delta, seed = 1, link = "probit", refs = None))]
fn adjust(
    py: Python<'_>,
    data: &Dataset,
    imputations: &ImputationSet,
    delta: &Bound<'_, PyAny>,
    seed: u64,
    link: &str,
    refs: Option<Vec<String>>,
) -> PyResult<ImputationSet> {
    let spec = delta_spec(delta)?;
    let link: Link = parse(link)?;
    let refs = self::refs(refs)?;
    let adjusted = py
        .detach(|| od::adjust(&imputations.inner, &data.inner, &spec, link, &refs, seed))
        .map_err(err)?;
    Ok(ImputationSet {
        inner: adjusted.set,
    })
}

fn delta_spec(obj: &Bound<'_, PyAny>) -> PyResult<od::DeltaSpec> {
    match obj.extract::<Vec<f64>>() {
        Ok(v) => Ok(od::DeltaSpec::uniform(v)),
        Err(_) => from_py(obj),
    }
}

/// Fit the outcome model to every copy; returns the list of per-copy fits.
#[pyfunction]
#[pyo3(signature = (data, imputations, model = "auto", refs = None))]
fn analyze<'py>(
    py: Python<'py>,
    data: &Dataset,
    imputations: &ImputationSet,
    model: &str,
    refs: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let kind = if model == "auto" {
        ModelKind::for_dataset(&data.inner)
    } else {
        parse(model)?
    };
    let refs = self::refs(refs)?;
    let fits = py
        .detach(|| fit_copies(&data.inner, &imputations.inner.copies, kind, &refs))
        .map_err(err)?;
    to_py(py, &fits)
}

/// Rubin's rules over the fits returned by `analyze`.
#[pyfunction]
fn pool<'py>(py: Python<'py>, fits: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let fits: Vec<OutcomeFit> = from_py(fits)?;
    to_py(py, &od::pool_rubin(&fits).map_err(err)?)
}

/// Category profile of the imputed cells, overall and optionally by stratum.
#[pyfunction]
#[pyo3(signature = (data, imputations, label = "MAR", by = None))]
fn profiles<'py>(
    py: Python<'py>,
    data: &Dataset,
    imputations: &ImputationSet,
    label: &str,
    by: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let prof = missing_category_profile(&imputations.inner, &data.inner, label, by).map_err(err)?;
    to_py(py, &prof)
}

/// MAR profile followed by one profile per `{label, delta}` scenario.
#[pyfunction]
#[pyo3(signature = (data, imputations, grid, seed = 1, link = "probit", by = None, refs = None))]
#[allow(clippy::too_many_arguments)]
fn delta_scan<'py>(
    py: Python<'py>,
    data: &Dataset,
    imputations: &ImputationSet,
    grid: &Bound<'py, PyAny>,
    seed: u64,
    link: &str,
    by: Option<&str>,
    refs: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let grid: Vec<Scenario> = from_py(grid)?;
    let specs: Vec<(String, od::DeltaSpec)> =
        grid.into_iter().map(|s| (s.label, s.delta)).collect();
    let link: Link = parse(link)?;
    let refs = self::refs(refs)?;
    let prof = py
        .detach(|| {
            delta_grid_scan(
                &data.inner,
                &imputations.inner,
                &specs,
                link,
                &refs,
                seed,
                by,
            )
        })
        .map_err(err)?;
    to_py(py, &prof)
}

fn scenario(design: &str, config: Option<&Bound<'_, PyAny>>) -> PyResult<ScenarioConfig> {
    match config {
        Some(c) => from_py(c),
        None => Ok(ScenarioConfig::preset(parse::<DesignKind>(design)?)),
    }
}

/// Shipped configuration of a built-in design, as a dict.
#[pyfunction]
fn preset<'py>(py: Python<'py>, design: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &ScenarioConfig::preset(parse::<DesignKind>(design)?))
}

/// One replication's complete and masked datasets.
#[pyfunction]
#[pyo3(signature = (design = "nonhier-extreme", rep = 0, config = None))]
fn simulate_data(
    design: &str,
    rep: usize,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<(Dataset, Dataset)> {
    let cfg = scenario(design, config)?;
    let (full, masked) = simlab::replicate_data(&cfg, rep).map_err(err)?;
    Ok((Dataset { inner: full }, Dataset { inner: masked }))
}

/// Monte Carlo run of a design; returns the report dict.
#[pyfunction]
#[pyo3(signature = (design = "nonhier-extreme", r = None, m = None, seed = None, config = None))]
fn simulate<'py>(
    py: Python<'py>,
    design: &str,
    r: Option<usize>,
    m: Option<usize>,
    seed: Option<u64>,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = scenario(design, config)?;
    cfg.r = r.unwrap_or(cfg.r);
    cfg.m = m.unwrap_or(cfg.m);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.validate().map_err(err)?;
    let report = py.detach(|| od::run_monte_carlo(&cfg)).map_err(err)?;
    to_py(py, &report)
}

/// Intraclass correlation of a logistic random intercept with this SD.
#[pyfunction]
fn icc(sd: f64) -> f64 {
    od::compute_icc(sd)
}

#[pymodule]
fn ordelta_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", od::VERSION)?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<ImputationSet>()?;
    m.add_function(wrap_pyfunction!(fit_ordinal, m)?)?;
    m.add_function(wrap_pyfunction!(impute, m)?)?;
    m.add_function(wrap_pyfunction!(adjust, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(pool, m)?)?;
    m.add_function(wrap_pyfunction!(profiles, m)?)?;
    m.add_function(wrap_pyfunction!(delta_scan, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_data, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(icc, m)?)?;
    Ok(())
}
