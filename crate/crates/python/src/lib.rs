//! Python bindings. Configs and results cross the boundary as plain
//! dicts and lists through the `json` module.

use std::path::Path;

use frogsim_core::brw::{self, BirthLaw, BrwCaps, ScheduleVariant};
use frogsim_core::frog::{self, FrogConfig};
use frogsim_core::harmonic;
use frogsim_core::harness::{self, BisectSpec, ExperimentSpec};
use frogsim_core::treegen::{self, TreeHandle, TreeKind, VertexId, DEFAULT_VERTEX_CAP};
use frogsim_core::truncated::{self, CouplingCaps, TruncConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: frogsim_core::Error) -> PyErr {
    match e {
        frogsim_core::Error::Io(_) | frogsim_core::Error::Unstable(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = if obj.is_instance_of::<PyString>() {
        obj.extract()?
    } else {
        obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?
    };
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn opt_from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    obj.map_or_else(|| Ok(T::default()), from_py)
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn vertex(v: &str) -> PyResult<VertexId> {
    v.parse().map_err(err)
}

/// A rooted tree from a kind such as `{"kind": "dary", "d": 2}` and a seed.
#[pyclass(frozen)]
struct Tree {
    inner: TreeHandle,
}

#[pymethods]
impl Tree {
    #[new]
    #[pyo3(signature = (kind, seed = 0))]
    fn new(kind: &Bound<'_, PyAny>, seed: u64) -> PyResult<Self> {
        let kind: TreeKind = from_py(kind)?;
        Ok(Tree { inner: treegen::make_tree(kind, seed).map_err(err)? })
    }

    #[getter]
    fn kind<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.kind())
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    fn children(&self, v: &str) -> PyResult<u32> {
        self.inner.children(&vertex(v)?).map_err(err)
    }

    /// Text dump of the first `depth` levels: `path<TAB>child_count`, BFS order.
    #[pyo3(signature = (depth, vertex_cap = DEFAULT_VERTEX_CAP))]
    fn truncate(&self, depth: u32, vertex_cap: usize) -> PyResult<String> {
        Ok(self.inner.truncate(depth, vertex_cap).map_err(err)?.to_text())
    }

    fn hit_parent_prob(&self, v: &str, depth_cap: u32) -> PyResult<(f64, f64)> {
        let b = harmonic::hit_parent_prob(&self.inner, &vertex(v)?, depth_cap).map_err(err)?;
        Ok((b.lo, b.hi))
    }

    fn hit_root_prob(&self, v: &str, depth_cap: u32) -> PyResult<(f64, f64)> {
        let b = harmonic::hit_root_prob(&self.inner, &vertex(v)?, depth_cap).map_err(err)?;
        Ok((b.lo, b.hi))
    }

    /// First-hit distribution on level `n` as `{vertex: probability}`.
    #[pyo3(signature = (n, vertex_cap = DEFAULT_VERTEX_CAP))]
    fn first_hit_level(&self, n: u32, vertex_cap: usize) -> PyResult<Vec<(String, f64)>> {
        let f = harmonic::first_hit_level_n(&self.inner, n, vertex_cap).map_err(err)?;
        Ok(f.into_iter().map(|(v, p)| (v.to_string(), p)).collect())
    }

    fn __repr__(&self) -> String {
        let kind = serde_json::to_string(self.inner.kind()).unwrap_or_default();
        format!("Tree({kind}, seed={})", self.inner.seed())
    }
}

#[pyfunction]
#[pyo3(signature = (tree, seed, config = None))]
fn run_fm<'py>(py: Python<'py>, tree: &Tree, seed: u64, config: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: FrogConfig = opt_from_py(config)?;
    let stats = py.detach(|| frog::run_fm(&tree.inner, &cfg, seed)).map_err(err)?;
    to_py(py, &stats)
}

#[pyfunction]
#[pyo3(signature = (tree, seed, config = None))]
fn run_tfm<'py>(py: Python<'py>, tree: &Tree, seed: u64, config: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: TruncConfig = opt_from_py(config)?;
    let stats = py
        .detach(|| if cfg.p.is_some() { truncated::run_tfm_p(&tree.inner, &cfg, seed) } else { truncated::run_tfm(&tree.inner, &cfg, seed) })
        .map_err(err)?;
    to_py(py, &stats)
}

#[pyfunction]
#[pyo3(signature = (tree, lam, seed, caps = None))]
fn coupled_run<'py>(
    py: Python<'py>,
    tree: &Tree,
    lam: f64,
    seed: u64,
    caps: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let caps: CouplingCaps = opt_from_py(caps)?;
    let out = py.detach(|| truncated::coupled_run(&tree.inner, lam, seed, &caps)).map_err(err)?;
    to_py(py, &out)
}

#[pyfunction]
fn make_schedule<'py>(py: Python<'py>, variant: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let v: ScheduleVariant = from_py(variant)?;
    to_py(py, &brw::make_schedule(v).map_err(err)?)
}

#[pyfunction]
fn contraction_check<'py>(py: Python<'py>, variant: &Bound<'py, PyAny>, max_j: u32) -> PyResult<Bound<'py, PyAny>> {
    let s = brw::make_schedule(from_py(variant)?).map_err(err)?;
    to_py(py, &brw::contraction_check(&s, max_j))
}

#[pyfunction]
#[pyo3(signature = (tree, schedule, births, seed, caps = None))]
fn run_brw<'py>(
    py: Python<'py>,
    tree: &Tree,
    schedule: &Bound<'py, PyAny>,
    births: &Bound<'py, PyAny>,
    seed: u64,
    caps: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let s = brw::make_schedule(from_py(schedule)?).map_err(err)?;
    let births: BirthLaw = from_py(births)?;
    let caps: BrwCaps = opt_from_py(caps)?;
    let t = py.detach(|| brw::run_brw(&tree.inner, &s, &births, &caps, seed)).map_err(err)?;
    to_py(py, &t)
}

/// Runs an experiment from a TOML string or a dict; writes the output
/// files when `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (spec, out_dir = None))]
fn run_experiment<'py>(py: Python<'py>, spec: &Bound<'py, PyAny>, out_dir: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let spec: ExperimentSpec = if spec.is_instance_of::<PyString>() {
        ExperimentSpec::from_toml(&spec.extract::<String>()?).map_err(err)?
    } else {
        let s: ExperimentSpec = from_py(spec)?;
        s.validate().map_err(err)?;
        s
    };
    let out = py.detach(|| harness::run_experiment(&spec)).map_err(err)?;
    if let Some(dir) = out_dir {
        out.write(Path::new(dir)).map_err(err)?;
    }
    let result = serde_json::json!({
        "spec_hash": out.spec_hash,
        "abort_rate": out.abort_rate(),
        "audits": out.summary.audits,
        "summary": out.summary.rows,
        "records": out.records.len(),
    });
    to_py(py, &result)
}

#[pyfunction]
#[pyo3(signature = (spec = None))]
fn bisect<'py>(py: Python<'py>, spec: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let b: BisectSpec = opt_from_py(spec)?;
    to_py(py, &py.detach(|| harness::bisect_lambda_star(&b)).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (records, fraction = 0.01))]
fn verify<'py>(py: Python<'py>, records: &str, fraction: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &py.detach(|| harness::verify_path(Path::new(records), fraction)).map_err(err)?)
}

#[pymodule]
pub fn frogsim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tree>()?;
    m.add_function(wrap_pyfunction!(run_fm, m)?)?;
    m.add_function(wrap_pyfunction!(run_tfm, m)?)?;
    m.add_function(wrap_pyfunction!(coupled_run, m)?)?;
    m.add_function(wrap_pyfunction!(make_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(contraction_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_brw, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(bisect, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add("__version__", harness::ENGINE_VERSION)?;
    Ok(())
}
