//! Python bindings: knowledge verbalization, retrieval, losses and metrics,
//! the synthetic benchmark and the end-to-end experiment.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ramehr::corpus::Triplet;
use ramehr::ehr::LabelVector;
use ramehr::experiment::ExperimentConfig;
use ramehr::synth::SynthConfig;
use ramehr::{cotrain, metrics, retrieval, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.exit_code() == 3 => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(format!("config: {e}"))),
        None => Ok(T::default()),
    }
}

/// Renders a knowledge-graph triplet as a sentence.
#[pyfunction]
fn verbalize_triplet(head: &str, relation: &str, tail: &str) -> PyResult<String> {
    ramehr::corpus::verbalize_triplet(&Triplet {
        head: head.into(),
        relation: relation.into(),
        tail: tail.into(),
    })
    .map_err(py_err)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).map_err(py_err)
}

#[pyfunction]
fn aupr(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::aupr(&scores, &labels).map_err(py_err)
}

/// Mean binary cross-entropy.
#[pyfunction]
fn bce(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    cotrain::bce(&pred, &target).map_err(py_err)
}

/// Mean Bernoulli KL divergence KL(p || q).
#[pyfunction]
fn bernoulli_kl(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    cotrain::bernoulli_kl(&p, &q).map_err(py_err)
}

/// `beta * y1 + (1 - beta) * y2`, elementwise.
#[pyfunction]
fn blend(y1: Vec<f64>, y2: Vec<f64>, beta: f64) -> PyResult<Vec<f64>> {
    if y1.len() != y2.len() {
        return Err(PyValueError::new_err("y1 and y2 differ in length"));
    }
    Ok(cotrain::blend(&y1, &y2, beta))
}

/// Multi-label report as a JSON string.
#[pyfunction]
#[pyo3(signature = (scores, labels, label_names, threshold = 0.5))]
fn evaluate(scores: Vec<Vec<f64>>, labels: Vec<Vec<u8>>, label_names: Vec<String>, threshold: f64) -> PyResult<String> {
    let labels = labels
        .into_iter()
        .map(LabelVector::new)
        .collect::<ramehr::Result<Vec<_>>>()
        .map_err(py_err)?;
    Ok(metrics::evaluate(&scores, &labels, &label_names, threshold).map_err(py_err)?.to_json())
}

#[pyclass(frozen)]
struct HashEmbedder {
    inner: retrieval::HashEmbedder,
    dim: usize,
}

#[pymethods]
impl HashEmbedder {
    #[new]
    #[pyo3(signature = (dim, seed = 0))]
    fn new(dim: usize, seed: u64) -> PyResult<Self> {
        Ok(HashEmbedder {
            inner: retrieval::hash_embedder(dim, seed).map_err(py_err)?,
            dim,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.dim
    }

    /// Unit-norm embedding of `text`.
    fn encode(&self, text: &str) -> Vec<f32> {
        self.inner.encode(text)
    }
}

/// Flat inner-product index with exact top-k search.
#[pyclass(frozen)]
struct VectorIndex {
    inner: retrieval::VectorIndex,
}

#[pymethods]
impl VectorIndex {
    #[new]
    fn new(ids: Vec<String>, rows: Vec<Vec<f32>>) -> PyResult<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        Ok(VectorIndex {
            inner: retrieval::VectorIndex::from_rows(ids, dim, rows).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(VectorIndex {
            inner: retrieval::VectorIndex::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(id, score)` pairs, best first, ties by ascending id.
    fn topk(&self, query: Vec<f32>, k: usize) -> PyResult<Vec<(String, f32)>> {
        if k == 0 {
            return Err(PyValueError::new_err("k must be at least 1"));
        }
        retrieval::topk_vector(&self.inner, &query, k).map_err(py_err)
    }
}

/// Writes the synthetic benchmark files into `directory` and returns
/// `(patients, codes, passages)`.
#[pyfunction]
#[pyo3(signature = (directory, config_json = None))]
fn generate_synthetic(directory: &str, config_json: Option<&str>) -> PyResult<(usize, usize, usize)> {
    let cfg: SynthConfig = parse_json(config_json)?;
    let bench = ramehr::synth::generate(&cfg).map_err(py_err)?;
    bench.save(directory).map_err(py_err)?;
    Ok((bench.dataset.len(), bench.vocab.len(), bench.passages.len()))
}

/// Runs the end-to-end synthetic experiment; returns the report JSON.
#[pyfunction]
#[pyo3(signature = (config_json = None))]
fn run_experiment(py: Python<'_>, config_json: Option<&str>) -> PyResult<String> {
    let cfg: ExperimentConfig = parse_json(config_json)?;
    let outcome = py.detach(|| ramehr::experiment::run(&cfg)).map_err(py_err)?;
    Ok(outcome.report.to_json())
}

#[pymodule]
fn ramehr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(verbalize_triplet, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(aupr, m)?)?;
    m.add_function(wrap_pyfunction!(bce, m)?)?;
    m.add_function(wrap_pyfunction!(bernoulli_kl, m)?)?;
    m.add_function(wrap_pyfunction!(blend, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<HashEmbedder>()?;
    m.add_class::<VectorIndex>()?;
    Ok(())
}
