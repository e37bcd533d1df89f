//! Python bindings: configuration, features, back-ends, EER and the
//! pipeline driver.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use lab::backend::{self, LdaProjection, PldaModel};
use lab::embedding::Embedding;
use lab::Error;

fn py_err(e: Error) -> PyErr {
    let msg = format!("[{}] {e}", e.kind());
    match e.class() {
        lab::error::ErrorClass::Usage => PyValueError::new_err(msg),
        lab::error::ErrorClass::Data => PyIOError::new_err(msg),
        lab::error::ErrorClass::Numeric => PyRuntimeError::new_err(msg),
    }
}

fn rows(m: &lab::nn::Mat<f64>) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

fn embeddings(vectors: Vec<Vec<f64>>, labels: &[String]) -> PyResult<Vec<Embedding>> {
    if vectors.len() != labels.len() {
        return Err(PyValueError::new_err(format!("{} vectors but {} labels", vectors.len(), labels.len())));
    }
    Ok(vectors
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (v, l))| Embedding { utterance_id: format!("x{i}"), speaker_id: l.clone(), language_id: String::new(), vector: v })
        .collect())
}

#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig(lab::config::ExperimentConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        lab::config::ExperimentConfig::parse(text).map(PyConfig).map_err(py_err)
    }

    fn set(&mut self, assignment: &str) -> PyResult<()> {
        self.0.set(assignment).map_err(py_err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        lab::config::key_def(key).ok_or_else(|| PyValueError::new_err(format!("unknown key {key:?}")))?;
        Ok(self.0.get(key).to_string())
    }

    fn report(&self) -> String {
        self.0.report()
    }

    fn hash(&self) -> String {
        self.0.hash()
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(py_err)
    }
}

/// log-Mel filterbank, one row per 10 ms frame.
#[pyfunction]
#[pyo3(signature = (samples, n_mels = 40))]
fn fbank(samples: Vec<i16>, n_mels: usize) -> PyResult<Vec<Vec<f64>>> {
    let f = lab::frontend::Frontend::new(n_mels).map_err(py_err)?;
    Ok(rows(&f.fbank(&samples).map_err(py_err)?))
}

/// 19 cepstra plus log energy per frame.
#[pyfunction]
fn mfcc(samples: Vec<i16>) -> PyResult<Vec<Vec<f64>>> {
    let f = lab::frontend::Frontend::new(lab::frontend::MFCC_FILTERS).map_err(py_err)?;
    Ok(rows(&f.mfcc(&samples, lab::frontend::MFCC_DIM).map_err(py_err)?))
}

#[pyfunction]
fn cosine_score(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    backend::cosine_score(&a, &b).map_err(py_err)
}

/// Returns `(eer, threshold)`.
#[pyfunction]
fn compute_eer(targets: Vec<f64>, nontargets: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = lab::evalkit::compute_eer_scores(&targets, &nontargets).map_err(py_err)?;
    Ok((r.eer, r.threshold))
}

#[pyclass(name = "Lda", from_py_object)]
#[derive(Clone)]
struct PyLda(LdaProjection);

#[pymethods]
impl PyLda {
    #[staticmethod]
    fn train(vectors: Vec<Vec<f64>>, labels: Vec<String>, dim: usize) -> PyResult<Self> {
        backend::train_lda(&embeddings(vectors, &labels)?, dim).map(PyLda).map_err(py_err)
    }

    fn project(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        let e = Embedding { utterance_id: "x".into(), speaker_id: String::new(), language_id: String::new(), vector: v };
        Ok(self.0.project(&e).map_err(py_err)?.vector)
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.0.eigenvalues.clone()
    }
}

#[pyclass(name = "Plda", from_py_object)]
#[derive(Clone)]
struct PyPlda {
    model: PldaModel,
    #[pyo3(get)]
    history: Vec<f64>,
}

#[pymethods]
impl PyPlda {
    #[staticmethod]
    #[pyo3(signature = (vectors, labels, iterations = 10))]
    fn train(vectors: Vec<Vec<f64>>, labels: Vec<String>, iterations: usize) -> PyResult<Self> {
        let (model, history) = backend::train_plda(&embeddings(vectors, &labels)?, iterations).map_err(py_err)?;
        Ok(PyPlda { model, history })
    }

    fn score(&self, enroll: Vec<f64>, test: Vec<f64>) -> PyResult<f64> {
        self.model.score(&enroll, &test).map_err(py_err)
    }
}

/// Centre on `mean` and scale each vector to unit length.
#[pyfunction]
fn center_lengthnorm(vectors: Vec<Vec<f64>>, mean: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let labels = vec![String::new(); vectors.len()];
    let out = backend::center_lengthnorm(&embeddings(vectors, &labels)?, &mean).map_err(py_err)?;
    Ok(out.into_iter().map(|e| e.vector).collect())
}

/// `(utterance_id, speaker_id, language_id, vector)` tuples from an archive.
#[pyfunction]
fn read_embeddings(path: PathBuf) -> PyResult<Vec<(String, String, String, Vec<f64>)>> {
    let v = lab::embedding::read_embeddings(&path).map_err(py_err)?;
    Ok(v.into_iter().map(|e| (e.utterance_id, e.speaker_id, e.language_id, e.vector)).collect())
}

#[pyclass(name = "Pipeline")]
struct PyPipeline(lab::pipeline::Pipeline);

#[pymethods]
impl PyPipeline {
    #[new]
    fn new(config: PyConfig, root: PathBuf) -> PyResult<Self> {
        lab::pipeline::Pipeline::open(config.0, &root).map(PyPipeline).map_err(py_err)
    }

    #[getter]
    fn dir(&self) -> PathBuf {
        self.0.dir.clone()
    }

    /// True when the stage ran, false when it was already up to date.
    fn run(&mut self, py: Python<'_>, stage: &str) -> PyResult<bool> {
        let p = &mut self.0;
        py.detach(|| p.run(stage)).map(|o| o == lab::pipeline::Outcome::Ran).map_err(py_err)
    }

    fn results_tsv(&self) -> PyResult<String> {
        Ok(self.0.results_grid().map_err(py_err)?.to_tsv())
    }
}

#[pymodule]
fn xldv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyLda>()?;
    m.add_class::<PyPlda>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(fbank, m)?)?;
    m.add_function(wrap_pyfunction!(mfcc, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_score, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(center_lengthnorm, m)?)?;
    m.add_function(wrap_pyfunction!(read_embeddings, m)?)?;
    m.add("STAGES", lab::pipeline::STAGES.to_vec())?;
    Ok(())
}
