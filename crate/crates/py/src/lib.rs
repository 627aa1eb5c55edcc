//! Python bindings. Matrices cross the boundary as lists of rows.

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use metric_forge_core::embedding::{self, EmbeddingBatch};
use metric_forge_core::evalkit::{self, EvalReport, EvalSplit, RerankConfig};
use metric_forge_core::gradcheck::{run as run_gradcheck, GradcheckOptions};
use metric_forge_core::losses::{self, LossConfig};
use metric_forge_core::model::ModelParams;
use metric_forge_core::synthdata::{self, SynthSpec, SyntheticDataset};
use metric_forge_core::trainer::{self, TrainConfig, TrainMode};

fn err(e: metric_forge_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have unequal lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn loss_config(radius: f64, temperature: f64, lin_weight: f64, label_smoothing: f64) -> PyResult<LossConfig> {
    let cfg = LossConfig { radius, temperature, lin_weight, label_smoothing, ..LossConfig::default() };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("rank1", r.rank1())?;
    d.set_item("map", r.map)?;
    d.set_item("cmc", r.cmc.clone())?;
    d.set_item("n_queries_used", r.n_queries_used)?;
    d.set_item("n_queries_skipped", r.n_queries_skipped)?;
    if let Some(rr) = &r.reranked {
        d.set_item("reranked", report_dict(py, rr)?)?;
    }
    Ok(d)
}

#[pyclass(name = "SyntheticDataset", module = "metric_forge", frozen)]
struct PyDataset {
    inner: SyntheticDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (n_classes=10, per_class=50, dim=16, noise_sigma=0.3, n_cameras=4, seed=0))]
    fn generate(n_classes: usize, per_class: usize, dim: usize, noise_sigma: f64, n_cameras: usize, seed: u64) -> PyResult<Self> {
        let spec = SynthSpec { n_classes, per_class, dim, noise_sigma, n_cameras, seed, domain_shift: None };
        Ok(Self { inner: synthdata::generate(&spec).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: SyntheticDataset::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn split_holdout(&self, fraction: f64) -> PyResult<(Self, Self)> {
        let (a, b) = self.inner.split_holdout(fraction).map_err(err)?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.features)
    }

    #[getter]
    fn class_ids(&self) -> Vec<usize> {
        self.inner.class_ids.clone()
    }

    #[getter]
    fn camera_ids(&self) -> Vec<i64> {
        self.inner.camera_ids.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("SyntheticDataset(samples={}, classes={}, dim={})", self.inner.len(), self.inner.n_classes, self.inner.dim())
    }
}

#[pyclass(name = "Model", module = "metric_forge", frozen)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Trains on a dataset. Returns the model and the per-epoch mean loss.
    #[staticmethod]
    #[pyo3(signature = (data, epochs=120, mode="combined", seed=0, lin_weight=0.4, radius=0.7, temperature=1.0, p=16, k=4))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        data: &PyDataset,
        epochs: usize,
        mode: &str,
        seed: u64,
        lin_weight: f64,
        radius: f64,
        temperature: f64,
        p: usize,
        k: usize,
    ) -> PyResult<(Self, Vec<f64>)> {
        let mode = TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == mode)
            .ok_or_else(|| PyValueError::new_err(format!("unknown mode `{mode}`")))?;
        let defaults = TrainConfig::default();
        let cfg = TrainConfig {
            total_epochs: epochs,
            warmup_epochs: defaults.warmup_epochs.min(epochs),
            mode,
            seed,
            p,
            k,
            loss: LossConfig { lin_weight, radius, temperature, ..defaults.loss },
            ..defaults
        };
        let (inner, log) = trainer::fit(&data.inner, &cfg).map_err(err)?;
        Ok((Self { inner }, log.records.iter().map(|r| r.m_loss).collect()))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: ModelParams::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    /// Inference-mode post-BN embeddings.
    fn embed(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.embed(matrix(features)?.view()).map_err(err)?))
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }
}

#[pyfunction]
fn pairwise_distances(features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&embedding::pairwise_distances_of(matrix(features)?.view()).into_inner()))
}

#[pyfunction]
fn l2_normalize(features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&embedding::normalize_rows(matrix(features)?.view()).map_err(err)?.0))
}

/// Lin on already normalized embeddings; returns `(lp, ln)`.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, radius=0.7, temperature=1.0))]
fn lin_components(embeddings: Vec<Vec<f64>>, labels: Vec<usize>, radius: f64, temperature: f64) -> PyResult<(f64, f64)> {
    let cfg = loss_config(radius, temperature, 0.4, 0.1)?;
    let batch = EmbeddingBatch::without_cameras(matrix(embeddings)?, labels).map_err(err)?;
    losses::lin_components(&batch, &cfg).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (embeddings, logits, labels, radius=0.7, temperature=1.0, lin_weight=0.4, label_smoothing=0.1))]
#[allow(clippy::too_many_arguments)]
fn m_loss<'py>(
    py: Python<'py>,
    embeddings: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
    labels: Vec<usize>,
    radius: f64,
    temperature: f64,
    lin_weight: f64,
    label_smoothing: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = loss_config(radius, temperature, lin_weight, label_smoothing)?;
    let batch = EmbeddingBatch::without_cameras(matrix(embeddings)?, labels).map_err(err)?;
    let b = losses::m_loss(&batch, matrix(logits)?.view(), &cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("lp", b.lp)?;
    d.set_item("ln", b.ln)?;
    d.set_item("lin", b.lin)?;
    d.set_item("softmax_ls", b.softmax_ls)?;
    d.set_item("m_loss", b.m_loss)?;
    Ok(d)
}

/// Scores a query/gallery split on raw features, optionally re-ranked.
#[pyfunction]
#[pyo3(signature = (query, query_classes, query_cameras, gallery, gallery_classes, gallery_cameras, rerank=false, k1=20, k2=6, lambda_=0.3))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    query: Vec<Vec<f64>>,
    query_classes: Vec<usize>,
    query_cameras: Vec<i64>,
    gallery: Vec<Vec<f64>>,
    gallery_classes: Vec<usize>,
    gallery_cameras: Vec<i64>,
    rerank: bool,
    k1: usize,
    k2: usize,
    lambda_: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let split = EvalSplit::new(
        EmbeddingBatch::new(matrix(query)?, query_classes, query_cameras).map_err(err)?,
        EmbeddingBatch::new(matrix(gallery)?, gallery_classes, gallery_cameras).map_err(err)?,
    )
    .map_err(err)?;
    let rr = rerank.then_some(RerankConfig { k1, k2, lambda: lambda_ });
    report_dict(py, &evalkit::evaluate_features(&split, rr.as_ref()).map_err(err)?)
}

/// Re-ranks a joint `(q+g) x (q+g)` distance matrix; returns `q x g`.
#[pyfunction]
#[pyo3(signature = (joint, n_query, k1=20, k2=6, lambda_=0.3))]
fn rerank(joint: Vec<Vec<f64>>, n_query: usize, k1: usize, k2: usize, lambda_: f64) -> PyResult<Vec<Vec<f64>>> {
    let cfg = RerankConfig { k1, k2, lambda: lambda_ };
    Ok(rows(&evalkit::rerank_joint(matrix(joint)?.view(), n_query, &cfg).map_err(err)?))
}

/// Returns `(passed, max_relative_error)`.
#[pyfunction]
#[pyo3(signature = (seed=0, trials=100))]
fn gradcheck(seed: u64, trials: usize) -> PyResult<(bool, f64)> {
    let summary = run_gradcheck(&GradcheckOptions { seed, trials, ..Default::default() }).map_err(err)?;
    Ok((summary.passed(), summary.max_rel_error))
}

#[pymodule]
fn metric_forge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(pairwise_distances, m)?)?;
    m.add_function(wrap_pyfunction!(l2_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(lin_components, m)?)?;
    m.add_function(wrap_pyfunction!(m_loss, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(rerank, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
