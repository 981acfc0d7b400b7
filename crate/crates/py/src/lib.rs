//! Python bindings.
//!
//! Objects cross the boundary as `(category, (x, y, w, h))` tuples, matrices
//! as lists of rows and embeddings as flat lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use compsearch::composition::{self, BBox, SceneAnnotation, SceneObject};
use compsearch::dataset::MissingFeature;
use compsearch::index::{self as gindex, Hit, RankedResult};
use compsearch::loss::{self, LossKind, TransformationPair};
use compsearch::metrics;
use compsearch::model::{Model, ModelConfig};
use compsearch::pipeline;
use compsearch::synth::SynthConfig;
use compsearch::train::TrainConfig;
use compsearch::{Error, Tensor};

type PyObject = (usize, (f64, f64, f64, f64));

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn annotation(id: &str, objects: &[PyObject]) -> SceneAnnotation {
    SceneAnnotation::new(
        id,
        objects
            .iter()
            .map(|&(category, (x, y, w, h))| SceneObject {
                category,
                bbox: BBox::new(x, y, w, h),
            })
            .collect(),
    )
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Tensor::new(vec![n, m], rows.concat()).map_err(to_py)
}

fn pair(ti: &[Vec<f64>], to: &[Vec<f64>]) -> PyResult<TransformationPair> {
    TransformationPair::new(matrix(ti)?, matrix(to)?).map_err(to_py)
}

/// Composition map of `objects` as a flat `grid·grid·C` list of 0/1 values.
#[pyfunction]
#[pyo3(signature = (objects, categories, grid = composition::DEFAULT_GRID))]
fn rasterize(objects: Vec<PyObject>, categories: usize, grid: usize) -> PyResult<Vec<f32>> {
    let map = composition::rasterize_with_grid(&annotation("canvas", &objects), categories, grid)
        .map_err(to_py)?;
    Ok(map.to_tensor::<f32>().into_data())
}

/// Cell overlap of two rasterized layouts, in `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (a, b, categories, grid = composition::DEFAULT_GRID))]
fn input_transformation(
    a: Vec<PyObject>,
    b: Vec<PyObject>,
    categories: usize,
    grid: usize,
) -> PyResult<f64> {
    let ma =
        composition::rasterize_with_grid(&annotation("a", &a), categories, grid).map_err(to_py)?;
    let mb =
        composition::rasterize_with_grid(&annotation("b", &b), categories, grid).map_err(to_py)?;
    composition::input_transformation(&ma, &mb).map_err(to_py)
}

/// Box-level relevance of an image layout to a query layout.
#[pyfunction]
fn miou(query: Vec<PyObject>, image: Vec<PyObject>) -> PyResult<f64> {
    composition::miou_relevance(&annotation("q", &query), &annotation("i", &image)).map_err(to_py)
}

#[pyfunction]
fn cal_loss(ti: Vec<Vec<f64>>, to: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(loss::cal_loss(&pair(&ti, &to)?))
}

#[pyfunction]
fn euclidean_loss(ti: Vec<Vec<f64>>, to: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(loss::euclidean_loss(&pair(&ti, &to)?))
}

/// Gradient of the named loss (`"cal"` or `"euclidean"`) with respect to `to`.
#[pyfunction]
#[pyo3(signature = (ti, to, kind = "cal"))]
fn loss_grad(ti: Vec<Vec<f64>>, to: Vec<Vec<f64>>, kind: &str) -> PyResult<Vec<Vec<f64>>> {
    let kind: LossKind = kind.parse().map_err(to_py)?;
    let g = loss::loss_grad_wrt_to(kind, &pair(&ti, &to)?);
    let m = g.dims()[1];
    Ok(g.data().chunks(m.max(1)).map(<[f64]>::to_vec).collect())
}

/// Average precision at `k` of a ranked list of relevances; `None` when the
/// query has no relevant item.
#[pyfunction]
#[pyo3(signature = (ranked, k, total_relevant, threshold = metrics::RELEVANCE_THRESHOLD))]
fn average_precision(
    ranked: Vec<f64>,
    k: usize,
    total_relevant: usize,
    threshold: f64,
) -> PyResult<Option<f64>> {
    metrics::average_precision(&ranked, k, total_relevant, threshold).map_err(to_py)
}

/// cNDCG at `k`; the ideal ordering is derived from `row`, all relevances of
/// the query.
#[pyfunction]
fn cndcg(ranked: Vec<f64>, row: Vec<f64>, k: usize) -> PyResult<f64> {
    metrics::cndcg(&ranked, &metrics::ideal_order(&row), k).map_err(to_py)
}

#[pyfunction]
fn mrel(ranked: Vec<f64>, k: usize) -> PyResult<f64> {
    metrics::mrel(&ranked, k).map_err(to_py)
}

#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::spearman(&a, &b).map_err(to_py)
}

/// Writes a synthetic corpus under `out` and returns the generation report
/// as a JSON string.
#[pyfunction]
#[pyo3(signature = (out, scenes = 600, seed = 0))]
fn gen_data(out: PathBuf, scenes: usize, seed: u64) -> PyResult<String> {
    let cfg = SynthConfig {
        scenes,
        seed,
        ..SynthConfig::default()
    };
    std::fs::create_dir_all(&out).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let (files, report) =
        pipeline::gen_data(&cfg, pipeline::DEFAULT_FRACTIONS, &out).map_err(to_py)?;
    serde_json::to_string(&serde_json::json!({"files": files, "report": report}))
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Trains on a manifest and returns the checkpoint path.
#[pyfunction]
#[pyo3(signature = (manifest, out, epochs = 20, dout = 16, loss = "cal", seed = 0, grad_clip = None))]
fn train(
    manifest: PathBuf,
    out: PathBuf,
    epochs: usize,
    dout: usize,
    loss: &str,
    seed: u64,
    grad_clip: Option<f64>,
) -> PyResult<PathBuf> {
    let mut cfg = TrainConfig {
        epochs,
        loss: loss.parse().map_err(to_py)?,
        grad_clip,
        ..TrainConfig::default()
    }
    .with_seed(seed);
    cfg.model = ModelConfig {
        dout,
        seed,
        ..cfg.model
    };
    if let Some(c) = pipeline::manifest_categories(&manifest).map_err(to_py)? {
        cfg.model.categories = c;
    }
    cfg.train_manifest = Some(manifest);
    let (ckpt, _) = pipeline::train_from_manifest(&cfg, &out).map_err(to_py)?;
    Ok(ckpt)
}

/// Embedding head and query encoder.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model with single-core widths.
    #[new]
    #[pyo3(signature = (dout = 16, categories = 8, din = 64, seed = 0))]
    fn new(dout: usize, categories: usize, din: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig {
            dout,
            categories,
            din,
            seed,
            ..ModelConfig::desk(dout)
        };
        Ok(Self {
            inner: Model::init(cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Model::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map(|_| ()).map_err(to_py)
    }

    #[getter]
    fn dout(&self) -> usize {
        self.inner.config().dout
    }

    #[getter]
    fn categories(&self) -> usize {
        self.inner.config().categories
    }

    #[getter]
    fn embedding_len(&self) -> usize {
        self.inner.config().embedding_len()
    }

    /// Query-encoder embedding of a canvas.
    fn encode_canvas(&self, objects: Vec<PyObject>) -> PyResult<Vec<f32>> {
        Ok(
            gindex::embed_canvas(&self.inner, &annotation("canvas", &objects))
                .map_err(to_py)?
                .into_data(),
        )
    }
}

fn hits(r: RankedResult) -> Vec<(String, f32, usize)> {
    r.hits
        .into_iter()
        .map(
            |Hit {
                 id, score, rank, ..
             }| (id, score, rank),
        )
        .collect()
}

/// Embedded gallery with exact top-k search.
#[pyclass(name = "GalleryIndex")]
struct PyGalleryIndex {
    inner: gindex::GalleryIndex,
}

#[pymethods]
impl PyGalleryIndex {
    /// Embeds a gallery manifest with a checkpoint.
    #[staticmethod]
    fn build(manifest: PathBuf, checkpoint: PathBuf) -> PyResult<Self> {
        let inner = pipeline::index_from_files(&manifest, &checkpoint, MissingFeature::Abort)
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: gindex::GalleryIndex::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.ids().to_vec()
    }

    /// Top-k by dot product; returns `(id, score, rank)` tuples.
    fn search(&self, query: Vec<f32>, k: usize) -> PyResult<Vec<(String, f32, usize)>> {
        Ok(hits(self.inner.search(&query, k).map_err(to_py)?))
    }

    fn search_canvas(
        &self,
        model: &PyModel,
        objects: Vec<PyObject>,
        k: usize,
    ) -> PyResult<Vec<(String, f32, usize)>> {
        let r = self
            .inner
            .search_canvas(&model.inner, &annotation("canvas", &objects), k)
            .map_err(to_py)?;
        Ok(hits(r))
    }

    fn textual_search(
        &self,
        categories: Vec<usize>,
        k: usize,
    ) -> PyResult<Vec<(String, f32, usize)>> {
        Ok(hits(
            self.inner.textual_search(&categories, k).map_err(to_py)?,
        ))
    }

    /// Scores a query manifest; `mode` is canvas, image, textual or
    /// raw_feature. Returns the report as a JSON string.
    #[pyo3(signature = (queries, mode = "image", checkpoint = None, gallery = None))]
    fn evaluate(
        &self,
        queries: PathBuf,
        mode: &str,
        checkpoint: Option<PathBuf>,
        gallery: Option<PathBuf>,
    ) -> PyResult<String> {
        let mode: gindex::QueryMode = mode.parse().map_err(to_py)?;
        let report = pipeline::evaluate_files(
            &self.inner,
            checkpoint.as_deref(),
            &queries,
            gallery.as_deref(),
            mode,
            &metrics::MetricKs::default(),
        )
        .map_err(to_py)?;
        report.canonical_json().map_err(to_py)
    }
}

#[pymodule]
fn compsearch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(rasterize, m)?)?;
    m.add_function(wrap_pyfunction!(input_transformation, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(cal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(euclidean_loss, m)?)?;
    m.add_function(wrap_pyfunction!(loss_grad, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(cndcg, m)?)?;
    m.add_function(wrap_pyfunction!(mrel, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyGalleryIndex>()?;
    Ok(())
}
