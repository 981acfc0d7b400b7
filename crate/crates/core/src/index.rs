//! Embedded gallery with exact top-k dot-product search, the category-set
//! baseline and the raw-feature baseline.
//!
//! Index file layout: `"CIDX"`, `u32` LE header length, header JSON
//! ([`IndexHeader`]), then one CTEN record holding the `[N, L]` embedding
//! matrix.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mode;
use crate::composition::{rasterize_with_grid, relevance_matrix, SceneAnnotation};
use crate::cten;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, MetricKs, RELEVANCE_THRESHOLD};
use crate::model::Model;
use crate::tensor::{dot_f32, Tensor};

pub const INDEX_MAGIC: &[u8; 4] = b"CIDX";
const EMBED_BATCH: usize = 64;

/// Identifies the checkpoint an index was built with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub checkpoint_hash: String,
    pub dout: usize,
    pub categories: usize,
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "sha256={} Dout={} C={}",
            self.checkpoint_hash, self.dout, self.categories
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub fingerprint: Fingerprint,
    #[serde(rename = "N")]
    pub n: usize,
    pub dim: usize,
    pub ids: Vec<String>,
    pub annotations: Option<Vec<SceneAnnotation>>,
    /// Checkpoint used at build time, for callers that do not pass one.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    header: IndexHeader,
    embeddings: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    /// Row of the item in the index.
    #[serde(skip)]
    pub position: usize,
    pub score: f32,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub k: usize,
    /// Set when `k` exceeded the gallery size and fewer hits were returned.
    pub truncated: bool,
    pub hits: Vec<Hit>,
}

impl RankedResult {
    pub fn positions(&self) -> Vec<usize> {
        self.hits.iter().map(|h| h.position).collect()
    }
}

/// Orders by descending score, then ascending id.
fn better(a: (f32, &str), b: (f32, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Exact top-k of `score(row)` over `0..n`, scanned in `chunks` parallel
/// ranges whose partial top-k lists are merged in a fixed order.
pub fn top_k_by<F>(
    n: usize,
    ids: &[String],
    k: usize,
    chunks: usize,
    score: F,
) -> Result<RankedResult>
where
    F: Fn(usize) -> f32 + Sync,
{
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cannot search an empty gallery".into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let truncated = k > n;
    if truncated {
        warn!("k = {k} exceeds gallery size {n}; returning {n} results");
    }
    let keep = k.min(n);
    let chunk = n.div_ceil(chunks.clamp(1, n));
    let partial: Vec<Vec<(f32, usize)>> = (0..n)
        .step_by(chunk)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let mut local: Vec<(f32, usize)> = (start..(start + chunk).min(n))
                .map(|i| (score(i), i))
                .collect();
            let cmp =
                |a: &(f32, usize), b: &(f32, usize)| better((a.0, &ids[a.1]), (b.0, &ids[b.1]));
            if local.len() > keep {
                local.select_nth_unstable_by(keep - 1, cmp);
                local.truncate(keep);
            }
            local.sort_by(cmp);
            local
        })
        .collect();
    let mut merged: Vec<(f32, usize)> = partial.into_iter().flatten().collect();
    merged.sort_by(|a, b| better((a.0, &ids[a.1]), (b.0, &ids[b.1])));
    merged.truncate(keep);
    let hits = merged
        .into_iter()
        .enumerate()
        .map(|(r, (score, position))| Hit {
            id: ids[position].clone(),
            position,
            score,
            rank: r + 1,
        })
        .collect();
    Ok(RankedResult { k, truncated, hits })
}

fn default_chunks(n: usize) -> usize {
    (rayon::current_num_threads() * 4)
        .min(n.div_ceil(256))
        .max(1)
}

impl GalleryIndex {
    pub fn new(header: IndexHeader, embeddings: Tensor<f32>) -> Result<Self> {
        if embeddings.dims() != [header.n, header.dim] || header.ids.len() != header.n {
            return Err(Error::shape(
                "gallery_index",
                format!(
                    "{} ids, matrix {:?}, header N={} dim={}",
                    header.ids.len(),
                    embeddings.dims(),
                    header.n,
                    header.dim
                ),
            ));
        }
        if header
            .annotations
            .as_ref()
            .is_some_and(|a| a.len() != header.n)
        {
            return Err(Error::shape(
                "gallery_index",
                "annotation count differs from row count",
            ));
        }
        Ok(Self { header, embeddings })
    }

    pub fn header(&self) -> &IndexHeader {
        &self.header
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.header.fingerprint
    }

    pub fn len(&self) -> usize {
        self.header.n
    }

    pub fn is_empty(&self) -> bool {
        self.header.n == 0
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.header.ids
    }

    pub fn annotations(&self) -> Option<&[SceneAnnotation]> {
        self.header.annotations.as_deref()
    }

    pub fn embeddings(&self) -> &Tensor<f32> {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings.data()[i * self.header.dim..(i + 1) * self.header.dim]
    }

    /// Errors unless the index was built from the checkpoint described by `fp`.
    pub fn check_fingerprint(&self, fp: &Fingerprint) -> Result<()> {
        if &self.header.fingerprint != fp {
            return Err(Error::FingerprintMismatch {
                expected: self.header.fingerprint.to_string(),
                actual: fp.to_string(),
            });
        }
        Ok(())
    }

    pub fn search(&self, query: &[f32], k: usize) -> Result<RankedResult> {
        self.search_chunked(query, k, default_chunks(self.len()))
    }

    /// [`GalleryIndex::search`] with an explicit number of scan chunks.
    pub fn search_chunked(&self, query: &[f32], k: usize, chunks: usize) -> Result<RankedResult> {
        if query.len() != self.header.dim {
            return Err(Error::shape(
                "search",
                format!(
                    "query length {} vs index dim {}",
                    query.len(),
                    self.header.dim
                ),
            ));
        }
        top_k_by(self.len(), &self.header.ids, k, chunks, |i| {
            dot_f32(self.row(i), query)
        })
    }

    /// Rasterizes a canvas, embeds it with the query encoder and searches.
    pub fn search_canvas(
        &self,
        model: &Model<f32>,
        canvas: &SceneAnnotation,
        k: usize,
    ) -> Result<RankedResult> {
        let q = embed_canvas(model, canvas)?;
        self.search(q.data(), k)
    }

    /// Category-set Jaccard similarity; blind to positions.
    pub fn textual_search(&self, categories: &[usize], k: usize) -> Result<RankedResult> {
        let anns = self
            .annotations()
            .ok_or_else(|| Error::InvalidArgument("index was built without annotations".into()))?;
        if categories.is_empty() {
            return Err(Error::InvalidArgument(
                "textual search needs at least one category".into(),
            ));
        }
        let mut q = categories.to_vec();
        q.sort_unstable();
        q.dedup();
        let sets: Vec<Vec<usize>> = anns.iter().map(SceneAnnotation::category_set).collect();
        top_k_by(
            self.len(),
            &self.header.ids,
            k,
            default_chunks(self.len()),
            |i| jaccard(&q, &sets[i]) as f32,
        )
    }
}

/// Jaccard index of two sorted, deduplicated sets.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.binary_search(x).is_ok()).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Flattened `[7·7·Dout]` query-encoder embedding of a canvas.
pub fn embed_canvas(model: &Model<f32>, canvas: &SceneAnnotation) -> Result<Tensor<f32>> {
    let cfg = model.config();
    canvas.validate(cfg.categories)?;
    let map = rasterize_with_grid(canvas, cfg.categories, cfg.grid)?;
    let e = model.encode_query(&map.to_tensor())?;
    let len = e.len();
    e.reshape(vec![len])
}

/// Head embeddings of `features` in evaluation mode, as an `[N, 7·7·Dout]` matrix.
pub fn embed_features(model: &mut Model<f32>, features: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let len = model.config().embedding_len();
    let mut data = Vec::with_capacity(features.len() * len);
    for chunk in features.chunks(EMBED_BATCH) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        let out = model.head_forward(&Tensor::stack(&refs)?, Mode::Eval)?;
        data.extend_from_slice(out.data());
    }
    Tensor::new(vec![features.len(), len], data)
}

/// Embeds every gallery item with the head in evaluation mode.
pub fn build_index(
    model: &mut Model<f32>,
    gallery: &Dataset,
    fingerprint: Fingerprint,
    keep_annotations: bool,
) -> Result<GalleryIndex> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot index an empty gallery".into(),
        ));
    }
    let cfg = model.config();
    if fingerprint.dout != cfg.dout || fingerprint.categories != cfg.categories {
        return Err(Error::FingerprintMismatch {
            expected: fingerprint.to_string(),
            actual: format!("Dout={} C={}", cfg.dout, cfg.categories),
        });
    }
    let embeddings = embed_features(model, &gallery.features)?;
    let header = IndexHeader {
        fingerprint,
        n: gallery.len(),
        dim: embeddings.dims()[1],
        ids: gallery.scenes.iter().map(|s| s.id.clone()).collect(),
        annotations: keep_annotations.then(|| gallery.scenes.clone()),
        checkpoint: None,
    };
    GalleryIndex::new(header, embeddings)
}

impl GalleryIndex {
    pub fn set_checkpoint_path(&mut self, path: Option<PathBuf>) {
        self.header.checkpoint = path;
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(8 + header.len() + 4 * self.embeddings.len() + 16);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&cten::encode_tensor(&self.embeddings));
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 8 || &buf[..4] != INDEX_MAGIC {
            return Err(Error::Format("not an index file (bad magic)".into()));
        }
        let len = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
        let body = buf
            .get(8..8 + len)
            .ok_or_else(|| Error::Format("truncated index header".into()))?;
        let header: IndexHeader = serde_json::from_slice(body)?;
        let embeddings = cten::decode_tensor(&buf[8 + len..])?;
        Self::new(header, embeddings)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Dot-product ranking over un-embedded, flattened backbone features.
pub fn raw_feature_search(
    gallery: &Dataset,
    query: &Tensor<f32>,
    k: usize,
) -> Result<RankedResult> {
    let first = gallery
        .features
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot search an empty gallery".into()))?;
    if query.dims() != first.dims() {
        return Err(Error::shape(
            "raw_feature_search",
            format!("query {:?} vs gallery {:?}", query.dims(), first.dims()),
        ));
    }
    let ids: Vec<String> = gallery.scenes.iter().map(|s| s.id.clone()).collect();
    top_k_by(gallery.len(), &ids, k, default_chunks(gallery.len()), |i| {
        dot_f32(gallery.features[i].data(), query.data())
    })
}

/// How evaluation queries are issued against the gallery.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Query annotation rasterized and embedded with the query encoder.
    #[default]
    Canvas,
    /// Query image features embedded with the head (image-as-query).
    Image,
    /// Category-set Jaccard baseline.
    Textual,
    /// Un-embedded backbone features (image-as-query).
    RawFeature,
}

impl std::str::FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canvas" | "cal" => Ok(Self::Canvas),
            "image" => Ok(Self::Image),
            "textual" => Ok(Self::Textual),
            "raw_feature" | "raw" => Ok(Self::RawFeature),
            o => Err(Error::InvalidArgument(format!("unknown query mode {o:?}"))),
        }
    }
}

/// Runs every query against the gallery and scores the rankings against the
/// ground-truth relevance of query and gallery annotations.
///
/// `model` is needed for the canvas and image modes; `gallery_data` only for
/// the raw-feature mode.
pub fn evaluate(
    index: &GalleryIndex,
    model: Option<&mut Model<f32>>,
    queries: &Dataset,
    gallery_data: Option<&Dataset>,
    mode: QueryMode,
    ks: &MetricKs,
) -> Result<EvalReport> {
    let start = Instant::now();
    let gallery = index.annotations().ok_or_else(|| {
        Error::InvalidArgument("evaluation needs an index built with annotations".into())
    })?;
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    let depth = ks.depth();
    let rankings: Vec<Vec<usize>> = match mode {
        QueryMode::Canvas => {
            let m: &Model<f32> =
                model.ok_or_else(|| Error::InvalidArgument("canvas mode needs a model".into()))?;
            queries
                .scenes
                .par_iter()
                .map(|q| Ok(index.search_canvas(m, q, depth)?.positions()))
                .collect::<Result<_>>()?
        }
        QueryMode::Image => {
            let m =
                model.ok_or_else(|| Error::InvalidArgument("image mode needs a model".into()))?;
            let emb = embed_features(m, &queries.features)?;
            let dim = emb.dims()[1];
            (0..queries.len())
                .map(|i| {
                    Ok(index
                        .search(&emb.data()[i * dim..(i + 1) * dim], depth)?
                        .positions())
                })
                .collect::<Result<_>>()?
        }
        QueryMode::Textual => queries
            .scenes
            .iter()
            .map(|q| Ok(index.textual_search(&q.category_set(), depth)?.positions()))
            .collect::<Result<_>>()?,
        QueryMode::RawFeature => {
            let g = gallery_data.ok_or_else(|| {
                Error::InvalidArgument("raw-feature mode needs gallery features".into())
            })?;
            if g.len() != index.len() {
                return Err(Error::InvalidArgument(
                    "gallery features do not match the index".into(),
                ));
            }
            queries
                .features
                .iter()
                .map(|f| Ok(raw_feature_search(g, f, depth)?.positions()))
                .collect::<Result<_>>()?
        }
    };
    let relevance = relevance_matrix(&queries.scenes, gallery)?;
    let ids: Vec<String> = queries.scenes.iter().map(|s| s.id.clone()).collect();
    let config = serde_json::json!({
        "mode": mode,
        "ks": ks,
        "threshold": RELEVANCE_THRESHOLD,
        "fingerprint": index.fingerprint(),
        "gallery": index.len(),
    });
    let mut report = EvalReport::from_rankings(
        &ids,
        &rankings,
        &relevance,
        ks,
        RELEVANCE_THRESHOLD,
        config,
        false,
    )?;
    report.timing_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    Ok(report)
}
