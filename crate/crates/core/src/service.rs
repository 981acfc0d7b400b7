//! JSON-over-HTTP search service.
//!
//! Endpoints:
//!
//! - `GET /health` returns `{status, gallery, dout, categories}`
//! - `GET /categories` returns `[{id, name}]`
//! - `POST /search` takes `{objects: [{category, bbox: [x, y, w, h]}], k, mode}`
//!   and returns `{results: [{id, score, rank, thumbnail?}], timingMs}`
//! - `GET /thumb/{id}` returns a PNG, read from the thumbnail directory when
//!   configured and otherwise rendered from the item's annotation
//!
//! Errors are `{error, field?}` with a 4xx or 5xx status. Request bodies that
//! parse as JSON but violate the schema get 422.

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{ImageFormat, Rgb, RgbImage};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::composition::{BBox, SceneAnnotation, SceneObject, MAX_OBJECTS};
use crate::dataset::read_categories;
use crate::error::{Error, Result};
use crate::index::{Fingerprint, GalleryIndex, RankedResult};
use crate::model::{checkpoint_hash, Model};

pub const DEFAULT_K: usize = 10;
const THUMB_SIZE: u32 = 128;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    pub index: PathBuf,
    pub checkpoint: PathBuf,
    pub categories: Option<PathBuf>,
    pub thumbnails: Option<PathBuf>,
    pub max_k: usize,
    pub timeout_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            index: PathBuf::from("index.cidx"),
            checkpoint: PathBuf::from("checkpoint.cten"),
            categories: None,
            thumbnails: None,
            max_k: 100,
            timeout_ms: 10_000,
        }
    }
}

/// Immutable state shared by all request handlers.
pub struct ServiceState {
    pub index: GalleryIndex,
    pub model: Model<f32>,
    pub categories: Vec<String>,
    pub thumbnails: Option<PathBuf>,
    pub max_k: usize,
    pub timeout: Duration,
}

impl ServiceState {
    /// Loads index, checkpoint and category names, refusing to proceed when the
    /// index was built with a different checkpoint.
    pub fn load(cfg: &ServiceConfig) -> Result<Self> {
        let index = GalleryIndex::load(&cfg.index)?;
        let model = Model::load(&cfg.checkpoint)?;
        let mc = model.config();
        let fp = Fingerprint {
            checkpoint_hash: checkpoint_hash(&cfg.checkpoint)?,
            dout: mc.dout,
            categories: mc.categories,
        };
        index.check_fingerprint(&fp)?;
        let categories = match &cfg.categories {
            Some(p) => read_categories(p)?,
            None => (0..mc.categories)
                .map(|c| format!("category {c}"))
                .collect(),
        };
        if categories.len() != mc.categories {
            return Err(Error::InvalidArgument(format!(
                "{} category names for a model with C = {}",
                categories.len(),
                mc.categories
            )));
        }
        Self::new(
            index,
            model,
            categories,
            cfg.thumbnails.clone(),
            cfg.max_k,
            Duration::from_millis(cfg.timeout_ms),
        )
    }

    pub fn new(
        index: GalleryIndex,
        model: Model<f32>,
        categories: Vec<String>,
        thumbnails: Option<PathBuf>,
        max_k: usize,
        timeout: Duration,
    ) -> Result<Self> {
        if index.is_empty() {
            return Err(Error::InvalidArgument("gallery index is empty".into()));
        }
        if max_k == 0 {
            return Err(Error::InvalidArgument("max_k must be at least 1".into()));
        }
        let max_k = if max_k > index.len() {
            warn!("max_k {max_k} exceeds gallery size {}; capped", index.len());
            index.len()
        } else {
            max_k
        };
        Ok(Self {
            index,
            model,
            categories,
            thumbnails,
            max_k,
            timeout,
        })
    }
}

#[derive(Debug, Serialize)]
struct ApiError {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<String>,
}

#[derive(Debug)]
struct Failure(StatusCode, ApiError);

impl Failure {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self(
            status,
            ApiError {
                error: error.into(),
                field: None,
            },
        )
    }

    fn field(field: impl Into<String>, error: impl Into<String>) -> Self {
        Self(
            StatusCode::UNPROCESSABLE_ENTITY,
            ApiError {
                error: error.into(),
                field: Some(field.into()),
            },
        )
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Cal,
    Textual,
}

/// A validated `/search` body.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchRequest {
    pub objects: Vec<SceneObject>,
    pub k: usize,
    pub mode: SearchMode,
}

#[derive(Debug, Serialize)]
struct SearchHit {
    id: String,
    score: f32,
    rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    thumbnail: Option<String>,
}

#[derive(Debug, Serialize)]
struct SearchResponse {
    results: Vec<SearchHit>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    truncated: bool,
    #[serde(rename = "timingMs")]
    timing_ms: f64,
}

/// Checks a `/search` body field by field.
fn parse_search(
    body: &Value,
    categories: usize,
    max_k: usize,
) -> std::result::Result<SearchRequest, Failure> {
    let obj = body
        .as_object()
        .ok_or_else(|| Failure::field("", "request body must be a JSON object"))?;
    let objects = obj
        .get("objects")
        .and_then(Value::as_array)
        .ok_or_else(|| Failure::field("objects", "objects must be an array"))?;
    if objects.is_empty() || objects.len() > MAX_OBJECTS {
        return Err(Failure::field(
            "objects",
            format!("expected 1..={MAX_OBJECTS} objects, got {}", objects.len()),
        ));
    }
    let mut parsed = Vec::with_capacity(objects.len());
    for (i, o) in objects.iter().enumerate() {
        let category = o.get("category").and_then(Value::as_u64).ok_or_else(|| {
            Failure::field(
                format!("objects[{i}].category"),
                "category must be a non-negative integer",
            )
        })? as usize;
        if category >= categories {
            return Err(Failure::field(
                format!("objects[{i}].category"),
                format!("category {category} out of range 0..{categories}"),
            ));
        }
        let field = format!("objects[{i}].bbox");
        let vals: Vec<f64> = o
            .get("bbox")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 4)
            .and_then(|a| a.iter().map(Value::as_f64).collect())
            .ok_or_else(|| Failure::field(&field, "bbox must be [x, y, w, h] numbers"))?;
        let bbox = BBox::new(vals[0], vals[1], vals[2], vals[3]);
        if let Some(p) = bbox.problem() {
            return Err(Failure::field(field, p));
        }
        parsed.push(SceneObject { category, bbox });
    }
    let k = match obj.get("k") {
        None => DEFAULT_K.min(max_k),
        Some(v) => {
            let k = v
                .as_u64()
                .ok_or_else(|| Failure::field("k", "k must be a positive integer"))?
                as usize;
            if k == 0 || k > max_k {
                return Err(Failure::field("k", format!("k must be in 1..={max_k}")));
            }
            k
        }
    };
    let mode = match obj.get("mode") {
        None => SearchMode::Cal,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| Failure::field("mode", "mode must be \"cal\" or \"textual\""))?,
    };
    Ok(SearchRequest {
        objects: parsed,
        k,
        mode,
    })
}

fn run_search(state: &ServiceState, req: &SearchRequest) -> Result<RankedResult> {
    let canvas = SceneAnnotation::new("query", req.objects.clone());
    match req.mode {
        SearchMode::Cal => state.index.search_canvas(&state.model, &canvas, req.k),
        SearchMode::Textual => state.index.textual_search(&canvas.category_set(), req.k),
    }
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<Value> {
    let fp = state.index.fingerprint();
    Json(serde_json::json!({
        "status": "ok",
        "gallery": state.index.len(),
        "dout": fp.dout,
        "categories": fp.categories,
    }))
}

async fn categories(State(state): State<Arc<ServiceState>>) -> Json<Value> {
    let list: Vec<Value> = state
        .categories
        .iter()
        .enumerate()
        .map(|(id, name)| serde_json::json!({"id": id, "name": name}))
        .collect();
    Json(Value::Array(list))
}

async fn search(
    State(state): State<Arc<ServiceState>>,
    body: Bytes,
) -> std::result::Result<Json<SearchResponse>, Failure> {
    let start = Instant::now();
    let value: Value = serde_json::from_slice(&body)
        .map_err(|e| Failure::new(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}")))?;
    let req = parse_search(&value, state.categories.len(), state.max_k)?;
    let worker = Arc::clone(&state);
    let job = tokio::task::spawn_blocking(move || run_search(&worker, &req));
    let ranked = match tokio::time::timeout(state.timeout, job).await {
        Err(_) => {
            return Err(Failure::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "search timed out",
            ))
        }
        Ok(Err(e)) => {
            return Err(Failure::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                format!("search task failed: {e}"),
            ))
        }
        Ok(Ok(Err(e @ (Error::InvalidArgument(_) | Error::InvalidAnnotation { .. })))) => {
            return Err(Failure::field("objects", e.to_string()))
        }
        Ok(Ok(Err(e))) => {
            return Err(Failure::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                e.to_string(),
            ))
        }
        Ok(Ok(Ok(r))) => r,
    };
    let thumbs = state.thumbnails.is_some() || state.index.annotations().is_some();
    let results = ranked
        .hits
        .into_iter()
        .map(|h| SearchHit {
            thumbnail: thumbs.then(|| format!("/thumb/{}", h.id)),
            id: h.id,
            score: h.score,
            rank: h.rank,
        })
        .collect();
    Ok(Json(SearchResponse {
        results,
        truncated: ranked.truncated,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}

fn find_thumbnail(dir: &Path, id: &str) -> Option<(PathBuf, &'static str)> {
    [
        ("png", "image/png"),
        ("jpg", "image/jpeg"),
        ("jpeg", "image/jpeg"),
    ]
    .into_iter()
    .map(|(ext, mime)| (dir.join(format!("{id}.{ext}")), mime))
    .find(|(p, _)| p.is_file())
}

async fn thumb(
    State(state): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
) -> std::result::Result<Response, Failure> {
    let Some(pos) = state.index.ids().iter().position(|x| *x == id) else {
        return Err(Failure::new(
            StatusCode::NOT_FOUND,
            format!("unknown id {id:?}"),
        ));
    };
    if let Some((path, mime)) = state
        .thumbnails
        .as_deref()
        .and_then(|d| find_thumbnail(d, &id))
    {
        let bytes = tokio::fs::read(&path).await.map_err(|e| {
            Failure::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                format!("{}: {e}", path.display()),
            )
        })?;
        return Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response());
    }
    let ann = state
        .index
        .annotations()
        .map(|a| &a[pos])
        .ok_or_else(|| Failure::new(StatusCode::NOT_FOUND, "no thumbnail available"))?;
    let png = render_composition(ann, state.categories.len(), THUMB_SIZE)
        .map_err(|e| Failure::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

/// Evenly spaced hues, one per category.
fn category_color(c: usize, categories: usize) -> Rgb<u8> {
    let h = c as f64 / categories.max(1) as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let q = |v: f64| (60.0 + 170.0 * v) as u8;
    Rgb([q(r), q(g), q(b)])
}

/// PNG of an annotation: boxes filled with their category colour, smallest
/// drawn last so nested objects stay visible.
pub fn render_composition(ann: &SceneAnnotation, categories: usize, size: u32) -> Result<Vec<u8>> {
    let mut img = RgbImage::from_pixel(size, size, Rgb([245, 245, 245]));
    let mut objects: Vec<&SceneObject> = ann.objects.iter().collect();
    objects.sort_by(|a, b| b.bbox.area().total_cmp(&a.bbox.area()));
    let px = |v: f64| ((v * size as f64).round().max(0.0) as u32).min(size);
    for o in objects {
        let color = category_color(o.category, categories);
        let (x0, y0) = (px(o.bbox.x), px(o.bbox.y));
        let (x1, y1) = (
            px(o.bbox.x + o.bbox.w).max(x0 + 1).min(size),
            px(o.bbox.y + o.bbox.h).max(y0 + 1).min(size),
        );
        for y in y0..y1 {
            for x in x0..x1 {
                let edge = x == x0 || y == y0 || x + 1 == x1 || y + 1 == y1;
                let c = if edge { Rgb([30, 30, 30]) } else { color };
                img.put_pixel(x, y, c);
            }
        }
    }
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/categories", get(categories))
        .route("/search", post(search))
        .route("/thumb/{id}", get(thumb))
        .with_state(state)
}

/// Binds `cfg.addr` and serves until Ctrl-C.
pub async fn serve(
    cfg: &ServiceConfig,
) -> std::result::Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let state = Arc::new(ServiceState::load(cfg)?);
    let listener = tokio::net::TcpListener::bind(cfg.addr).await?;
    info!(
        "serving {} items on http://{}",
        state.index.len(),
        listener.local_addr()?
    );
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
