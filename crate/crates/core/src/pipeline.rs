//! File-level steps shared by the command line and the test suites:
//! generate a corpus, train, build an index and evaluate it.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::composition::SceneAnnotation;
use crate::dataset::{write_categories, Dataset, Manifest, ManifestHeader, MissingFeature};
use crate::error::{Error, Result};
use crate::index::{build_index, evaluate, Fingerprint, GalleryIndex, QueryMode};
use crate::metrics::{EvalReport, MetricKs};
use crate::model::{checkpoint_hash, Model};
use crate::synth::{calibrate, generate, split, GenerationReport, SynthConfig};
use crate::train::{train, TrainConfig, TrainLog};

pub const GENERATOR_NAME: &str = "compsearch-synth";

/// Train/gallery/query fractions used by `gen-data` when none are given.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.45, 0.5, 0.05];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratedFiles {
    pub train: PathBuf,
    pub gallery: PathBuf,
    pub query: PathBuf,
    pub categories: PathBuf,
    pub report: PathBuf,
}

/// Writes `train.jsonl`, `gallery.jsonl`, `query.jsonl`, shared feature files,
/// `categories.json` and `generation_report.json` under `out`.
pub fn gen_data(
    cfg: &SynthConfig,
    fractions: [f64; 3],
    out: &Path,
) -> Result<(GeneratedFiles, GenerationReport)> {
    let corpus = generate(cfg)?;
    let report = calibrate(cfg, &corpus)?;
    let parts = split(corpus.dataset.len(), fractions, cfg.seed)?;
    let header = ManifestHeader::new(cfg.categories, Some(cfg.seed), GENERATOR_NAME);
    let save = |name: &str, idx: &[usize]| {
        corpus
            .dataset
            .subset(idx)
            .save(out, name, Some(header.clone()))
    };
    let train = save("train", &parts.train)?;
    let gallery = save("gallery", &parts.gallery)?;
    let query = save("query", &parts.query)?;
    let categories = out.join("categories.json");
    let names: Vec<String> = (0..cfg.categories)
        .map(|c| format!("category-{c}"))
        .collect();
    write_categories(&categories, &names)?;
    let report_path = out.join("generation_report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::io(&report_path, e))?;
    info!(
        "generated {} scenes; calibration spearman {:.3}",
        report.scenes, report.spearman_ti_feature_dot
    );
    Ok((
        GeneratedFiles {
            train,
            gallery,
            query,
            categories,
            report: report_path,
        },
        report,
    ))
}

/// Category count declared by a manifest header, if any.
pub fn manifest_categories(path: &Path) -> Result<Option<usize>> {
    Ok(Manifest::read(path)?.header.map(|h| h.categories))
}

/// Trains from `cfg.train_manifest` and writes checkpoints and the log to `out`.
pub fn train_from_manifest(cfg: &TrainConfig, out: &Path) -> Result<(PathBuf, TrainLog)> {
    let manifest = cfg
        .train_manifest
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("train config has no train_manifest".into()))?;
    let data = Dataset::load(manifest, cfg.model.categories, MissingFeature::Abort)?;
    let (_, log) = train(cfg, &data, Some(out))?;
    let ckpt = log
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("checkpoint.cten"));
    Ok((ckpt, log))
}

pub fn fingerprint(checkpoint: &Path, model: &Model<f32>) -> Result<Fingerprint> {
    let c = model.config();
    Ok(Fingerprint {
        checkpoint_hash: checkpoint_hash(checkpoint)?,
        dout: c.dout,
        categories: c.categories,
    })
}

/// Embeds a gallery manifest with a checkpoint; annotations are kept so the
/// index can serve the textual baseline, thumbnails and evaluation.
pub fn index_from_files(
    manifest: &Path,
    checkpoint: &Path,
    missing: MissingFeature,
) -> Result<GalleryIndex> {
    let mut model = Model::load(checkpoint)?;
    let gallery = Dataset::load(manifest, model.config().categories, missing)?;
    let fp = fingerprint(checkpoint, &model)?;
    let mut index = build_index(&mut model, &gallery, fp, true)?;
    index.set_checkpoint_path(Some(checkpoint.to_path_buf()));
    Ok(index)
}

/// Loads the checkpoint an index was built with (or `checkpoint` when given)
/// and verifies the fingerprint.
pub fn model_for_index(index: &GalleryIndex, checkpoint: Option<&Path>) -> Result<Model<f32>> {
    let path = checkpoint
        .or(index.header().checkpoint.as_deref())
        .ok_or_else(|| {
            Error::InvalidArgument("no checkpoint given and the index does not name one".into())
        })?;
    let model = Model::load(path)?;
    index.check_fingerprint(&fingerprint(path, &model)?)?;
    Ok(model)
}

/// Reads a canvas file: either `{"objects": [...]}` or a full annotation.
pub fn read_canvas(path: &Path) -> Result<SceneAnnotation> {
    #[derive(Deserialize)]
    struct Canvas {
        #[serde(default)]
        id: Option<String>,
        objects: Vec<crate::composition::SceneObject>,
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let c: Canvas = serde_json::from_str(&text)?;
    Ok(SceneAnnotation::new(
        c.id.unwrap_or_else(|| "canvas".into()),
        c.objects,
    ))
}

/// Evaluates `queries` against an index. The raw-feature mode also needs the
/// gallery manifest the index was built from.
pub fn evaluate_files(
    index: &GalleryIndex,
    checkpoint: Option<&Path>,
    queries: &Path,
    gallery: Option<&Path>,
    mode: QueryMode,
    ks: &MetricKs,
) -> Result<EvalReport> {
    let categories = index.fingerprint().categories;
    let queries = Dataset::load(queries, categories, MissingFeature::Abort)?;
    let gallery = gallery
        .map(|g| Dataset::load(g, categories, MissingFeature::Abort))
        .transpose()?;
    let mut model = match mode {
        QueryMode::Canvas | QueryMode::Image => Some(model_for_index(index, checkpoint)?),
        QueryMode::Textual | QueryMode::RawFeature => None,
    };
    evaluate(index, model.as_mut(), &queries, gallery.as_ref(), mode, ks)
}
