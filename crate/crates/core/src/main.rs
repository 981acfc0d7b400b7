//! `compsearch` command line: gen-data, train, index, search, evaluate, serve.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a runtime failure.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use compsearch::dataset::MissingFeature;
use compsearch::index::{GalleryIndex, QueryMode};
use compsearch::loss::LossKind;
use compsearch::metrics::MetricKs;
use compsearch::model::ModelConfig;
use compsearch::pipeline::{self, DEFAULT_FRACTIONS};
use compsearch::service::{self, ServiceConfig};
use compsearch::synth::SynthConfig;
use compsearch::train::TrainConfig;

#[derive(Parser)]
#[command(
    name = "compsearch",
    version,
    about = "Composition-aware visual search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train, gallery and query manifests.
    GenData(GenDataArgs),
    /// Train the embedding head and query encoder.
    Train(TrainArgs),
    /// Embed a gallery manifest into an index file.
    Index(IndexArgs),
    /// Search an index with a canvas file and print the ranked results.
    Search(SearchArgs),
    /// Score a query manifest against an index.
    Evaluate(EvaluateArgs),
    /// Run the HTTP search service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON generator config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train, gallery and query fractions.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    dout: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Global gradient-norm clip; off unless given here or in the config.
    #[arg(long)]
    grad_clip: Option<f64>,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip gallery items whose feature file is missing instead of aborting.
    #[arg(long)]
    skip_missing: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    /// JSON file with `{"objects": [{"category", "bbox": [x, y, w, h]}]}`.
    #[arg(long)]
    canvas: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Defaults to the checkpoint recorded in the index.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `cal` (query encoder) or `textual`.
    #[arg(long, default_value = "cal")]
    mode: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Needed by the raw-feature mode.
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// canvas, image, textual or raw_feature.
    #[arg(long, default_value = "image")]
    mode: QueryMode,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-query metrics as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    categories: Option<PathBuf>,
    #[arg(long)]
    thumbnails: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value_t = 100)]
    max_k: usize,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => SynthConfig::default(),
    };
    cfg.scenes = a.scenes.unwrap_or(cfg.scenes);
    cfg.categories = a.categories.unwrap_or(cfg.categories);
    cfg.noise_std = a.noise.unwrap_or(cfg.noise_std);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let fractions = match a.fractions.as_deref() {
        Some(&[t, g, q]) => [t, g, q],
        Some(_) => bail!("--fractions takes three values"),
        None => DEFAULT_FRACTIONS,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (files, report) = pipeline::gen_data(&cfg, fractions, &a.out)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({"files": files, "report": report}))?
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.manifest {
        cfg.train_manifest = Some(m);
    }
    let manifest = cfg
        .train_manifest
        .clone()
        .context("a training manifest is required (--manifest or config)")?;
    if a.config.is_none() {
        if let Some(c) = pipeline::manifest_categories(&manifest)? {
            cfg.model.categories = c;
        }
    }
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.loss = a.loss.unwrap_or(cfg.loss);
    if let Some(d) = a.dout {
        cfg.model = ModelConfig {
            dout: d,
            ..cfg.model
        };
    }
    if let Some(s) = a.seed {
        cfg = cfg.with_seed(s);
    }
    if a.grad_clip.is_some() {
        cfg.grad_clip = a.grad_clip;
    }
    cfg.validate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("train_config.json"), &cfg)?;
    let (ckpt, log) = pipeline::train_from_manifest(&cfg, &a.out)?;
    let last = log.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN);
    println!(
        "{}",
        serde_json::json!({"checkpoint": ckpt, "epochs": log.epochs.len(), "final_mean_loss": last})
    );
    Ok(())
}

fn index(a: IndexArgs) -> Result<()> {
    let missing = if a.skip_missing {
        MissingFeature::Skip
    } else {
        MissingFeature::Abort
    };
    let index = pipeline::index_from_files(&a.manifest, &a.checkpoint, missing)?;
    index.save(&a.out)?;
    println!(
        "{}",
        serde_json::json!({"index": a.out, "N": index.len(), "dim": index.dim(), "fingerprint": index.fingerprint()})
    );
    Ok(())
}

fn search(a: SearchArgs) -> Result<()> {
    let index = GalleryIndex::load(&a.index)?;
    let canvas = pipeline::read_canvas(&a.canvas)?;
    let result = match a.mode.as_str() {
        "cal" => {
            let model = pipeline::model_for_index(&index, a.checkpoint.as_deref())?;
            index.search_canvas(&model, &canvas, a.k)?
        }
        "textual" => index.textual_search(&canvas.category_set(), a.k)?,
        other => bail!("unknown search mode {other:?}; expected cal or textual"),
    };
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let index = GalleryIndex::load(&a.index)?;
    let report = pipeline::evaluate_files(
        &index,
        a.checkpoint.as_deref(),
        &a.queries,
        a.gallery.as_deref(),
        a.mode,
        &MetricKs::default(),
    )?;
    write_json(&a.out, &report)?;
    if let Some(csv) = &a.csv {
        fs::write(csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    }
    println!("{}", serde_json::to_string_pretty(&report.mean)?);
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = ServiceConfig {
        addr: a.addr,
        index: a.index,
        checkpoint: a.checkpoint,
        categories: a.categories,
        thumbnails: a.thumbnails,
        max_k: a.max_k,
        timeout_ms: a.timeout_ms,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(&cfg))
        .map_err(|e| anyhow::anyhow!(e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Index(a) => index(a),
        Command::Search(a) => search(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Serve(a) => serve(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
