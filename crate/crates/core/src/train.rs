//! SGD training of the image head and query encoder.
//!
//! Every step samples a batch of anchors with one highly and one less relevant
//! companion each, embeds all items with the head (and their composition maps
//! with the query encoder), and fits the pairwise embedding dot products to the
//! pairwise composition similarities.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, NodeId};
use crate::composition::{rasterize_with_grid, CompositionMap};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::FlushDenormals;
use crate::loss::{
    build_batch, entropy_bound, epoch_anchors, ti_matrix, LossKind, RelevanceIndex, TrainingBatch,
    BATCH_ANCHORS, HIGH_RELEVANCE,
};
use crate::model::{mix, output_transformation, output_transformation_graph, Model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub momentum: f64,
    pub lr0: f64,
    /// Per-epoch exponential decay rate of the learning rate.
    pub lr_decay: f64,
    /// Decoupled decay applied to convolution kernels only.
    pub weight_decay: f64,
    pub batch_anchors: usize,
    pub high_threshold: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub model: ModelConfig,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Weight of the query-encoder term; `0` trains the image head alone.
    pub query_weight: f64,
    /// Treat head embeddings as constants in the query-encoder term, so only
    /// the image-pair loss shapes the head.
    pub query_detach: bool,
    pub train_manifest: Option<PathBuf>,
    pub categories_file: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            momentum: 0.9,
            lr0: 1e-2,
            lr_decay: 0.004,
            weight_decay: 0.005,
            batch_anchors: BATCH_ANCHORS,
            high_threshold: HIGH_RELEVANCE,
            loss: LossKind::Cal,
            seed: 0,
            model: ModelConfig::desk(16),
            grad_clip: None,
            query_weight: 1.0,
            query_detach: false,
            train_manifest: None,
            categories_file: None,
        }
    }
}

impl TrainConfig {
    /// Sets the run seed and the parameter-initialization seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        if self.epochs == 0 || self.batch_anchors == 0 {
            return bad("epochs and batch_anchors must be at least 1".into());
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("weight_decay", self.weight_decay),
            ("query_weight", self.query_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.momentum >= 1.0 {
            return bad("momentum must be below 1".into());
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be positive".into());
        }
        self.model.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `lr0 · exp(-lr_decay · epoch)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * (-cfg.lr_decay * epoch as f64).exp()
}

pub const LR_RULE: &str = "lr0 * exp(-lr_decay * epoch)";
pub const DECAY_SCOPE: &str = "convolution kernels only (no biases, no batch-norm scale/shift)";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub image_loss: f64,
    pub query_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
    pub lr_rule: String,
    pub weight_decay_scope: String,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine<'a> {
    Meta {
        lr_rule: &'a str,
        weight_decay_scope: &'a str,
    },
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
    Final {
        checkpoint: &'a Option<PathBuf>,
    },
}

impl TrainLog {
    pub fn step_losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut push = |l: LogLine| -> Result<()> {
            out.push_str(&serde_json::to_string(&l)?);
            out.push('\n');
            Ok(())
        };
        push(LogLine::Meta {
            lr_rule: &self.lr_rule,
            weight_decay_scope: &self.weight_decay_scope,
        })?;
        for s in &self.steps {
            push(LogLine::Step(s))?;
        }
        for e in &self.epochs {
            push(LogLine::Epoch(e))?;
        }
        push(LogLine::Final {
            checkpoint: &self.checkpoint,
        })?;
        Ok(out)
    }
}

/// Owns a model, its momentum buffers and the training corpus indices.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    model: Model<f32>,
    velocity: Vec<Tensor<f32>>,
    data: &'a Dataset,
    maps: Vec<CompositionMap>,
    map_tensors: Vec<Tensor<f32>>,
    relevance: RelevanceIndex,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Dataset) -> Result<Self> {
        let model = Model::init(cfg.model.clone())?;
        Self::with_model(cfg, model, data)
    }

    pub fn with_model(cfg: TrainConfig, model: Model<f32>, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let mc = model.config();
        if data.feature_channels() != Some(mc.din) {
            return Err(Error::shape(
                "train",
                format!(
                    "features have {:?} channels, model expects {}",
                    data.feature_channels(),
                    mc.din
                ),
            ));
        }
        let maps: Vec<CompositionMap> = data
            .scenes
            .iter()
            .map(|s| {
                s.validate(mc.categories)?;
                rasterize_with_grid(s, mc.categories, mc.grid)
            })
            .collect::<Result<_>>()?;
        let map_tensors = maps.iter().map(CompositionMap::to_tensor::<f32>).collect();
        let relevance = RelevanceIndex::build(&maps, cfg.high_threshold)?;
        let velocity = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.dims().to_vec()))
            .collect();
        Ok(Self {
            cfg,
            model,
            velocity,
            data,
            maps,
            map_tensors,
            relevance,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn maps(&self) -> &[CompositionMap] {
        &self.maps
    }

    fn stack(&self, items: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let feats: Vec<&Tensor<f32>> = items.iter().map(|&i| &self.data.features[i]).collect();
        let maps: Vec<&Tensor<f32>> = items.iter().map(|&i| &self.map_tensors[i]).collect();
        Ok((Tensor::stack(&feats)?, Tensor::stack(&maps)?))
    }

    fn batch_loss(&self, g: &mut Graph<f32>, to: NodeId, ti: &Tensor<f32>) -> Result<NodeId> {
        match self.cfg.loss {
            LossKind::Cal => g.cal_loss(to, ti.clone()),
            LossKind::Euclidean => g.euclidean_loss(to, ti.clone()),
        }
    }

    /// One optimization step on `batch` at learning rate `lr`.
    pub fn step(&mut self, batch: &TrainingBatch, lr: f64, epoch: usize) -> Result<StepRecord> {
        let step = self.step;
        let diverged = |e: Error, items: &[usize], data: &Dataset| match e {
            Error::NonFinite { .. } => Error::Diverged {
                step,
                ids: items.iter().map(|&i| data.scenes[i].id.clone()).collect(),
            },
            other => other,
        };
        let out = self.step_inner(batch, lr, epoch);
        let rec = out.map_err(|e| diverged(e, &batch.items, self.data))?;
        self.step += 1;
        Ok(rec)
    }

    fn step_inner(&mut self, batch: &TrainingBatch, lr: f64, epoch: usize) -> Result<StepRecord> {
        let (x, c) = self.stack(&batch.items)?;
        let ti: Tensor<f32> = batch.ti.cast();
        let scale = self.model.config().to_scale;
        let mode = Mode::Train {
            seed: mix(self.cfg.seed, self.step as u64 + 1),
        };

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g)?;
        let xi = g.input(x)?;
        let f = self.model.head_graph(&mut g, &bound, xi, mode)?;
        let to_ii = output_transformation_graph(&mut g, f, f, scale)?;
        let image_loss = self.batch_loss(&mut g, to_ii, &ti)?;
        let (total, query_loss) = if self.cfg.query_weight > 0.0 {
            let ci = g.input(c)?;
            let q = self.model.query_graph(&mut g, &bound, ci)?;
            let target = if self.cfg.query_detach {
                g.input(g.value(f).clone())?
            } else {
                f
            };
            let to_qi = output_transformation_graph(&mut g, q, target, scale)?;
            let ql = self.batch_loss(&mut g, to_qi, &ti)?;
            let weighted = g.scale(ql, self.cfg.query_weight as f32)?;
            (g.add(image_loss, weighted)?, Some(ql))
        } else {
            (image_loss, None)
        };
        let grads = g.backward(total)?;

        let mut updates: Vec<(usize, Tensor<f32>)> =
            grads.params().map(|(s, t)| (s, t.clone())).collect();
        if let Some(clip) = self.cfg.grad_clip {
            let norm: f64 = updates
                .iter()
                .flat_map(|(_, t)| t.data())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = (clip / norm) as f32;
                for (_, t) in &mut updates {
                    t.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        self.apply(&updates, lr);

        let scalar = |n: NodeId| g.value(n).data()[0] as f64;
        Ok(StepRecord {
            step: self.step,
            epoch,
            loss: scalar(total),
            image_loss: scalar(image_loss),
            query_loss: query_loss.map(scalar).unwrap_or(0.0),
        })
    }

    /// Momentum SGD with decoupled weight decay: `v = μv + g`,
    /// `p -= lr·v`, then `p -= lr·wd·p` for decayed tensors.
    fn apply(&mut self, grads: &[(usize, Tensor<f32>)], lr: f64) {
        let (mu, lr32, wd) = (
            self.cfg.momentum as f32,
            lr as f32,
            self.cfg.weight_decay as f32,
        );
        for (slot, grad) in grads {
            let v = &mut self.velocity[*slot];
            for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
                *vi = mu * *vi + gi;
            }
            let p = &mut self.model.params_mut()[*slot];
            let decay = p.decay;
            for (pi, vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(self.velocity[*slot].data())
            {
                *pi -= lr32 * vi;
                if decay {
                    *pi -= lr32 * wd * *pi;
                }
            }
        }
    }

    pub fn run_epoch(&mut self, epoch: usize, log: &mut TrainLog) -> Result<EpochRecord> {
        let _ftz = FlushDenormals::new();
        let start = Instant::now();
        let lr = lr_schedule(epoch, &self.cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, 0xE90C_0000 + epoch as u64));
        let mut total = 0.0;
        let groups = epoch_anchors(self.data.len(), self.cfg.batch_anchors, &mut rng);
        for anchors in &groups {
            let batch = build_batch(&self.maps, &self.relevance, anchors, &mut rng)?;
            let rec = self.step(&batch, lr, epoch)?;
            total += rec.loss;
            log.steps.push(rec);
        }
        let rec = EpochRecord {
            epoch,
            mean_loss: total / groups.len().max(1) as f64,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        info!(
            "epoch {epoch}: mean loss {:.5}, lr {:.6}, {:.0} ms",
            rec.mean_loss, rec.lr, rec.wall_ms
        );
        log.epochs.push(rec.clone());
        Ok(rec)
    }
}

/// Full training run. With `out_dir`, a checkpoint is written after every
/// epoch (`epoch_NN.cten`), the final one as `checkpoint.cten`, and the log as
/// `train_log.jsonl`.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(Model<f32>, TrainLog)> {
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let mut log = TrainLog {
        lr_rule: LR_RULE.into(),
        weight_decay_scope: DECAY_SCOPE.into(),
        ..Default::default()
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for epoch in 0..cfg.epochs {
        trainer.run_epoch(epoch, &mut log)?;
        if let Some(dir) = out_dir {
            trainer
                .model()
                .save(dir.join(format!("epoch_{epoch:02}.cten")))?;
        }
    }
    let model = trainer.into_model();
    if let Some(dir) = out_dir {
        let paths = model.save(dir.join("checkpoint.cten"))?;
        log.checkpoint = Some(paths.tensors);
        let log_path = dir.join("train_log.jsonl");
        fs::write(&log_path, log.to_jsonl()?).map_err(|e| Error::io(&log_path, e))?;
    }
    Ok((model, log))
}

/// Populates batch-norm running statistics with training-mode forward passes
/// and no parameter updates, so an untrained model can be evaluated.
pub fn warm_batch_norm(
    model: &mut Model<f32>,
    data: &Dataset,
    batch: usize,
    seed: u64,
) -> Result<()> {
    let n = data.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "need at least two scenes to estimate batch statistics".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xB4E3));
    for (i, group) in epoch_anchors(n, batch.max(2), &mut rng).iter().enumerate() {
        if group.len() < 2 {
            continue;
        }
        let feats: Vec<&Tensor<f32>> = group.iter().map(|&j| &data.features[j]).collect();
        model.head_forward(
            &Tensor::stack(&feats)?,
            Mode::Train {
                seed: mix(seed, i as u64),
            },
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub steps: usize,
    /// Image-pair CAL loss of the whole set in evaluation mode.
    pub final_loss: f64,
    /// Mean binary entropy of the set's `Ti` matrix.
    pub bound: f64,
    pub gap: f64,
    pub passed: bool,
}

/// Overfits a tiny set (at most 8 scenes, all in every batch) and reports how
/// close the loss gets to its entropy lower bound.
pub fn overfit_probe(
    cfg: &TrainConfig,
    data: &Dataset,
    max_steps: usize,
    tolerance: f64,
) -> Result<ProbeReport> {
    if !(2..=8).contains(&data.len()) {
        return Err(Error::InvalidArgument(format!(
            "overfit probe takes 2..=8 scenes, got {}",
            data.len()
        )));
    }
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let items: Vec<usize> = (0..data.len()).collect();
    let refs: Vec<&CompositionMap> = trainer.maps().iter().collect();
    let ti = ti_matrix(&refs)?;
    let bound = entropy_bound(&ti);
    let batch = TrainingBatch {
        items,
        ti: ti.clone(),
    };
    let feats: Vec<&Tensor<f32>> = data.features.iter().collect();
    let x = Tensor::stack(&feats)?;
    let eval_loss = |m: &mut Model<f32>| -> Result<f64> {
        let f = m.head_forward(&x, Mode::Eval)?;
        let n = f.dims()[0];
        let flat = f.reshape(vec![n, m.config().embedding_len()])?;
        let to = output_transformation(&flat, &flat, m.config().to_scale)?;
        let pair = crate::loss::TransformationPair::new(ti.clone(), to.cast())?;
        Ok(crate::loss::cal_loss(&pair))
    };
    let mut steps = 0;
    let mut final_loss = f64::INFINITY;
    while steps < max_steps {
        trainer.step(&batch, cfg.lr0, 0)?;
        steps += 1;
        if steps % 10 == 0 || steps == max_steps {
            final_loss = eval_loss(&mut trainer.model)?;
            if final_loss - bound <= tolerance {
                break;
            }
        }
    }
    let gap = final_loss - bound;
    Ok(ProbeReport {
        steps,
        final_loss,
        bound,
        gap,
        passed: gap <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn tiny_cfg() -> TrainConfig {
        let mut model = ModelConfig::desk(8);
        model.din = 16;
        model.hidden = [16, 8];
        model.query_widths = [4, 8, 8];
        TrainConfig {
            epochs: 2,
            model,
            batch_anchors: 12,
            ..Default::default()
        }
        .with_seed(3)
    }

    fn corpus(n: usize) -> Dataset {
        let cfg = SynthConfig {
            scenes: n,
            din: 16,
            seed: 2,
            ..Default::default()
        };
        generate(&cfg).unwrap().dataset
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.01);
        assert!((lr_schedule(19, &cfg) - 0.009268).abs() < 1e-6);
        assert!((1..20).all(|e| lr_schedule(e, &cfg) < lr_schedule(e - 1, &cfg)));
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let data = corpus(30);
        let cfg = TrainConfig {
            lr0: 0.0,
            epochs: 1,
            ..tiny_cfg()
        };
        let before = Model::<f32>::init(cfg.model.clone()).unwrap();
        let (after, _) = train(&cfg, &data, None).unwrap();
        for (a, b) in before.params().iter().zip(after.params()) {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
    }

    #[test]
    fn first_step_is_plain_sgd() {
        let data = corpus(20);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..tiny_cfg()
        };
        let mut t = Trainer::new(cfg.clone(), &data).unwrap();
        let before = t.model().clone();
        let batch = TrainingBatch {
            items: vec![0, 1, 2, 3],
            ti: ti_matrix(&t.maps()[..4].iter().collect::<Vec<_>>()).unwrap(),
        };
        t.step(&batch, 0.5, 0).unwrap();
        for (slot, (p0, p1)) in before.params().iter().zip(t.model().params()).enumerate() {
            for ((a, b), v) in p0
                .value
                .data()
                .iter()
                .zip(p1.value.data())
                .zip(t.velocity[slot].data())
            {
                assert_eq!(*b, a - 0.5 * v);
            }
        }
    }

    #[test]
    fn runs_are_deterministic_and_loss_decreases() {
        let data = corpus(50);
        let cfg = tiny_cfg();
        let (m1, l1) = train(&cfg, &data, None).unwrap();
        let (m2, l2) = train(&cfg, &data, None).unwrap();
        assert_eq!(l1.step_losses(), l2.step_losses());
        assert_eq!(m1, m2);
        assert!(
            l1.epochs[1].mean_loss < l1.epochs[0].mean_loss,
            "{:?}",
            l1.epochs
        );
    }

    #[test]
    fn checkpoints_written_and_roundtrip() {
        let data = corpus(20);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..tiny_cfg()
        };
        let (model, log) = train(&cfg, &data, Some(dir.path())).unwrap();
        assert!(dir.path().join("epoch_00.cten").exists());
        let back = Model::<f32>::load(log.checkpoint.as_ref().unwrap()).unwrap();
        let x = data.features[0].clone();
        let (mut a, mut b) = (model.clone(), back);
        assert_eq!(
            a.head_forward(&x, Mode::Eval).unwrap(),
            b.head_forward(&x, Mode::Eval).unwrap()
        );
        let text = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert!(text
            .lines()
            .next()
            .unwrap()
            .contains("exp(-lr_decay * epoch)"));
    }

    #[test]
    fn feature_width_mismatch_rejected() {
        let data = corpus(10);
        let mut cfg = tiny_cfg();
        cfg.model.din = 32;
        assert!(matches!(Trainer::new(cfg, &data), Err(Error::Shape { .. })));
    }

    #[test]
    fn divergence_reports_batch_ids() {
        let data = corpus(20);
        let cfg = TrainConfig {
            lr0: 1e30,
            epochs: 3,
            ..tiny_cfg()
        };
        match train(&cfg, &data, None) {
            Err(Error::Diverged { ids, .. }) => assert!(!ids.is_empty()),
            other => panic!(
                "expected divergence, got {:?}",
                other.map(|(_, l)| l.epochs)
            ),
        }
    }
}
