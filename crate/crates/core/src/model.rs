//! Embedding networks.
//!
//! The image head maps frozen backbone features `[7, 7, Din]` to
//! `[7, 7, Dout]` with three stride-1 convolutions (3x3, 3x3, 1x1), each
//! preceded by the fixed binomial blur. Layers one and two are followed by
//! batch-norm, LeakyReLU and dropout; the output layer is linear.
//!
//! The query encoder maps a `[grid, grid, C]` composition map into the same
//! `[7, 7, Dout]` space so canvases can be searched against image embeddings.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{BatchNormState, Graph, Mode, NodeId};
use crate::cten;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DROPOUT_P: f64 = 0.5;
pub const SPATIAL: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Backbone feature channels.
    pub din: usize,
    /// Hidden widths of head layers one and two.
    pub hidden: [usize; 2],
    pub dout: usize,
    pub categories: usize,
    pub grid: usize,
    /// Widths of query-encoder layers one to three; layer four emits `dout`.
    pub query_widths: [usize; 3],
    /// Multiplier on the embedding dot product.
    pub to_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-scale widths: 2048 -> 1024 -> 512 -> 256 over 80 categories.
    pub fn full_scale() -> Self {
        Self {
            din: 2048,
            hidden: [1024, 512],
            dout: 256,
            categories: 80,
            grid: 32,
            query_widths: [64, 128, 256],
            to_scale: 1.0,
            seed: 0,
        }
    }

    /// Small widths sized for single-core CPU training on synthetic data.
    pub fn desk(dout: usize) -> Self {
        Self {
            din: 64,
            hidden: [128, 64],
            dout,
            categories: 8,
            grid: 32,
            query_widths: [16, 32, 32],
            to_scale: 1.0,
            seed: 0,
        }
    }

    pub fn embedding_len(&self) -> usize {
        SPATIAL * SPATIAL * self.dout
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.din,
            self.hidden[0],
            self.hidden[1],
            self.dout,
            self.categories,
        ];
        if widths.contains(&0) || self.query_widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "all channel widths must be positive".into(),
            ));
        }
        if !self.grid.is_multiple_of(4) || self.grid / 4 < SPATIAL {
            return Err(Error::InvalidArgument(format!(
                "grid {} must be a multiple of 4 and at least {}",
                self.grid,
                4 * SPATIAL
            )));
        }
        if !(self.to_scale.is_finite() && self.to_scale > 0.0) {
            return Err(Error::InvalidArgument("to_scale must be positive".into()));
        }
        Ok(())
    }

    /// `(name, dims, decays)` of every learnable tensor in canonical order.
    fn layout(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut v = Vec::new();
        let head = [
            (3, self.din, self.hidden[0], true),
            (3, self.hidden[0], self.hidden[1], true),
            (1, self.hidden[1], self.dout, false),
        ];
        for (i, &(k, cin, cout, bn)) in head.iter().enumerate() {
            let n = i + 1;
            v.push((format!("head.conv{n}.w"), vec![k, k, cin, cout], true));
            v.push((format!("head.conv{n}.b"), vec![cout], false));
            if bn {
                v.push((format!("head.bn{n}.gamma"), vec![cout], false));
                v.push((format!("head.bn{n}.beta"), vec![cout], false));
            }
        }
        let q = self.query_widths;
        let chain = [self.categories, q[0], q[1], q[2], self.dout];
        for n in 1..=4 {
            v.push((
                format!("qenc.conv{n}.w"),
                vec![3, 3, chain[n - 1], chain[n]],
                true,
            ));
            v.push((format!("qenc.conv{n}.b"), vec![chain[n]], false));
        }
        v
    }

    /// Closed-form learnable parameter count of the head.
    pub fn head_param_count(&self) -> usize {
        let [h1, h2] = self.hidden;
        (9 * self.din * h1 + h1 + 2 * h1)
            + (9 * h1 * h2 + h2 + 2 * h2)
            + (h2 * self.dout + self.dout)
    }

    pub fn query_param_count(&self) -> usize {
        let q = self.query_widths;
        let chain = [self.categories, q[0], q[1], q[2], self.dout];
        chain.windows(2).map(|w| 9 * w[0] * w[1] + w[1]).sum()
    }
}

/// A learnable tensor plus whether weight decay applies to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub decay: bool,
}

/// Head and query encoder parameters with batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    bn: [BatchNormState<T>; 2],
    bypass_norm: bool,
}

/// Graph handles for every parameter of a model bound into one graph.
pub struct Bound {
    ids: Vec<NodeId>,
}

impl<T: Real> Model<T> {
    /// Fan-in scaled normal kernels, zero biases, unit scale and zero shift.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, dims, decay)| {
                let value = if name.ends_with(".w") {
                    let fan_in = (dims[0] * dims[1] * dims[2]) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                    Tensor::from_fn(dims, |_| T::of(normal.sample(&mut rng)))
                } else if name.ends_with(".gamma") {
                    Tensor::full(dims, T::one())
                } else {
                    Tensor::zeros(dims)
                };
                Param { name, value, decay }
            })
            .collect();
        Ok(Self {
            bn: [
                BatchNormState::new(config.hidden[0]),
                BatchNormState::new(config.hidden[1]),
            ],
            config,
            params,
            bypass_norm: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn batch_norm_states(&self) -> &[BatchNormState<T>; 2] {
        &self.bn
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    fn slot(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Replaces batch-norm with the identity (exact shift-equivariance checks).
    #[doc(hidden)]
    pub fn set_norm_bypass(&mut self, on: bool) {
        self.bypass_norm = on;
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
            bn: self.bn.clone().map(|s| BatchNormState {
                mean: s.mean.cast(),
                var: s.var.cast(),
                initialized: s.initialized,
            }),
            bypass_norm: self.bypass_norm,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bound> {
        let ids = self
            .params
            .iter()
            .enumerate()
            .map(|(slot, p)| g.param(slot, p.value.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { ids })
    }

    fn id(&self, b: &Bound, name: &str) -> NodeId {
        b.ids[self.slot(name)]
    }

    /// Head forward over a `[B, 7, 7, Din]` node.
    pub fn head_graph(
        &mut self,
        g: &mut Graph<T>,
        b: &Bound,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let dims = g.value(x).dims().to_vec();
        if dims.len() != 4 || dims[3] != self.config.din {
            return Err(Error::shape(
                "head_forward",
                format!("input {dims:?}, expected [B,H,W,{}]", self.config.din),
            ));
        }
        let mut h = x;
        for layer in 0..2 {
            let n = layer + 1;
            h = g.gaussian_blur(h)?;
            h = g.conv2d(
                h,
                self.id(b, &format!("head.conv{n}.w")),
                self.id(b, &format!("head.conv{n}.b")),
            )?;
            if !self.bypass_norm {
                let (gamma, beta) = (
                    self.id(b, &format!("head.bn{n}.gamma")),
                    self.id(b, &format!("head.bn{n}.beta")),
                );
                h = g.batch_norm(h, gamma, beta, &mut self.bn[layer], mode)?;
            }
            h = g.leaky_relu(h, T::of(LEAKY_SLOPE))?;
            let layer_mode = match mode {
                Mode::Train { seed } => Mode::Train {
                    seed: mix(seed, n as u64),
                },
                Mode::Eval => Mode::Eval,
            };
            h = g.dropout(h, DROPOUT_P, layer_mode)?;
        }
        h = g.gaussian_blur(h)?;
        g.conv2d(h, self.id(b, "head.conv3.w"), self.id(b, "head.conv3.b"))
    }

    /// Query encoder forward over a `[B, grid, grid, C]` node.
    pub fn query_graph(&self, g: &mut Graph<T>, b: &Bound, c: NodeId) -> Result<NodeId> {
        let dims = g.value(c).dims().to_vec();
        let cfg = &self.config;
        if dims.len() != 4
            || dims[1] != cfg.grid
            || dims[2] != cfg.grid
            || dims[3] != cfg.categories
        {
            return Err(Error::shape(
                "encode_query",
                format!(
                    "input {dims:?}, expected [B,{},{},{}]",
                    cfg.grid, cfg.grid, cfg.categories
                ),
            ));
        }
        let slope = T::of(LEAKY_SLOPE);
        let mut h = c;
        for n in 1..=4 {
            h = g.gaussian_blur(h)?;
            h = g.conv2d(
                h,
                self.id(b, &format!("qenc.conv{n}.w")),
                self.id(b, &format!("qenc.conv{n}.b")),
            )?;
            if n < 4 {
                h = g.leaky_relu(h, slope)?;
            }
            if n <= 2 {
                h = g.avg_pool2(h)?;
            }
        }
        g.adaptive_avg_pool(h, SPATIAL, SPATIAL)
    }

    /// Embeds a batch of backbone features `[B, 7, 7, Din]` (or one `[7, 7, Din]`).
    pub fn head_forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let single = x.ndim() == 3;
        let x = if single {
            x.clone().reshape(prepend(x.dims()))?
        } else {
            x.clone()
        };
        let mut g = Graph::new();
        let bnd = self.bind(&mut g)?;
        let xi = g.input(x)?;
        let y = self.head_graph(&mut g, &bnd, xi, mode)?;
        let out = g.value(y).clone();
        if single {
            let dims = out.dims()[1..].to_vec();
            out.reshape(dims)
        } else {
            Ok(out)
        }
    }

    pub fn encode_query(&self, maps: &Tensor<T>) -> Result<Tensor<T>> {
        let single = maps.ndim() == 3;
        let m = if single {
            maps.clone().reshape(prepend(maps.dims()))?
        } else {
            maps.clone()
        };
        let mut g = Graph::new();
        let bnd = self.bind(&mut g)?;
        let ci = g.input(m)?;
        let y = self.query_graph(&mut g, &bnd, ci)?;
        let out = g.value(y).clone();
        if single {
            let dims = out.dims()[1..].to_vec();
            out.reshape(dims)
        } else {
            Ok(out)
        }
    }
}

fn prepend(dims: &[usize]) -> Vec<usize> {
    let mut d = vec![1];
    d.extend_from_slice(dims);
    d
}

/// Derives a sub-seed; SplitMix64 finalizer over the combined input.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `scale * F F'ᵀ` for embedding batches `[B, L]` and `[B', L]`.
pub fn output_transformation<T: Real>(
    f: &Tensor<T>,
    f2: &Tensor<T>,
    scale: f64,
) -> Result<Tensor<T>> {
    let ([b1, l1], [b2, l2]) = (f.dims(), f2.dims()) else {
        return Err(Error::shape(
            "output_transformation",
            format!("{:?} vs {:?}", f.dims(), f2.dims()),
        ));
    };
    if l1 != l2 {
        return Err(Error::shape(
            "output_transformation",
            format!("lengths {l1} vs {l2}"),
        ));
    }
    let (b1, b2, l) = (*b1, *b2, *l1);
    let mut out = vec![T::zero(); b1 * b2];
    T::gemm(
        b1,
        l,
        b2,
        T::of(scale),
        f.data(),
        (l as isize, 1),
        f2.data(),
        (1, l as isize),
        T::zero(),
        &mut out,
        (b2 as isize, 1),
    );
    Tensor::new(vec![b1, b2], out)
}

/// Graph form of [`output_transformation`] on `[B, 7, 7, D]` nodes.
pub fn output_transformation_graph<T: Real>(
    g: &mut Graph<T>,
    f: NodeId,
    f2: NodeId,
    scale: f64,
) -> Result<NodeId> {
    let flat = |g: &mut Graph<T>, n: NodeId| {
        let d = g.value(n).dims().to_vec();
        let rows = d[0];
        let len = d[1..].iter().product::<usize>();
        g.reshape(n, vec![rows, len])
    };
    let a = flat(g, f)?;
    let b = flat(g, f2)?;
    let bt = g.transpose(b)?;
    let to = g.matmul(a, bt)?;
    if scale == 1.0 {
        Ok(to)
    } else {
        g.scale(to, T::of(scale))
    }
}

/// Paths of a checkpoint: the CTEN table and its JSON sidecar.
#[derive(Clone, Debug)]
pub struct CheckpointPaths {
    pub tensors: PathBuf,
    pub sidecar: PathBuf,
}

impl CheckpointPaths {
    pub fn new(tensors: impl Into<PathBuf>) -> Self {
        let tensors = tensors.into();
        let sidecar = tensors.with_extension("json");
        Self { tensors, sidecar }
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    channels: Vec<usize>,
    #[serde(rename = "Dout")]
    dout: usize,
    #[serde(rename = "C")]
    categories: usize,
    grid: usize,
    to_scale: f64,
    seeds: Vec<u64>,
    model: ModelConfig,
}

impl Model<f32> {
    pub fn to_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut v: Vec<_> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (i, s) in self.bn.iter().enumerate() {
            let n = i + 1;
            v.push((format!("head.bn{n}.mean"), s.mean.clone()));
            v.push((format!("head.bn{n}.var"), s.var.clone()));
            let flag = if s.initialized { 1.0 } else { 0.0 };
            v.push((
                format!("head.bn{n}.initialized"),
                Tensor::new(vec![1], vec![flag]).unwrap(),
            ));
        }
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<CheckpointPaths> {
        let paths = CheckpointPaths::new(path.as_ref());
        let bytes = cten::encode_toc(&self.to_entries())?;
        fs::write(&paths.tensors, bytes).map_err(|e| Error::io(&paths.tensors, e))?;
        let c = &self.config;
        let sidecar = Sidecar {
            channels: vec![c.din, c.hidden[0], c.hidden[1], c.dout],
            dout: c.dout,
            categories: c.categories,
            grid: c.grid,
            to_scale: c.to_scale,
            seeds: vec![c.seed],
            model: c.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        fs::write(&paths.sidecar, json).map_err(|e| Error::io(&paths.sidecar, e))?;
        Ok(paths)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let paths = CheckpointPaths::new(path.as_ref());
        let json = fs::read_to_string(&paths.sidecar).map_err(|e| Error::io(&paths.sidecar, e))?;
        let sidecar: Sidecar = serde_json::from_str(&json)?;
        let bytes = fs::read(&paths.tensors).map_err(|e| Error::io(&paths.tensors, e))?;
        let entries = cten::decode_toc(&bytes)?;
        let mut model = Model::<f32>::init(sidecar.model)?;
        let lookup = |name: &str| -> Result<&Tensor<f32>> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
        };
        for p in &mut model.params {
            let t = lookup(&p.name)?;
            if t.dims() != p.value.dims() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{}: {:?} vs {:?}", p.name, t.dims(), p.value.dims()),
                ));
            }
            p.value = t.clone();
        }
        for (i, s) in model.bn.iter_mut().enumerate() {
            let n = i + 1;
            s.mean = lookup(&format!("head.bn{n}.mean"))?.clone();
            s.var = lookup(&format!("head.bn{n}.var"))?.clone();
            s.initialized = lookup(&format!("head.bn{n}.initialized"))?.data()[0] != 0.0;
        }
        Ok(model)
    }
}

/// SHA-256 of a checkpoint's tensor file, hex encoded.
pub fn checkpoint_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::{rasterize, BBox, SceneAnnotation, SceneObject};

    fn tiny() -> ModelConfig {
        ModelConfig {
            din: 6,
            hidden: [5, 4],
            dout: 3,
            categories: 2,
            grid: 32,
            query_widths: [3, 3, 3],
            to_scale: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn parameter_count_matches_formula() {
        for cfg in [tiny(), ModelConfig::desk(16), ModelConfig::full_scale()] {
            let m = Model::<f32>::init(cfg.clone()).unwrap();
            let head: usize = m
                .params()
                .iter()
                .filter(|p| p.name.starts_with("head."))
                .map(|p| p.value.len())
                .sum();
            let q: usize = m
                .params()
                .iter()
                .filter(|p| p.name.starts_with("qenc."))
                .map(|p| p.value.len())
                .sum();
            assert_eq!(head, cfg.head_param_count());
            assert_eq!(q, cfg.query_param_count());
            let convs = m
                .params()
                .iter()
                .filter(|p| p.name.starts_with("head.conv") && p.name.ends_with(".w"))
                .count();
            assert_eq!(convs, 3);
        }
        let p = ModelConfig::full_scale();
        assert_eq!(
            p.head_param_count(),
            9 * 2048 * 1024 + 3 * 1024 + 9 * 1024 * 512 + 3 * 512 + 512 * 256 + 256
        );
    }

    #[test]
    fn output_dims_for_each_dout() {
        for dout in [64, 128, 256] {
            let cfg = ModelConfig { dout, ..tiny() };
            let mut m = Model::<f32>::init(cfg).unwrap();
            let x = Tensor::from_fn(vec![2, 7, 7, 6], |i| (i as f32 * 0.1).sin());
            let y = m.head_forward(&x, Mode::Train { seed: 1 }).unwrap();
            assert_eq!(y.dims(), &[2, 7, 7, dout]);
            let c = Tensor::zeros(vec![32, 32, 2]);
            assert_eq!(m.encode_query(&c).unwrap().dims(), &[7, 7, dout]);
        }
    }

    #[test]
    fn eval_is_deterministic_and_needs_stats() {
        let mut m = Model::<f32>::init(tiny()).unwrap();
        let x = Tensor::from_fn(vec![3, 7, 7, 6], |i| (i as f32 * 0.37).cos());
        assert!(matches!(
            m.head_forward(&x, Mode::Eval),
            Err(Error::UninitializedStats)
        ));
        m.head_forward(&x, Mode::Train { seed: 3 }).unwrap();
        let a = m.head_forward(&x, Mode::Eval).unwrap();
        let b = m.head_forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn head_rejects_channel_mismatch() {
        let mut m = Model::<f32>::init(tiny()).unwrap();
        assert!(m
            .head_forward(&Tensor::zeros(vec![2, 7, 7, 5]), Mode::Train { seed: 0 })
            .is_err());
        assert!(m.encode_query(&Tensor::zeros(vec![32, 32, 3])).is_err());
    }

    #[test]
    fn head_is_shift_equivariant_on_interior_without_norm() {
        let cfg = ModelConfig {
            din: 4,
            hidden: [4, 4],
            dout: 3,
            ..tiny()
        };
        let mut m = Model::<f32>::init(cfg).unwrap();
        m.set_norm_bypass(true);
        // the stack's receptive radius is 5 cells; a 13x13 canvas keeps both
        // impulse responses clear of the zero padding
        let make = |col: usize| {
            let mut x = Tensor::<f32>::zeros(vec![1, 13, 13, 4]);
            for ch in 0..4 {
                x.data_mut()[(6 * 13 + col) * 4 + ch] = 1.0 + ch as f32;
            }
            x
        };
        let y0 = m.head_forward(&make(5), Mode::Eval).unwrap();
        let y1 = m.head_forward(&make(6), Mode::Eval).unwrap();
        let mut worst = 0.0f32;
        for i in 2..11 {
            for j in 2..10 {
                for ch in 0..3 {
                    let a = y1.data()[((i * 13) + j + 1) * 3 + ch];
                    let b = y0.data()[((i * 13) + j) * 3 + ch];
                    worst = worst.max((a - b).abs());
                }
            }
        }
        assert!(worst <= 1e-5, "{worst}");
    }

    #[test]
    fn output_transformation_properties() {
        let f = Tensor::<f64>::from_fn(vec![3, 5], |i| (i as f64).sin());
        let f2 = Tensor::<f64>::from_fn(vec![2, 5], |i| (i as f64 * 0.3).cos());
        let t = output_transformation(&f, &f2, 1.0).unwrap();
        let tt = output_transformation(&f2, &f, 1.0).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(t.data()[i * 2 + j], tt.data()[j * 3 + i]);
            }
        }
        let one = output_transformation(&f.clone().reshape(vec![3, 5]).unwrap(), &f, 1.0).unwrap();
        for i in 0..3 {
            let sq: f64 = f.data()[i * 5..(i + 1) * 5].iter().map(|v| v * v).sum();
            assert!((one.data()[i * 3 + i] - sq).abs() < 1e-12);
            assert!(one.data()[i * 3 + i] >= 0.0);
        }
        let a = Tensor::<f64>::new(vec![1, 5], f.data()[..5].to_vec()).unwrap();
        let b = Tensor::<f64>::new(vec![1, 5], f2.data()[..5].to_vec()).unwrap();
        let loop_dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        assert!((output_transformation(&a, &b, 1.0).unwrap().data()[0] - loop_dot).abs() < 1e-12);
        let z = output_transformation(&f, &Tensor::zeros(vec![4, 5]), 1.0).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(output_transformation(&f, &Tensor::zeros(vec![4, 6]), 1.0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::<f32>::init(tiny()).unwrap();
        let x = Tensor::from_fn(vec![2, 7, 7, 6], |i| (i as f32 * 0.37).cos());
        m.head_forward(&x, Mode::Train { seed: 3 }).unwrap();
        let paths = m.save(dir.path().join("m.cten")).unwrap();
        assert!(paths.sidecar.exists());
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&paths.sidecar).unwrap()).unwrap();
        assert_eq!(side["Dout"], 3);
        assert_eq!(side["C"], 2);
        let mut back = Model::<f32>::load(dir.path().join("m.cten")).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            back.head_forward(&x, Mode::Eval).unwrap(),
            m.head_forward(&x, Mode::Eval).unwrap()
        );
        let entries = cten::decode_toc(&fs::read(&paths.tensors).unwrap()).unwrap();
        assert!(entries.iter().any(|(n, _)| n == "head.conv1.w"));
        assert!(entries.iter().any(|(n, _)| n == "head.bn1.mean"));
        assert!(entries.iter().any(|(n, _)| n == "qenc.conv1.w"));
    }

    #[test]
    fn query_encoder_is_deterministic() {
        let m = Model::<f32>::init(tiny()).unwrap();
        let s = SceneAnnotation::new(
            "q",
            vec![SceneObject {
                category: 1,
                bbox: BBox::new(0.2, 0.2, 0.3, 0.3),
            }],
        );
        let c = rasterize(&s, 2).unwrap().to_tensor::<f32>();
        assert_eq!(m.encode_query(&c).unwrap(), m.encode_query(&c).unwrap());
        let m2 = Model::<f32>::init(tiny()).unwrap();
        assert_eq!(m.encode_query(&c).unwrap(), m2.encode_query(&c).unwrap());
    }
}
