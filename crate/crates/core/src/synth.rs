//! Seeded synthetic scenes and stand-in backbone features.
//!
//! Scenes come in clusters: a random base layout plus variants obtained by
//! translating its objects or relabelling one of them, so pairwise similarity
//! covers the whole `(0, 1)` range. Features are a noisy linear read-out of the
//! pooled composition map through a fixed per-category projector.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composition::{
    apply_transform, input_transformation_unchecked, rasterize_with_grid, BBox, CompositionMap,
    QueryTransform, SceneAnnotation, SceneObject, DEFAULT_GRID, MAX_OBJECTS,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernels::adaptive_avg_pool;
use crate::metrics::spearman;
use crate::model::{mix, SPATIAL};
use crate::tensor::{dot_f32, Real, Tensor};

const PLACEMENT_ATTEMPTS: usize = 100;
const FEATURE_SALT: u64 = 0xF3A7_0001;
const PROJECTOR_SALT: u64 = 0xF3A7_0002;
const SCENE_SALT: u64 = 0xF3A7_0003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scenes: usize,
    pub categories: usize,
    pub max_objects: usize,
    pub din: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Scenes per cluster, base included.
    pub cluster_size: usize,
    /// Largest per-object offset of a translated variant, in canvas units.
    pub max_shift: f64,
    /// Probability that a variant relabels one object instead of moving objects.
    pub swap_prob: f64,
    /// Box side range in canvas units.
    pub box_range: (f64, f64),
    /// Fraction of every category direction shared by all categories.
    pub shared_fraction: f64,
    pub grid: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 3000,
            categories: 8,
            max_objects: MAX_OBJECTS,
            din: 64,
            noise_std: 0.5,
            seed: 0,
            cluster_size: 6,
            max_shift: 0.15,
            swap_prob: 0.25,
            box_range: (0.15, 0.5),
            shared_fraction: 0.5,
            grid: DEFAULT_GRID,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synth config: {m}")));
        if self.scenes < 2 {
            return bad("scenes must be at least 2");
        }
        if !(1..=MAX_OBJECTS).contains(&self.max_objects) {
            return bad("max_objects must be in 1..=6");
        }
        if self.categories == 0 || self.din == 0 || self.cluster_size == 0 {
            return bad("categories, din and cluster_size must be positive");
        }
        let (lo, hi) = self.box_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad("box_range must satisfy 0 < lo <= hi <= 1");
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) || !(0.0..=1.0).contains(&self.swap_prob) {
            return bad("shared_fraction and swap_prob must lie in [0,1]");
        }
        if !(self.noise_std >= 0.0 && self.max_shift >= 0.0) {
            return bad("noise_std and max_shift must be non-negative");
        }
        Ok(())
    }
}

fn random_box(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> BBox {
    let w = rng.random_range(lo..=hi);
    let h = rng.random_range(lo..=hi);
    BBox::new(
        rng.random_range(0.0..=1.0 - w),
        rng.random_range(0.0..=1.0 - h),
        w,
        h,
    )
}

/// Random layout whose boxes pairwise overlap by at most half (IoU <= 0.5).
fn base_scene(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<SceneObject> {
    loop {
        let n = rng.random_range(1..=cfg.max_objects);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        let mut feasible = true;
        for _ in 0..n {
            let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
                let b = random_box(rng, cfg.box_range);
                objects.iter().all(|o| o.bbox.iou(&b) <= 0.5).then_some(b)
            });
            match placed {
                Some(bbox) => objects.push(SceneObject {
                    category: rng.random_range(0..cfg.categories),
                    bbox,
                }),
                None => {
                    feasible = false;
                    break;
                }
            }
        }
        if feasible {
            objects.sort_by(|a, b| b.bbox.area().total_cmp(&a.bbox.area()));
            return objects;
        }
    }
}

fn variant(
    cfg: &SynthConfig,
    base: &SceneAnnotation,
    rng: &mut impl Rng,
) -> Option<SceneAnnotation> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let t = if cfg.categories > 1 && rng.random_bool(cfg.swap_prob) {
            let o = base.objects[rng.random_range(0..base.objects.len())].category;
            let mut to = rng.random_range(0..cfg.categories - 1);
            if to >= o {
                to += 1;
            }
            QueryTransform::CategorySwap {
                mapping: vec![(o, to)],
            }
        } else {
            let s = cfg.max_shift;
            let deltas = base
                .objects
                .iter()
                .map(|_| (rng.random_range(-s..=s), rng.random_range(-s..=s)))
                .collect();
            QueryTransform::Translate { deltas }
        };
        if let Ok(v) = apply_transform(base, &t) {
            if v.objects
                .iter()
                .all(|o| o.bbox.w >= 0.02 && o.bbox.h >= 0.02)
            {
                return Some(v);
            }
        }
    }
    None
}

/// Clustered scenes with ids `s000000..` assigned after a seeded shuffle, so id
/// order carries no cluster information. Also returns each scene's cluster.
pub fn generate_clustered(cfg: &SynthConfig) -> Result<(Vec<SceneAnnotation>, Vec<usize>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, SCENE_SALT));
    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut clusters = Vec::with_capacity(cfg.scenes);
    let mut cluster = 0;
    while scenes.len() < cfg.scenes {
        let base = SceneAnnotation::new("", base_scene(cfg, &mut rng));
        let want = cfg.cluster_size.min(cfg.scenes - scenes.len());
        let mut members = vec![base.clone()];
        while members.len() < want {
            match variant(cfg, &base, &mut rng) {
                Some(v) => members.push(v),
                None => break,
            }
        }
        clusters.extend(std::iter::repeat_n(cluster, members.len()));
        scenes.extend(members);
        cluster += 1;
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut rng);
    let width = scenes.len().to_string().len().max(6);
    let mut out = Vec::with_capacity(scenes.len());
    let mut out_clusters = Vec::with_capacity(scenes.len());
    for (n, &i) in order.iter().enumerate() {
        let mut s = scenes[i].clone();
        s.id = format!("s{n:0width$}");
        s.validate(cfg.categories)?;
        out.push(s);
        out_clusters.push(clusters[i]);
    }
    Ok((out, out_clusters))
}

pub fn generate_scenes(cfg: &SynthConfig) -> Result<Vec<SceneAnnotation>> {
    Ok(generate_clustered(cfg)?.0)
}

/// Fixed `[C, Din]` read-out: row `k` is `sqrt(s)·u + sqrt(1-s)·v_k` with a
/// shared unit-variance direction `u` and per-category directions `v_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryProjector {
    weights: Tensor<f32>,
}

impl CategoryProjector {
    pub fn new(seed: u64, categories: usize, din: usize, shared_fraction: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, PROJECTOR_SALT));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let shared: Vec<f64> = (0..din).map(|_| normal.sample(&mut rng)).collect();
        let (a, b) = (shared_fraction.sqrt(), (1.0 - shared_fraction).sqrt());
        let weights = Tensor::from_fn(vec![categories, din], |i| {
            (a * shared[i % din] + b * normal.sample(&mut rng)) as f32
        });
        Self { weights }
    }

    pub fn categories(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn din(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn weights(&self) -> &Tensor<f32> {
        &self.weights
    }
}

/// `[7, 7, Din]` features: pooled occupancy times the projector plus seeded
/// Gaussian noise.
pub fn synth_features(
    map: &CompositionMap,
    projector: &CategoryProjector,
    noise_std: f64,
    seed: u64,
) -> Result<Tensor<f32>> {
    let c = map.categories();
    if c != projector.categories() {
        return Err(Error::shape(
            "synth_features",
            format!(
                "{c} map channels vs {} projector rows",
                projector.categories()
            ),
        ));
    }
    let g = map.grid();
    let dense = map.to_tensor::<f32>().reshape(vec![1, g, g, c])?;
    let pooled = adaptive_avg_pool(&dense, SPATIAL, SPATIAL)?;
    let cells = SPATIAL * SPATIAL;
    let din = projector.din();
    let mut out = vec![0.0f32; cells * din];
    f32::gemm(
        cells,
        c,
        din,
        1.0,
        pooled.data(),
        (c as isize, 1),
        projector.weights.data(),
        (din as isize, 1),
        0.0,
        &mut out,
        (din as isize, 1),
    );
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, FEATURE_SALT));
        let normal =
            Normal::new(0.0, noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in &mut out {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    Tensor::new(vec![SPATIAL, SPATIAL, din], out)
}

/// Calibration statistics of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub config: SynthConfig,
    pub scenes: usize,
    pub clusters: usize,
    /// Spearman correlation between `Ti` and raw feature dot products over
    /// every intra-cluster pair plus as many random pairs.
    pub spearman_ti_feature_dot: f64,
    pub spearman_pairs: usize,
    /// Share of intra-cluster pairs with `Ti` in `[0.2, 0.8]`.
    pub intra_cluster_mid_fraction: f64,
    /// Share of sampled triples where a scene's features are closer to those of
    /// its two-cell translate than to a random other scene.
    pub translate_triple_fraction: f64,
    pub translate_triples: usize,
}

/// Scenes, cluster labels and features of one generated corpus.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub dataset: Dataset,
    pub clusters: Vec<usize>,
    pub maps: Vec<CompositionMap>,
    pub projector: CategoryProjector,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let (scenes, clusters) = generate_clustered(cfg)?;
    let projector = CategoryProjector::new(cfg.seed, cfg.categories, cfg.din, cfg.shared_fraction);
    let maps: Vec<CompositionMap> = scenes
        .iter()
        .map(|s| rasterize_with_grid(s, cfg.categories, cfg.grid))
        .collect::<Result<_>>()?;
    let features = maps
        .par_iter()
        .enumerate()
        .map(|(i, m)| synth_features(m, &projector, cfg.noise_std, mix(cfg.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthCorpus {
        dataset: Dataset::new(scenes, features)?,
        clusters,
        maps,
        projector,
    })
}

fn feature_dot(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    dot_f32(a.data(), b.data()) as f64
}

/// Measures the calibration properties of a corpus.
pub fn calibrate(cfg: &SynthConfig, corpus: &SynthCorpus) -> Result<GenerationReport> {
    let n = corpus.maps.len();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xCA11));
    let mut by_cluster: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &c) in corpus.clusters.iter().enumerate() {
        by_cluster.entry(c).or_default().push(i);
    }
    let mut pairs = Vec::new();
    for members in by_cluster.values() {
        for (x, &a) in members.iter().enumerate() {
            for &b in &members[x + 1..] {
                pairs.push((a, b));
            }
        }
    }
    let intra = pairs.len();
    let mid = pairs
        .iter()
        .filter(|&&(a, b)| {
            (0.2..=0.8).contains(&input_transformation_unchecked(
                &corpus.maps[a],
                &corpus.maps[b],
            ))
        })
        .count();
    for _ in 0..intra.max(1) {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        pairs.push((a, b));
    }
    let feats = &corpus.dataset.features;
    let ti: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| input_transformation_unchecked(&corpus.maps[a], &corpus.maps[b]))
        .collect();
    let dots: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| feature_dot(&feats[a], &feats[b]))
        .collect();
    let rho = spearman(&ti, &dots)?;

    let shift = 2.0 / cfg.grid as f64;
    let mut triples = 0;
    let mut wins = 0;
    for t in 0..n.min(200) {
        let i = rng.random_range(0..n);
        let s = &corpus.dataset.scenes[i];
        let fits = |d: f64| {
            s.objects
                .iter()
                .all(|o| o.bbox.x + d >= 0.0 && o.bbox.x + o.bbox.w + d <= 1.0)
        };
        let d = if fits(shift) {
            shift
        } else if fits(-shift) {
            -shift
        } else {
            continue;
        };
        let moved = apply_transform(
            s,
            &QueryTransform::Translate {
                deltas: vec![(d, 0.0); s.objects.len()],
            },
        )?;
        let map = rasterize_with_grid(&moved, cfg.categories, cfg.grid)?;
        let f_moved = synth_features(
            &map,
            &corpus.projector,
            cfg.noise_std,
            mix(cfg.seed ^ 0x7A, t as u64),
        )?;
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        triples += 1;
        if feature_dot(&feats[i], &f_moved) > feature_dot(&feats[i], &feats[j]) {
            wins += 1;
        }
    }
    Ok(GenerationReport {
        config: cfg.clone(),
        scenes: n,
        clusters: by_cluster.len(),
        spearman_ti_feature_dot: rho,
        spearman_pairs: pairs.len(),
        intra_cluster_mid_fraction: mid as f64 / intra.max(1) as f64,
        translate_triple_fraction: wins as f64 / triples.max(1) as f64,
        translate_triples: triples,
    })
}

/// Index lists of the three disjoint splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub gallery: Vec<usize>,
    pub query: Vec<usize>,
}

fn carve(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || fractions.iter().sum::<f64>() > 1.0 + 1e-12
    {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to at most 1"
        )));
    }
    let sizes: Vec<usize> = fractions
        .iter()
        .map(|f| (n as f64 * f + 1e-9).floor() as usize)
        .collect();
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "split of {n} items by {fractions:?} leaves a part empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 0x5911)));
    let mut start = 0;
    Ok(sizes
        .iter()
        .map(|&len| {
            let part = order[start..start + len].to_vec();
            start += len;
            part
        })
        .collect())
}

/// Seeded shuffle of `0..n` cut into `floor(n·f)`-sized train, gallery and
/// query parts.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let mut parts = carve(n, &fractions, seed)?.into_iter();
    let mut next = || parts.next().expect("three parts");
    Ok(Splits {
        train: next(),
        gallery: next(),
        query: next(),
    })
}

/// Transfer setting: train on every item of corpus A; gallery and query are
/// carved from corpus B, which training never sees. Indices of the returned
/// gallery and query refer to B.
pub fn transfer_split(n_a: usize, n_b: usize, fractions_b: [f64; 2], seed: u64) -> Result<Splits> {
    if n_a == 0 {
        return Err(Error::InvalidArgument(
            "transfer split needs a nonempty training corpus".into(),
        ));
    }
    let mut parts = carve(n_b, &fractions_b, seed)?.into_iter();
    let mut next = || parts.next().expect("two parts");
    Ok(Splits {
        train: (0..n_a).collect(),
        gallery: next(),
        query: next(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::rasterize_with_grid;

    fn small() -> SynthConfig {
        SynthConfig {
            scenes: 60,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let cfg = SynthConfig {
            scenes: 10,
            ..SynthConfig::default()
        };
        let a = generate_scenes(&cfg).unwrap();
        let b = generate_scenes(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.len(), 10);
        for s in &a {
            s.validate(cfg.categories).unwrap();
            assert!((1..=6).contains(&s.objects.len()));
        }
        let other = generate_scenes(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn features_are_a_function_of_scene_and_seed() {
        let cfg = small();
        let scenes = generate_scenes(&cfg).unwrap();
        let p = CategoryProjector::new(3, cfg.categories, cfg.din, cfg.shared_fraction);
        let m = rasterize_with_grid(&scenes[0], cfg.categories, cfg.grid).unwrap();
        let f0 = synth_features(&m, &p, 0.0, 1).unwrap();
        assert_eq!(f0, synth_features(&m, &p, 0.0, 2).unwrap());
        let f1 = synth_features(&m, &p, 0.5, 9).unwrap();
        assert_eq!(f1, synth_features(&m, &p, 0.5, 9).unwrap());
        assert_ne!(f1, synth_features(&m, &p, 0.5, 10).unwrap());
        assert_eq!(f0.dims(), &[7, 7, cfg.din]);
        assert_eq!(
            p,
            CategoryProjector::new(3, cfg.categories, cfg.din, cfg.shared_fraction)
        );
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = split(100, [0.5, 0.3, 0.2], 4).unwrap();
        assert_eq!(
            (s.train.len(), s.gallery.len(), s.query.len()),
            (50, 30, 20)
        );
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.gallery)
            .chain(&s.query)
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 100);
        assert_eq!(s, split(100, [0.5, 0.3, 0.2], 4).unwrap());
        assert!(split(10, [0.9, 0.05, 0.05], 0).is_err());
        assert!(split(10, [0.6, 0.6, 0.0], 0).is_err());
        let t = transfer_split(40, 20, [0.5, 0.25], 1).unwrap();
        assert_eq!((t.train.len(), t.gallery.len(), t.query.len()), (40, 10, 5));
    }

    #[test]
    fn calibration_on_small_corpus() {
        let cfg = small();
        let corpus = generate(&cfg).unwrap();
        let r = calibrate(&cfg, &corpus).unwrap();
        assert_eq!(r.scenes, 60);
        assert!(r.spearman_ti_feature_dot >= 0.3, "{r:?}");
        assert!(r.intra_cluster_mid_fraction >= 0.1, "{r:?}");
        assert!(r.translate_triple_fraction >= 0.9, "{r:?}");
    }
}
