//! Pairwise losses between input and output transformation matrices, and the
//! anchor/companion batch sampler used during training.

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cal_entry, sigmoid};
use crate::composition::{input_transformation_unchecked, CompositionMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relevance cut separating highly relevant from less relevant companions.
pub const HIGH_RELEVANCE: f64 = 0.30;
/// Anchors per batch; each contributes itself plus two companions.
pub const BATCH_ANCHORS: usize = 36;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Cal,
    Euclidean,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cal" => Ok(LossKind::Cal),
            "euclidean" => Ok(LossKind::Euclidean),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss {other:?}; expected cal or euclidean"
            ))),
        }
    }
}

/// Input-space similarities `Ti` in `[0,1]` next to output-space logits `To`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformationPair {
    ti: Tensor<f64>,
    to: Tensor<f64>,
}

impl TransformationPair {
    pub fn new(ti: Tensor<f64>, to: Tensor<f64>) -> Result<Self> {
        if ti.dims() != to.dims() || ti.ndim() != 2 {
            return Err(Error::shape(
                "transformation_pair",
                format!("Ti {:?} vs To {:?}", ti.dims(), to.dims()),
            ));
        }
        if !ti.all_finite() || !to.all_finite() {
            return Err(Error::NonFinite {
                op: "transformation_pair",
            });
        }
        if ti.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "Ti entries must lie in [0,1]".into(),
            ));
        }
        Ok(Self { ti, to })
    }

    pub fn ti(&self) -> &Tensor<f64> {
        &self.ti
    }

    pub fn to(&self) -> &Tensor<f64> {
        &self.to
    }

    fn entries(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.ti
            .data()
            .iter()
            .copied()
            .zip(self.to.data().iter().copied())
    }
}

/// Mean composition-aware loss over all ordered pairs, self-pairs included.
pub fn cal_loss(pair: &TransformationPair) -> f64 {
    let n = pair.ti.len().max(1) as f64;
    pair.entries()
        .map(|(ti, to)| cal_entry(to, ti))
        .sum::<f64>()
        / n
}

/// Mean squared gap between `Ti` and the logistic squashing of `To`.
pub fn euclidean_loss(pair: &TransformationPair) -> f64 {
    let n = pair.ti.len().max(1) as f64;
    pair.entries()
        .map(|(ti, to)| (ti - sigmoid(to)).powi(2))
        .sum::<f64>()
        / n
}

pub fn loss(kind: LossKind, pair: &TransformationPair) -> f64 {
    match kind {
        LossKind::Cal => cal_loss(pair),
        LossKind::Euclidean => euclidean_loss(pair),
    }
}

/// Closed-form derivative of the mean loss with respect to every `To` entry.
pub fn loss_grad_wrt_to(kind: LossKind, pair: &TransformationPair) -> Tensor<f64> {
    let n = pair.ti.len().max(1) as f64;
    let data = pair
        .entries()
        .map(|(ti, to)| {
            let s = sigmoid(to);
            match kind {
                LossKind::Cal => (s - ti) / n,
                LossKind::Euclidean => -2.0 * (ti - s) * s * (1.0 - s) / n,
            }
        })
        .collect();
    Tensor::new(pair.to.dims().to_vec(), data).expect("dims preserved")
}

/// Soft-label cross-entropy `-[t ln σ(o) + (1-t) ln(1-σ(o))]`, written with
/// logs of sigmoids rather than the stable form.
pub fn soft_cross_entropy(to: f64, ti: f64) -> f64 {
    let s = sigmoid(to);
    -(ti * s.ln() + (1.0 - ti) * (1.0 - s).ln())
}

/// Binary entropy in nats, with `H(0) = H(1) = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    term(p) + term(1.0 - p)
}

/// Mean binary entropy of a `Ti` matrix: the infimum of the mean CAL loss.
pub fn entropy_bound(ti: &Tensor<f64>) -> f64 {
    ti.data().iter().map(|&p| binary_entropy(p)).sum::<f64>() / ti.len().max(1) as f64
}

/// Pairwise `Ti` over a list of maps; symmetric with unit diagonal for
/// nonempty maps.
pub fn ti_matrix(maps: &[&CompositionMap]) -> Result<Tensor<f64>> {
    let b = maps.len();
    if let Some(first) = maps.first() {
        if let Some(bad) = maps
            .iter()
            .find(|m| m.grid() != first.grid() || m.categories() != first.categories())
        {
            return Err(Error::shape(
                "ti_matrix",
                format!(
                    "grid/categories {}x{} vs {}x{}",
                    bad.grid(),
                    bad.categories(),
                    first.grid(),
                    first.categories()
                ),
            ));
        }
    }
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in i..b {
            let v = input_transformation_unchecked(maps[i], maps[j]);
            out[i * b + j] = v;
            out[j * b + i] = v;
        }
    }
    Tensor::new(vec![b, b], out)
}

/// Candidate companions of every scene bucketed by `Ti` against it.
#[derive(Clone, Debug)]
pub struct RelevanceIndex {
    high: Vec<Vec<usize>>,
    low: Vec<Vec<usize>>,
    best: Vec<Option<usize>>,
    worst: Vec<Option<usize>>,
    threshold: f64,
}

impl RelevanceIndex {
    /// Exhaustive pairwise construction; `O(N²)` map comparisons.
    pub fn build(maps: &[CompositionMap], threshold: f64) -> Result<Self> {
        let n = maps.len();
        let refs: Vec<&CompositionMap> = maps.iter().collect();
        let ti = ti_matrix(&refs)?;
        let mut idx = Self {
            high: vec![Vec::new(); n],
            low: vec![Vec::new(); n],
            best: vec![None; n],
            worst: vec![None; n],
            threshold,
        };
        for a in 0..n {
            let row = &ti.data()[a * n..(a + 1) * n];
            let mut best: Option<(f64, usize)> = None;
            let mut worst: Option<(f64, usize)> = None;
            for (b, &v) in row.iter().enumerate() {
                if a == b {
                    continue;
                }
                if v >= threshold {
                    idx.high[a].push(b);
                } else {
                    idx.low[a].push(b);
                }
                if best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, b));
                }
                if worst.is_none_or(|(wv, _)| v < wv) {
                    worst = Some((v, b));
                }
            }
            idx.best[a] = best.map(|(_, b)| b);
            idx.worst[a] = worst.map(|(_, b)| b);
        }
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.high.len()
    }

    pub fn is_empty(&self) -> bool {
        self.high.is_empty()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Candidates with `Ti >= threshold` against `anchor`, excluding itself.
    pub fn high(&self, anchor: usize) -> &[usize] {
        &self.high[anchor]
    }

    pub fn low(&self, anchor: usize) -> &[usize] {
        &self.low[anchor]
    }

    fn pick_high(&self, anchor: usize, rng: &mut impl Rng) -> usize {
        self.high[anchor]
            .choose(rng)
            .copied()
            .or(self.best[anchor])
            .unwrap_or(anchor)
    }

    fn pick_low(&self, anchor: usize, rng: &mut impl Rng) -> usize {
        self.low[anchor]
            .choose(rng)
            .copied()
            .or(self.worst[anchor])
            .unwrap_or(anchor)
    }
}

/// Scene indices of one batch and their pairwise input transformations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    /// `[anchor, high, low]` triples flattened in anchor order.
    pub items: Vec<usize>,
    pub ti: Tensor<f64>,
}

/// Builds one batch from the given anchors: each anchor is followed by one
/// companion at or above the relevance cut (or the most similar candidate when
/// none qualifies) and one below it.
pub fn build_batch(
    maps: &[CompositionMap],
    index: &RelevanceIndex,
    anchors: &[usize],
    rng: &mut impl Rng,
) -> Result<TrainingBatch> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument(
            "batch needs at least one anchor".into(),
        ));
    }
    if index.len() != maps.len() {
        return Err(Error::InvalidArgument(format!(
            "relevance index covers {} scenes, dataset has {}",
            index.len(),
            maps.len()
        )));
    }
    let mut items = Vec::with_capacity(anchors.len() * 3);
    for &a in anchors {
        if a >= maps.len() {
            return Err(Error::InvalidArgument(format!("anchor {a} out of range")));
        }
        let hi = index.pick_high(a, rng);
        let lo = index.pick_low(a, rng);
        items.extend([a, hi, lo]);
    }
    let refs: Vec<&CompositionMap> = items.iter().map(|&i| &maps[i]).collect();
    let ti = ti_matrix(&refs)?;
    Ok(TrainingBatch { items, ti })
}

/// Splits a seeded permutation of `0..n` into anchor groups of `per_batch`.
/// A shorter trailing group is kept and reported.
pub fn epoch_anchors(n: usize, per_batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let groups: Vec<Vec<usize>> = order
        .chunks(per_batch.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if let Some(last) = groups.last() {
        if last.len() < per_batch {
            warn!(
                "final batch has {} anchors instead of {per_batch}",
                last.len()
            );
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::{input_transformation, rasterize, BBox, SceneAnnotation, SceneObject};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(ti: &[f64], to: &[f64]) -> TransformationPair {
        let n = (ti.len() as f64).sqrt() as usize;
        TransformationPair::new(
            Tensor::new(vec![n, n], ti.to_vec()).unwrap(),
            Tensor::new(vec![n, n], to.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn worked_loss_values() {
        assert!((cal_entry(0.0f64, 0.37) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((cal_entry(2.0f64, 1.0) - 0.126928).abs() < 1e-6);
        assert!((cal_entry(-2.0f64, 0.0) - 0.126928).abs() < 1e-6);
        assert!(cal_entry(1000.0f64, 1.0).abs() < 1e-12);
        for to in [-1e6f64, 1e6] {
            assert!(cal_entry(to, 0.5).is_finite());
        }
        assert_eq!(euclidean_loss(&pair(&[1.0], &[0.0])), 0.25);
        assert!(euclidean_loss(&pair(&[0.0], &[-800.0])) < 1e-300);
    }

    #[test]
    fn closed_form_gradient_values() {
        let g = loss_grad_wrt_to(LossKind::Cal, &pair(&[0.5, 1.0, 1.0, 0.5], &[0.0; 4]));
        assert_eq!(g.data(), &[0.0, -0.125, -0.125, 0.0]);
    }

    #[test]
    fn minimizer_is_logit_and_attains_entropy() {
        for k in 1..10 {
            let ti = k as f64 / 10.0;
            let logit = (ti / (1.0 - ti)).ln();
            let at = cal_entry(logit, ti);
            assert!((at - binary_entropy(ti)).abs() < 1e-9);
            for d in [-0.1, -1e-3, 1e-3, 0.1] {
                assert!(cal_entry(logit + d, ti) > at);
            }
        }
    }

    #[test]
    fn pair_validation() {
        let t = Tensor::<f64>::zeros(vec![2, 2]);
        assert!(TransformationPair::new(t.clone(), Tensor::zeros(vec![2, 3])).is_err());
        assert!(TransformationPair::new(Tensor::full(vec![2, 2], 1.5), t.clone()).is_err());
        assert!(TransformationPair::new(t.clone(), Tensor::full(vec![2, 2], f64::NAN)).is_err());
    }

    fn scenes(n: usize, seed: u64) -> Vec<SceneAnnotation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x = rng.random_range(0.0..0.6);
                let y = rng.random_range(0.0..0.6);
                SceneAnnotation::new(
                    format!("s{i}"),
                    vec![SceneObject {
                        category: rng.random_range(0..2),
                        bbox: BBox::new(x, y, 0.35, 0.35),
                    }],
                )
            })
            .collect()
    }

    #[test]
    fn duplicates_give_unit_ti() {
        let s = scenes(1, 3)[0].clone();
        let maps = vec![rasterize(&s, 2).unwrap(); 5];
        let idx = RelevanceIndex::build(&maps, HIGH_RELEVANCE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = build_batch(&maps, &idx, &[0, 1, 2], &mut rng).unwrap();
        assert_eq!(b.items.len(), 9);
        assert!(b.ti.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn buckets_agree_with_pairwise_oracle() {
        let sc = scenes(100, 7);
        let maps: Vec<_> = sc.iter().map(|s| rasterize(s, 2).unwrap()).collect();
        let idx = RelevanceIndex::build(&maps, HIGH_RELEVANCE).unwrap();
        for a in 0..100 {
            for b in 0..100 {
                if a == b {
                    continue;
                }
                let v = input_transformation(&maps[a], &maps[b]).unwrap();
                assert_eq!(idx.high(a).contains(&b), v >= HIGH_RELEVANCE);
                assert_eq!(idx.low(a).contains(&b), v < HIGH_RELEVANCE);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let anchors: Vec<usize> = (0..36).collect();
        let b = build_batch(&maps, &idx, &anchors, &mut rng).unwrap();
        assert_eq!(b.items.len(), 108);
        for t in b.items.chunks(3) {
            let hi = input_transformation(&maps[t[0]], &maps[t[1]]).unwrap();
            let lo = input_transformation(&maps[t[0]], &maps[t[2]]).unwrap();
            if !idx.high(t[0]).is_empty() {
                assert!(hi >= HIGH_RELEVANCE);
            }
            assert!(lo < HIGH_RELEVANCE);
        }
        for i in 0..108 {
            for j in 0..108 {
                let want = input_transformation(&maps[b.items[i]], &maps[b.items[j]]).unwrap();
                assert_eq!(b.ti.data()[i * 108 + j], want);
            }
        }
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let sc = scenes(60, 9);
        let maps: Vec<_> = sc.iter().map(|s| rasterize(s, 2).unwrap()).collect();
        let idx = RelevanceIndex::build(&maps, HIGH_RELEVANCE).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            epoch_anchors(60, 36, &mut rng)
                .iter()
                .map(|a| build_batch(&maps, &idx, a, &mut rng).unwrap().items)
                .collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(a[1].len(), 24 * 3);
    }
}
