//! Scene annotations, composition maps and ground-truth relevance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_GRID: usize = 32;
pub const MAX_OBJECTS: usize = 6;

/// Normalized `[x, y, w, h]` box; origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let iw = (self.x + self.w).min(o.x + o.w) - self.x.max(o.x);
        let ih = (self.y + self.h).min(o.y + o.h) - self.y.max(o.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        if self == o {
            return 1.0;
        }
        let inter = self.intersection(o);
        if inter == 0.0 {
            return 0.0;
        }
        (inter / (self.area() + o.area() - inter)).min(1.0)
    }

    /// Field-level validation message, if any.
    pub fn problem(&self) -> Option<String> {
        let vals = [self.x, self.y, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Some("coordinates must be finite".into());
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Some(format!(
                "width and height must be positive (w={}, h={})",
                self.w, self.h
            ));
        }
        if vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Some("coordinates must lie in [0,1]".into());
        }
        // small tolerance for float round-off on boxes touching the border
        if self.x + self.w > 1.0 + 1e-9 || self.y + self.h > 1.0 + 1e-9 {
            return Some("box extends past the canvas (x+w or y+h > 1)".into());
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub id: String,
    pub objects: Vec<SceneObject>,
}

impl SceneAnnotation {
    pub fn new(id: impl Into<String>, objects: Vec<SceneObject>) -> Self {
        Self {
            id: id.into(),
            objects,
        }
    }

    pub fn validate(&self, categories: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidAnnotation {
            id: self.id.clone(),
            reason,
        };
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(bad(format!(
                "{} objects, expected 1..={MAX_OBJECTS}",
                self.objects.len()
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.category >= categories {
                return Err(bad(format!(
                    "objects[{i}].category {} >= {categories}",
                    o.category
                )));
            }
            if let Some(p) = o.bbox.problem() {
                return Err(bad(format!("objects[{i}].bbox: {p}")));
            }
        }
        Ok(())
    }

    /// Keeps the `max` largest-area objects (stable for equal areas).
    pub fn truncate_by_area(&mut self, max: usize) {
        if self.objects.len() <= max {
            return;
        }
        let mut order: Vec<usize> = (0..self.objects.len()).collect();
        order.sort_by(|&a, &b| {
            self.objects[b]
                .bbox
                .area()
                .total_cmp(&self.objects[a].bbox.area())
                .then(a.cmp(&b))
        });
        order.truncate(max);
        order.sort_unstable();
        self.objects = order.into_iter().map(|i| self.objects[i]).collect();
    }

    pub fn category_set(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.objects.iter().map(|o| o.category).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Binary `grid x grid x C` occupancy map, bit-packed per channel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CompositionMap {
    grid: usize,
    categories: usize,
    words_per_channel: usize,
    bits: Vec<u64>,
}

impl CompositionMap {
    pub fn empty(grid: usize, categories: usize) -> Self {
        let words_per_channel = (grid * grid).div_ceil(64);
        Self {
            grid,
            categories,
            words_per_channel,
            bits: vec![0; words_per_channel * categories],
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    /// Cell at row `i`, column `j`, channel `k`.
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        let cell = i * self.grid + j;
        self.bits[k * self.words_per_channel + cell / 64] >> (cell % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize) {
        let cell = i * self.grid + j;
        self.bits[k * self.words_per_channel + cell / 64] |= 1 << (cell % 64);
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn channel_count(&self, k: usize) -> usize {
        self.bits[k * self.words_per_channel..(k + 1) * self.words_per_channel]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    /// Dense `[grid, grid, C]` tensor of zeros and ones.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (g, c) = (self.grid, self.categories);
        let mut t = Tensor::zeros(vec![g, g, c]);
        for k in 0..c {
            for i in 0..g {
                for j in 0..g {
                    if self.get(i, j, k) {
                        t.data_mut()[(i * g + j) * c + k] = T::one();
                    }
                }
            }
        }
        t
    }
}

fn cell_span(lo: f64, len: f64, grid: usize) -> (usize, usize) {
    // cells whose centers (c + 0.5)/grid fall in [lo, lo + len]
    let g = grid as f64;
    let first = (lo * g - 0.5).ceil().max(0.0) as usize;
    let last = ((lo + len) * g - 0.5).floor();
    if last < 0.0 {
        return (first, first);
    }
    (first, ((last as usize) + 1).min(grid))
}

/// Rasterizes an annotation onto a `grid x grid x C` occupancy map.
///
/// A cell is set when its center lies inside a box of that category. Boxes that
/// cover no cell center set the single cell containing the box center.
pub fn rasterize_with_grid(
    annotation: &SceneAnnotation,
    categories: usize,
    grid: usize,
) -> Result<CompositionMap> {
    let mut map = CompositionMap::empty(grid, categories);
    for (n, o) in annotation.objects.iter().enumerate() {
        if o.category >= categories {
            return Err(Error::InvalidAnnotation {
                id: annotation.id.clone(),
                reason: format!("objects[{n}].category {} >= {categories}", o.category),
            });
        }
        let (c0, c1) = cell_span(o.bbox.x, o.bbox.w, grid);
        let (r0, r1) = cell_span(o.bbox.y, o.bbox.h, grid);
        if c0 >= c1 || r0 >= r1 {
            let g = grid as f64;
            let ci = (((o.bbox.x + o.bbox.w / 2.0) * g).floor() as usize).min(grid - 1);
            let ri = (((o.bbox.y + o.bbox.h / 2.0) * g).floor() as usize).min(grid - 1);
            map.set(ri, ci, o.category);
            continue;
        }
        for i in r0..r1 {
            for j in c0..c1 {
                map.set(i, j, o.category);
            }
        }
    }
    Ok(map)
}

pub fn rasterize(annotation: &SceneAnnotation, categories: usize) -> Result<CompositionMap> {
    rasterize_with_grid(annotation, categories, DEFAULT_GRID)
}

/// Per-channel intersection over union of occupied cells, pooled over channels.
///
/// Two empty maps are defined to have similarity 0.
pub fn input_transformation(a: &CompositionMap, b: &CompositionMap) -> Result<f64> {
    if a.grid != b.grid || a.categories != b.categories {
        return Err(Error::shape(
            "input_transformation",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.grid, a.grid, a.categories, b.grid, b.grid, b.categories
            ),
        ));
    }
    Ok(input_transformation_unchecked(a, b))
}

pub(crate) fn input_transformation_unchecked(a: &CompositionMap, b: &CompositionMap) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean over query boxes of the best same-category IoU in the image.
///
/// Each query box takes its maximum independently, so one image box may serve
/// several query boxes.
pub fn miou_relevance(query: &SceneAnnotation, image: &SceneAnnotation) -> Result<f64> {
    if query.objects.is_empty() {
        return Err(Error::InvalidAnnotation {
            id: query.id.clone(),
            reason: "query has no objects".into(),
        });
    }
    let total: f64 = query
        .objects
        .iter()
        .map(|q| {
            image
                .objects
                .iter()
                .filter(|o| o.category == q.category)
                .map(|o| q.bbox.iou(&o.bbox))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / query.objects.len() as f64)
}

/// `[queries x gallery]` matrix of [`miou_relevance`], rows computed in parallel.
pub fn relevance_matrix(
    queries: &[SceneAnnotation],
    gallery: &[SceneAnnotation],
) -> Result<Vec<Vec<f64>>> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::InvalidArgument(
            "relevance matrix needs nonempty inputs".into(),
        ));
    }
    queries
        .par_iter()
        .map(|q| gallery.iter().map(|g| miou_relevance(q, g)).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryTransform {
    /// Per-object `(dx, dy)` offsets; objects beyond the list are left in place.
    Translate { deltas: Vec<(f64, f64)> },
    /// `(from, to)` category remapping.
    CategorySwap { mapping: Vec<(usize, usize)> },
}

/// Clips the interval `[start, start + len)` to the unit range. Unclipped
/// intervals keep their length bit-exact.
fn clip_span(start: f64, len: f64) -> (f64, f64) {
    let end = start + len;
    if start >= 0.0 && end <= 1.0 {
        return (start, len);
    }
    let (s, e) = (start.max(0.0), end.min(1.0));
    (s, e - s)
}

pub fn apply_transform(
    annotation: &SceneAnnotation,
    t: &QueryTransform,
) -> Result<SceneAnnotation> {
    let mut out = annotation.clone();
    match t {
        QueryTransform::Translate { deltas } => {
            for (n, (o, &(dx, dy))) in out.objects.iter_mut().zip(deltas).enumerate() {
                let (x, w) = clip_span(o.bbox.x + dx, o.bbox.w);
                let (y, h) = clip_span(o.bbox.y + dy, o.bbox.h);
                if w <= 0.0 || h <= 0.0 {
                    return Err(Error::InvalidAnnotation {
                        id: annotation.id.clone(),
                        reason: format!("objects[{n}] leaves the canvas after translation"),
                    });
                }
                o.bbox = BBox::new(x, y, w, h);
            }
        }
        QueryTransform::CategorySwap { mapping } => {
            for o in &mut out.objects {
                if let Some(&(_, to)) = mapping.iter().find(|(from, _)| *from == o.category) {
                    o.category = to;
                }
            }
        }
    }
    Ok(out)
}
