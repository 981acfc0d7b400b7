//! Ranking quality against ground-truth relevance: truncated average
//! precision, continuous NDCG, mean relevance and the oracle ordering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relevance at or above which an item counts as relevant for mAP.
pub const RELEVANCE_THRESHOLD: f64 = 0.30;

/// `AP@k` over binarized relevances, normalized by `min(total_relevant, k)`.
///
/// Returns `None` when the gallery holds no relevant item for the query; such
/// queries are excluded from the mean.
pub fn average_precision(
    ranked: &[f64],
    k: usize,
    total_relevant: usize,
    threshold: f64,
) -> Result<Option<f64>> {
    if ranked.is_empty() || k == 0 {
        return Err(Error::InvalidArgument(
            "average precision needs a nonempty ranking and k >= 1".into(),
        ));
    }
    if total_relevant == 0 {
        return Ok(None);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in ranked.iter().take(k).enumerate() {
        if rel >= threshold {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(Some(sum / total_relevant.min(k) as f64))
}

fn dcg(rels: &[f64], k: usize) -> f64 {
    rels.iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| r.exp2() / ((i + 2) as f64).log2())
        .sum()
}

/// Continuous NDCG with gain `2^r`; `k` is clipped to the available items.
pub fn cndcg(ranked: &[f64], ideal: &[f64], k: usize) -> Result<f64> {
    if ranked.is_empty() || ideal.is_empty() || k == 0 {
        return Err(Error::InvalidArgument(
            "cNDCG needs nonempty rankings and k >= 1".into(),
        ));
    }
    let k = k.min(ideal.len()).min(ranked.len());
    Ok(dcg(ranked, k) / dcg(ideal, k))
}

/// Mean relevance of the top `k` (or fewer, if the ranking is shorter).
pub fn mrel(ranked: &[f64], k: usize) -> Result<f64> {
    if ranked.is_empty() || k == 0 {
        return Err(Error::InvalidArgument(
            "mREL needs a nonempty ranking and k >= 1".into(),
        ));
    }
    let top = &ranked[..k.min(ranked.len())];
    Ok(top.iter().sum::<f64>() / top.len() as f64)
}

/// Relevances sorted in descending order.
pub fn ideal_order(row: &[f64]) -> Vec<f64> {
    let mut v = row.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Cutoffs reported for each metric.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricKs {
    pub map: Vec<usize>,
    pub cndcg: Vec<usize>,
    pub mrel: Vec<usize>,
}

impl Default for MetricKs {
    fn default() -> Self {
        Self {
            map: vec![1, 10, 50],
            cndcg: vec![1, 50, 100],
            mrel: vec![1, 5, 20],
        }
    }
}

impl MetricKs {
    pub fn depth(&self) -> usize {
        self.map
            .iter()
            .chain(&self.cndcg)
            .chain(&self.mrel)
            .copied()
            .max()
            .unwrap_or(1)
    }
}

pub fn map_key(k: usize) -> String {
    format!("mAP@{k}")
}

pub fn cndcg_key(k: usize) -> String {
    format!("cNDCG@{k}")
}

pub fn mrel_key(k: usize) -> String {
    format!("mREL@{k}")
}

/// Metric values of one query. `mAP@k` keys are absent for excluded queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub values: BTreeMap<String, f64>,
    pub excluded: bool,
}

/// Scores one ranking given the relevances of its items in rank order and the
/// query's full relevance row over the gallery.
pub fn query_metrics(
    ranked: &[f64],
    row: &[f64],
    ks: &MetricKs,
    threshold: f64,
) -> Result<QueryMetrics> {
    let total_relevant = row.iter().filter(|&&r| r >= threshold).count();
    let ideal = ideal_order(row);
    let mut values = BTreeMap::new();
    for &k in &ks.map {
        if let Some(ap) = average_precision(ranked, k, total_relevant, threshold)? {
            values.insert(map_key(k), ap);
        }
    }
    for &k in &ks.cndcg {
        values.insert(cndcg_key(k), cndcg(ranked, &ideal, k)?);
    }
    for &k in &ks.mrel {
        values.insert(mrel_key(k), mrel(ranked, k)?);
    }
    Ok(QueryMetrics {
        values,
        excluded: total_relevant == 0,
    })
}

/// Metrics of the descending-relevance ordering: the attainable upper bound.
pub fn oracle_metrics(row: &[f64], ks: &MetricKs, threshold: f64) -> Result<QueryMetrics> {
    query_metrics(&ideal_order(row), row, ks, threshold)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with tie-averaged ranks. Returns 0 when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub id: String,
    pub excluded: bool,
    pub metrics: BTreeMap<String, f64>,
    /// Ground-truth relevances of the retrieved items, in rank order.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub relevances: Option<Vec<f64>>,
}

/// Aggregate and per-query evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub queries: usize,
    pub gallery: usize,
    /// Queries without any relevant gallery item; left out of the mAP means.
    pub excluded_queries: Vec<String>,
    pub mean: BTreeMap<String, f64>,
    pub oracle: BTreeMap<String, f64>,
    pub per_query: Vec<QueryReport>,
    #[serde(rename = "timingMs", skip_serializing_if = "Option::is_none", default)]
    pub timing_ms: Option<f64>,
}

fn means(rows: &[&BTreeMap<String, f64>]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows {
        for (k, v) in r.iter() {
            let e = acc.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

impl EvalReport {
    /// Builds a report from per-query rankings (gallery positions, best first)
    /// and the full `[queries x gallery]` relevance matrix.
    pub fn from_rankings(
        query_ids: &[String],
        rankings: &[Vec<usize>],
        relevance: &[Vec<f64>],
        ks: &MetricKs,
        threshold: f64,
        config: serde_json::Value,
        keep_relevances: bool,
    ) -> Result<Self> {
        if query_ids.len() != rankings.len()
            || rankings.len() != relevance.len()
            || query_ids.is_empty()
        {
            return Err(Error::InvalidArgument(
                "queries, rankings and relevance rows must align".into(),
            ));
        }
        let gallery = relevance[0].len();
        let mut per_query = Vec::with_capacity(query_ids.len());
        let mut oracle = Vec::with_capacity(query_ids.len());
        for ((id, ranking), row) in query_ids.iter().zip(rankings).zip(relevance) {
            if row.len() != gallery {
                return Err(Error::InvalidArgument(format!(
                    "relevance row of {id} has {} entries, expected {gallery}",
                    row.len()
                )));
            }
            let ranked: Vec<f64> = ranking
                .iter()
                .map(|&g| {
                    row.get(g).copied().ok_or_else(|| {
                        Error::InvalidArgument(format!("gallery position {g} out of range"))
                    })
                })
                .collect::<Result<_>>()?;
            let m = query_metrics(&ranked, row, ks, threshold)?;
            oracle.push(oracle_metrics(row, ks, threshold)?.values);
            per_query.push(QueryReport {
                id: id.clone(),
                excluded: m.excluded,
                metrics: m.values,
                relevances: keep_relevances.then_some(ranked),
            });
        }
        let mean = means(&per_query.iter().map(|q| &q.metrics).collect::<Vec<_>>());
        let oracle = means(&oracle.iter().collect::<Vec<_>>());
        Ok(Self {
            config,
            queries: query_ids.len(),
            gallery,
            excluded_queries: per_query
                .iter()
                .filter(|q| q.excluded)
                .map(|q| q.id.clone())
                .collect(),
            mean,
            oracle,
            per_query,
            timing_ms: None,
        })
    }

    pub fn get(&self, key: &str) -> f64 {
        self.mean.get(key).copied().unwrap_or(0.0)
    }

    /// JSON with the timing field removed, for run-to-run comparison.
    pub fn canonical_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.timing_ms = None;
        Ok(serde_json::to_string_pretty(&copy)?)
    }

    /// One row per `(query, metric, k)`, plus `mean` and `oracle` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query,metric,k,value\n");
        let mut row = |q: &str, key: &str, v: f64| {
            let (metric, k) = key.split_once('@').unwrap_or((key, ""));
            let _ = writeln!(out, "{q},{metric},{k},{v}");
        };
        for q in &self.per_query {
            for (key, v) in &q.metrics {
                row(&q.id, key, *v);
            }
        }
        for (key, v) in &self.mean {
            row("mean", key, *v);
        }
        for (key, v) in &self.oracle {
            row("oracle", key, *v);
        }
        out
    }
}
