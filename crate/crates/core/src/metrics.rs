//! Ranking metrics: recall, R-precision, NDCG, MRR and average precision.
//!
//! A document is relevant when its judged gain is positive. Values are in
//! `[0, 1]`; scaling by 100 happens only when results are written out.

use std::collections::BTreeMap;
use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::Judgments;
use crate::par::{self, Execution};
use crate::retrieval::Ranking;

pub type Gains = BTreeMap<String, f64>;

fn is_rel(gains: &Gains, doc: &str) -> bool {
    gains.get(doc).is_some_and(|&g| g > 0.0)
}

fn relevant_count(gains: &Gains) -> usize {
    gains.values().filter(|&&g| g > 0.0).count()
}

/// `|relevant ∩ top-k| / |relevant|`.
pub fn recall_at_k(ranked: &[&str], gains: &Gains, k: usize) -> f64 {
    let r = relevant_count(gains);
    if r == 0 {
        return 0.0;
    }
    ranked.iter().take(k).filter(|d| is_rel(gains, d)).count() as f64 / r as f64
}

/// Precision within the top `R`, where `R` is the number of relevant documents.
pub fn r_precision(ranked: &[&str], gains: &Gains) -> f64 {
    let r = relevant_count(gains);
    if r == 0 {
        return 0.0;
    }
    ranked.iter().take(r).filter(|d| is_rel(gains, d)).count() as f64 / r as f64
}

fn dcg(gains: impl Iterator<Item = f64>) -> f64 {
    gains.enumerate().map(|(i, g)| (2f64.powf(g) - 1.0) / ((i + 2) as f64).log2()).sum()
}

/// Exponential-gain NDCG with a `log2(rank + 1)` discount.
pub fn ndcg_at_k(ranked: &[&str], gains: &Gains, k: usize) -> f64 {
    let actual = dcg(ranked.iter().take(k).map(|d| gains.get(*d).copied().unwrap_or(0.0)));
    let mut ideal: Vec<f64> = gains.values().copied().filter(|&g| g > 0.0).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let best = dcg(ideal.into_iter().take(k));
    if best == 0.0 {
        0.0
    } else {
        actual / best
    }
}

/// Reciprocal rank of the first relevant document within the top `k`.
pub fn mrr_at_k(ranked: &[&str], gains: &Gains, k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|d| is_rel(gains, d))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Mean of precision at each relevant position, over all `R` relevant documents.
pub fn average_precision(ranked: &[&str], gains: &Gains) -> f64 {
    let r = relevant_count(gains);
    if r == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut total = 0.0;
    for (i, d) in ranked.iter().enumerate() {
        if is_rel(gains, d) {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    total / r as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    R5,
    R10,
    R20,
    RPrecision,
    Ndcg10,
    Mrr10,
    Map,
}

impl Metric {
    pub const ALL: [Metric; 7] =
        [Metric::R5, Metric::R10, Metric::R20, Metric::RPrecision, Metric::Ndcg10, Metric::Mrr10, Metric::Map];

    pub fn name(self) -> &'static str {
        match self {
            Metric::R5 => "R@5",
            Metric::R10 => "R@10",
            Metric::R20 => "R@20",
            Metric::RPrecision => "RP",
            Metric::Ndcg10 => "NDCG@10",
            Metric::Mrr10 => "MRR@10",
            Metric::Map => "MAP",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    pub fn compute(self, ranked: &[&str], gains: &Gains) -> f64 {
        match self {
            Metric::R5 => recall_at_k(ranked, gains, 5),
            Metric::R10 => recall_at_k(ranked, gains, 10),
            Metric::R20 => recall_at_k(ranked, gains, 20),
            Metric::RPrecision => r_precision(ranked, gains),
            Metric::Ndcg10 => ndcg_at_k(ranked, gains, 10),
            Metric::Mrr10 => mrr_at_k(ranked, gains, 10),
            Metric::Map => average_precision(ranked, gains),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Mean of each metric over the evaluated queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSuite {
    pub values: BTreeMap<String, f64>,
    pub queries: usize,
    pub excluded: usize,
}

impl MetricSuite {
    pub fn get(&self, m: Metric) -> f64 {
        self.values.get(m.name()).copied().unwrap_or(f64::NAN)
    }

    /// Values ×100, in [`Metric::ALL`] order.
    pub fn scaled(&self) -> Vec<(Metric, f64)> {
        Metric::ALL.iter().map(|&m| (m, self.get(m) * 100.0)).collect()
    }

    /// `{"metrics": {name: value×100}, "queries": n, "excluded": m}`.
    pub fn to_json(&self) -> String {
        let metrics: serde_json::Map<String, serde_json::Value> =
            self.scaled().into_iter().map(|(m, v)| (m.name().to_string(), v.into())).collect();
        let v = serde_json::json!({ "metrics": metrics, "queries": self.queries, "excluded": self.excluded });
        serde_json::to_string_pretty(&v).expect("metrics serialize") + "\n"
    }

    /// Parse the output of [`MetricSuite::to_json`], undoing the ×100.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct Raw {
            metrics: BTreeMap<String, f64>,
            queries: usize,
            excluded: usize,
        }
        let raw: Raw = serde_json::from_str(text)?;
        Ok(Self {
            values: raw.metrics.into_iter().map(|(k, v)| (k, v / 100.0)).collect(),
            queries: raw.queries,
            excluded: raw.excluded,
        })
    }
}

pub fn csv_header() -> String {
    let mut h = String::from("method,seed");
    for m in Metric::ALL {
        h.push(',');
        h.push_str(m.name());
    }
    h
}

/// One `method,seed,metric…` line with values ×100 at fixed precision.
pub fn csv_row(method: &str, seed: u64, suite: &MetricSuite) -> String {
    let mut row = format!("{method},{seed}");
    for (_, v) in suite.scaled() {
        row.push_str(&format!(",{v:.6}"));
    }
    row
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryScores {
    pub query_id: String,
    pub values: [f64; 7],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub suite: MetricSuite,
    pub per_query: Vec<QueryScores>,
    /// Queries without any positive judgment.
    pub excluded: Vec<String>,
}

/// Score every ranking and average over queries with at least one relevant document.
pub fn evaluate(rankings: &[Ranking], judgments: &Judgments, exec: Execution) -> Evaluation {
    let scored = par::map(exec, rankings, |r| {
        let gains = judgments.for_query(&r.query_id).filter(|g| relevant_count(g) > 0)?;
        let ranked: Vec<&str> = r.doc_ids().collect();
        let mut values = [0.0; 7];
        for (v, m) in values.iter_mut().zip(Metric::ALL) {
            *v = m.compute(&ranked, gains);
        }
        Some(QueryScores { query_id: r.query_id.clone(), values })
    });
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    for (r, s) in rankings.iter().zip(scored) {
        match s {
            Some(s) => per_query.push(s),
            None => excluded.push(r.query_id.clone()),
        }
    }
    if !excluded.is_empty() {
        warn!("{} queries have no positive judgment and were excluded", excluded.len());
    }
    let n = per_query.len();
    let values = Metric::ALL
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mean = if n == 0 { 0.0 } else { per_query.iter().map(|q| q.values[i]).sum::<f64>() / n as f64 };
            (m.name().to_string(), mean)
        })
        .collect();
    Evaluation { suite: MetricSuite { values, queries: n, excluded: excluded.len() }, per_query, excluded }
}
