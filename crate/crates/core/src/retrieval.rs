//! Exact brute-force scoring and ranking over embedding stores.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_atomic, CandidatePools};
use crate::encoder::EmbeddingStore;
use crate::par::{self, Execution};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("no embedding for document {0:?}")]
    MissingDocument(String),
    #[error("no embedding for query {0:?}")]
    MissingQuery(String),
    #[error("k = {k} exceeds the {size} stored documents")]
    KTooLarge { k: usize, size: usize },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    NegativeL2,
}

/// Cosine (zero vectors score 0) or negative Euclidean distance.
pub fn similarity(u: &[f32], v: &[f32], kind: Similarity) -> Result<f64, RetrievalError> {
    if u.len() != v.len() {
        return Err(RetrievalError::Dimension(u.len(), v.len()));
    }
    Ok(score(u, v, kind))
}

fn score(u: &[f32], v: &[f32], kind: Similarity) -> f64 {
    match kind {
        Similarity::Cosine => {
            let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
            for (&a, &b) in u.iter().zip(v) {
                let (a, b) = (f64::from(a), f64::from(b));
                uv += a * b;
                uu += a * a;
                vv += b * b;
            }
            if uu == 0.0 || vv == 0.0 {
                0.0
            } else {
                uv / (uu.sqrt() * vv.sqrt())
            }
        }
        Similarity::NegativeL2 => {
            -u.iter().zip(v).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum::<f64>().sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    pub ranking: Vec<ScoredDoc>,
}

impl Ranking {
    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.ranking.iter().map(|s| s.doc_id.as_str())
    }
}

/// Descending score, then ascending doc id.
fn rank_order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn top_k(mut scored: Vec<(f64, &str)>, k: usize) -> Vec<ScoredDoc> {
    if k < scored.len() && k > 0 {
        scored.select_nth_unstable_by(k - 1, rank_order);
    }
    scored.truncate(k);
    scored.sort_unstable_by(rank_order);
    scored.into_iter().map(|(score, id)| ScoredDoc { doc_id: id.to_string(), score }).collect()
}

/// Exact top-`k` of the whole store.
pub fn rank_corpus(
    query_id: &str,
    qv: &[f32],
    store: &EmbeddingStore,
    k: usize,
    kind: Similarity,
) -> Result<Ranking, RetrievalError> {
    if k > store.len() {
        return Err(RetrievalError::KTooLarge { k, size: store.len() });
    }
    if qv.len() != store.dim() {
        return Err(RetrievalError::Dimension(qv.len(), store.dim()));
    }
    let scored = store.iter().map(|(id, v)| (score(qv, v, kind), id)).collect();
    Ok(Ranking { query_id: query_id.to_string(), ranking: top_k(scored, k) })
}

/// Rank every document of one candidate pool.
pub fn rank_pool(
    query_id: &str,
    qv: &[f32],
    pool: &[String],
    store: &EmbeddingStore,
    kind: Similarity,
) -> Result<Ranking, RetrievalError> {
    let mut scored = Vec::with_capacity(pool.len());
    for id in pool {
        let v = store.get(id).ok_or_else(|| RetrievalError::MissingDocument(id.clone()))?;
        if v.len() != qv.len() {
            return Err(RetrievalError::Dimension(qv.len(), v.len()));
        }
        scored.push((score(qv, v, kind), id.as_str()));
    }
    let n = scored.len();
    Ok(Ranking { query_id: query_id.to_string(), ranking: top_k(scored, n) })
}

/// Rank the corpus for every query, in query-store order.
pub fn rank_all(
    queries: &EmbeddingStore,
    docs: &EmbeddingStore,
    k: usize,
    kind: Similarity,
    exec: Execution,
) -> Result<Vec<Ranking>, RetrievalError> {
    let k = k.min(docs.len());
    par::try_map(exec, queries.ids(), |qid| rank_corpus(qid, queries.get(qid).expect("own id"), docs, k, kind))
}

/// Rank each query's candidate pool, in pool-file order.
pub fn rank_pools(
    queries: &EmbeddingStore,
    pools: &CandidatePools,
    docs: &EmbeddingStore,
    kind: Similarity,
    exec: Execution,
) -> Result<Vec<Ranking>, RetrievalError> {
    let items: Vec<(&str, &[String])> = pools.iter().collect();
    par::try_map(exec, &items, |(qid, pool)| {
        let qv = queries.get(qid).ok_or_else(|| RetrievalError::MissingQuery(qid.to_string()))?;
        rank_pool(qid, qv, pool, docs, kind)
    })
}

pub fn rankings_to_jsonl(rankings: &[Ranking]) -> String {
    let mut out = String::new();
    for r in rankings {
        out.push_str(&serde_json::to_string(r).expect("ranking serializes"));
        out.push('\n');
    }
    out
}

pub fn save_rankings(path: &Path, rankings: &[Ranking]) -> Result<(), RetrievalError> {
    write_atomic(path, rankings_to_jsonl(rankings).as_bytes()).map_err(|e| RetrievalError::Io(e.to_string()))
}

pub fn load_rankings(path: &Path) -> Result<Vec<Ranking>, RetrievalError> {
    let text = fs::read_to_string(path).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RetrievalError::Io(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
