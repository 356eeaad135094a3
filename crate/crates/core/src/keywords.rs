//! Keyword extraction and seeded keyword masking.
//!
//! A document's keywords come either from an LLM or from a deterministic
//! tf·idf ranking. [`mask_document`] then hides a seeded fraction of them:
//! the selection is a prefix of one seeded permutation, so the keywords
//! masked at a lower ratio are always a subset of those masked at a higher one.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use log::warn;
use regex::RegexBuilder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_atomic, Corpus, Document};
use crate::gateway::{Gateway, GatewayError, GenerationRequest};
use crate::seed::permutation;
use crate::text::{is_stopword, sentences, word_spans};

/// Placeholder written over every occurrence of a masked keyword.
pub const MASK_TOKEN: &str = "____";

#[derive(Debug, Error)]
pub enum KeywordError {
    #[error("document {0:?} has no content words and cannot be masked")]
    Unmaskable(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("unparseable keyword response for document {doc_id:?} after {attempts} attempts: {raw:?}")]
    Unparseable { doc_id: String, attempts: u32, raw: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("keyword cache {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extractor {
    Llm,
    Tfidf,
}

impl fmt::Display for Extractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Extractor::Llm => "llm",
            Extractor::Tfidf => "tfidf",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub doc_id: String,
    pub keywords: Vec<String>,
    pub extractor: Extractor,
}

/// Document frequencies over a corpus, for smoothed idf.
#[derive(Debug, Clone, Default)]
pub struct DocumentFrequencies {
    n_docs: usize,
    df: HashMap<String, usize>,
}

impl DocumentFrequencies {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut out = Self::default();
        for t in texts {
            out.n_docs += 1;
            let uniq: HashSet<String> = word_spans(t).into_iter().map(|w| w.lower).collect();
            for w in uniq {
                *out.df.entry(w).or_default() += 1;
            }
        }
        out
    }

    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self::from_texts(corpus.documents().iter().map(|d| d.text.as_str()))
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    /// `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, term: &str) -> f64 {
        ((1.0 + self.n_docs as f64) / (1.0 + self.df(term) as f64)).ln() + 1.0
    }
}

/// A scored content word of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct TermScore {
    pub term: String,
    pub score: f64,
    /// Token position of the first occurrence.
    pub first: usize,
}

/// tf·idf score of every distinct non-stopword term, in first-occurrence order.
/// Without a frequency table idf is 1 and the score is the raw term count.
pub fn tfidf_scores(text: &str, stats: Option<&DocumentFrequencies>) -> Vec<TermScore> {
    let mut order: Vec<TermScore> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    for (i, w) in word_spans(text).into_iter().enumerate() {
        if is_stopword(&w.lower) {
            continue;
        }
        match pos.get(&w.lower) {
            Some(&slot) => order[slot].score += 1.0,
            None => {
                pos.insert(w.lower.clone(), order.len());
                order.push(TermScore { term: w.lower, score: 1.0, first: i });
            }
        }
    }
    if let Some(stats) = stats {
        for t in &mut order {
            t.score *= stats.idf(&t.term);
        }
    }
    order
}

/// Top-k terms by score, ties broken by earlier first occurrence.
pub fn top_k_terms(text: &str, stats: Option<&DocumentFrequencies>, k: usize) -> Vec<String> {
    let mut scored = tfidf_scores(text, stats);
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.first.cmp(&b.first)));
    scored.into_iter().take(k).map(|t| t.term).collect()
}

pub fn extract_keywords_tfidf(
    doc: &Document,
    stats: &DocumentFrequencies,
    k: usize,
) -> Result<KeywordSet, KeywordError> {
    if k == 0 {
        return Err(KeywordError::ZeroK);
    }
    let keywords = top_k_terms(&doc.text, Some(stats), k);
    if keywords.is_empty() {
        return Err(KeywordError::Unmaskable(doc.id.clone()));
    }
    Ok(KeywordSet { doc_id: doc.id.clone(), keywords, extractor: Extractor::Tfidf })
}

/// Indices of the `count` highest-scoring sentences (sum of member term
/// scores), returned in document order. Ties prefer the earlier sentence.
pub fn top_sentences<'a>(
    text: &'a str,
    stats: Option<&DocumentFrequencies>,
    count: usize,
) -> Vec<&'a str> {
    let scores: HashMap<String, f64> =
        tfidf_scores(text, stats).into_iter().map(|t| (t.term, t.score)).collect();
    let sents = sentences(text);
    let mut ranked: Vec<(usize, f64)> = sents
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let total: f64 = word_spans(s)
                .iter()
                .filter_map(|w| scores.get(&w.lower))
                .sum();
            (i, total)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep: Vec<usize> = ranked.into_iter().take(count).map(|(i, _)| i).collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| sents[i]).collect()
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Byte ranges of case-insensitive occurrences of `keyword` in `text` that sit
/// on word boundaries (no alphanumeric character directly before or after).
pub fn find_occurrences(text: &str, keyword: &str) -> Vec<Range<usize>> {
    let keyword = keyword.trim();
    if keyword.is_empty() {
        return Vec::new();
    }
    let re = RegexBuilder::new(&regex::escape(keyword))
        .case_insensitive(true)
        .build()
        .expect("escaped literal is a valid pattern");
    let mut out = Vec::new();
    let mut at = 0;
    while at <= text.len() {
        let Some(m) = re.find_at(text, at) else { break };
        let before_ok = text[..m.start()].chars().next_back().is_none_or(|c| !is_word_char(c));
        let after_ok = text[m.end()..].chars().next().is_none_or(|c| !is_word_char(c));
        if before_ok && after_ok && !m.is_empty() {
            out.push(m.range());
            at = m.end();
        } else {
            // retry one character later so a rejected match cannot shadow a valid one
            at = m.start() + text[m.start()..].chars().next().map_or(1, char::len_utf8);
        }
    }
    out
}

/// Round-half-up of `p * k`, with a guard against representation error.
pub fn masked_count(p: f64, k: usize) -> usize {
    ((p * k as f64) + 0.5 + 1e-9).floor().clamp(0.0, k as f64) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedDocument {
    pub doc_id: String,
    pub original_text: String,
    pub keywords: KeywordSet,
    pub mask_ratio: f64,
    /// Masked keywords, in keyword-list order.
    pub masked_keywords: Vec<String>,
    pub masked_text: String,
    pub seed: u64,
}

/// Replace every word-boundary occurrence of each keyword with [`MASK_TOKEN`].
/// Overlapping occurrences collapse into one placeholder.
pub fn mask_text(text: &str, keywords: &[String]) -> String {
    let mut ranges: Vec<Range<usize>> =
        keywords.iter().flat_map(|k| find_occurrences(text, k)).collect();
    if ranges.is_empty() {
        return text.to_string();
    }
    ranges.sort_by_key(|r| (r.start, std::cmp::Reverse(r.end)));
    let mut merged: Vec<Range<usize>> = Vec::new();
    for r in ranges {
        match merged.last_mut() {
            Some(last) if r.start < last.end => last.end = last.end.max(r.end),
            _ => merged.push(r),
        }
    }
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for r in merged {
        out.push_str(&text[cursor..r.start]);
        out.push_str(MASK_TOKEN);
        cursor = r.end;
    }
    out.push_str(&text[cursor..]);
    out
}

/// Indices (into the keyword list) selected at ratio `p` for `seed`, ascending.
pub fn select_masked(k: usize, p: f64, seed: u64) -> Vec<usize> {
    let m = masked_count(p, k);
    let mut sel = permutation(k, seed);
    sel.truncate(m);
    sel.sort_unstable();
    sel
}

pub fn mask_document(doc: &Document, keywords: &KeywordSet, p: f64, seed: u64) -> MaskedDocument {
    assert!((0.0..=1.0).contains(&p), "mask ratio must lie in [0, 1], got {p}");
    let masked_keywords: Vec<String> = select_masked(keywords.keywords.len(), p, seed)
        .into_iter()
        .map(|i| keywords.keywords[i].clone())
        .collect();
    let masked_text = mask_text(&doc.text, &masked_keywords);
    MaskedDocument {
        doc_id: doc.id.clone(),
        original_text: doc.text.clone(),
        keywords: keywords.clone(),
        mask_ratio: p,
        masked_keywords,
        masked_text,
        seed,
    }
}

/// Parse a keyword list from a model response: a JSON array of strings, or
/// one keyword per line (bullets and numbering stripped), or a single
/// comma-separated line.
pub fn parse_keyword_response(raw: &str) -> Vec<String> {
    let body = raw.trim().trim_start_matches("```json").trim_start_matches("```").trim_end_matches("```").trim();
    let items: Vec<String> = if body.starts_with('[') {
        serde_json::from_str::<Vec<String>>(body).unwrap_or_default()
    } else {
        let lines: Vec<&str> = body.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let lines: Vec<String> = lines.iter().map(|l| strip_list_marker(l).to_string()).collect();
        if lines.len() == 1 && lines[0].contains(',') {
            lines[0].split(',').map(|s| s.to_string()).collect()
        } else {
            lines
        }
    };
    let mut seen = HashSet::new();
    items
        .into_iter()
        .map(|s| s.trim().trim_matches(|c| c == '"' || c == '\'').trim().to_string())
        .filter(|s| !s.is_empty() && seen.insert(s.to_lowercase()))
        .collect()
}

pub(crate) fn strip_list_marker(line: &str) -> &str {
    let l = line.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = l.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &l[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim_start();
        }
    }
    l
}

/// Keep keywords that occur verbatim (case-insensitive, word boundary) in
/// `text`, deduplicated case-insensitively; log the rest.
pub fn retain_verbatim(doc_id: &str, text: &str, keywords: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    keywords
        .into_iter()
        .filter(|k| {
            let found = !find_occurrences(text, k).is_empty();
            if !found {
                warn!("document {doc_id}: dropping keyword {k:?} not found in text");
            }
            found && seen.insert(k.to_lowercase())
        })
        .collect()
}

/// Ask the configured backend for keywords, retrying unparseable answers.
pub fn extract_keywords_llm(
    doc: &Document,
    gateway: &Gateway,
    dataset: &str,
    k: usize,
) -> Result<KeywordSet, KeywordError> {
    let template = gateway.templates().get(dataset, "keywords")?;
    let mut slots = BTreeMap::new();
    slots.insert("document".to_string(), doc.text.clone());
    slots.insert("k".to_string(), k.to_string());
    let attempts = gateway.config().max_retries.max(1);
    let mut last_raw = String::new();
    for attempt in 0..attempts {
        let req = GenerationRequest::new(&template, slots.clone())
            .with_seed(u64::from(attempt))
            .with_stage("keywords");
        let out = gateway.generate(&req)?;
        let kept = retain_verbatim(&doc.id, &doc.text, parse_keyword_response(&out.text));
        if !kept.is_empty() {
            return Ok(KeywordSet { doc_id: doc.id.clone(), keywords: kept, extractor: Extractor::Llm });
        }
        last_raw = out.text;
    }
    Err(KeywordError::Unparseable { doc_id: doc.id.clone(), attempts, raw: last_raw })
}

/// JSONL keyword cache so extraction runs once per document.
#[derive(Debug, Clone, Default)]
pub struct KeywordCache {
    entries: BTreeMap<String, KeywordSet>,
}

impl KeywordCache {
    pub fn insert(&mut self, set: KeywordSet) {
        self.entries.insert(set.doc_id.clone(), set);
    }

    pub fn get(&self, doc_id: &str) -> Option<&KeywordSet> {
        self.entries.get(doc_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self, KeywordError> {
        let err = |message: String| KeywordError::Cache { path: path.display().to_string(), message };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut cache = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let set: KeywordSet =
                serde_json::from_str(line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            cache.insert(set);
        }
        Ok(cache)
    }

    /// Entries in doc-id order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for set in self.entries.values() {
            out.push_str(&serde_json::to_string(set).expect("serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), KeywordError> {
        write_atomic(path, self.to_jsonl().as_bytes())
            .map_err(|e| KeywordError::Cache { path: path.display().to_string(), message: e.to_string() })
    }
}
