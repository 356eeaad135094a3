use std::collections::BTreeMap;
use std::sync::Arc;

use super::TemplateKind;
use crate::keywords::{top_k_terms, top_sentences, DocumentFrequencies};
use crate::text::{content_words, sentences, whitespace_tokens};

/// Token budget of a mock query summary.
pub const MOCK_SUMMARY_TOKENS: usize = 25;
/// Candidate summaries produced for multi-candidate query regularization.
pub const MOCK_SUMMARY_CANDIDATES: usize = 4;
const ASPECT_WORDS: usize = 8;

/// Deterministic offline backend.
///
/// * keyword extraction: top-k tf·idf terms, one per line
/// * few-shot and document-regularization generation: the two highest
///   tf·idf-scoring sentences of the (possibly masked) document, in order
/// * instruction regularization: one `aspect:` clause per sentence, combined
///   after a `FINAL QUERY:` line
/// * query regularization: first sentence of the query cut to 25 tokens
#[derive(Debug, Clone)]
pub struct MockBackend {
    stats: Option<Arc<DocumentFrequencies>>,
    k: usize,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(10)
    }
}

impl MockBackend {
    pub fn new(keyword_count: usize) -> Self {
        Self { stats: None, k: keyword_count.max(1) }
    }

    /// Score terms with corpus idf instead of raw counts.
    pub fn with_stats(mut self, stats: Arc<DocumentFrequencies>) -> Self {
        self.stats = Some(stats);
        self
    }

    pub fn keyword_count(&self) -> usize {
        self.k
    }

    fn stats(&self) -> Option<&DocumentFrequencies> {
        self.stats.as_deref()
    }

    pub fn respond(&self, kind: TemplateKind, slots: &BTreeMap<String, String>) -> String {
        let get = |k: &str| slots.get(k).map(String::as_str).unwrap_or("");
        match kind {
            TemplateKind::Keywords => self.keywords(get("document")).join("\n"),
            TemplateKind::Promptagator | TemplateKind::DocReg => self.doc_to_query(get("document")),
            TemplateKind::InstrReg => self.aspect_response(get("document")),
            TemplateKind::QueryReg => summarize(get("query"), MOCK_SUMMARY_TOKENS),
            TemplateKind::QueryRegMulti => summary_candidates(get("query"))
                .iter()
                .enumerate()
                .map(|(i, c)| format!("{}. {c}", i + 1))
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }

    pub fn keywords(&self, document: &str) -> Vec<String> {
        top_k_terms(document, self.stats(), self.k)
    }

    pub fn doc_to_query(&self, document: &str) -> String {
        top_sentences(document, self.stats(), 2).join(" ")
    }

    /// The combined query the instruction-regularization mock emits.
    pub fn aspect_query(&self, document: &str) -> String {
        aspect_clauses(document).join(" ")
    }

    fn aspect_response(&self, document: &str) -> String {
        let mut out = String::new();
        let clauses = aspect_clauses(document);
        for (i, (s, c)) in sentences(document).iter().zip(&clauses).enumerate() {
            out.push_str(&format!("Aspect {}: {s}\nParaphrase {}: {c}\n", i + 1, i + 1));
        }
        out.push_str("FINAL QUERY: ");
        out.push_str(&clauses.join(" "));
        out
    }
}

fn aspect_clauses(document: &str) -> Vec<String> {
    sentences(document)
        .into_iter()
        .map(|s| {
            let words = content_words(s);
            let body = if words.is_empty() {
                whitespace_tokens(s).into_iter().take(ASPECT_WORDS).collect::<Vec<_>>().join(" ")
            } else {
                words.into_iter().take(ASPECT_WORDS).collect::<Vec<_>>().join(" ")
            };
            format!("aspect: {body}")
        })
        .collect()
}

/// First sentence of `query`, truncated to `max_tokens` whitespace tokens.
pub fn summarize(query: &str, max_tokens: usize) -> String {
    let first = sentences(query).into_iter().next().unwrap_or("");
    whitespace_tokens(first).into_iter().take(max_tokens).collect::<Vec<_>>().join(" ")
}

/// Candidates cut to 25, 20, 15 and 10 tokens (at least one token each).
pub fn summary_candidates(query: &str) -> Vec<String> {
    (0..MOCK_SUMMARY_CANDIDATES)
        .map(|i| summarize(query, (MOCK_SUMMARY_TOKENS - 5 * i).max(1)))
        .collect()
}
