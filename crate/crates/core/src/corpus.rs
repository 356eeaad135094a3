//! Document collections, relevance judgments and candidate pools.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::fisher_yates_prefix;
use crate::text::whitespace_token_count;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate document id {id:?} on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("cannot sample {requested} documents from a corpus of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("invalid judgments: {0}")]
    InvalidJudgments(String),
    #[error("invalid candidate pool for query {query_id:?}: {message}")]
    InvalidPool { query_id: String, message: String },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into(), meta: BTreeMap::new() }
    }
}

/// An ordered, id-unique collection of documents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub name: String,
    documents: Vec<Document>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), ..Default::default() }
    }

    /// Build from documents, rejecting duplicate ids and empty fields.
    pub fn from_documents(
        name: impl Into<String>,
        docs: impl IntoIterator<Item = Document>,
    ) -> Result<Self, CorpusError> {
        let mut c = Corpus::new(name);
        for (i, d) in docs.into_iter().enumerate() {
            c.push(d, i + 1)?;
        }
        Ok(c)
    }

    fn push(&mut self, doc: Document, line: usize) -> Result<(), CorpusError> {
        if doc.id.is_empty() {
            return Err(CorpusError::Malformed { line, message: "empty id".into() });
        }
        if doc.text.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line,
                message: format!("document {:?} has empty text", doc.id),
            });
        }
        if self.index.contains_key(&doc.id) {
            return Err(CorpusError::DuplicateId { id: doc.id, line });
        }
        self.index.insert(doc.id.clone(), self.documents.len());
        self.documents.push(doc);
        Ok(())
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.index.get(id).map(|&i| &self.documents[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().map(|d| d.id.as_str())
    }

    /// Canonical JSONL: one compact object per line, `meta` omitted when empty.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.documents {
            out.push_str(&serde_json::to_string(d).expect("document serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        write_atomic(path, self.to_jsonl().as_bytes()).map_err(io_err(path))
    }
}

/// Parse a corpus from JSONL text. Blank lines are skipped.
pub fn parse_corpus(name: &str, text: &str) -> Result<Corpus, CorpusError> {
    let mut c = Corpus::new(name);
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(line)
            .map_err(|e| CorpusError::Malformed { line: line_no, message: e.to_string() })?;
        c.push(doc, line_no)?;
    }
    Ok(c)
}

/// Load a JSONL corpus (`{"id", "text", "meta"?}` per line), preserving file order.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_corpus(&name, &text)
}

/// Keep documents whose whitespace token count lies in `[min_tokens, max_tokens]`.
pub fn filter_by_length(corpus: &Corpus, min_tokens: usize, max_tokens: usize) -> Corpus {
    let kept = corpus
        .documents
        .iter()
        .filter(|d| (min_tokens..=max_tokens).contains(&whitespace_token_count(&d.text)))
        .cloned();
    Corpus::from_documents(corpus.name.clone(), kept).expect("subset of a valid corpus")
}

/// `n` distinct documents chosen by a seeded Fisher–Yates prefix, in draw order.
pub fn sample_documents(corpus: &Corpus, n: usize, seed: u64) -> Result<Corpus, CorpusError> {
    if n > corpus.len() {
        return Err(CorpusError::SampleTooLarge { requested: n, available: corpus.len() });
    }
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    fisher_yates_prefix(&mut idx, n, seed);
    let docs = idx[..n].iter().map(|&i| corpus.documents[i].clone());
    Ok(Corpus::from_documents(corpus.name.clone(), docs).expect("subset of a valid corpus"))
}

/// Per-query relevance gains. Ordered maps keep iteration deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Judgments {
    by_query: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JudgmentLine {
    query_id: String,
    doc_id: String,
    gain: f64,
}

impl Judgments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, gain: f64) -> Result<(), CorpusError> {
        if !gain.is_finite() || gain < 0.0 {
            return Err(CorpusError::InvalidJudgments(format!(
                "gain {gain} for ({query_id}, {doc_id}) must be finite and non-negative"
            )));
        }
        self.by_query
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), gain);
        Ok(())
    }

    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, f64>> {
        self.by_query.get(query_id)
    }

    pub fn gain(&self, query_id: &str, doc_id: &str) -> f64 {
        self.by_query
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.by_query.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.by_query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_query.is_empty()
    }

    /// Check that every judged document is known to `known` and every query has a positive gain.
    pub fn validate(&self, known: impl Fn(&str) -> bool) -> Result<(), CorpusError> {
        for (q, docs) in &self.by_query {
            if let Some(d) = docs.keys().find(|d| !known(d)) {
                return Err(CorpusError::InvalidJudgments(format!(
                    "query {q:?} references unknown document {d:?}"
                )));
            }
            if !docs.values().any(|&g| g > 0.0) {
                return Err(CorpusError::InvalidJudgments(format!(
                    "query {q:?} has no positive judgment"
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.by_query {
            for (d, g) in docs {
                let line = JudgmentLine { query_id: q.clone(), doc_id: d.clone(), gain: *g };
                out.push_str(&serde_json::to_string(&line).expect("serializes"));
                out.push('\n');
            }
        }
        out
    }
}

pub fn load_judgments(path: &Path) -> Result<Judgments, CorpusError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut j = Judgments::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JudgmentLine = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Malformed { line: i + 1, message: e.to_string() })?;
        j.insert(&rec.query_id, &rec.doc_id, rec.gain)
            .map_err(|e| CorpusError::Malformed { line: i + 1, message: e.to_string() })?;
    }
    Ok(j)
}

/// Query id → ordered candidate document ids to rerank.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidatePools {
    pools: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolLine {
    query_id: String,
    candidates: Vec<String>,
}

impl CandidatePools {
    pub fn insert(&mut self, query_id: &str, candidates: Vec<String>) -> Result<(), CorpusError> {
        if candidates.is_empty() {
            return Err(CorpusError::InvalidPool {
                query_id: query_id.into(),
                message: "empty pool".into(),
            });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = candidates.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(CorpusError::InvalidPool {
                query_id: query_id.into(),
                message: format!("duplicate candidate {dup:?}"),
            });
        }
        self.pools.insert(query_id.to_string(), candidates);
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&[String]> {
        self.pools.get(query_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.pools.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }
}

pub fn load_candidate_pools(path: &Path) -> Result<CandidatePools, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut pools = CandidatePools::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoolLine = serde_json::from_str(line)
            .map_err(|e| CorpusError::Malformed { line: i + 1, message: e.to_string() })?;
        pools.insert(&rec.query_id, rec.candidates)?;
    }
    Ok(pools)
}

/// Write via a temporary sibling then rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc_of(id: &str, tokens: usize) -> Document {
        Document::new(id, vec!["w"; tokens].join(" "))
    }

    #[test]
    fn loads_in_file_order() {
        let c = parse_corpus(
            "t",
            "{\"id\":\"b\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\",\"meta\":{\"title\":\"T\"}}\n{\"id\":\"c\",\"text\":\"z\"}\n",
        )
        .unwrap();
        assert_eq!(c.ids().collect::<Vec<_>>(), ["b", "a", "c"]);
        assert_eq!(c.get("a").unwrap().meta["title"], "T");
    }

    #[test]
    fn duplicate_id_names_id_and_line() {
        let text = "{\"id\":\"d1\",\"text\":\"a\"}\n{\"id\":\"d2\",\"text\":\"a\"}\n{\"id\":\"d3\",\"text\":\"a\"}\n{\"id\":\"d4\",\"text\":\"a\"}\n{\"id\":\"d1\",\"text\":\"a\"}\n";
        match parse_corpus("t", text) {
            Err(CorpusError::DuplicateId { id, line }) => {
                assert_eq!(id, "d1");
                assert_eq!(line, 5);
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_carries_number() {
        let err = parse_corpus("t", "{\"id\":\"a\",\"text\":\"x\"}\nnot json\n").unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }));
        let err = parse_corpus("t", "{\"id\":\"a\"}\n").unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 1, .. }));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        let c = load_corpus(&p).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.name, "empty");
    }

    #[test]
    fn filter_examples() {
        let c = Corpus::from_documents("t", [doc_of("a", 5), doc_of("b", 50), doc_of("c", 5000)])
            .unwrap();
        let f = filter_by_length(&c, 10, 1000);
        assert_eq!(f.ids().collect::<Vec<_>>(), ["b"]);
        assert_eq!(filter_by_length(&c, 0, usize::MAX), c);
    }

    #[test]
    fn sampling() {
        let c = Corpus::from_documents("t", (0..10).map(|i| doc_of(&format!("d{i}"), 3))).unwrap();
        let all = sample_documents(&c, 10, 3).unwrap();
        let mut ids: Vec<_> = all.ids().collect();
        ids.sort_unstable();
        let mut want: Vec<_> = c.ids().collect();
        want.sort_unstable();
        assert_eq!(ids, want);
        let a = sample_documents(&c, 4, 99).unwrap();
        let b = sample_documents(&c, 4, 99).unwrap();
        assert_eq!(a.to_jsonl().as_bytes(), b.to_jsonl().as_bytes());
        assert!(matches!(
            sample_documents(&c, 11, 0),
            Err(CorpusError::SampleTooLarge { requested: 11, available: 10 })
        ));
    }

    #[test]
    fn sampling_covers_all_documents_across_seeds() {
        let c = Corpus::from_documents("t", (0..20).map(|i| doc_of(&format!("d{i}"), 3))).unwrap();
        let mut seen = HashSet::new();
        for seed in 0..200 {
            for id in sample_documents(&c, 3, seed).unwrap().ids() {
                seen.insert(id.to_string());
            }
        }
        assert_eq!(seen.len(), 20);
    }

    #[test]
    fn judgments_validation() {
        let mut j = Judgments::new();
        j.insert("q1", "d1", 1.0).unwrap();
        j.insert("q1", "d2", 0.0).unwrap();
        assert!(j.validate(|d| d == "d1" || d == "d2").is_ok());
        assert!(j.validate(|d| d == "d1").is_err());
        j.insert("q2", "d1", 0.0).unwrap();
        assert!(j.validate(|_| true).is_err());
        assert!(j.insert("q3", "d1", -1.0).is_err());
    }

    #[test]
    fn pools_reject_duplicates_and_empties() {
        let mut p = CandidatePools::default();
        assert!(p.insert("q", vec![]).is_err());
        assert!(p.insert("q", vec!["a".into(), "a".into()]).is_err());
        p.insert("q", vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(p.get("q").unwrap().len(), 2);
    }

    fn arb_corpus() -> impl Strategy<Value = Corpus> {
        prop::collection::vec(("[a-z]{1,5}( [a-z]{1,5}){0,30}", any::<bool>()), 0..30).prop_map(
            |docs| {
                Corpus::from_documents(
                    "p",
                    docs.into_iter().enumerate().map(|(i, (t, title))| {
                        let mut d = Document::new(format!("d{i}"), t);
                        if title {
                            d.meta.insert("title".into(), format!("T{i}"));
                        }
                        d
                    }),
                )
                .unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn filter_matches_direct_scan(c in arb_corpus(), lo in 0usize..20, span in 0usize..20) {
            let hi = lo + span;
            let got: Vec<String> = filter_by_length(&c, lo, hi).ids().map(String::from).collect();
            let mut want = Vec::new();
            for d in c.documents() {
                let n = d.text.split(' ').filter(|t| !t.is_empty()).count();
                if n >= lo && n <= hi {
                    want.push(d.id.clone());
                }
            }
            prop_assert_eq!(got, want);
        }

        #[test]
        fn filter_is_idempotent(c in arb_corpus(), lo in 0usize..20, span in 0usize..20) {
            let once = filter_by_length(&c, lo, lo + span);
            prop_assert_eq!(filter_by_length(&once, lo, lo + span), once);
        }

        #[test]
        fn canonical_jsonl_round_trip(c in arb_corpus()) {
            let text = c.to_jsonl();
            let back = parse_corpus("p", &text).unwrap();
            prop_assert_eq!(back.to_jsonl(), text);
        }
    }
}
