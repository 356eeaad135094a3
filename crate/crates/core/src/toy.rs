//! Seeded synthetic corpus with held-out queries and judgments, used for
//! offline end-to-end runs.
//!
//! Every document mixes stopwords, a shared pool of generic words, words from
//! its topic, and a handful of signature words found in no other document. A
//! held-out query names two of its document's signature words amid generic
//! and topic words, so raw term overlap is a weak signal until an encoder
//! learns which words discriminate.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{io_err, write_atomic, Corpus, CorpusError, Document, Judgments};
use crate::seed::{derive_seed, rng_from_seed};
use crate::text::{is_stopword, stopwords};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub documents: usize,
    pub topics: usize,
    pub signature_words: usize,
    pub generic_words: usize,
    pub topic_words: usize,
    /// Share of filler tokens drawn from stopwords; the rest is split between
    /// topic words (`topic_share`) and generic words.
    pub stopword_share: f64,
    pub topic_share: f64,
    /// Held-out queries, one per document from the start of the corpus.
    pub queries: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            documents: 200,
            topics: 10,
            signature_words: 6,
            generic_words: 40,
            topic_words: 25,
            stopword_share: 0.5,
            topic_share: 0.2,
            queries: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub corpus: Corpus,
    /// `(query id, text)`.
    pub queries: Vec<(String, String)>,
    pub judgments: Judgments,
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

fn pseudo_words(rng: &mut ChaCha8Rng, n: usize, seen: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=4);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(VOWELS.choose(rng).unwrap());
        }
        if !is_stopword(&w) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn sentence(words: Vec<&str>) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(..1) {
        s.replace_range(..1, &first.to_uppercase());
    }
    s.push('.');
    s
}

/// Generate the corpus, queries and judgments for `cfg`.
pub fn generate_toy(cfg: &ToyConfig) -> ToyDataset {
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "toy-corpus"));
    let mut seen = HashSet::new();
    let mut stop: Vec<&str> = stopwords().iter().map(String::as_str).filter(|w| w.len() > 1).collect();
    stop.sort_unstable();
    let stop = &stop[..stop.len().min(40)];
    let generic = pseudo_words(&mut rng, cfg.generic_words, &mut seen);
    let topics: Vec<Vec<String>> =
        (0..cfg.topics.max(1)).map(|_| pseudo_words(&mut rng, cfg.topic_words, &mut seen)).collect();

    let mut docs = Vec::with_capacity(cfg.documents);
    let mut signatures = Vec::with_capacity(cfg.documents);
    for i in 0..cfg.documents {
        let topic = &topics[i % topics.len()];
        let sig = pseudo_words(&mut rng, cfg.signature_words, &mut seen);
        let n_sent = rng.random_range(6..=9);
        // Each signature word lands in one or two sentences.
        let mut placements: Vec<Vec<&str>> = vec![Vec::new(); n_sent];
        for w in &sig {
            for _ in 0..rng.random_range(1..=2) {
                placements[rng.random_range(0..n_sent)].push(w);
            }
        }
        let mut sents = Vec::with_capacity(n_sent);
        for extra in placements {
            let len = rng.random_range(10..=16);
            let mut words: Vec<&str> = (0..len)
                .map(|_| {
                    let u: f64 = rng.random();
                    if u < cfg.stopword_share {
                        *stop.choose(&mut rng).unwrap()
                    } else if u < cfg.stopword_share + cfg.topic_share {
                        topic.choose(&mut rng).unwrap().as_str()
                    } else {
                        generic.choose(&mut rng).unwrap().as_str()
                    }
                })
                .collect();
            words.extend(extra);
            words.shuffle(&mut rng);
            sents.push(sentence(words));
        }
        docs.push(Document::new(format!("d{i:04}"), sents.join(" ")));
        signatures.push(sig);
    }

    let mut qrng = rng_from_seed(derive_seed(cfg.seed, "toy-queries"));
    let mut queries = Vec::new();
    let mut judgments = Judgments::new();
    for (i, sig) in signatures.iter().enumerate().take(cfg.queries) {
        let topic = &topics[i % topics.len()];
        let mut words: Vec<&str> = sig.choose_multiple(&mut qrng, 2).map(String::as_str).collect();
        words.extend(stop.choose_multiple(&mut qrng, 3));
        words.extend(generic.choose_multiple(&mut qrng, 3).map(String::as_str));
        words.extend(topic.choose_multiple(&mut qrng, 2).map(String::as_str));
        words.shuffle(&mut qrng);
        let qid = format!("q{i:04}");
        judgments.insert(&qid, &docs[i].id, 1.0).expect("valid gain");
        queries.push((qid, words.join(" ")));
    }
    let corpus = Corpus::from_documents("toy", docs).expect("unique ids");
    ToyDataset { corpus, queries, judgments }
}

impl ToyDataset {
    pub fn queries_to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, text) in &self.queries {
            out.push_str(&serde_json::json!({ "id": id, "text": text }).to_string());
            out.push('\n');
        }
        out
    }

    /// Write `corpus.jsonl`, `queries.jsonl` and `qrels.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.corpus.save(&dir.join("corpus.jsonl"))?;
        let q = dir.join("queries.jsonl");
        write_atomic(&q, self.queries_to_jsonl().as_bytes()).map_err(io_err(&q))?;
        let j = dir.join("qrels.jsonl");
        write_atomic(&j, self.judgments.to_jsonl().as_bytes()).map_err(io_err(&j))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let cfg = ToyConfig { documents: 30, queries: 10, ..ToyConfig::default() };
        let a = generate_toy(&cfg);
        assert_eq!(a, generate_toy(&cfg));
        assert_eq!(a.corpus.len(), 30);
        assert_eq!(a.queries.len(), 10);
        assert_eq!(a.judgments.len(), 10);
        assert_ne!(a, generate_toy(&ToyConfig { seed: 1, ..cfg.clone() }));
        for (qid, q) in &a.queries {
            let rel = a.judgments.for_query(qid).unwrap().keys().next().unwrap();
            let doc = a.corpus.get(rel).unwrap();
            let shared = q.split(' ').filter(|w| doc.text.to_lowercase().contains(w)).count();
            assert!(shared >= 2);
        }
    }

    #[test]
    fn save_writes_three_files() {
        let d = generate_toy(&ToyConfig { documents: 5, queries: 5, ..ToyConfig::default() });
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = crate::corpus::load_corpus(&dir.path().join("corpus.jsonl")).unwrap();
        assert_eq!(back.documents(), d.corpus.documents());
        assert!(crate::corpus::load_judgments(&dir.path().join("qrels.jsonl")).is_ok());
    }
}
