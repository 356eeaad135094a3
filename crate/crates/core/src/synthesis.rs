//! Synthetic query generation: the 8-shot few-shot baseline and the three
//! regularization operators (document, instruction, query), composable into
//! chains such as `query_reg∘doc_reg(0.6)`.
//!
//! A chain is written outermost-first, like function composition, and applied
//! right to left. Every pair carries a trace with one entry per applied stage.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::{write_atomic, Corpus, Document};
use crate::gateway::{Gateway, GatewayError, GenerationRequest, PromptTemplate};
use crate::keywords::{mask_document, strip_list_marker, KeywordCache, MaskedDocument};
use crate::par::{self, Execution};
use crate::seed::{derive_seed, rng_from_seed};

/// Number of exemplar pairs in a few-shot prompt.
pub const FEW_SHOT: usize = 8;
/// Line prefix that marks the combined query in instruction-regularization answers.
pub const FINAL_QUERY_MARKER: &str = "FINAL QUERY:";

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("invalid regularization spec {spec:?}: {reason}")]
    InvalidSpec { spec: String, reason: String },
    #[error("few-shot bank must hold exactly {FEW_SHOT} pairs, found {0}")]
    BankSize(usize),
    #[error("few-shot exemplar {0:?} also appears in the generation corpus")]
    ExemplarOverlap(String),
    #[error("document {0:?} is one of the few-shot exemplars")]
    TargetIsExemplar(String),
    #[error("document {doc_id}: {source}")]
    Gateway {
        doc_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("document {doc_id}: response has no {FINAL_QUERY_MARKER:?} line; raw: {raw:?}")]
    MissingFinalQuery { doc_id: String, raw: String },
    #[error("document {0}: empty query")]
    EmptyQuery(String),
    #[error("document {0}: no keyword set available for document regularization")]
    MissingKeywords(String),
    #[error("document {0}: a few-shot bank is required for promptagator generation")]
    MissingBank(String),
    #[error("{failed} of {total} documents failed (limit {limit:.1}%); first: {first}")]
    TooManyFailures { failed: usize, total: usize, limit: f64, first: String },
    #[error("io: {0}")]
    Io(String),
}

/// One generation operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stage {
    Promptagator,
    DocReg(f64),
    InstrReg,
    QueryReg,
}

impl Stage {
    pub fn produces_query(self) -> bool {
        !matches!(self, Stage::QueryReg)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Promptagator => f.write_str("promptagator"),
            Stage::DocReg(p) => write!(f, "doc_reg({p})"),
            Stage::InstrReg => f.write_str("instr_reg"),
            Stage::QueryReg => f.write_str("query_reg"),
        }
    }
}

/// A validated chain of stages, stored outermost-first.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationSpec {
    chain: Vec<Stage>,
}

impl RegularizationSpec {
    pub fn new(chain: Vec<Stage>) -> Result<Self, SynthesisError> {
        let spec = Self { chain };
        spec.validate()?;
        Ok(spec)
    }

    fn invalid(&self, reason: &str) -> SynthesisError {
        SynthesisError::InvalidSpec { spec: self.to_string(), reason: reason.into() }
    }

    fn validate(&self) -> Result<(), SynthesisError> {
        let Some(first_applied) = self.chain.last() else {
            return Err(self.invalid("empty chain"));
        };
        if !first_applied.produces_query() {
            return Err(self.invalid("the first applied stage must produce a query"));
        }
        if self.chain.iter().filter(|s| s.produces_query()).count() != 1 {
            return Err(self.invalid("exactly one query-producing stage is allowed"));
        }
        for s in &self.chain {
            if let Stage::DocReg(p) = s {
                if !(0.0..=1.0).contains(p) {
                    return Err(self.invalid("mask ratio must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Parse `query_reg∘doc_reg(0.6)` style specs (`+` also separates
    /// stages). `doc_reg` without a ratio takes `default_p`.
    pub fn parse(s: &str, default_p: Option<f64>) -> Result<Self, SynthesisError> {
        let bad = |reason: String| SynthesisError::InvalidSpec { spec: s.to_string(), reason };
        let mut chain = Vec::new();
        for raw in s.split(['∘', '+']) {
            let name = raw.trim();
            let stage = match name {
                "promptagator" => Stage::Promptagator,
                "instr_reg" => Stage::InstrReg,
                "query_reg" => Stage::QueryReg,
                "doc_reg" => Stage::DocReg(
                    default_p.ok_or_else(|| bad("doc_reg needs a mask ratio".into()))?,
                ),
                _ => {
                    let p = name
                        .strip_prefix("doc_reg(")
                        .and_then(|r| r.strip_suffix(')'))
                        .ok_or_else(|| bad(format!("unknown stage {name:?}")))?;
                    Stage::DocReg(p.trim().parse().map_err(|_| bad(format!("bad ratio {p:?}")))?)
                }
            };
            chain.push(stage);
        }
        Self::new(chain)
    }

    /// Stages outermost-first, as written.
    pub fn chain(&self) -> &[Stage] {
        &self.chain
    }

    /// Stages in the order they run.
    pub fn application_order(&self) -> impl Iterator<Item = Stage> + '_ {
        self.chain.iter().rev().copied()
    }

    pub fn mask_ratio(&self) -> Option<f64> {
        self.chain.iter().find_map(|s| match s {
            Stage::DocReg(p) => Some(*p),
            _ => None,
        })
    }
}

impl fmt::Display for RegularizationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.chain.iter().map(Stage::to_string).collect();
        f.write_str(&parts.join("∘"))
    }
}

impl FromStr for RegularizationSpec {
    type Err = SynthesisError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s, None)
    }
}

impl Serialize for RegularizationSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RegularizationSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub stage: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub query: String,
    pub doc_id: String,
    pub method: RegularizationSpec,
    pub trace: Vec<TraceStep>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    #[serde(default)]
    pub id: Option<String>,
    pub document: String,
    pub query: String,
}

/// The fixed eight exemplar pairs shown in every few-shot prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotBank {
    exemplars: Vec<Exemplar>,
}

const BUILTIN_BANKS: &[(&str, &str)] = &[
    ("default", include_str!("../data/fewshot/default.jsonl")),
    ("doris-mae", include_str!("../data/fewshot/doris-mae.jsonl")),
    ("arguana", include_str!("../data/fewshot/arguana.jsonl")),
    ("wtb", include_str!("../data/fewshot/wtb.jsonl")),
];

impl FewShotBank {
    pub fn new(exemplars: Vec<Exemplar>) -> Result<Self, SynthesisError> {
        if exemplars.len() != FEW_SHOT {
            return Err(SynthesisError::BankSize(exemplars.len()));
        }
        Ok(Self { exemplars })
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, SynthesisError> {
        let ex = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| SynthesisError::Io(format!("few-shot line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<Exemplar>, _>>()?;
        Self::new(ex)
    }

    pub fn load(path: &Path) -> Result<Self, SynthesisError> {
        let text = fs::read_to_string(path)
            .map_err(|e| SynthesisError::Io(format!("{}: {e}", path.display())))?;
        Self::parse_jsonl(&text)
    }

    /// Bundled bank for a dataset, falling back to the generic one.
    pub fn builtin(dataset: &str) -> Self {
        let src = BUILTIN_BANKS
            .iter()
            .find(|(n, _)| *n == dataset)
            .unwrap_or(&BUILTIN_BANKS[0])
            .1;
        Self::parse_jsonl(src).expect("bundled banks are valid")
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    pub fn contains_document(&self, doc: &Document) -> bool {
        self.exemplars
            .iter()
            .any(|e| e.document == doc.text || e.id.as_deref() == Some(doc.id.as_str()))
    }

    /// Fail if any exemplar also occurs in the generation corpus.
    pub fn check_disjoint(&self, corpus: &Corpus) -> Result<(), SynthesisError> {
        for d in corpus.documents() {
            if self.contains_document(d) {
                return Err(SynthesisError::ExemplarOverlap(d.id.clone()));
            }
        }
        Ok(())
    }

    /// Slots `document_1..8`, `query_1..8`.
    pub fn slots(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for (i, e) in self.exemplars.iter().enumerate() {
            out.insert(format!("document_{}", i + 1), e.document.clone());
            out.insert(format!("query_{}", i + 1), e.query.clone());
        }
        out
    }
}

/// Datasets whose query regularization asks for several candidates and keeps one.
pub fn uses_multi_candidate_summaries(dataset: &str) -> bool {
    dataset == "doris-mae"
}

fn call(
    gw: &Gateway,
    doc_id: &str,
    template: &PromptTemplate,
    slots: BTreeMap<String, String>,
    stage: &str,
    seed: u64,
) -> Result<String, SynthesisError> {
    let req = GenerationRequest::new(template, slots).with_seed(seed).with_stage(stage);
    gw.generate(&req)
        .map(|c| c.text.trim().to_string())
        .map_err(|source| SynthesisError::Gateway { doc_id: doc_id.to_string(), source })
}

fn nonempty(doc_id: &str, q: String) -> Result<String, SynthesisError> {
    if q.trim().is_empty() {
        Err(SynthesisError::EmptyQuery(doc_id.to_string()))
    } else {
        Ok(q)
    }
}

fn single_stage_pair(doc_id: &str, stage: Stage, query: String, seed: u64) -> SyntheticPair {
    SyntheticPair {
        trace: vec![TraceStep { stage: stage.to_string(), text: query.clone() }],
        query,
        doc_id: doc_id.to_string(),
        method: RegularizationSpec { chain: vec![stage] },
        seed,
    }
}

/// Render the few-shot template for `doc` without calling a backend.
pub fn promptagator_prompt(
    bank: &FewShotBank,
    doc: &Document,
    gw: &Gateway,
    dataset: &str,
) -> Result<String, SynthesisError> {
    let template = gw.templates().get(dataset, "promptagator").map_err(|source| {
        SynthesisError::Gateway { doc_id: doc.id.clone(), source }
    })?;
    let mut slots = bank.slots();
    slots.insert("document".into(), doc.text.clone());
    template
        .render(&slots)
        .map_err(|source| SynthesisError::Gateway { doc_id: doc.id.clone(), source })
}

/// Few-shot baseline: eight exemplar pairs, then the target document.
pub fn promptagator_generate(
    bank: &FewShotBank,
    doc: &Document,
    gw: &Gateway,
    dataset: &str,
    seed: u64,
) -> Result<SyntheticPair, SynthesisError> {
    if bank.contains_document(doc) {
        return Err(SynthesisError::TargetIsExemplar(doc.id.clone()));
    }
    let template = gw
        .templates()
        .get(dataset, "promptagator")
        .map_err(|source| SynthesisError::Gateway { doc_id: doc.id.clone(), source })?;
    let mut slots = bank.slots();
    slots.insert("document".into(), doc.text.clone());
    let q = nonempty(&doc.id, call(gw, &doc.id, &template, slots, "promptagator", seed)?)?;
    Ok(single_stage_pair(&doc.id, Stage::Promptagator, q, seed))
}

/// Template for a mask ratio: `doc_reg_<percent>` when the dataset ships one,
/// otherwise `doc_reg`.
pub fn doc_reg_template(gw: &Gateway, dataset: &str, p: f64) -> Result<PromptTemplate, GatewayError> {
    let pct = (p * 100.0).round() as i64;
    match gw.templates().get_exact(dataset, &format!("doc_reg_{pct}")) {
        Some(t) => Ok(t),
        None => gw.templates().get(dataset, "doc_reg"),
    }
}

/// Slots for a document-regularization prompt. The example query is only
/// supplied when the template asks for it.
pub fn doc_reg_slots(
    template: &PromptTemplate,
    masked: &MaskedDocument,
    example_format: Option<&str>,
) -> BTreeMap<String, String> {
    let mut slots = BTreeMap::new();
    slots.insert("document".to_string(), masked.masked_text.clone());
    if template.has_slot("example_query") {
        slots.insert("example_query".to_string(), example_format.unwrap_or_default().to_string());
    }
    slots
}

/// Document regularization: generate from the masked text only.
pub fn doc_reg_generate(
    masked: &MaskedDocument,
    example_format: Option<&str>,
    gw: &Gateway,
    dataset: &str,
    seed: u64,
) -> Result<SyntheticPair, SynthesisError> {
    let template = doc_reg_template(gw, dataset, masked.mask_ratio)
        .map_err(|source| SynthesisError::Gateway { doc_id: masked.doc_id.clone(), source })?;
    let slots = doc_reg_slots(&template, masked, example_format);
    let q = nonempty(&masked.doc_id, call(gw, &masked.doc_id, &template, slots, "doc_reg", seed)?)?;
    Ok(single_stage_pair(&masked.doc_id, Stage::DocReg(masked.mask_ratio), q, seed))
}

/// Text after the last `FINAL QUERY:` line (or the lines following it when
/// the marker line itself is empty).
pub fn extract_final_query(raw: &str) -> Option<String> {
    let lines: Vec<&str> = raw.lines().collect();
    let (idx, rest) = lines.iter().enumerate().rev().find_map(|(i, l)| {
        let t = l.trim_start().trim_start_matches(['*', '#', ' ']);
        let upper = t.to_uppercase();
        upper
            .starts_with(FINAL_QUERY_MARKER)
            .then(|| (i, t[FINAL_QUERY_MARKER.len()..].trim_start_matches(['*', ' ']).trim()))
    })?;
    let q = if rest.is_empty() {
        lines[idx + 1..].iter().map(|l| l.trim()).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ")
    } else {
        rest.to_string()
    };
    let q = q.trim().trim_matches('"').trim().to_string();
    (!q.is_empty()).then_some(q)
}

/// Instruction regularization: aspects → paraphrases → combined query, in one call.
pub fn instr_reg_generate(
    doc: &Document,
    gw: &Gateway,
    dataset: &str,
    seed: u64,
) -> Result<SyntheticPair, SynthesisError> {
    let template = gw
        .templates()
        .get(dataset, "instr_reg")
        .map_err(|source| SynthesisError::Gateway { doc_id: doc.id.clone(), source })?;
    let mut slots = BTreeMap::new();
    slots.insert("document".to_string(), doc.text.clone());
    let raw = call(gw, &doc.id, &template, slots, "instr_reg", seed)?;
    let q = extract_final_query(&raw)
        .ok_or_else(|| SynthesisError::MissingFinalQuery { doc_id: doc.id.clone(), raw })?;
    Ok(single_stage_pair(&doc.id, Stage::InstrReg, q, seed))
}

/// Parse candidate summaries: one per non-empty line, list markers stripped.
pub fn parse_candidates(raw: &str) -> Vec<String> {
    raw.lines()
        .map(|l| strip_list_marker(l.trim()).trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

/// Summarize a query. For multi-candidate datasets several summaries are
/// requested and one is chosen uniformly by `seed`.
pub fn summarize_query(
    doc_id: &str,
    query: &str,
    gw: &Gateway,
    dataset: &str,
    seed: u64,
) -> Result<String, SynthesisError> {
    let mut slots = BTreeMap::new();
    slots.insert("query".to_string(), query.to_string());
    let summary = if uses_multi_candidate_summaries(dataset) {
        let template = gw
            .templates()
            .get(dataset, "query_reg_multi")
            .map_err(|source| SynthesisError::Gateway { doc_id: doc_id.to_string(), source })?;
        let cands = parse_candidates(&call(gw, doc_id, &template, slots, "query_reg", seed)?);
        if cands.is_empty() {
            return Err(SynthesisError::EmptyQuery(doc_id.to_string()));
        }
        let pick = rng_from_seed(derive_seed(seed, "candidate")).random_range(0..cands.len());
        cands[pick].clone()
    } else {
        let template = gw
            .templates()
            .get(dataset, "query_reg")
            .map_err(|source| SynthesisError::Gateway { doc_id: doc_id.to_string(), source })?;
        call(gw, doc_id, &template, slots, "query_reg", seed)?
    };
    nonempty(doc_id, summary)
}

/// Query regularization applied on top of an existing pair.
pub fn query_reg(
    pair: &SyntheticPair,
    gw: &Gateway,
    dataset: &str,
    seed: u64,
) -> Result<SyntheticPair, SynthesisError> {
    if !pair.method.chain.iter().any(|s| s.produces_query()) {
        return Err(SynthesisError::InvalidSpec {
            spec: pair.method.to_string(),
            reason: "query_reg needs a query-producing stage first".into(),
        });
    }
    let summary = summarize_query(&pair.doc_id, &pair.query, gw, dataset, seed)?;
    let mut chain = vec![Stage::QueryReg];
    chain.extend_from_slice(&pair.method.chain);
    let mut trace = pair.trace.clone();
    trace.push(TraceStep { stage: Stage::QueryReg.to_string(), text: summary.clone() });
    Ok(SyntheticPair {
        query: summary,
        doc_id: pair.doc_id.clone(),
        method: RegularizationSpec { chain },
        trace,
        seed: pair.seed,
    })
}

/// Inputs shared by every document of a dataset build.
#[derive(Debug, Clone)]
pub struct SynthesisContext<'a> {
    pub dataset: &'a str,
    pub bank: Option<&'a FewShotBank>,
    pub keywords: Option<&'a KeywordCache>,
    /// Example query shown by document-regularization templates that take one.
    pub example_query: Option<&'a str>,
    /// Abort when more than this fraction of documents fail.
    pub max_failure_rate: f64,
    pub exec: Execution,
}

impl<'a> SynthesisContext<'a> {
    pub fn new(dataset: &'a str) -> Self {
        Self {
            dataset,
            bank: None,
            keywords: None,
            example_query: None,
            max_failure_rate: 0.05,
            exec: Execution::default(),
        }
    }

    fn example(&self) -> Option<&str> {
        self.example_query.or_else(|| self.bank.and_then(|b| b.exemplars().first()).map(|e| e.query.as_str()))
    }
}

/// Seed for one document: `derive_seed(run_seed, doc_id)`.
pub fn document_seed(seed: u64, doc_id: &str) -> u64 {
    derive_seed(seed, doc_id)
}

/// Seed handed to stage `index` (in application order) of a document.
pub fn stage_seed(doc_seed: u64, index: usize) -> u64 {
    derive_seed(doc_seed, &format!("stage{index}"))
}

/// Mask seed of a document.
pub fn mask_seed(doc_seed: u64) -> u64 {
    derive_seed(doc_seed, "mask")
}

/// Run every stage of `spec` for one document.
pub fn generate_pair(
    doc: &Document,
    spec: &RegularizationSpec,
    gw: &Gateway,
    ctx: &SynthesisContext<'_>,
    doc_seed: u64,
) -> Result<SyntheticPair, SynthesisError> {
    let mut pair: Option<SyntheticPair> = None;
    for (i, stage) in spec.application_order().enumerate() {
        let s = stage_seed(doc_seed, i);
        let next = match (stage, &pair) {
            (Stage::Promptagator, None) => {
                let bank = ctx.bank.ok_or_else(|| SynthesisError::MissingBank(doc.id.clone()))?;
                promptagator_generate(bank, doc, gw, ctx.dataset, s)?
            }
            (Stage::DocReg(p), None) => {
                let kw = ctx
                    .keywords
                    .and_then(|c| c.get(&doc.id))
                    .ok_or_else(|| SynthesisError::MissingKeywords(doc.id.clone()))?;
                let masked = mask_document(doc, kw, p, mask_seed(doc_seed));
                doc_reg_generate(&masked, ctx.example(), gw, ctx.dataset, s)?
            }
            (Stage::InstrReg, None) => instr_reg_generate(doc, gw, ctx.dataset, s)?,
            (Stage::QueryReg, Some(prev)) => query_reg(prev, gw, ctx.dataset, s)?,
            _ => {
                return Err(SynthesisError::InvalidSpec {
                    spec: spec.to_string(),
                    reason: "stage order".into(),
                })
            }
        };
        pair = Some(next);
    }
    let mut pair = pair.expect("validated spec is nonempty");
    pair.seed = doc_seed;
    Ok(pair)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub doc_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBuild {
    /// One pair per successful document, in corpus order.
    pub pairs: Vec<SyntheticPair>,
    pub failures: Vec<GenerationFailure>,
}

/// Generate one pair per corpus document. Failed documents are skipped and
/// listed; the build aborts when the failure rate exceeds the context limit.
pub fn build_dataset(
    corpus: &Corpus,
    spec: &RegularizationSpec,
    gw: &Gateway,
    ctx: &SynthesisContext<'_>,
    seed: u64,
) -> Result<DatasetBuild, SynthesisError> {
    if let Some(bank) = ctx.bank {
        if spec.chain.contains(&Stage::Promptagator) {
            bank.check_disjoint(corpus)?;
        }
    }
    let results = par::map_bounded(ctx.exec, gw.config().max_concurrency, corpus.documents(), |doc| {
        generate_pair(doc, spec, gw, ctx, document_seed(seed, &doc.id))
    });
    let mut pairs = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (doc, r) in corpus.documents().iter().zip(results) {
        match r {
            Ok(p) => pairs.push(p),
            Err(e) => {
                warn!("skipping document {}: {e}", doc.id);
                failures.push(GenerationFailure { doc_id: doc.id.clone(), error: e.to_string() });
            }
        }
    }
    let total = corpus.len();
    if total > 0 && failures.len() as f64 / total as f64 > ctx.max_failure_rate {
        return Err(SynthesisError::TooManyFailures {
            failed: failures.len(),
            total,
            limit: ctx.max_failure_rate * 100.0,
            first: failures[0].error.clone(),
        });
    }
    Ok(DatasetBuild { pairs, failures })
}

pub fn pairs_to_jsonl(pairs: &[SyntheticPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("pair serializes"));
        out.push('\n');
    }
    out
}

pub fn save_pairs(path: &Path, pairs: &[SyntheticPair]) -> Result<(), SynthesisError> {
    write_atomic(path, pairs_to_jsonl(pairs).as_bytes())
        .map_err(|e| SynthesisError::Io(format!("{}: {e}", path.display())))
}

pub fn load_pairs(path: &Path) -> Result<Vec<SyntheticPair>, SynthesisError> {
    let text = fs::read_to_string(path)
        .map_err(|e| SynthesisError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| SynthesisError::Io(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, TemplateStore};
    use crate::keywords::{find_occurrences, DocumentFrequencies, Extractor, KeywordSet};

    fn mock() -> Gateway {
        Gateway::with_mock(MockBackend::default(), TemplateStore::builtin())
    }

    fn doc() -> Document {
        Document::new(
            "d1",
            "Graph neural networks learn node features. They aggregate messages from neighbours. \
             Attention weights decide which neighbours matter. Results improve on citation graphs.",
        )
    }

    #[test]
    fn spec_parsing_and_validation() {
        let s = RegularizationSpec::parse("query_reg∘doc_reg(0.6)", None).unwrap();
        assert_eq!(s.chain(), &[Stage::QueryReg, Stage::DocReg(0.6)]);
        assert_eq!(s.to_string(), "query_reg∘doc_reg(0.6)");
        assert_eq!(RegularizationSpec::parse("query_reg+doc_reg", Some(0.4)).unwrap().mask_ratio(), Some(0.4));
        assert!(RegularizationSpec::parse("query_reg", None).is_err());
        assert!(RegularizationSpec::parse("doc_reg", None).is_err());
        assert!(RegularizationSpec::parse("instr_reg∘promptagator", None).is_err());
        assert!(RegularizationSpec::parse("doc_reg(0.4)∘query_reg", None).is_err());
        assert!(RegularizationSpec::parse("doc_reg(1.5)", None).is_err());
        assert!(RegularizationSpec::parse("nonsense", None).is_err());
    }

    #[test]
    fn spec_serde_round_trip() {
        let s = RegularizationSpec::parse("query_reg∘instr_reg", None).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, "\"query_reg∘instr_reg\"");
        assert_eq!(serde_json::from_str::<RegularizationSpec>(&j).unwrap(), s);
    }

    #[test]
    fn promptagator_prompt_has_seventeen_segments_in_order() {
        let bank = FewShotBank::builtin("default");
        let d = doc();
        let prompt = promptagator_prompt(&bank, &d, &mock(), "default").unwrap();
        let mut segments = Vec::new();
        for e in bank.exemplars() {
            segments.push(e.document.as_str());
            segments.push(e.query.as_str());
        }
        segments.push(&d.text);
        assert_eq!(segments.len(), 17);
        let mut at = 0;
        for s in segments {
            let pos = prompt[at..].find(s).expect("segment present in order");
            at += pos + s.len();
        }
    }

    #[test]
    fn promptagator_mock_and_exemplar_guard() {
        let bank = FewShotBank::builtin("wtb");
        let gw = mock();
        let p = promptagator_generate(&bank, &doc(), &gw, "wtb", 1).unwrap();
        assert_eq!(p.query, MockBackend::default().doc_to_query(&doc().text));
        assert_eq!(p.trace.len(), 1);
        let ex = Document::new("x", bank.exemplars()[3].document.clone());
        assert!(matches!(
            promptagator_generate(&bank, &ex, &gw, "wtb", 1),
            Err(SynthesisError::TargetIsExemplar(_))
        ));
        assert!(FewShotBank::new(vec![]).is_err());
    }

    fn keyword_set(d: &Document) -> KeywordSet {
        let stats = DocumentFrequencies::from_texts([d.text.as_str()]);
        crate::keywords::extract_keywords_tfidf(d, &stats, 6).unwrap()
    }

    #[test]
    fn doc_reg_with_zero_mask_sees_original_text() {
        let d = doc();
        let m = mask_document(&d, &keyword_set(&d), 0.0, 3);
        let gw = mock();
        let t = doc_reg_template(&gw, "default", 0.0).unwrap();
        let prompt = t.render(&doc_reg_slots(&t, &m, Some("example"))).unwrap();
        assert!(prompt.contains(&d.text));
    }

    #[test]
    fn arguana_doc_reg_has_no_example_slot() {
        let d = doc();
        let m = mask_document(&d, &keyword_set(&d), 0.6, 3);
        let gw = mock();
        for p in [0.4, 0.6, 0.8] {
            let t = doc_reg_template(&gw, "arguana", p).unwrap();
            assert!(!t.has_slot("example_query"));
            let prompt = t.render(&doc_reg_slots(&t, &m, Some("UNIQUE-EXAMPLE-MARKER"))).unwrap();
            assert!(!prompt.contains("UNIQUE-EXAMPLE-MARKER"));
            assert!(prompt.contains(&m.masked_text));
        }
        let t = doc_reg_template(&gw, "doris-mae", 0.8).unwrap();
        assert_eq!(t.id, "doris-mae/doc_reg_80");
        let t = doc_reg_template(&gw, "wtb", 0.4).unwrap();
        assert_eq!(t.id, "wtb/doc_reg_40");
    }

    #[test]
    fn doc_reg_query_hides_masked_keywords() {
        let d = doc();
        let m = mask_document(&d, &keyword_set(&d), 0.6, 9);
        assert!(!m.masked_keywords.is_empty());
        let p = doc_reg_generate(&m, None, &mock(), "default", 0).unwrap();
        for k in &m.masked_keywords {
            assert!(find_occurrences(&p.query, k).is_empty(), "{k} leaked into {}", p.query);
        }
        assert_eq!(p.method.to_string(), "doc_reg(0.6)");
    }

    #[test]
    fn instr_reg_mock_and_parse_errors() {
        let gw = mock();
        let p = instr_reg_generate(&doc(), &gw, "default", 0).unwrap();
        assert_eq!(p.query.matches("aspect:").count(), 4);
        let one = Document::new("o", "A single sentence about graphs.");
        let p = instr_reg_generate(&one, &gw, "default", 0).unwrap();
        assert_eq!(p.query, "aspect: single sentence graphs");
        assert_eq!(extract_final_query("Aspect 1: x\nno marker"), None);
        assert_eq!(extract_final_query("**Final Query:** \"books about whales\""), Some("books about whales".into()));
        assert_eq!(extract_final_query("FINAL QUERY:\n  two\n lines "), Some("two lines".into()));
    }

    #[test]
    fn query_reg_mock_budget_and_chain() {
        let gw = mock();
        let long: String = (0..60).map(|i| format!("word{i} ")).collect();
        let d = Document::new("d", long.clone());
        let base = single_stage_pair("d", Stage::DocReg(0.6), long.trim().to_string(), 1);
        let out = query_reg(&base, &gw, "default", 5).unwrap();
        let n = out.query.split_whitespace().count();
        assert!(n <= 25 && n <= base.query.split_whitespace().count());
        assert_eq!(out.method.to_string(), "query_reg∘doc_reg(0.6)");
        assert_eq!(out.trace.len(), 2);
        let _ = d;
    }

    #[test]
    fn doris_candidate_choice_is_seeded() {
        let gw = mock();
        let long: String = (0..60).map(|i| format!("w{i} ")).collect();
        let base = single_stage_pair("d", Stage::InstrReg, long.trim().to_string(), 1);
        let a = query_reg(&base, &gw, "doris-mae", 77).unwrap();
        let b = query_reg(&base, &gw, "doris-mae", 77).unwrap();
        assert_eq!(a.query, b.query);
        let lens: std::collections::HashSet<usize> = (0..40)
            .map(|s| query_reg(&base, &gw, "doris-mae", s).unwrap().query.split_whitespace().count())
            .collect();
        assert!(lens.len() > 1, "seed should change the chosen candidate");
    }

    fn small_corpus() -> Corpus {
        Corpus::from_documents(
            "c",
            [
                Document::new("a", "Whales sing long songs. Oceans carry sound far. Scientists record whale songs."),
                Document::new("b", "Bees dance to share directions. Flowers provide nectar. Hives hold thousands of bees."),
                Document::new("c", "Volcanoes erupt molten rock. Lava cools into basalt. Ash clouds block sunlight."),
            ],
        )
        .unwrap()
    }

    fn cache_for(c: &Corpus) -> KeywordCache {
        let stats = DocumentFrequencies::from_corpus(c);
        let mut cache = KeywordCache::default();
        for d in c.documents() {
            cache.insert(crate::keywords::extract_keywords_tfidf(d, &stats, 5).unwrap());
        }
        cache
    }

    #[test]
    fn dataset_one_pair_per_doc_and_deterministic() {
        let c = small_corpus();
        let cache = cache_for(&c);
        let bank = FewShotBank::builtin("default");
        let gw = mock();
        let mut ctx = SynthesisContext::new("default");
        ctx.keywords = Some(&cache);
        ctx.bank = Some(&bank);
        let spec = RegularizationSpec::parse("query_reg∘doc_reg(0.6)", None).unwrap();
        let a = build_dataset(&c, &spec, &gw, &ctx, 11).unwrap();
        assert_eq!(a.pairs.iter().map(|p| p.doc_id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert!(a.failures.is_empty());
        ctx.exec = Execution::Sequential;
        let b = build_dataset(&c, &spec, &gw, &ctx, 11).unwrap();
        assert_eq!(pairs_to_jsonl(&a.pairs), pairs_to_jsonl(&b.pairs));
        let p = &a.pairs[0];
        assert_eq!(p.seed, document_seed(11, "a"));
    }

    #[test]
    fn missing_keywords_fail_and_abort() {
        let c = small_corpus();
        let gw = mock();
        let mut partial = KeywordCache::default();
        partial.insert(KeywordSet { doc_id: "a".into(), keywords: vec!["whales".into()], extractor: Extractor::Tfidf });
        let mut ctx = SynthesisContext::new("default");
        ctx.keywords = Some(&partial);
        let spec = RegularizationSpec::parse("doc_reg(0.4)", None).unwrap();
        assert!(matches!(build_dataset(&c, &spec, &gw, &ctx, 0), Err(SynthesisError::TooManyFailures { failed: 2, total: 3, .. })));
        ctx.max_failure_rate = 1.0;
        let b = build_dataset(&c, &spec, &gw, &ctx, 0).unwrap();
        assert_eq!(b.pairs.len(), 1);
        assert_eq!(b.failures.iter().map(|f| f.doc_id.as_str()).collect::<Vec<_>>(), ["b", "c"]);
    }

    #[test]
    fn pairs_file_round_trip() {
        let c = small_corpus();
        let gw = mock();
        let ctx = SynthesisContext::new("default");
        let spec = RegularizationSpec::parse("query_reg∘instr_reg", None).unwrap();
        let built = build_dataset(&c, &spec, &gw, &ctx, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        save_pairs(&path, &built.pairs).unwrap();
        assert_eq!(load_pairs(&path).unwrap(), built.pairs);
        let line = fs::read_to_string(&path).unwrap();
        assert!(line.starts_with("{\"query\":"));
        assert!(line.contains("\"method\":\"query_reg∘instr_reg\""));
    }
}
