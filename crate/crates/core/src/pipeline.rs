//! Experiment orchestration: run configuration, staged execution with
//! digest-checked reuse, the run manifest and report emission.
//!
//! Artifacts under the output directory:
//!
//! ```text
//! data/{corpus,queries,qrels}.jsonl       toy inputs, when configured
//! keywords.jsonl                          keyword cache
//! datasets/<method>.jsonl                 synthetic pairs (+ .failures.jsonl)
//! checkpoints/<method>/seed_<s>.bin       encoder weights (+ .bin.json sidecar)
//! runs/<method>/seed_<s>.jsonl            rankings
//! metrics/<method>/seed_<s>.json          metric suite
//! metrics.csv, report.md, report.csv
//! manifest.json
//! ```
//!
//! Method directories use the method name with `∘` spelled `+`.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{load_candidate_pools, load_corpus, load_judgments, write_atomic, CandidatePools, Corpus, Judgments};
use crate::encoder::{init_encoder, EncoderParams, DEFAULT_HASH_DIM, DEFAULT_OUTPUT_DIM, MAX_TOKENS};
use crate::gateway::{BackendConfig, BackendKind, Gateway, MockBackend, TemplateStore, TokenUsage};
use crate::keywords::{extract_keywords_llm, extract_keywords_tfidf, DocumentFrequencies, Extractor, KeywordCache};
use crate::metrics::{csv_header, csv_row, evaluate, Metric, MetricSuite};
use crate::par::{self, Execution};
use crate::retrieval::{rank_all, rank_pools, save_rankings, Similarity};
use crate::seed::{derive_seed, derive_seed_indexed};
use crate::stats::{compare_to_baseline, SignificanceReport, TestMode, TrialMatrix};
use crate::synthesis::{build_dataset, load_pairs, save_pairs, FewShotBank, RegularizationSpec, Stage, SynthesisContext};
use crate::toy::{generate_toy, ToyConfig};
use crate::trainer::{save_checkpoint, train, CheckpointMeta, PairSource, TrainConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// JSON schema every run configuration is checked against before any work.
pub const RUN_CONFIG_SCHEMA: &str = include_str!("../schema/run_config.schema.json");

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config does not match the schema:\n  {}", .0.join("\n  "))]
    Schema(Vec<String>),
    #[error("stage {stage} failed: {cause}")]
    Stage { stage: String, cause: String },
    #[error("io: {0}")]
    Io(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io(format!("{}: {e}", path.display()))
}

fn default_dataset() -> String {
    "default".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Prompt and few-shot family (`default`, `wtb`, `arguana`, `doris-mae`).
    #[serde(default = "default_dataset")]
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qrels: Option<PathBuf>,
    /// Per-query candidate pools; when present, pools are reranked instead
    /// of the whole corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pools: Option<PathBuf>,
    /// Documents synthetic queries are generated from. Defaults to `corpus`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fewshot: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    /// Generate a seeded toy corpus instead of reading files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyConfig>,
}

impl DataConfig {
    pub fn toy(cfg: ToyConfig) -> Self {
        Self {
            dataset: default_dataset(),
            corpus: None,
            queries: None,
            qrels: None,
            pools: None,
            generation_corpus: None,
            fewshot: None,
            templates: None,
            toy: Some(cfg),
        }
    }
}

fn default_k() -> usize {
    10
}
fn default_extractor() -> Extractor {
    Extractor::Llm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_extractor")]
    pub extractor: Extractor,
}

impl Default for KeywordConfig {
    fn default() -> Self {
        Self { k: default_k(), extractor: default_extractor() }
    }
}

fn default_hash_dim() -> usize {
    DEFAULT_HASH_DIM
}
fn default_output_dim() -> usize {
    DEFAULT_OUTPUT_DIM
}
fn default_truncation() -> usize {
    MAX_TOKENS
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "default_hash_dim")]
    pub hash_dim: usize,
    #[serde(default = "default_output_dim")]
    pub output_dim: usize,
    #[serde(default = "yes")]
    pub normalize_output: bool,
    /// Tokens kept per text.
    #[serde(default = "default_truncation")]
    pub truncation: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hash_dim: DEFAULT_HASH_DIM,
            output_dim: DEFAULT_OUTPUT_DIM,
            normalize_output: true,
            truncation: MAX_TOKENS,
        }
    }
}

impl EncoderConfig {
    /// Freshly initialized encoder for a derived seed.
    pub fn init(&self, seed: u64) -> Result<EncoderParams, String> {
        let mut p = init_encoder(self.hash_dim, self.output_dim, seed).map_err(|e| e.to_string())?;
        p.normalize_output = self.normalize_output;
        p.max_tokens = self.truncation;
        Ok(p)
    }
}

fn default_name() -> String {
    "run".into()
}
fn default_mask_p() -> f64 {
    0.6
}
fn default_top_k() -> usize {
    100
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_comparisons() -> usize {
    8
}
fn default_alpha() -> f64 {
    0.05
}
fn default_failure_rate() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub data: DataConfig,
    /// `pretrained`, `dropout`, or a regularization chain such as
    /// `query_reg∘doc_reg(0.6)`.
    pub methods: Vec<String>,
    /// Method every other method is tested against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    /// Mask ratio for a bare `doc_reg`.
    #[serde(default = "default_mask_p")]
    pub mask_p: f64,
    #[serde(default)]
    pub keywords: KeywordConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub similarity: Similarity,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Run seed every stage seed is derived from.
    #[serde(default)]
    pub seed: u64,
    /// Trial indices; each trains and evaluates every method once.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Bonferroni factor.
    #[serde(default = "default_comparisons")]
    pub comparisons: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub test: TestMode,
    #[serde(default = "default_failure_rate")]
    pub max_failure_rate: f64,
    /// Parallelism inside a stage.
    #[serde(default)]
    pub execution: Execution,
    /// Train the seeds of one method concurrently.
    #[serde(default)]
    pub parallel_seeds: bool,
    pub output_dir: PathBuf,
}

/// What gets trained and evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    /// The randomly initialized encoder, untouched.
    Pretrained,
    /// Self-supervised: two feature-dropout views of each document.
    Dropout,
    Synthetic(RegularizationSpec),
}

impl Method {
    pub fn parse(s: &str, mask_p: f64) -> Result<Self, PipelineError> {
        match s.trim() {
            "pretrained" => Ok(Method::Pretrained),
            "dropout" => Ok(Method::Dropout),
            other => RegularizationSpec::parse(other, Some(mask_p))
                .map(Method::Synthetic)
                .map_err(|e| PipelineError::Config(e.to_string())),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Method::Pretrained => "pretrained".into(),
            Method::Dropout => "dropout".into(),
            Method::Synthetic(spec) => spec.to_string(),
        }
    }

    /// File-system name.
    pub fn slug(&self) -> String {
        method_slug(&self.name())
    }
}

pub fn method_slug(name: &str) -> String {
    name.replace('∘', "+")
}

/// Check `value` against [`RUN_CONFIG_SCHEMA`].
pub fn validate_schema(value: &Value) -> Result<(), PipelineError> {
    let schema: Value = serde_json::from_str(RUN_CONFIG_SCHEMA).expect("bundled schema is JSON");
    let validator = jsonschema::validator_for(&schema).expect("bundled schema compiles");
    let errors: Vec<String> =
        validator.iter_errors(value).map(|e| format!("{}: {e}", e.instance_path())).collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::Schema(errors))
    }
}

impl RunConfig {
    /// Minimal toy-corpus configuration.
    pub fn toy(methods: &[&str], output_dir: impl Into<PathBuf>) -> Self {
        let mut v = json!({
            "data": { "toy": {} },
            "methods": methods,
            "output_dir": output_dir.into(),
        });
        v["data"]["toy"] = serde_json::to_value(ToyConfig::default()).expect("serializes");
        serde_json::from_value(v).expect("toy config deserializes")
    }

    /// Schema check, then deserialization, then semantic validation.
    pub fn from_value(value: Value) -> Result<Self, PipelineError> {
        validate_schema(&value)?;
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let value: Value = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Re-validate after programmatic edits (e.g. command-line overrides).
    pub fn validate(&self) -> Result<(), PipelineError> {
        let value = serde_json::to_value(self).expect("config serializes");
        validate_schema(&value)?;
        let bad = |m: String| Err(PipelineError::Config(m));
        let d = &self.data;
        match (&d.toy, &d.corpus, &d.queries, &d.qrels) {
            (Some(_), None, None, None) => {}
            (Some(_), ..) => return bad("data.toy excludes data.corpus/queries/qrels".into()),
            (None, Some(_), Some(_), Some(_)) => {}
            (None, ..) => return bad("data needs either toy or corpus, queries and qrels".into()),
        }
        let methods = self.parsed_methods()?;
        let mut names: Vec<String> = methods.iter().map(Method::slug).collect();
        names.sort();
        names.dedup();
        if names.len() != methods.len() {
            return bad("methods name the same method twice".into());
        }
        if let Some(b) = &self.baseline {
            let b = Method::parse(b, self.mask_p)?.name();
            if !methods.iter().any(|m| m.name() == b) {
                return bad(format!("baseline {b:?} is not among the methods"));
            }
            if self.seeds.len() < 2 {
                return bad("significance tests need at least two seeds".into());
            }
        }
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.backend.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn parsed_methods(&self) -> Result<Vec<Method>, PipelineError> {
        self.methods.iter().map(|m| Method::parse(m, self.mask_p)).collect()
    }

    fn uses(&self, pred: impl Fn(&Stage) -> bool) -> bool {
        self.parsed_methods()
            .map(|ms| ms.iter().any(|m| matches!(m, Method::Synthetic(s) if s.chain().iter().any(&pred))))
            .unwrap_or(false)
    }

    fn needs_keywords(&self) -> bool {
        self.uses(|s| matches!(s, Stage::DocReg(_)))
    }

    fn needs_bank(&self) -> bool {
        self.uses(|s| matches!(s, Stage::Promptagator))
    }

    /// Seed of the shared synthetic-data build.
    pub fn generation_seed(&self) -> u64 {
        derive_seed(self.seed, "generate")
    }

    pub fn init_seed(&self, trial: u64) -> u64 {
        derive_seed_indexed(self.seed, "init", trial)
    }

    pub fn train_seed(&self, trial: u64) -> u64 {
        derive_seed_indexed(self.seed, "train", trial)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the output directory when inside it.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Executed,
    Reused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    /// Digest of the stage's parameters and input digests.
    pub key: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// False while the run is in progress or after a failed stage.
    pub complete: bool,
    pub config: Value,
    pub config_sha256: String,
    pub stages: Vec<StageRecord>,
    /// Generation calls by model, for executed stages.
    pub usage: BTreeMap<String, TokenUsage>,
    pub seconds: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn executed(&self) -> usize {
        self.stages.iter().filter(|s| s.status == StageStatus::Executed).count()
    }

    /// Recompute every recorded output digest; lists mismatches.
    pub fn verify(&self, root: &Path) -> Vec<String> {
        let mut bad = Vec::new();
        for d in self.stages.iter().flat_map(|s| &s.outputs) {
            let p = root.join(&d.path);
            match sha256_file(&p) {
                Ok((h, _)) if h == d.sha256 => {}
                Ok(_) => bad.push(format!("{}: digest changed", d.path)),
                Err(e) => bad.push(format!("{}: {e}", d.path)),
            }
        }
        bad
    }

    pub fn to_json(&self) -> String {
        let mut buf = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, ManifestFormatter::default());
        self.serialize(&mut ser).expect("manifest serializes");
        String::from_utf8(buf).expect("utf-8") + "\n"
    }
}

/// Pretty JSON whose small and huge floats use exponent form (`1e-5`, not `0.00001`).
#[derive(Default)]
struct ManifestFormatter(serde_json::ser::PrettyFormatter<'static>);

macro_rules! delegate {
    ($($name:ident $(($arg:ident: $ty:ty))?),* $(,)?) => {$(
        fn $name<W: ?Sized + std::io::Write>(&mut self, w: &mut W $(, $arg: $ty)?) -> std::io::Result<()> {
            self.0.$name(w $(, $arg)?)
        }
    )*};
}

impl serde_json::ser::Formatter for ManifestFormatter {
    delegate!(
        begin_array, end_array, begin_array_value(first: bool), end_array_value,
        begin_object, end_object, begin_object_key(first: bool), begin_object_value, end_object_value,
    );

    fn write_f64<W: ?Sized + std::io::Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        let a = value.abs();
        if a != 0.0 && !(1e-3..1e16).contains(&a) {
            write!(w, "{value:e}")
        } else {
            serde_json::ser::CompactFormatter.write_f64(w, value)
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `(hex digest, size)` of a file.
pub fn sha256_file(path: &Path) -> std::io::Result<(String, u64)> {
    let bytes = fs::read(path)?;
    Ok((sha256_hex(&bytes), bytes.len() as u64))
}

struct Planned {
    name: String,
    key: String,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
    reuse: Option<Vec<FileDigest>>,
}

struct Runner {
    root: PathBuf,
    previous: BTreeMap<String, StageRecord>,
    manifest: RunManifest,
    started: Instant,
}

impl Runner {
    fn new(cfg: &RunConfig) -> Result<Self, PipelineError> {
        let root = cfg.output_dir.clone();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let previous = match RunManifest::load(&root.join(MANIFEST_FILE)) {
            Ok(m) => m.stages.into_iter().map(|s| (s.name.clone(), s)).collect(),
            Err(_) => BTreeMap::new(),
        };
        let config = serde_json::to_value(cfg).expect("config serializes");
        let config_sha256 = sha256_hex(config.to_string().as_bytes());
        Ok(Self {
            root,
            previous,
            manifest: RunManifest {
                tool: "ir2".into(),
                version: VERSION.into(),
                complete: false,
                config,
                config_sha256,
                stages: Vec::new(),
                usage: BTreeMap::new(),
                seconds: 0.0,
            },
            started: Instant::now(),
        })
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn digest(&self, p: &Path) -> Result<FileDigest, PipelineError> {
        let (sha256, bytes) = sha256_file(p).map_err(io_err(p))?;
        Ok(FileDigest { path: self.rel(p), sha256, bytes })
    }

    fn plan(&self, name: &str, params: Value, inputs: &[&Path], outputs: Vec<PathBuf>) -> Result<Planned, PipelineError> {
        let inputs = inputs.iter().map(|p| self.digest(p)).collect::<Result<Vec<_>, _>>()?;
        let mut h = Sha256::new();
        for part in [VERSION, name, &params.to_string()] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        for d in &inputs {
            h.update(d.sha256.as_bytes());
        }
        let key = hex::encode(h.finalize());
        let reuse = self.previous.get(name).filter(|prev| {
            prev.key == key
                && prev.outputs.len() == outputs.len()
                && prev.outputs.iter().zip(&outputs).all(|(d, p)| {
                    d.path == self.rel(p) && sha256_file(p).is_ok_and(|(h, _)| h == d.sha256)
                })
        });
        Ok(Planned {
            name: name.to_string(),
            key,
            inputs,
            outputs,
            reuse: reuse.map(|r| r.outputs.clone()),
        })
    }

    fn finish(&mut self, p: Planned, result: Result<f64, String>) -> Result<(), PipelineError> {
        let seconds = match result {
            Ok(s) => s,
            Err(cause) => {
                self.write_manifest()?;
                return Err(PipelineError::Stage { stage: p.name, cause });
            }
        };
        let (status, outputs) = match p.reuse {
            Some(prev) => {
                info!("stage {}: reused", p.name);
                (StageStatus::Reused, prev)
            }
            None => {
                info!("stage {}: executed in {seconds:.2}s", p.name);
                let outs = p.outputs.iter().map(|o| self.digest(o)).collect::<Result<Vec<_>, _>>()?;
                (StageStatus::Executed, outs)
            }
        };
        self.manifest.stages.push(StageRecord { name: p.name, status, key: p.key, inputs: p.inputs, outputs, seconds });
        self.write_manifest()
    }

    /// Plan, run unless reusable, record.
    fn stage(
        &mut self,
        name: &str,
        params: Value,
        inputs: &[&Path],
        outputs: Vec<PathBuf>,
        run: impl FnOnce() -> Result<(), String>,
    ) -> Result<(), PipelineError> {
        let p = self.plan(name, params, inputs, outputs)?;
        let r = execute(&p, run);
        self.finish(p, r)
    }

    fn write_manifest(&mut self) -> Result<(), PipelineError> {
        self.manifest.seconds = self.started.elapsed().as_secs_f64();
        let path = self.root.join(MANIFEST_FILE);
        write_atomic(&path, self.manifest.to_json().as_bytes()).map_err(io_err(&path))
    }
}

fn execute(p: &Planned, run: impl FnOnce() -> Result<(), String>) -> Result<f64, String> {
    let t = Instant::now();
    if p.reuse.is_none() {
        for o in &p.outputs {
            if let Some(dir) = o.parent() {
                fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            }
        }
        run()?;
    }
    Ok(t.elapsed().as_secs_f64())
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn path_str(p: &Option<PathBuf>) -> Value {
    p.as_ref().map_or(Value::Null, |p| Value::String(p.display().to_string()))
}

struct Inputs {
    corpus: PathBuf,
    queries: PathBuf,
    qrels: PathBuf,
    pools: Option<PathBuf>,
    generation: PathBuf,
}

impl Inputs {
    fn resolve(cfg: &RunConfig) -> Self {
        let d = &cfg.data;
        if d.toy.is_some() {
            let dir = cfg.output_dir.join("data");
            let corpus = dir.join("corpus.jsonl");
            return Inputs {
                generation: d.generation_corpus.clone().unwrap_or_else(|| corpus.clone()),
                corpus,
                queries: dir.join("queries.jsonl"),
                qrels: dir.join("qrels.jsonl"),
                pools: None,
            };
        }
        let corpus = d.corpus.clone().expect("validated");
        Inputs {
            generation: d.generation_corpus.clone().unwrap_or_else(|| corpus.clone()),
            corpus,
            queries: d.queries.clone().expect("validated"),
            qrels: d.qrels.clone().expect("validated"),
            pools: d.pools.clone(),
        }
    }
}

struct EvalData {
    docs: Vec<(String, String)>,
    queries: Vec<(String, String)>,
    judgments: Judgments,
    pools: Option<CandidatePools>,
}

impl EvalData {
    fn load(inputs: &Inputs) -> Result<Self, String> {
        let corpus = load_corpus(&inputs.corpus).map_err(s)?;
        let queries = load_corpus(&inputs.queries).map_err(s)?;
        let judgments = load_judgments(&inputs.qrels).map_err(s)?;
        judgments.validate(|id| corpus.contains(id)).map_err(s)?;
        let pools = inputs.pools.as_deref().map(load_candidate_pools).transpose().map_err(s)?;
        let texts = |c: &Corpus| c.documents().iter().map(|d| (d.id.clone(), d.text.clone())).collect();
        Ok(EvalData { docs: texts(&corpus), queries: texts(&queries), judgments, pools })
    }
}

/// Gateway for a run. The mock carries corpus statistics so its keyword and
/// query transforms match what the corpus makes salient.
pub fn build_gateway(cfg: &RunConfig, corpus: &Corpus) -> Result<Gateway, String> {
    let templates = match &cfg.data.templates {
        Some(dir) => TemplateStore::with_dir(dir.clone()),
        None => TemplateStore::builtin(),
    };
    if cfg.backend.kind == BackendKind::Mock {
        let stats = Arc::new(DocumentFrequencies::from_corpus(corpus));
        let mock = MockBackend::new(cfg.backend.mock_keywords).with_stats(stats);
        return Ok(Gateway::mock_as(&cfg.backend, mock, templates));
    }
    Gateway::new(cfg.backend.clone(), templates).map_err(s)
}

/// Extract keywords for every document. Documents whose extraction fails
/// are left out (their document-regularized generation then fails in turn).
pub fn extract_all_keywords(
    corpus: &Corpus,
    gw: &Gateway,
    cfg: &RunConfig,
) -> Result<KeywordCache, String> {
    let stats = DocumentFrequencies::from_corpus(corpus);
    let k = cfg.keywords.k;
    let results = par::map_bounded(cfg.execution, gw.config().max_concurrency, corpus.documents(), |doc| {
        match cfg.keywords.extractor {
            Extractor::Llm => extract_keywords_llm(doc, gw, &cfg.data.dataset, k),
            Extractor::Tfidf => extract_keywords_tfidf(doc, &stats, k),
        }
    });
    let mut cache = KeywordCache::default();
    let mut failed = 0;
    for (doc, r) in corpus.documents().iter().zip(results) {
        match r {
            Ok(set) => cache.insert(set),
            Err(e) => {
                warn!("no keywords for {}: {e}", doc.id);
                failed += 1;
            }
        }
    }
    if !corpus.is_empty() && failed as f64 / corpus.len() as f64 > cfg.max_failure_rate {
        return Err(format!("keyword extraction failed for {failed} of {} documents", corpus.len()));
    }
    Ok(cache)
}

#[derive(Clone, Copy)]
struct Paths<'a> {
    root: &'a Path,
}

impl Paths<'_> {
    fn keywords(&self) -> PathBuf {
        self.root.join("keywords.jsonl")
    }
    fn dataset(&self, m: &Method) -> PathBuf {
        self.root.join("datasets").join(format!("{}.jsonl", m.slug()))
    }
    fn failures(&self, m: &Method) -> PathBuf {
        self.root.join("datasets").join(format!("{}.failures.jsonl", m.slug()))
    }
    fn checkpoint(&self, m: &Method, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(m.slug()).join(format!("seed_{seed}.bin"))
    }
    fn run(&self, m: &Method, seed: u64) -> PathBuf {
        self.root.join("runs").join(m.slug()).join(format!("seed_{seed}.jsonl"))
    }
    fn metrics(&self, m: &Method, seed: u64) -> PathBuf {
        self.root.join("metrics").join(m.slug()).join(format!("seed_{seed}.json"))
    }
}

fn train_one(
    cfg: &RunConfig,
    method: &Method,
    trial: u64,
    corpus: &Corpus,
    dataset: &Path,
    out: &Path,
) -> Result<(), String> {
    let params = cfg.encoder.init(cfg.init_seed(trial))?;
    let tc = TrainConfig { seed: cfg.train_seed(trial), ..cfg.train.clone() };
    let outcome = match method {
        Method::Pretrained => {
            let meta = CheckpointMeta::untrained(&params);
            return save_checkpoint(out, &params, &meta).map_err(s);
        }
        Method::Dropout => {
            let docs: Vec<String> = corpus.documents().iter().map(|d| d.text.clone()).collect();
            train(params, PairSource::Dropout(&docs), &tc, cfg.execution).map_err(s)?
        }
        Method::Synthetic(_) => {
            let pairs = load_pairs(dataset).map_err(s)?;
            let texts = pairs
                .into_iter()
                .map(|p| match corpus.get(&p.doc_id) {
                    Some(d) => Ok((p.query, d.text.clone())),
                    None => Err(format!("pair names unknown document {:?}", p.doc_id)),
                })
                .collect::<Result<Vec<_>, _>>()?;
            train(params, PairSource::Texts(&texts), &tc, cfg.execution).map_err(s)?
        }
    };
    save_checkpoint(out, &outcome.params, &CheckpointMeta::trained(&outcome, &tc)).map_err(s)
}

fn evaluate_one(
    cfg: &RunConfig,
    label: &str,
    checkpoint: &Path,
    data: &EvalData,
    run_path: &Path,
    metrics_path: &Path,
) -> Result<(), String> {
    let params = EncoderParams::load(checkpoint).map_err(s)?;
    let docs = params.embed_store(label, &data.docs, cfg.execution).map_err(s)?;
    let queries = params.embed_store(label, &data.queries, cfg.execution).map_err(s)?;
    let rankings = match &data.pools {
        Some(pools) => rank_pools(&queries, pools, &docs, cfg.similarity, cfg.execution),
        None => rank_all(&queries, &docs, cfg.top_k, cfg.similarity, cfg.execution),
    }
    .map_err(s)?;
    save_rankings(run_path, &rankings).map_err(s)?;
    let eval = evaluate(&rankings, &data.judgments, cfg.execution);
    if eval.suite.queries == 0 {
        return Err("no evaluated query has a relevant document".into());
    }
    write_atomic(metrics_path, eval.suite.to_json().as_bytes()).map_err(|e| format!("{}: {e}", metrics_path.display()))
}

/// Per-method means, for runs without a baseline.
pub fn summary_markdown(trials: &TrialMatrix, order: &[String], title: &str) -> String {
    let mut out = format!("### {title}\n\n| Method | Seeds |");
    for m in Metric::ALL {
        let _ = write!(out, " {} |", m.name());
    }
    out.push_str("\n|---|---:|");
    out.push_str(&"---:|".repeat(Metric::ALL.len()));
    out.push('\n');
    for method in order {
        let Some(runs) = trials.get(method) else { continue };
        let _ = write!(out, "| {method} | {} |", runs.len());
        for m in Metric::ALL {
            let mean = runs.values().map(|s| s.get(m)).sum::<f64>() / runs.len() as f64;
            let _ = write!(out, " {:.2} |", mean * 100.0);
        }
        out.push('\n');
    }
    out.push_str("\nMean over seeds, ×100.\n");
    out
}

pub fn summary_csv(trials: &TrialMatrix, order: &[String]) -> String {
    let mut out = String::from("method,metric,mean,seeds\n");
    for method in order {
        let Some(runs) = trials.get(method) else { continue };
        for m in Metric::ALL {
            let mean = runs.values().map(|s| s.get(m)).sum::<f64>() / runs.len() as f64;
            let _ = writeln!(out, "{},{},{:.6},{}", method, m.name(), mean * 100.0, runs.len());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

/// Render a significance report. Output is a pure function of the report.
pub fn emit_report(report: &SignificanceReport, format: ReportFormat, title: &str) -> String {
    match format {
        ReportFormat::Markdown => report.to_markdown(title),
        ReportFormat::Csv => report.to_csv(),
    }
}

fn aggregate(cfg: &RunConfig, methods: &[Method], paths: &Paths<'_>) -> Result<(), String> {
    let mut csv = csv_header() + "\n";
    let mut trials = TrialMatrix::new();
    for m in methods {
        for &seed in &cfg.seeds {
            let p = paths.metrics(m, seed);
            let text = fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
            let suite = MetricSuite::from_json(&text).map_err(|e| format!("{}: {e}", p.display()))?;
            csv.push_str(&csv_row(&m.name(), seed, &suite));
            csv.push('\n');
            trials.entry(m.name()).or_default().insert(seed, suite);
        }
    }
    let write = |name: &str, body: &str| {
        let p = paths.root.join(name);
        write_atomic(&p, body.as_bytes()).map_err(|e| format!("{}: {e}", p.display()))
    };
    write("metrics.csv", &csv)?;
    let order: Vec<String> = methods.iter().map(Method::name).collect();
    match &cfg.baseline {
        Some(b) => {
            let b = Method::parse(b, cfg.mask_p).map_err(s)?.name();
            let report = compare_to_baseline(&trials, &b, cfg.comparisons, cfg.alpha, cfg.test).map_err(s)?;
            write("report.md", &emit_report(&report, ReportFormat::Markdown, &cfg.name))?;
            write("report.csv", &emit_report(&report, ReportFormat::Csv, &cfg.name))
        }
        None => {
            write("report.md", &summary_markdown(&trials, &order, &cfg.name))?;
            write("report.csv", &summary_csv(&trials, &order))
        }
    }
}

/// Last stage group a partial run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    /// Keywords and synthetic datasets.
    Generate,
    /// Encoder checkpoints.
    Train,
    /// Rankings and per-seed metrics.
    Evaluate,
    /// Aggregated CSV and reports.
    Report,
}

/// Run every stage of `cfg`, reusing stages whose parameters, inputs and
/// outputs are unchanged since the last run in the same directory.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunManifest, PipelineError> {
    run_through(cfg, Phase::Report)
}

/// Like [`run_experiment`], stopping after `last`. The manifest is marked
/// complete only when the report stage ran.
pub fn run_through(cfg: &RunConfig, last: Phase) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let methods = cfg.parsed_methods()?;
    let mut runner = Runner::new(cfg)?;
    let root = cfg.output_dir.clone();
    let paths = Paths { root: &root };
    let inputs = Inputs::resolve(cfg);

    if let Some(toy) = &cfg.data.toy {
        let outs = vec![inputs.corpus.clone(), inputs.queries.clone(), inputs.qrels.clone()];
        let dir = root.join("data");
        runner.stage("data", json!({ "toy": toy }), &[], outs, || generate_toy(toy).save(&dir).map_err(s))?;
    }
    for p in [&inputs.generation, &inputs.corpus, &inputs.queries, &inputs.qrels] {
        if !p.exists() {
            return Err(PipelineError::Config(format!("input {} does not exist", p.display())));
        }
    }

    let gen_corpus = load_corpus(&inputs.generation).map_err(|e| PipelineError::Stage {
        stage: "data".into(),
        cause: e.to_string(),
    })?;
    let gateway: OnceCell<Gateway> = OnceCell::new();
    let gw = || -> Result<&Gateway, String> {
        if gateway.get().is_none() {
            let _ = gateway.set(build_gateway(cfg, &gen_corpus)?);
        }
        Ok(gateway.get().expect("just set"))
    };
    let backend_params = json!({
        "backend": cfg.backend,
        "dataset": cfg.data.dataset,
        "templates": path_str(&cfg.data.templates),
    });

    if cfg.needs_keywords() {
        let out = paths.keywords();
        let params = json!({ "keywords": cfg.keywords, "gen": backend_params, "max_failure_rate": cfg.max_failure_rate });
        runner.stage("keywords", params, &[&inputs.generation], vec![out.clone()], || {
            extract_all_keywords(&gen_corpus, gw()?, cfg)?.save(&out).map_err(s)
        })?;
    }

    let bank = if cfg.needs_bank() {
        let b = match &cfg.data.fewshot {
            Some(p) => FewShotBank::load(p).map_err(|e| PipelineError::Config(e.to_string()))?,
            None => FewShotBank::builtin(&cfg.data.dataset),
        };
        Some(b)
    } else {
        None
    };

    for m in &methods {
        let Method::Synthetic(spec) = m else { continue };
        let (out, fail) = (paths.dataset(m), paths.failures(m));
        let mut deps: Vec<&Path> = vec![&inputs.generation];
        let kw = paths.keywords();
        if spec.mask_ratio().is_some() {
            deps.push(&kw);
        }
        if let Some(f) = &cfg.data.fewshot {
            deps.push(f);
        }
        let params = json!({
            "method": m.name(),
            "gen": backend_params,
            "seed": cfg.generation_seed(),
            "max_failure_rate": cfg.max_failure_rate,
        });
        let name = format!("dataset:{}", m.slug());
        runner.stage(&name, params, &deps, vec![out.clone(), fail.clone()], || {
            let keywords = if spec.mask_ratio().is_some() { Some(KeywordCache::load(&kw).map_err(s)?) } else { None };
            let mut ctx = SynthesisContext::new(&cfg.data.dataset);
            ctx.bank = bank.as_ref();
            ctx.keywords = keywords.as_ref();
            ctx.max_failure_rate = cfg.max_failure_rate;
            ctx.exec = cfg.execution;
            let built = build_dataset(&gen_corpus, spec, gw()?, &ctx, cfg.generation_seed()).map_err(s)?;
            info!("{}: {} pairs, {} failures", m.name(), built.pairs.len(), built.failures.len());
            save_pairs(&out, &built.pairs).map_err(s)?;
            let failures: String =
                built.failures.iter().map(|f| serde_json::to_string(f).expect("serializes") + "\n").collect();
            write_atomic(&fail, failures.as_bytes()).map_err(|e| format!("{}: {e}", fail.display()))
        })?;
    }
    if let Some(g) = gateway.get() {
        runner.manifest.usage = g.usage();
    }
    if last == Phase::Generate {
        runner.write_manifest()?;
        return Ok(runner.manifest);
    }

    let seed_exec = if cfg.parallel_seeds { Execution::Parallel } else { Execution::Sequential };
    for m in &methods {
        let dataset = paths.dataset(m);
        let mut deps: Vec<&Path> = Vec::new();
        match m {
            Method::Pretrained => {}
            Method::Dropout => deps.push(&inputs.generation),
            Method::Synthetic(_) => deps.extend([inputs.generation.as_path(), dataset.as_path()]),
        }
        let params = |trial: u64| {
            json!({
                "method": m.name(),
                "encoder": cfg.encoder,
                "train": if matches!(m, Method::Pretrained) { Value::Null } else { json!(cfg.train) },
                "init_seed": cfg.init_seed(trial),
                "train_seed": cfg.train_seed(trial),
            })
        };
        let planned = cfg
            .seeds
            .iter()
            .map(|&t| {
                let name = format!("train:{}/seed_{t}", m.slug());
                let ckpt = paths.checkpoint(m, t);
                let outs = vec![ckpt.clone(), crate::trainer::sidecar_path(&ckpt)];
                runner.plan(&name, params(t), &deps, outs).map(|p| (t, p))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let results = par::map(seed_exec, &planned, |(t, p)| {
            execute(p, || train_one(cfg, m, *t, &gen_corpus, &dataset, &paths.checkpoint(m, *t)))
        });
        for ((_, p), r) in planned.into_iter().zip(results) {
            runner.finish(p, r)?;
        }
    }

    if last == Phase::Train {
        runner.write_manifest()?;
        return Ok(runner.manifest);
    }

    let eval: OnceCell<EvalData> = OnceCell::new();
    let eval_data = || -> Result<&EvalData, String> {
        if eval.get().is_none() {
            let _ = eval.set(EvalData::load(&inputs)?);
        }
        Ok(eval.get().expect("just set"))
    };
    let mut eval_deps: Vec<&Path> = vec![&inputs.corpus, &inputs.queries, &inputs.qrels];
    if let Some(p) = &inputs.pools {
        eval_deps.push(p);
    }
    for m in &methods {
        for &t in &cfg.seeds {
            let ckpt = paths.checkpoint(m, t);
            let mut deps = eval_deps.clone();
            deps.push(&ckpt);
            let (run_path, metrics_path) = (paths.run(m, t), paths.metrics(m, t));
            let params = json!({ "similarity": cfg.similarity, "top_k": cfg.top_k, "pools": inputs.pools.is_some() });
            let name = format!("evaluate:{}/seed_{t}", m.slug());
            let label = format!("{}/seed_{t}", m.name());
            runner.stage(&name, params, &deps, vec![run_path.clone(), metrics_path.clone()], || {
                evaluate_one(cfg, &label, &ckpt, eval_data()?, &run_path, &metrics_path)
            })?;
        }
    }

    if last == Phase::Evaluate {
        runner.write_manifest()?;
        return Ok(runner.manifest);
    }

    let metric_files: Vec<PathBuf> =
        methods.iter().flat_map(|m| cfg.seeds.iter().map(move |&t| paths.metrics(m, t))).collect();
    let deps: Vec<&Path> = metric_files.iter().map(PathBuf::as_path).collect();
    let params = json!({
        "methods": methods.iter().map(Method::name).collect::<Vec<_>>(),
        "seeds": cfg.seeds,
        "baseline": cfg.baseline,
        "comparisons": cfg.comparisons,
        "alpha": cfg.alpha,
        "test": cfg.test,
        "name": cfg.name,
    });
    let outs = ["metrics.csv", "report.md", "report.csv"].map(|f| root.join(f)).to_vec();
    runner.stage("report", params, &deps, outs, || aggregate(cfg, &methods, &paths))?;

    runner.manifest.complete = true;
    runner.write_manifest()?;
    Ok(runner.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path, methods: &[&str]) -> RunConfig {
        let mut cfg = RunConfig::toy(methods, dir);
        cfg.data.toy = Some(ToyConfig { documents: 20, queries: 20, ..ToyConfig::default() });
        cfg.encoder = EncoderConfig { hash_dim: 1 << 10, output_dim: 16, ..EncoderConfig::default() };
        cfg.train = TrainConfig { batch_size: 5, accumulation_steps: 2, learning_rate: 1e-2, ..TrainConfig::default() };
        cfg.seeds = vec![0, 1];
        cfg.top_k = 20;
        cfg
    }

    #[test]
    fn schema_accepts_defaults_and_rejects_typos() {
        let cfg = RunConfig::toy(&["promptagator"], "out");
        let v = serde_json::to_value(&cfg).unwrap();
        validate_schema(&v).unwrap();
        let mut bad = v.clone();
        bad["train"]["temprature"] = json!(0.1);
        assert!(matches!(RunConfig::from_value(bad), Err(PipelineError::Schema(_))));
        let mut warm = v.clone();
        warm["train"]["warmup_steps"] = json!(10);
        assert!(RunConfig::from_value(warm).is_err());
        let mut both = v;
        both["data"]["corpus"] = json!("c.jsonl");
        assert!(matches!(RunConfig::from_value(both), Err(PipelineError::Config(_))));
    }

    #[test]
    fn method_names_and_slugs() {
        let m = Method::parse("query_reg∘doc_reg", 0.6).unwrap();
        assert_eq!(m.name(), "query_reg∘doc_reg(0.6)");
        assert_eq!(m.slug(), "query_reg+doc_reg(0.6)");
        assert_eq!(Method::parse(&m.slug(), 0.6).unwrap(), m);
        assert_eq!(Method::parse("pretrained", 0.6).unwrap(), Method::Pretrained);
        assert!(Method::parse("nonsense", 0.6).is_err());
    }

    #[test]
    fn toy_run_layout_and_idempotent_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path(), &["query_reg∘doc_reg(0.6)"]);
        let m = run_experiment(&cfg).unwrap();
        assert!(m.complete);
        let names: Vec<&str> = m.stages.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("dataset:")).count(), 1);
        assert_eq!(names.iter().filter(|n| n.starts_with("train:")).count(), 2);
        assert_eq!(names.iter().filter(|n| n.starts_with("evaluate:")).count(), 2);
        assert!(names.contains(&"report"));
        assert!(m.verify(dir.path()).is_empty());
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);

        let again = run_experiment(&cfg).unwrap();
        assert_eq!(again.executed(), 0);
        assert_eq!(again.stages.len(), m.stages.len());
    }

    #[test]
    fn phased_run_then_full_run_reuses_everything() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path(), &["promptagator"]);
        let g = run_through(&cfg, Phase::Generate).unwrap();
        assert!(!g.complete);
        assert!(g.stages.iter().all(|s| !s.name.starts_with("train:")));
        let t = run_through(&cfg, Phase::Train).unwrap();
        assert_eq!(t.stage("dataset:promptagator").unwrap().status, StageStatus::Reused);
        assert!(t.stages.iter().all(|s| !s.name.starts_with("evaluate:")));
        let full = run_experiment(&cfg).unwrap();
        assert!(full.complete);
        for st in &full.stages {
            let fresh = st.name.starts_with("evaluate:") || st.name == "report";
            assert_eq!(st.status == StageStatus::Executed, fresh, "{}", st.name);
        }
    }

    #[test]
    fn changed_parameter_reruns_only_downstream() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path(), &["promptagator", "pretrained"]);
        run_experiment(&cfg).unwrap();
        cfg.top_k = 10;
        let m = run_experiment(&cfg).unwrap();
        for st in &m.stages {
            let expect = if st.name.starts_with("evaluate:") || st.name == "report" {
                StageStatus::Executed
            } else {
                StageStatus::Reused
            };
            assert_eq!(st.status, expect, "{}", st.name);
        }
    }

    #[test]
    fn tampered_output_is_regenerated() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path(), &["pretrained"]);
        run_experiment(&cfg).unwrap();
        let ckpt = dir.path().join("checkpoints/pretrained/seed_0.bin");
        let original = fs::read(&ckpt).unwrap();
        fs::write(&ckpt, b"garbage").unwrap();
        let m = run_experiment(&cfg).unwrap();
        assert_eq!(m.stage("train:pretrained/seed_0").unwrap().status, StageStatus::Executed);
        assert_eq!(m.stage("train:pretrained/seed_1").unwrap().status, StageStatus::Reused);
        assert_eq!(fs::read(&ckpt).unwrap(), original);
    }

    #[test]
    fn too_few_pairs_names_trainer_precondition() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path(), &["promptagator"]);
        cfg.train.batch_size = 80;
        let err = run_experiment(&cfg).unwrap_err().to_string();
        assert!(err.contains("train:promptagator/seed_0"), "{err}");
        assert!(err.contains("trainer precondition"), "{err}");
        let partial = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(!partial.complete);
        assert!(partial.stage("dataset:promptagator").is_some());
    }

    #[test]
    fn baseline_report_and_parallel_seeds_agree() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = small(a.path(), &["promptagator", "dropout"]);
        cfg.baseline = Some("promptagator".into());
        run_experiment(&cfg).unwrap();
        let mut par_cfg = cfg.clone();
        par_cfg.output_dir = b.path().to_path_buf();
        par_cfg.parallel_seeds = true;
        run_experiment(&par_cfg).unwrap();
        for f in ["metrics.csv", "report.md", "report.csv", "checkpoints/dropout/seed_1.bin"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let md = fs::read_to_string(a.path().join("report.md")).unwrap();
        assert!(md.contains("| dropout |"));
    }
}
