//! Text-generation backends behind one interface.
//!
//! * `mock`: a deterministic offline stand-in, a pure function of
//!   (template kind, slots).
//! * `remote`: an OpenAI-compatible `POST /v1/chat/completions` endpoint,
//!   with retries, exponential backoff and a shared rate limiter. Every call
//!   is appended to a records file.
//! * `replay`: answers from a records file without network access.

mod cost;
mod mock;
mod records;
mod remote;
pub mod template;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cost::{estimate_cost, estimate_plan, ModelPrice, PriceTable};
pub use mock::MockBackend;
pub use records::{load_records, GenerationRecord, RecordWriter};
pub use remote::{parse_chat_response, RateLimiter};
pub use template::{render_prompt, ChatMessage, PromptTemplate, Role, TemplateKind, TemplateStore};

use records::ReplayIndex;
use remote::RemoteBackend;

/// Environment variable holding the remote API credential.
pub const API_KEY_ENV: &str = "IR2_API_KEY";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("template {template}: missing slot {slot:?}")]
    MissingSlot { template: String, slot: String },
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider returned {status}: {message}")]
    Api { status: u16, message: String },
    #[error("cannot parse response: {message}; raw: {raw:?}")]
    Parse { message: String, raw: String },
    #[error("no recorded response for template {template} (request {request_id})")]
    ReplayMiss { template: String, request_id: String },
    #[error("model {0:?} missing from price table")]
    UnknownModel(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    #[default]
    Mock,
    Replay,
}

impl std::str::FromStr for BackendKind {
    type Err = GatewayError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(BackendKind::Remote),
            "mock" => Ok(BackendKind::Mock),
            "replay" => Ok(BackendKind::Replay),
            other => Err(GatewayError::Config(format!("unknown backend {other:?}"))),
        }
    }
}

fn default_model() -> String {
    "gpt-4-0613".into()
}
fn default_stage_models() -> BTreeMap<String, String> {
    [("keywords", "gpt-3.5-turbo-0301"), ("query_reg", "gpt-3.5-turbo-0301")]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}
fn default_retries() -> u32 {
    3
}
fn default_timeout() -> f64 {
    60.0
}
fn default_concurrency() -> usize {
    4
}
fn default_backoff() -> u64 {
    500
}
fn default_mock_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    /// Base URL; `/v1/chat/completions` is appended unless already present.
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_model")]
    pub model: String,
    /// Per-stage model overrides (`keywords`, `query_reg`, ...).
    #[serde(default = "default_stage_models")]
    pub stage_models: BTreeMap<String, String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub rate_limit_rpm: Option<f64>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    /// Records file: appended to by `remote`, read by `replay`.
    #[serde(default)]
    pub records: Option<PathBuf>,
    /// Keywords the mock returns for extraction prompts.
    #[serde(default = "default_mock_k")]
    pub mock_keywords: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            model: default_model(),
            stage_models: default_stage_models(),
            temperature: 0.0,
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            rate_limit_rpm: None,
            max_concurrency: default_concurrency(),
            backoff_ms: default_backoff(),
            records: None,
            mock_keywords: default_mock_k(),
        }
    }
}

impl BackendConfig {
    pub fn mock() -> Self {
        Self::default()
    }

    pub fn model_for(&self, stage: Option<&str>) -> &str {
        stage
            .and_then(|s| self.stage_models.get(s))
            .map(String::as_str)
            .unwrap_or(&self.model)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::Config("temperature must be >= 0".into()));
        }
        if self.max_concurrency == 0 {
            return Err(GatewayError::Config("max_concurrency must be >= 1".into()));
        }
        if let Some(r) = self.rate_limit_rpm {
            if r.is_nan() || r <= 0.0 {
                return Err(GatewayError::Config("rate_limit_rpm must be > 0".into()));
            }
        }
        match self.kind {
            BackendKind::Remote => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return Err(GatewayError::Config("remote backend requires an endpoint".into()));
                }
                if self.records.is_none() {
                    return Err(GatewayError::Config("remote backend requires a records file".into()));
                }
            }
            BackendKind::Replay => {
                if self.records.is_none() {
                    return Err(GatewayError::Config("replay backend requires a records file".into()));
                }
            }
            BackendKind::Mock => {}
        }
        Ok(())
    }
}

/// One templated generation call.
#[derive(Debug, Clone)]
pub struct GenerationRequest<'a> {
    pub template: &'a PromptTemplate,
    pub slots: BTreeMap<String, String>,
    pub seed: u64,
    /// Stage name used to pick a per-stage model.
    pub stage: Option<String>,
}

impl<'a> GenerationRequest<'a> {
    pub fn new(template: &'a PromptTemplate, slots: BTreeMap<String, String>) -> Self {
        Self { template, slots, seed: 0, stage: None }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_stage(mut self, stage: &str) -> Self {
        self.stage = Some(stage.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub prompt: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

enum Backend {
    Mock(MockBackend),
    Remote(RemoteBackend),
    Replay(ReplayIndex),
}

/// Calls and tokens seen by one model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Configured backend plus template lookup. Cheap to share across threads.
#[derive(Clone)]
pub struct Gateway {
    cfg: BackendConfig,
    templates: TemplateStore,
    backend: Arc<Backend>,
    usage: Arc<Mutex<BTreeMap<String, TokenUsage>>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl Gateway {
    /// Build from config. A remote backend reads its credential from `IR2_API_KEY`.
    pub fn new(cfg: BackendConfig, templates: TemplateStore) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let backend = match cfg.kind {
            BackendKind::Mock => Backend::Mock(MockBackend::new(cfg.mock_keywords)),
            BackendKind::Remote => {
                let key = std::env::var(API_KEY_ENV).map_err(|_| {
                    GatewayError::Config(format!("remote backend requires ${API_KEY_ENV}"))
                })?;
                Backend::Remote(RemoteBackend::new(&cfg, key)?)
            }
            BackendKind::Replay => {
                Backend::Replay(ReplayIndex::load(cfg.records.as_ref().expect("validated"))?)
            }
        };
        Ok(Self::assemble(cfg, templates, backend))
    }

    fn assemble(cfg: BackendConfig, templates: TemplateStore, backend: Backend) -> Self {
        Self { cfg, templates, backend: Arc::new(backend), usage: Arc::default() }
    }

    /// Mock gateway with a custom mock (e.g. one carrying corpus statistics).
    pub fn with_mock(mock: MockBackend, templates: TemplateStore) -> Self {
        let cfg = BackendConfig { mock_keywords: mock.keyword_count(), ..BackendConfig::mock() };
        Self::assemble(cfg, templates, Backend::Mock(mock))
    }

    /// Custom mock that keeps the model names and limits of `cfg`, so usage
    /// is attributed as a real run would attribute it.
    pub fn mock_as(cfg: &BackendConfig, mock: MockBackend, templates: TemplateStore) -> Self {
        let cfg = BackendConfig {
            kind: BackendKind::Mock,
            records: None,
            mock_keywords: mock.keyword_count(),
            ..cfg.clone()
        };
        Self::assemble(cfg, templates, Backend::Mock(mock))
    }

    /// Per-model totals of successful calls made through this gateway and its clones.
    pub fn usage(&self) -> BTreeMap<String, TokenUsage> {
        self.usage.lock().expect("usage lock").clone()
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn templates(&self) -> &TemplateStore {
        &self.templates
    }

    pub fn is_mock(&self) -> bool {
        matches!(*self.backend, Backend::Mock(_))
    }

    pub fn generate(&self, req: &GenerationRequest<'_>) -> Result<Completion, GatewayError> {
        let messages = req.template.render_messages(&req.slots)?;
        let prompt = messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n\n");
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let model = self.cfg.model_for(req.stage.as_deref()).to_string();
        let out = match &*self.backend {
            Backend::Mock(m) => {
                let text = m.respond(req.template.kind, &req.slots);
                Completion {
                    prompt_tokens: crate::text::approx_llm_tokens(&prompt),
                    completion_tokens: crate::text::approx_llm_tokens(&text),
                    text,
                    prompt,
                }
            }
            Backend::Remote(r) => r.chat(&req.template.id, &model, &messages, prompt)?,
            Backend::Replay(idx) => idx.lookup(&req.template.id, &model, prompt)?,
        };
        let mut usage = self.usage.lock().expect("usage lock");
        let u = usage.entry(model).or_default();
        u.calls += 1;
        u.prompt_tokens += out.prompt_tokens;
        u.completion_tokens += out.completion_tokens;
        Ok(out)
    }

    /// Complete a raw prompt (sent as one user message). The mock treats the
    /// whole prompt as a document and applies its document-to-query transform.
    pub fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let template = PromptTemplate::parse("raw/promptagator", TemplateKind::Promptagator, "{document}");
        let mut slots = BTreeMap::new();
        slots.insert("document".to_string(), prompt.to_string());
        self.generate(&GenerationRequest::new(&template, slots)).map(|c| c.text)
    }
}
