use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::warn;
use serde::Deserialize;
use serde_json::json;

use super::records::{request_id, GenerationRecord, RecordWriter};
use super::{BackendConfig, ChatMessage, Completion, GatewayError};

/// Spaces request start times at least `60 / rpm` seconds apart across threads.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn per_minute(rpm: f64) -> Self {
        Self { interval: Duration::from_secs_f64(60.0 / rpm), next: Mutex::new(None) }
    }

    /// Block until the caller may start a request.
    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let slot = match *next {
                Some(t) if t > now => t,
                _ => now,
            };
            *next = Some(slot + self.interval);
            slot.saturating_duration_since(now)
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct ApiErrorBody {
    error: ApiErrorDetail,
}

#[derive(Deserialize)]
struct ApiErrorDetail {
    message: String,
}

/// Extract `choices[0].message.content` and usage counts from a response body.
pub fn parse_chat_response(body: &str) -> Result<(String, u64, u64), GatewayError> {
    let parsed: ChatResponse = serde_json::from_str(body)
        .map_err(|e| GatewayError::Parse { message: e.to_string(), raw: body.to_string() })?;
    let content = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| GatewayError::Parse {
            message: "no choices[0].message.content".into(),
            raw: body.to_string(),
        })?;
    let usage = parsed.usage.unwrap_or_default();
    Ok((content, usage.prompt_tokens, usage.completion_tokens))
}

pub(crate) struct RemoteBackend {
    agent: ureq::Agent,
    url: String,
    api_key: String,
    temperature: f64,
    max_retries: u32,
    backoff: Duration,
    limiter: Option<RateLimiter>,
    records: RecordWriter,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(GatewayError),
}

impl RemoteBackend {
    pub(crate) fn new(cfg: &BackendConfig, api_key: String) -> Result<Self, GatewayError> {
        let base = cfg.endpoint.as_deref().expect("validated").trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/v1/chat/completions")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url,
            api_key,
            temperature: cfg.temperature,
            max_retries: cfg.max_retries,
            backoff: Duration::from_millis(cfg.backoff_ms),
            limiter: cfg.rate_limit_rpm.map(RateLimiter::per_minute),
            records: RecordWriter::append_to(cfg.records.as_ref().expect("validated"))?,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Attempt {
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let resp = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body);
        let resp = match resp {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.into_body().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if (200..300).contains(&status) {
            return Attempt::Done(text);
        }
        let message = serde_json::from_str::<ApiErrorBody>(&text)
            .map(|b| b.error.message)
            .unwrap_or_else(|_| text.clone());
        if status == 429 || status >= 500 {
            Attempt::Retry(format!("HTTP {status}: {message}"))
        } else {
            Attempt::Fatal(GatewayError::Api { status, message })
        }
    }

    pub(crate) fn chat(
        &self,
        template_id: &str,
        model: &str,
        messages: &[ChatMessage],
        prompt: String,
    ) -> Result<Completion, GatewayError> {
        let body = json!({
            "model": model,
            "temperature": self.temperature,
            "messages": messages,
        });
        let attempts = self.max_retries + 1;
        let mut last = String::new();
        for i in 0..attempts {
            if i > 0 {
                thread::sleep(self.backoff * 2u32.saturating_pow(i - 1));
            }
            match self.attempt(&body) {
                Attempt::Done(text) => {
                    let (content, pt, ct) = parse_chat_response(&text)?;
                    let timestamp = SystemTime::now()
                        .duration_since(UNIX_EPOCH)
                        .map(|d| d.as_secs())
                        .unwrap_or(0);
                    self.records.write(&GenerationRecord {
                        request_id: request_id(model, template_id, &prompt),
                        template_id: template_id.to_string(),
                        model: model.to_string(),
                        prompt: prompt.clone(),
                        response: content.clone(),
                        backend: "remote".into(),
                        timestamp,
                        prompt_tokens: pt,
                        completion_tokens: ct,
                    })?;
                    return Ok(Completion { text: content, prompt, prompt_tokens: pt, completion_tokens: ct });
                }
                Attempt::Retry(msg) => {
                    warn!("{template_id}: attempt {} of {attempts} failed: {msg}", i + 1);
                    last = msg;
                }
                Attempt::Fatal(e) => return Err(e),
            }
        }
        Err(GatewayError::Transport { attempts, message: last })
    }
}
