use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Completion, GatewayError};

/// Audit record of one backend call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub request_id: String,
    pub template_id: String,
    pub model: String,
    pub prompt: String,
    pub response: String,
    pub backend: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Content address of a request: sha256 over model, template id and prompt.
pub fn request_id(model: &str, template_id: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0]);
    h.update(template_id.as_bytes());
    h.update([0]);
    h.update(prompt.as_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Serialized appender; safe to share between worker threads.
#[derive(Debug)]
pub struct RecordWriter {
    out: Mutex<BufWriter<File>>,
}

impl RecordWriter {
    pub fn append_to(path: &Path) -> Result<Self, GatewayError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| GatewayError::Io(e.to_string()))?;
            }
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self { out: Mutex::new(BufWriter::new(f)) })
    }

    pub fn write(&self, rec: &GenerationRecord) -> Result<(), GatewayError> {
        let line = serde_json::to_string(rec).expect("record serializes");
        let mut out = self.out.lock().expect("record writer poisoned");
        writeln!(out, "{line}").and_then(|_| out.flush()).map_err(|e| GatewayError::Io(e.to_string()))
    }
}

pub fn load_records(path: &Path) -> Result<Vec<GenerationRecord>, GatewayError> {
    let text = fs::read_to_string(path)
        .map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| GatewayError::Io(format!(
                "{} line {}: {e}",
                path.display(),
                i + 1
            )))
        })
        .collect()
}

pub(crate) struct ReplayIndex {
    by_id: HashMap<String, GenerationRecord>,
}

impl ReplayIndex {
    pub(crate) fn load(path: &Path) -> Result<Self, GatewayError> {
        let by_id = load_records(path)?.into_iter().map(|r| (r.request_id.clone(), r)).collect();
        Ok(Self { by_id })
    }

    pub(crate) fn lookup(
        &self,
        template_id: &str,
        model: &str,
        prompt: String,
    ) -> Result<Completion, GatewayError> {
        let id = request_id(model, template_id, &prompt);
        match self.by_id.get(&id) {
            Some(r) => Ok(Completion {
                text: r.response.clone(),
                prompt,
                prompt_tokens: r.prompt_tokens,
                completion_tokens: r.completion_tokens,
            }),
            None => Err(GatewayError::ReplayMiss { template: template_id.to_string(), request_id: id }),
        }
    }
}
