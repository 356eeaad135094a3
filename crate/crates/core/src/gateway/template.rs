//! Prompt templates: role-tagged text with `{slot}` markers.
//!
//! File format: optional role header lines `[system]`, `[user]` or
//! `[assistant]` start a new segment; text before the first header belongs to
//! a user segment. `{{` and `}}` produce literal braces.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// What a template asks the model to do. The mock backend dispatches on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Keywords,
    Promptagator,
    DocReg,
    InstrReg,
    QueryReg,
    /// Query regularization that asks for several candidate summaries.
    QueryRegMulti,
}

impl TemplateKind {
    /// Infer from a method file stem such as `doc_reg_80` or `query_reg_multi`.
    pub fn from_method(method: &str) -> Option<Self> {
        Some(if method.starts_with("keywords") {
            TemplateKind::Keywords
        } else if method.starts_with("promptagator") {
            TemplateKind::Promptagator
        } else if method.starts_with("doc_reg") {
            TemplateKind::DocReg
        } else if method.starts_with("instr_reg") {
            TemplateKind::InstrReg
        } else if method.starts_with("query_reg_multi") {
            TemplateKind::QueryRegMulti
        } else if method.starts_with("query_reg") {
            TemplateKind::QueryReg
        } else {
            return None;
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    /// `<dataset>/<method>`.
    pub id: String,
    pub kind: TemplateKind,
    pub segments: Vec<Segment>,
}

enum Piece<'a> {
    Text(&'a str),
    Brace(char),
    Slot(&'a str),
}

fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    let mut lit = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push(Piece::Text(&text[lit..i]));
                out.push(Piece::Brace('{'));
                i += 2;
                lit = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push(Piece::Text(&text[lit..i]));
                out.push(Piece::Brace('}'));
                i += 2;
                lit = i;
            }
            b'{' => {
                let rest = &text[i + 1..];
                let name_len = rest
                    .bytes()
                    .take_while(|b| b.is_ascii_alphanumeric() || *b == b'_')
                    .count();
                if name_len > 0 && rest.as_bytes().get(name_len) == Some(&b'}') {
                    out.push(Piece::Text(&text[lit..i]));
                    out.push(Piece::Slot(&rest[..name_len]));
                    i += name_len + 2;
                    lit = i;
                } else {
                    i += 1;
                }
            }
            _ => i += 1,
        }
    }
    out.push(Piece::Text(&text[lit..]));
    out
}

impl PromptTemplate {
    pub fn parse(id: &str, kind: TemplateKind, source: &str) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        let mut role = Role::User;
        let mut buf = String::new();
        let mut started = false;
        let flush = |segments: &mut Vec<Segment>, role: Role, buf: &mut String, started: bool| {
            let text = buf.trim_matches('\n').to_string();
            if started || !text.is_empty() {
                segments.push(Segment { role, text });
            }
            buf.clear();
        };
        for line in source.lines() {
            let header = match line.trim_end() {
                "[system]" => Some(Role::System),
                "[user]" => Some(Role::User),
                "[assistant]" => Some(Role::Assistant),
                _ => None,
            };
            if let Some(r) = header {
                flush(&mut segments, role, &mut buf, started);
                role = r;
                started = true;
            } else {
                buf.push_str(line);
                buf.push('\n');
            }
        }
        flush(&mut segments, role, &mut buf, started);
        Self { id: id.to_string(), kind, segments }
    }

    /// Slot names referenced anywhere in the template.
    pub fn slots(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for s in &self.segments {
            for p in pieces(&s.text) {
                if let Piece::Slot(name) = p {
                    out.insert(name.to_string());
                }
            }
        }
        out
    }

    pub fn has_slot(&self, name: &str) -> bool {
        self.slots().contains(name)
    }

    fn render_text(&self, text: &str, slots: &BTreeMap<String, String>) -> Result<String, GatewayError> {
        let mut out = String::with_capacity(text.len());
        for p in pieces(text) {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Brace(c) => out.push(c),
                Piece::Slot(name) => match slots.get(name) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(GatewayError::MissingSlot {
                            template: self.id.clone(),
                            slot: name.to_string(),
                        })
                    }
                },
            }
        }
        Ok(out)
    }

    /// Render every segment into chat messages.
    pub fn render_messages(
        &self,
        slots: &BTreeMap<String, String>,
    ) -> Result<Vec<ChatMessage>, GatewayError> {
        self.segments
            .iter()
            .map(|s| {
                Ok(ChatMessage { role: s.role, content: self.render_text(&s.text, slots)? })
            })
            .collect()
    }

    /// Render to a single string: segments joined by a blank line.
    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<String, GatewayError> {
        Ok(self
            .render_messages(slots)?
            .into_iter()
            .map(|m| m.content)
            .collect::<Vec<_>>()
            .join("\n\n"))
    }
}

/// Literal substitution of `slots` into `template`.
pub fn render_prompt(
    template: &PromptTemplate,
    slots: &BTreeMap<String, String>,
) -> Result<String, GatewayError> {
    template.render(slots)
}

macro_rules! builtin {
    ($($path:literal),* $(,)?) => {
        &[$(($path, include_str!(concat!("../../prompts/", $path)))),*]
    };
}

const BUILTIN: &[(&str, &str)] = builtin![
    "default/keywords.txt",
    "default/promptagator.txt",
    "default/doc_reg.txt",
    "default/instr_reg.txt",
    "default/query_reg.txt",
    "doris-mae/keywords.txt",
    "doris-mae/promptagator.txt",
    "doris-mae/doc_reg.txt",
    "doris-mae/doc_reg_80.txt",
    "doris-mae/instr_reg.txt",
    "doris-mae/query_reg.txt",
    "doris-mae/query_reg_multi.txt",
    "arguana/keywords.txt",
    "arguana/promptagator.txt",
    "arguana/doc_reg.txt",
    "arguana/instr_reg.txt",
    "arguana/query_reg.txt",
    "wtb/keywords.txt",
    "wtb/promptagator.txt",
    "wtb/doc_reg.txt",
    "wtb/doc_reg_40.txt",
    "wtb/instr_reg.txt",
    "wtb/query_reg.txt",
];

/// Template lookup over `prompts/<dataset>/<method>.txt`, with a filesystem
/// override directory and the bundled set as fallback. Unknown datasets fall
/// back to `default/`.
#[derive(Debug, Clone, Default)]
pub struct TemplateStore {
    dir: Option<PathBuf>,
}

impl TemplateStore {
    pub fn builtin() -> Self {
        Self { dir: None }
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    fn source(&self, dataset: &str, method: &str) -> Option<(String, String)> {
        let rel = format!("{dataset}/{method}.txt");
        if let Some(dir) = &self.dir {
            let p: PathBuf = dir.join(&rel);
            if let Ok(s) = fs::read_to_string(&p) {
                return Some((rel, s));
            }
        }
        BUILTIN
            .iter()
            .find(|(p, _)| *p == rel)
            .map(|(p, s)| (p.to_string(), s.to_string()))
    }

    /// Exact lookup, no fallback.
    pub fn get_exact(&self, dataset: &str, method: &str) -> Option<PromptTemplate> {
        let kind = TemplateKind::from_method(method)?;
        self.source(dataset, method).map(|(rel, src)| {
            let id = rel.trim_end_matches(".txt").to_string();
            PromptTemplate::parse(&id, kind, &src)
        })
    }

    /// Lookup with fallback to the `default` dataset.
    pub fn get(&self, dataset: &str, method: &str) -> Result<PromptTemplate, GatewayError> {
        self.get_exact(dataset, method)
            .or_else(|| self.get_exact("default", method))
            .ok_or_else(|| GatewayError::UnknownTemplate(format!("{dataset}/{method}")))
    }

    /// Load a template from an arbitrary file; kind is inferred from the file stem.
    pub fn load_file(path: &Path) -> Result<PromptTemplate, GatewayError> {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let kind = TemplateKind::from_method(&stem)
            .ok_or_else(|| GatewayError::UnknownTemplate(path.display().to_string()))?;
        let src = fs::read_to_string(path)
            .map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
        let dataset = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Ok(PromptTemplate::parse(&format!("{dataset}/{stem}"), kind, &src))
    }
}
