//! Tokenization shared by the extractor, the mock backend and the encoder.

use std::collections::HashSet;
use std::ops::Range;
use std::sync::OnceLock;

const STOPWORDS_EN: &str = include_str!("../data/stopwords_en.txt");

/// The bundled English stopword list.
pub fn stopwords() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_EN
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect()
    })
}

pub fn is_stopword(token: &str) -> bool {
    stopwords().contains(token)
}

/// Whitespace-delimited units, used for length filtering and query truncation.
pub fn whitespace_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

pub fn whitespace_token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// A maximal alphanumeric run and its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan {
    pub lower: String,
    pub span: Range<usize>,
}

/// Lowercased maximal alphanumeric runs with byte spans.
pub fn word_spans(text: &str) -> Vec<WordSpan> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            out.push(WordSpan { lower: text[s..i].to_lowercase(), span: s..i });
        }
    }
    if let Some(s) = start {
        out.push(WordSpan { lower: text[s..].to_lowercase(), span: s..text.len() });
    }
    out
}

/// Lowercase, split on non-alphanumeric characters.
pub fn word_tokens(text: &str) -> Vec<String> {
    word_spans(text).into_iter().map(|w| w.lower).collect()
}

/// Word tokens with stopwords removed.
pub fn content_words(text: &str) -> Vec<String> {
    word_tokens(text).into_iter().filter(|t| !is_stopword(t)).collect()
}

/// Split into sentences on `.`, `!`, `?` followed by whitespace (or end of
/// text) and on line breaks. Sentences are trimmed and never empty.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let end = match c {
            '\n' => Some(i),
            '.' | '!' | '?' => match chars.peek() {
                None => Some(i + c.len_utf8()),
                Some((_, n)) if n.is_whitespace() => Some(i + c.len_utf8()),
                _ => None,
            },
            _ => None,
        };
        if let Some(e) = end {
            let s = text[start..e].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = e;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Jaccard overlap of the content-word sets of two texts. Two texts with no
/// content words have overlap 0.
pub fn content_jaccard(a: &str, b: &str) -> f64 {
    let sa: HashSet<String> = content_words(a).into_iter().collect();
    let sb: HashSet<String> = content_words(b).into_iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Rough subword-token estimate (about four characters per token) used for
/// cost planning when no provider usage numbers exist.
pub fn approx_llm_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}
