//! Hashed bag-of-words linear encoder and the embedding store format.
//!
//! A text becomes an L2-normalized vector of hashed token counts `x` in
//! `R^D`; the embedding is `Wᵀx` in `R^n`, optionally unit-normalized.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Read};
use std::path::Path;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::write_atomic;
use crate::par::{self, Execution};
use crate::seed::{derive_seed, fisher_yates_prefix, fnv1a64, rng_from_seed};
use crate::text::word_tokens;

pub const DEFAULT_HASH_DIM: usize = 1 << 15;
pub const DEFAULT_OUTPUT_DIM: usize = 128;
pub const MAX_TOKENS: usize = 512;

const STORE_MAGIC: &[u8; 8] = b"IR2EMB1\0";
const PARAMS_MAGIC: &[u8; 8] = b"IR2ENC1\0";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder dimensions D={hash_dim}, n={output_dim} (need D >= n >= 1)")]
    Dimensions { hash_dim: usize, output_dim: usize },
    #[error("text {0:?} has no tokens")]
    EmptyText(String),
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch { expected: usize, found: usize, context: String },
    #[error("duplicate embedding id {0:?}")]
    DuplicateId(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Sparse L2-normalized feature vector, sorted by bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatures {
    pub index: Vec<u32>,
    pub value: Vec<f64>,
}

impl SparseFeatures {
    pub fn nnz(&self) -> usize {
        self.index.len()
    }

    fn normalized(index: Vec<u32>, mut value: Vec<f64>) -> Self {
        let norm = value.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            value.iter_mut().for_each(|v| *v /= norm);
        }
        Self { index, value }
    }
}

pub fn token_bucket(token: &str, hash_dim: usize) -> u32 {
    (fnv1a64(token.as_bytes()) % hash_dim as u64) as u32
}

/// Tokenize, truncate to `max_tokens`, hash and L2-normalize counts.
pub fn featurize(text: &str, hash_dim: usize, max_tokens: usize) -> Result<SparseFeatures, EncoderError> {
    let tokens = word_tokens(text);
    if tokens.is_empty() {
        return Err(EncoderError::EmptyText(text.chars().take(80).collect()));
    }
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for t in tokens.iter().take(max_tokens) {
        *counts.entry(token_bucket(t, hash_dim)).or_default() += 1.0;
    }
    let (index, value) = counts.into_iter().unzip();
    Ok(SparseFeatures::normalized(index, value))
}

/// Zero `floor(rho * nnz)` features (at most `nnz - 1`) chosen by `seed`, then renormalize.
pub fn dropout_features(x: &SparseFeatures, rho: f64, seed: u64) -> Result<SparseFeatures, EncoderError> {
    if !(0.0..1.0).contains(&rho) {
        return Err(EncoderError::DropoutRate(rho));
    }
    let nnz = x.nnz();
    let drop = ((rho * nnz as f64).floor() as usize).min(nnz.saturating_sub(1));
    if drop == 0 {
        return Ok(x.clone());
    }
    let mut order: Vec<usize> = (0..nnz).collect();
    fisher_yates_prefix(&mut order, drop, seed);
    let mut keep = vec![true; nnz];
    for &i in &order[..drop] {
        keep[i] = false;
    }
    let (index, value) = (0..nnz).filter(|&i| keep[i]).map(|i| (x.index[i], x.value[i])).unzip();
    Ok(SparseFeatures::normalized(index, value))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub hash_dim: usize,
    pub output_dim: usize,
    /// Row-major `hash_dim × output_dim`.
    pub weights: Vec<f64>,
    pub normalize_output: bool,
    pub max_tokens: usize,
    pub seed: u64,
}

/// Uniform `[-1/√D, 1/√D]` initialization from `seed`.
pub fn init_encoder(hash_dim: usize, output_dim: usize, seed: u64) -> Result<EncoderParams, EncoderError> {
    if output_dim == 0 || hash_dim < output_dim {
        return Err(EncoderError::Dimensions { hash_dim, output_dim });
    }
    let bound = 1.0 / (hash_dim as f64).sqrt();
    let mut rng = rng_from_seed(derive_seed(seed, "encoder-init"));
    let weights = (0..hash_dim * output_dim).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(EncoderParams {
        hash_dim,
        output_dim,
        weights,
        normalize_output: true,
        max_tokens: MAX_TOKENS,
        seed,
    })
}

impl EncoderParams {
    pub fn row(&self, bucket: u32) -> &[f64] {
        let b = bucket as usize * self.output_dim;
        &self.weights[b..b + self.output_dim]
    }

    pub fn featurize(&self, text: &str) -> Result<SparseFeatures, EncoderError> {
        featurize(text, self.hash_dim, self.max_tokens)
    }

    /// `Wᵀx` before output normalization.
    pub fn project(&self, x: &SparseFeatures) -> Vec<f64> {
        let mut u = vec![0.0; self.output_dim];
        for (&k, &v) in x.index.iter().zip(&x.value) {
            for (o, w) in u.iter_mut().zip(self.row(k)) {
                *o += v * w;
            }
        }
        u
    }

    /// Projection followed by optional unit normalization. A zero projection
    /// stays zero.
    pub fn embed_features(&self, x: &SparseFeatures) -> Vec<f64> {
        let mut u = self.project(x);
        if self.normalize_output {
            let n = l2_norm(&u);
            if n > 0.0 {
                u.iter_mut().for_each(|v| *v /= n);
            }
        }
        u
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        let v = self.embed_features(&self.featurize(text)?);
        if self.normalize_output && v.iter().all(|&x| x == 0.0) {
            warn!("zero embedding for text {:?}", text.chars().take(40).collect::<String>());
        }
        Ok(v)
    }

    /// Two embeddings of `text` under independent feature-dropout masks.
    pub fn dropout_views(&self, text: &str, rho: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>), EncoderError> {
        let x = self.featurize(text)?;
        let a = dropout_features(&x, rho, derive_seed(seed, "view-a"))?;
        let b = dropout_features(&x, rho, derive_seed(seed, "view-b"))?;
        Ok((self.embed_features(&a), self.embed_features(&b)))
    }

    pub fn embed_batch(&self, texts: &[&str], exec: Execution) -> Result<Vec<Vec<f64>>, EncoderError> {
        par::try_map(exec, texts, |t| self.embed(t))
    }

    /// Embed `(id, text)` items into a store tagged `model`.
    pub fn embed_store(
        &self,
        model: &str,
        items: &[(String, String)],
        exec: Execution,
    ) -> Result<EmbeddingStore, EncoderError> {
        let vecs = par::try_map(exec, items, |(_, t)| self.embed(t))?;
        let mut store = EmbeddingStore::new(model, self.output_dim);
        for ((id, _), v) in items.iter().zip(vecs) {
            store.insert(id, &v.iter().map(|&x| x as f32).collect::<Vec<_>>())?;
        }
        Ok(store)
    }

    pub fn check_finite(&self) -> Result<(), EncoderError> {
        if self.weights.iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(EncoderError::NonFinite("encoder weights".into()))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + self.weights.len() * 8);
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&(self.hash_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.output_dim as u32).to_le_bytes());
        out.push(u8::from(self.normalize_output));
        out.extend_from_slice(&(self.max_tokens as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, EncoderError> {
        let bad = |m: &str| EncoderError::Format { path: origin.to_string(), message: m.to_string() };
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != PARAMS_MAGIC {
            return Err(bad("not an encoder checkpoint"));
        }
        let hash_dim = read_u32(&mut r).map_err(|_| bad("truncated header"))? as usize;
        let output_dim = read_u32(&mut r).map_err(|_| bad("truncated header"))? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(|_| bad("truncated header"))?;
        let max_tokens = read_u32(&mut r).map_err(|_| bad("truncated header"))? as usize;
        let seed = read_u64(&mut r).map_err(|_| bad("truncated header"))?;
        let n = hash_dim.checked_mul(output_dim).ok_or_else(|| bad("dimensions overflow"))?;
        if r.len() != n * 8 {
            return Err(bad(&format!("expected {} weight bytes, found {}", n * 8, r.len())));
        }
        let weights = r.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let p = Self { hash_dim, output_dim, weights, normalize_output: flag[0] != 0, max_tokens, seed };
        p.check_finite()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        Ok(write_atomic(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Self::from_bytes(&fs::read(path)?, &path.display().to_string())
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn read_u32(r: &mut &[u8]) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Id → f32 vector map with a fixed dimension, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub model: String,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct StoreLine {
    id: String,
    model: String,
    vector: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(model: &str, dim: usize) -> Self {
        Self { model: model.to_string(), dim, ids: Vec::new(), data: Vec::new(), index: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn insert(&mut self, id: &str, v: &[f32]) -> Result<(), EncoderError> {
        if v.len() != self.dim {
            return Err(EncoderError::DimensionMismatch {
                expected: self.dim,
                found: v.len(),
                context: format!("embedding {id:?}"),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EncoderError::NonFinite(format!("embedding {id:?}")));
        }
        if self.index.contains_key(id) {
            return Err(EncoderError::DuplicateId(id.to_string()));
        }
        self.index.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.vector(i))
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), self.vector(i)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.data.len() * 4 + self.ids.len() * 16);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.model.len() as u32).to_le_bytes());
        out.extend_from_slice(self.model.as_bytes());
        for (id, v) in self.iter() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, EncoderError> {
        let bad = |m: String| EncoderError::Format { path: origin.to_string(), message: m };
        let trunc = |_| bad("truncated".into());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != STORE_MAGIC {
            return Err(bad("not an embedding store".into()));
        }
        let dim = read_u32(&mut r).map_err(trunc)? as usize;
        let count = read_u64(&mut r).map_err(trunc)?;
        let model = read_string(&mut r).map_err(|e| bad(e.to_string()))?;
        let mut store = Self::new(&model, dim);
        let mut buf = vec![0u8; dim * 4];
        for _ in 0..count {
            let id = read_string(&mut r).map_err(|e| bad(e.to_string()))?;
            r.read_exact(&mut buf).map_err(trunc)?;
            let v: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            store.insert(&id, &v)?;
        }
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        Ok(store)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, v) in self.iter() {
            let line = StoreLine { id: id.to_string(), model: self.model.clone(), vector: v.to_vec() };
            out.push_str(&serde_json::to_string(&line).expect("store line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self, EncoderError> {
        let mut store: Option<Self> = None;
        for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line: StoreLine = serde_json::from_str(l).map_err(|e| EncoderError::Format {
                path: origin.to_string(),
                message: format!("line {}: {e}", i + 1),
            })?;
            let s = store.get_or_insert_with(|| Self::new(&line.model, line.vector.len()));
            s.insert(&line.id, &line.vector)?;
        }
        Ok(store.unwrap_or_else(|| Self::new("", 0)))
    }
}

fn read_string(r: &mut &[u8]) -> io::Result<String> {
    let len = read_u32(r)? as usize;
    if r.len() < len {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated string"));
    }
    let (s, rest) = r.split_at(len);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl" || e == "json")
}

/// Read a store; `.jsonl` files use the line format, anything else the binary one.
pub fn import_embeddings(path: &Path) -> Result<EmbeddingStore, EncoderError> {
    let origin = path.display().to_string();
    if is_jsonl(path) {
        EmbeddingStore::from_jsonl(&fs::read_to_string(path)?, &origin)
    } else {
        EmbeddingStore::from_bytes(&fs::read(path)?, &origin)
    }
}

pub fn export_embeddings(store: &EmbeddingStore, path: &Path) -> Result<(), EncoderError> {
    let bytes = if is_jsonl(path) { store.to_jsonl().into_bytes() } else { store.to_bytes() };
    write_atomic(path, &bytes)?;
    Ok(())
}
