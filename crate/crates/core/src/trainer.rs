//! Contrastive fine-tuning of [`EncoderParams`] with the NT-Xent loss over
//! in-batch negatives, AdamW and a cosine learning-rate schedule.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::write_atomic;
use crate::encoder::{dropout_features, l2_norm, EncoderError, EncoderParams, SparseFeatures};
use crate::par::{self, Execution};
use crate::seed::{derive_seed_indexed, permutation};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("trainer precondition violated: {pairs} training pairs < batch size N = {batch} (need |pairs| >= N)")]
    TooFewPairs { pairs: usize, batch: usize },
    #[error("query and document counts differ ({0} vs {1})")]
    BatchShape(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("gradient has {found} entries, weights have {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("io: {0}")]
    Io(String),
}

fn default_temperature() -> f64 {
    0.05
}
fn default_batch_size() -> usize {
    80
}
fn default_accumulation() -> usize {
    20
}
fn default_epochs() -> usize {
    1
}
fn default_learning_rate() -> f64 {
    1e-5
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_dropout() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_accumulation")]
    pub accumulation_steps: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Feature dropout rate for the self-supervised baseline.
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.accumulation_steps < 1 {
            return bad("accumulation_steps must be at least 1");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 || self.weight_decay < 0.0 {
            return bad("epsilon must be positive and weight_decay non-negative");
        }
        if self.warmup_steps != 0 {
            return bad("learning-rate warm-up is not supported; set warmup_steps to 0");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW { beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon, weight_decay: self.weight_decay }
    }

    /// Optimizer steps: `ceil(minibatches / A) × epochs`.
    pub fn total_steps(&self, pairs: usize) -> usize {
        (pairs / self.batch_size).div_ceil(self.accumulation_steps) * self.epochs
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major `N × N` matrix of `⟨q_i, d_j⟩ / τ`.
fn logits(q: &[Vec<f64>], d: &[Vec<f64>], tau: f64) -> Vec<f64> {
    q.iter().flat_map(|qi| d.iter().map(move |dj| dot(qi, dj) / tau)).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_batch(q: &[Vec<f64>], d: &[Vec<f64>], tau: f64) -> Result<(), TrainError> {
    if q.len() != d.len() {
        return Err(TrainError::BatchShape(q.len(), d.len()));
    }
    if q.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(TrainError::Config("temperature must be positive".into()));
    }
    if q.iter().chain(d).flatten().any(|x| !x.is_finite()) {
        return Err(TrainError::NonFinite("embedding"));
    }
    Ok(())
}

/// Per-row losses `-log softmax_i(S)_{ii}`.
pub fn ntxent_rows(q: &[Vec<f64>], d: &[Vec<f64>], tau: f64) -> Result<Vec<f64>, TrainError> {
    check_batch(q, d, tau)?;
    let n = q.len();
    let s = logits(q, d, tau);
    Ok((0..n).map(|i| {
        let row = &s[i * n..(i + 1) * n];
        log_sum_exp(row) - row[i]
    })
    .collect())
}

/// Mean NT-Xent loss of aligned query/document embeddings.
pub fn ntxent_loss(q: &[Vec<f64>], d: &[Vec<f64>], tau: f64) -> Result<f64, TrainError> {
    let rows = ntxent_rows(q, d, tau)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Back-propagate `g = ∂L/∂e` through `e = u/‖u‖`.
fn through_normalization(e: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; g.len()];
    }
    let proj = dot(e, g);
    g.iter().zip(e).map(|(gi, ei)| (gi - ei * proj) / norm).collect()
}

struct Forward {
    emb: Vec<f64>,
    norm: f64,
}

fn forward(params: &EncoderParams, x: &SparseFeatures) -> Forward {
    let u = params.project(x);
    if params.normalize_output {
        let norm = l2_norm(&u);
        let emb = if norm > 0.0 { u.iter().map(|v| v / norm).collect() } else { u };
        Forward { emb, norm }
    } else {
        Forward { emb: u, norm: 1.0 }
    }
}

/// Loss of one batch, adding `scale × ∂L/∂W` into `grad`.
///
/// Projections fan out across texts; the scatter into `grad` is sequential
/// so the result does not depend on the execution mode.
pub fn ntxent_accumulate(
    params: &EncoderParams,
    queries: &[&SparseFeatures],
    docs: &[&SparseFeatures],
    tau: f64,
    scale: f64,
    grad: &mut [f64],
    exec: Execution,
) -> Result<f64, TrainError> {
    if grad.len() != params.weights.len() {
        return Err(TrainError::ShapeMismatch { expected: params.weights.len(), found: grad.len() });
    }
    let n = queries.len();
    let all: Vec<&SparseFeatures> = queries.iter().chain(docs).copied().collect();
    let fwd = par::map(exec, &all, |x| forward(params, x));
    let (fq, fd) = fwd.split_at(n);
    let q: Vec<Vec<f64>> = fq.iter().map(|f| f.emb.clone()).collect();
    let d: Vec<Vec<f64>> = fd.iter().map(|f| f.emb.clone()).collect();
    check_batch(&q, &d, tau)?;

    let s = logits(&q, &d, tau);
    let mut loss = 0.0;
    // G = (softmax(S) - I) / N
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        let row = &s[i * n..(i + 1) * n];
        let lse = log_sum_exp(row);
        loss += lse - row[i];
        for j in 0..n {
            g[i * n + j] = ((row[j] - lse).exp() - f64::from(u8::from(i == j))) / n as f64;
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite("loss"));
    }

    let dim = params.output_dim;
    let grads_e: Vec<Vec<f64>> = (0..2 * n)
        .map(|t| {
            let mut acc = vec![0.0; dim];
            for k in 0..n {
                let (w, other) = if t < n { (g[t * n + k], &d[k]) } else { (g[k * n + (t - n)], &q[k]) };
                for (a, o) in acc.iter_mut().zip(other) {
                    *a += w * o / tau;
                }
            }
            acc
        })
        .collect();

    for (t, (x, ge)) in all.iter().zip(&grads_e).enumerate() {
        let f = &fwd[t];
        let gu = if params.normalize_output { through_normalization(&f.emb, f.norm, ge) } else { ge.clone() };
        for (&k, &v) in x.index.iter().zip(&x.value) {
            let base = k as usize * dim;
            for (dst, gj) in grad[base..base + dim].iter_mut().zip(&gu) {
                *dst += scale * v * gj;
            }
        }
    }
    Ok(loss)
}

/// Loss and `∂L/∂W` for one batch of feature pairs.
pub fn ntxent_grad(
    params: &EncoderParams,
    queries: &[&SparseFeatures],
    docs: &[&SparseFeatures],
    tau: f64,
    exec: Execution,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut grad = vec![0.0; params.weights.len()];
    let loss = ntxent_accumulate(params, queries, docs, tau, 1.0, &mut grad, exec)?;
    Ok((loss, grad))
}

/// Loss of a batch of text pairs under `params`.
pub fn batch_loss(params: &EncoderParams, pairs: &[(&str, &str)], tau: f64) -> Result<f64, TrainError> {
    let q = pairs.iter().map(|(a, _)| params.embed(a)).collect::<Result<Vec<_>, _>>()?;
    let d = pairs.iter().map(|(_, b)| params.embed(b)).collect::<Result<Vec<_>, _>>()?;
    ntxent_loss(&q, &d, tau)
}

/// `lr₀ · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let t = step.min(total_steps) as f64 / total_steps.max(1) as f64;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        TrainConfig::default().adamw()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn adamw_step(
    weights: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamW,
) -> Result<(), TrainError> {
    if grads.len() != weights.len() || state.m.len() != weights.len() {
        return Err(TrainError::ShapeMismatch { expected: weights.len(), found: grads.len() });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - lr * hp.weight_decay;
    for (((w, &g), m), v) in weights.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        *w *= decay;
        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + hp.epsilon);
    }
    Ok(())
}

/// Where training pairs come from.
#[derive(Debug, Clone, Copy)]
pub enum PairSource<'a> {
    /// Aligned (query, document) texts.
    Texts(&'a [(String, String)]),
    /// Two dropout views of each document.
    Dropout(&'a [String]),
}

impl PairSource<'_> {
    fn len(&self) -> usize {
        match self {
            PairSource::Texts(p) => p.len(),
            PairSource::Dropout(d) => d.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// Loss of every minibatch, in training order.
    pub minibatch: Vec<f64>,
    /// Mean minibatch loss of each optimizer step.
    pub step: Vec<f64>,
    /// Mean minibatch loss of each epoch.
    pub epoch: Vec<f64>,
    /// Every minibatch again, re-scored with the weights at the end of its
    /// epoch (same pairs, same negatives). Aligned with `minibatch`.
    pub revisited: Vec<f64>,
}

impl LossCurve {
    /// Mean of `revisited` over one epoch.
    pub fn epoch_end(&self, epoch: usize, minibatches_per_epoch: usize) -> f64 {
        mean(&self.revisited[epoch * minibatches_per_epoch..(epoch + 1) * minibatches_per_epoch])
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub losses: LossCurve,
    pub optimizer_steps: usize,
    pub total_steps: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Fine-tune `params` on `source`.
///
/// Each epoch reshuffles with a seed derived from `cfg.seed`, cuts full
/// minibatches of `batch_size` (a trailing remainder is dropped) and averages
/// gradients over groups of `accumulation_steps` minibatches before each
/// optimizer step. Negatives never cross minibatch boundaries.
pub fn train(
    mut params: EncoderParams,
    source: PairSource<'_>,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let n_pairs = source.len();
    if n_pairs < cfg.batch_size {
        return Err(TrainError::TooFewPairs { pairs: n_pairs, batch: cfg.batch_size });
    }
    let base: Vec<(SparseFeatures, SparseFeatures)> = match source {
        PairSource::Texts(pairs) => par::try_map(exec, pairs, |(q, d)| {
            Ok::<_, EncoderError>((params.featurize(q)?, params.featurize(d)?))
        })?,
        PairSource::Dropout(docs) => par::try_map(exec, docs, |d| {
            let x = params.featurize(d)?;
            Ok::<_, EncoderError>((x.clone(), x))
        })?,
    };
    let dropout = matches!(source, PairSource::Dropout(_));

    let minibatches = n_pairs / cfg.batch_size;
    let groups = minibatches.div_ceil(cfg.accumulation_steps);
    let total_steps = cfg.total_steps(n_pairs);
    let hp = cfg.adamw();
    let mut opt = OptimizerState::new(params.weights.len());
    let mut grad = vec![0.0; params.weights.len()];
    let mut curve = LossCurve { minibatch: Vec::new(), step: Vec::new(), epoch: Vec::new(), revisited: Vec::new() };
    let mut step = 0;

    // Dropout views are a pure function of (seed, epoch, pair), so a batch
    // can be rebuilt exactly when it is re-scored.
    let views_for = |epoch: usize, idx: &[usize]| -> Result<Vec<(SparseFeatures, SparseFeatures)>, EncoderError> {
        let seed = derive_seed_indexed(cfg.seed, "dropout", epoch as u64);
        par::try_map(exec, idx, |&i| {
            let s = derive_seed_indexed(seed, "pair", i as u64);
            Ok((
                dropout_features(&base[i].0, cfg.dropout_rate, derive_seed_indexed(s, "view", 0))?,
                dropout_features(&base[i].1, cfg.dropout_rate, derive_seed_indexed(s, "view", 1))?,
            ))
        })
    };

    for epoch in 0..cfg.epochs {
        let order = permutation(n_pairs, derive_seed_indexed(cfg.seed, "shuffle", epoch as u64));
        let batch = |b: usize| &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
        let epoch_start = curve.minibatch.len();
        for group in 0..groups {
            let first = group * cfg.accumulation_steps;
            let members = cfg.accumulation_steps.min(minibatches - first);
            grad.iter_mut().for_each(|g| *g = 0.0);
            let group_start = curve.minibatch.len();
            for b in first..first + members {
                let idx = batch(b);
                let views: Vec<(SparseFeatures, SparseFeatures)>;
                let (q, d): (Vec<&SparseFeatures>, Vec<&SparseFeatures>) = if dropout {
                    views = views_for(epoch, idx)?;
                    views.iter().map(|(a, b)| (a, b)).unzip()
                } else {
                    idx.iter().map(|&i| (&base[i].0, &base[i].1)).unzip()
                };
                let loss = ntxent_accumulate(
                    &params,
                    &q,
                    &d,
                    cfg.temperature,
                    1.0 / members as f64,
                    &mut grad,
                    exec,
                )?;
                curve.minibatch.push(loss);
            }
            let lr = cosine_lr(step, total_steps, cfg.learning_rate);
            adamw_step(&mut params.weights, &grad, &mut opt, lr, &hp)?;
            curve.step.push(mean(&curve.minibatch[group_start..]));
            step += 1;
        }
        curve.epoch.push(mean(&curve.minibatch[epoch_start..]));
        for b in 0..minibatches {
            let idx = batch(b);
            let views: Vec<(SparseFeatures, SparseFeatures)>;
            let pairs: Vec<(&SparseFeatures, &SparseFeatures)> = if dropout {
                views = views_for(epoch, idx)?;
                views.iter().map(|(a, b)| (a, b)).collect()
            } else {
                idx.iter().map(|&i| (&base[i].0, &base[i].1)).collect()
            };
            let emb = par::map(exec, &pairs, |(q, d)| (params.embed_features(q), params.embed_features(d)));
            let (q, d): (Vec<Vec<f64>>, Vec<Vec<f64>>) = emb.into_iter().unzip();
            curve.revisited.push(ntxent_loss(&q, &d, cfg.temperature)?);
        }
    }
    params.check_finite()?;
    Ok(TrainOutcome { params, losses: curve, optimizer_steps: step, total_steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub hash_dim: usize,
    pub output_dim: usize,
    pub normalize_output: bool,
    pub truncation: usize,
    pub train: Option<TrainConfig>,
    pub optimizer_steps: usize,
    pub final_loss: Option<f64>,
    pub losses: Option<LossCurve>,
}

impl CheckpointMeta {
    pub fn untrained(params: &EncoderParams) -> Self {
        Self {
            hash_dim: params.hash_dim,
            output_dim: params.output_dim,
            normalize_output: params.normalize_output,
            truncation: params.max_tokens,
            train: None,
            optimizer_steps: 0,
            final_loss: None,
            losses: None,
        }
    }

    pub fn trained(outcome: &TrainOutcome, cfg: &TrainConfig) -> Self {
        Self {
            train: Some(cfg.clone()),
            optimizer_steps: outcome.optimizer_steps,
            final_loss: outcome.losses.minibatch.last().copied(),
            losses: Some(outcome.losses.clone()),
            ..Self::untrained(&outcome.params)
        }
    }
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write the weights and the JSON sidecar next to them.
pub fn save_checkpoint(path: &Path, params: &EncoderParams, meta: &CheckpointMeta) -> Result<(), TrainError> {
    params.save(path)?;
    let json = serde_json::to_string_pretty(meta).expect("meta serializes") + "\n";
    write_atomic(&sidecar_path(path), json.as_bytes()).map_err(|e| TrainError::Io(e.to_string()))
}

pub fn load_checkpoint_meta(path: &Path) -> Result<CheckpointMeta, TrainError> {
    let p = sidecar_path(path);
    let text = fs::read_to_string(&p).map_err(|e| TrainError::Io(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| TrainError::Io(format!("{}: {e}", p.display())))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;
    use crate::seed::rng_from_seed;
    use rand::Rng;

    fn naive_loss(q: &[Vec<f64>], d: &[Vec<f64>], tau: f64) -> f64 {
        let n = q.len();
        let mut total = 0.0;
        for i in 0..n {
            let mut denom = 0.0;
            for j in 0..n {
                let s: f64 = (0..q[i].len()).map(|k| q[i][k] * d[j][k]).sum();
                denom += (s / tau).exp();
            }
            let s: f64 = (0..q[i].len()).map(|k| q[i][k] * d[i][k]).sum();
            total += -((s / tau).exp() / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn closed_form_two_by_two() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = ntxent_loss(&q, &q, 1.0).unwrap();
        assert!((l - (1.0f64 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn single_pair_loss_is_zero() {
        assert_eq!(ntxent_loss(&[vec![0.3, -2.0]], &[vec![5.0, 1.0]], 0.05).unwrap(), 0.0);
    }

    #[test]
    fn matches_naive_oracle_and_is_permutation_invariant() {
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            let n = rng.random_range(1..7);
            let dim = rng.random_range(1..6);
            let tau = rng.random_range(0.3..2.0);
            let mut v = || (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<Vec<f64>>>();
            let (q, d) = (v(), v());
            let l = ntxent_loss(&q, &d, tau).unwrap();
            assert!((l - naive_loss(&q, &d, tau)).abs() < 1e-10);
            let perm = permutation(n, n as u64);
            let qp: Vec<_> = perm.iter().map(|&i| q[i].clone()).collect();
            let dp: Vec<_> = perm.iter().map(|&i| d[i].clone()).collect();
            assert!((ntxent_loss(&qp, &dp, tau).unwrap() - l).abs() < 1e-12);
            if n >= 2 {
                assert!(l > 0.0);
            }
        }
    }

    #[test]
    fn constant_similarity_gives_log_n() {
        let q = vec![vec![1.0, 1.0]; 5];
        assert!((ntxent_loss(&q, &q, 0.5).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(ntxent_loss(&[vec![f64::NAN]], &[vec![1.0]], 1.0).is_err());
    }

    fn random_params(rng: &mut impl Rng, d: usize, n: usize, normalize: bool) -> EncoderParams {
        let mut p = init_encoder(d, n, rng.random()).unwrap();
        p.normalize_output = normalize;
        p.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        p
    }

    fn random_features(rng: &mut impl Rng, d: usize) -> SparseFeatures {
        let nnz = rng.random_range(1..=d.min(6));
        let mut idx: Vec<u32> = (0..d as u32).collect();
        crate::seed::fisher_yates_prefix(&mut idx, nnz, rng.random());
        let mut index = idx[..nnz].to_vec();
        index.sort_unstable();
        let value: Vec<f64> = (0..nnz).map(|_| rng.random_range(0.1..1.0)).collect();
        let norm = l2_norm(&value);
        SparseFeatures { index, value: value.iter().map(|v| v / norm).collect() }
    }

    fn loss_of(p: &EncoderParams, q: &[&SparseFeatures], d: &[&SparseFeatures], tau: f64) -> f64 {
        let e = |xs: &[&SparseFeatures]| xs.iter().map(|x| p.embed_features(x)).collect::<Vec<_>>();
        ntxent_loss(&e(q), &e(d), tau).unwrap()
    }

    fn max_rel_err(p: &EncoderParams, q: &[&SparseFeatures], d: &[&SparseFeatures], tau: f64) -> f64 {
        let (_, g) = ntxent_grad(p, q, d, tau, Execution::Sequential).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..p.weights.len() {
            let mut plus = p.clone();
            plus.weights[k] += h;
            let mut minus = p.clone();
            minus.weights[k] -= h;
            let fd = (loss_of(&plus, q, d, tau) - loss_of(&minus, q, d, tau)) / (2.0 * h);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(2);
        for case in 0..30 {
            let d = rng.random_range(4..=32);
            let n = rng.random_range(1..=d.min(6));
            let b = rng.random_range(1..=5);
            let tau = rng.random_range(0.2..1.5);
            let p = random_params(&mut rng, d, n, case % 2 == 0);
            let qs: Vec<_> = (0..b).map(|_| random_features(&mut rng, d)).collect();
            let ds: Vec<_> = (0..b).map(|_| random_features(&mut rng, d)).collect();
            let q: Vec<&SparseFeatures> = qs.iter().collect();
            let dd: Vec<&SparseFeatures> = ds.iter().collect();
            let err = max_rel_err(&p, &q, &dd, tau);
            assert!(err < 1e-4, "case {case}: {err}");
            let err = max_rel_err(&p, &q, &dd, tau / 2.0);
            assert!(err < 1e-4, "case {case} halved tau: {err}");
        }
    }

    #[test]
    fn gradient_at_zero_weights_and_duplicated_batch() {
        let mut rng = rng_from_seed(3);
        let mut p = random_params(&mut rng, 16, 4, false);
        p.weights.iter_mut().for_each(|w| *w = 0.0);
        let xs: Vec<_> = (0..3).map(|_| random_features(&mut rng, 16)).collect();
        let ys: Vec<_> = (0..3).map(|_| random_features(&mut rng, 16)).collect();
        let q: Vec<_> = xs.iter().collect();
        let d: Vec<_> = ys.iter().collect();
        assert!(max_rel_err(&p, &q, &d, 0.5) < 1e-4);

        let p = random_params(&mut rng, 16, 4, true);
        let q = vec![&xs[0]; 4];
        let d = vec![&ys[0]; 4];
        assert!((loss_of(&p, &q, &d, 0.3) - 4f64.ln()).abs() < 1e-12);
        assert!(max_rel_err(&p, &q, &d, 0.3) < 1e-4);
        let (l, g) = ntxent_grad(&p, &q[..1], &d[..1], 0.3, Execution::Sequential).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_is_identical_across_execution_modes() {
        let mut rng = rng_from_seed(4);
        let p = random_params(&mut rng, 64, 8, true);
        let xs: Vec<_> = (0..6).map(|_| random_features(&mut rng, 64)).collect();
        let refs: Vec<_> = xs.iter().collect();
        let a = ntxent_grad(&p, &refs[..3], &refs[3..], 0.05, Execution::Sequential).unwrap();
        let b = ntxent_grad(&p, &refs[..3], &refs[3..], 0.05, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 10, 0.1), 0.1);
        assert!(cosine_lr(10, 10, 0.1).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 0.1) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(3, 10, 0.1) > cosine_lr(4, 10, 0.1));
    }

    #[test]
    fn adamw_cases() {
        let hp = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let mut w = vec![1.0, -2.0];
        let mut st = OptimizerState::new(2);
        st.m = vec![0.5, 0.5];
        st.v = vec![0.5, 0.5];
        adamw_step(&mut w, &[0.0, 0.0], &mut st, 0.1, &hp).unwrap();
        assert!((st.m[0] - 0.45).abs() < 1e-15 && (st.v[0] - 0.4995).abs() < 1e-15);
        let mut w = vec![1.0, -2.0];
        let mut st = OptimizerState::new(2);
        adamw_step(&mut w, &[0.0, 0.0], &mut st, 0.1, &hp).unwrap();
        assert_eq!(w, vec![1.0, -2.0]);

        // First step: m̂ = g, v̂ = g², so Δw = -lr·g/(|g|+ε).
        let g = 0.3;
        let mut w = vec![2.0];
        let mut st = OptimizerState::new(1);
        adamw_step(&mut w, &[g], &mut st, 0.01, &hp).unwrap();
        assert!((w[0] - (2.0 - 0.01 * g / (g + 1e-8))).abs() < 1e-15);

        let hp = AdamW { weight_decay: 0.1, ..AdamW::default() };
        let mut w = vec![2.0, -4.0];
        let mut st = OptimizerState::new(2);
        adamw_step(&mut w, &[0.0, 0.0], &mut st, 0.5, &hp).unwrap();
        assert_eq!(w, vec![2.0 * 0.95, -4.0 * 0.95]);
        assert!(adamw_step(&mut w, &[f64::INFINITY, 0.0], &mut st, 0.5, &hp).is_err());
    }

    fn toy_pairs(n: usize) -> Vec<(String, String)> {
        (0..n)
            .map(|i| {
                let sig = format!("sig{i}a sig{i}b");
                (sig.clone(), format!("common words everywhere {sig} filler text topic{}", i % 5))
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            accumulation_steps: 2,
            learning_rate: 1e-2,
            temperature: 0.1,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let pairs = toy_pairs(40);
        let p = init_encoder(512, 16, 1).unwrap();
        let cfg = TrainConfig { epochs: 3, ..small_cfg() };
        let a = train(p.clone(), PairSource::Texts(&pairs), &cfg, Execution::Parallel).unwrap();
        let b = train(p, PairSource::Texts(&pairs), &cfg, Execution::Sequential).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.losses, b.losses);
        // 5 minibatches per epoch, groups of 2 → 3 steps per epoch.
        assert_eq!(a.optimizer_steps, 9);
        assert_eq!(a.total_steps, 9);
        assert_eq!(a.losses.minibatch.len(), 15);
        assert!(a.losses.epoch[2] < a.losses.step[0]);
    }

    #[test]
    fn single_accumulation_matches_plain_descent() {
        let pairs = toy_pairs(24);
        let p0 = init_encoder(256, 8, 2).unwrap();
        let cfg = TrainConfig { accumulation_steps: 1, epochs: 2, ..small_cfg() };
        let out = train(p0.clone(), PairSource::Texts(&pairs), &cfg, Execution::Sequential).unwrap();

        let mut p = p0;
        let mut st = OptimizerState::new(p.weights.len());
        let mut losses = Vec::new();
        let total = (pairs.len() / cfg.batch_size) * cfg.epochs;
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let order = permutation(pairs.len(), derive_seed_indexed(cfg.seed, "shuffle", epoch as u64));
            for chunk in order.chunks_exact(cfg.batch_size) {
                let qs: Vec<_> = chunk.iter().map(|&i| p.featurize(&pairs[i].0).unwrap()).collect();
                let ds: Vec<_> = chunk.iter().map(|&i| p.featurize(&pairs[i].1).unwrap()).collect();
                let (l, g) = ntxent_grad(
                    &p,
                    &qs.iter().collect::<Vec<_>>(),
                    &ds.iter().collect::<Vec<_>>(),
                    cfg.temperature,
                    Execution::Sequential,
                )
                .unwrap();
                losses.push(l);
                adamw_step(&mut p.weights, &g, &mut st, cosine_lr(step, total, cfg.learning_rate), &cfg.adamw()).unwrap();
                step += 1;
            }
        }
        assert_eq!(out.losses.minibatch, losses);
        assert_eq!(out.params.weights, p.weights);
    }

    #[test]
    fn partial_accumulation_group_and_errors() {
        let pairs = toy_pairs(26);
        let p = init_encoder(256, 8, 2).unwrap();
        let cfg = TrainConfig { accumulation_steps: 2, ..small_cfg() };
        // 3 full minibatches of 8, remainder 2 dropped; groups {0,1}, {2}.
        let out = train(p.clone(), PairSource::Texts(&pairs), &cfg, Execution::Sequential).unwrap();
        assert_eq!(out.losses.minibatch.len(), 3);
        assert_eq!(out.optimizer_steps, 2);
        assert!(matches!(
            train(p.clone(), PairSource::Texts(&pairs[..5]), &cfg, Execution::Sequential),
            Err(TrainError::TooFewPairs { pairs: 5, batch: 8 })
        ));
        let bad = TrainConfig { warmup_steps: 3, ..cfg };
        assert!(matches!(train(p, PairSource::Texts(&pairs), &bad, Execution::Sequential), Err(TrainError::Config(_))));
    }

    #[test]
    fn dropout_baseline_trains() {
        let docs: Vec<String> = toy_pairs(32).into_iter().map(|(_, d)| d).collect();
        let p = init_encoder(512, 16, 3).unwrap();
        let cfg = TrainConfig { dropout_rate: 0.3, ..small_cfg() };
        let a = train(p.clone(), PairSource::Dropout(&docs), &cfg, Execution::Parallel).unwrap();
        let b = train(p.clone(), PairSource::Dropout(&docs), &cfg, Execution::Sequential).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params.weights, p.weights);
    }

    #[test]
    fn defaults_and_checkpoint_round_trip() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.temperature, cfg.batch_size, cfg.accumulation_steps), (0.05, 80, 20));
        assert_eq!((cfg.epochs, cfg.learning_rate, cfg.warmup_steps), (1, 1e-5, 0));
        assert_eq!(cfg.total_steps(1600), 1);
        assert_eq!(cfg.total_steps(1700), 2);
        let p = init_encoder(64, 4, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &p, &CheckpointMeta::untrained(&p)).unwrap();
        assert_eq!(EncoderParams::load(&path).unwrap(), p);
        assert_eq!(load_checkpoint_meta(&path).unwrap().truncation, 512);
    }
}
