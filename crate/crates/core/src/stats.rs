//! Multi-seed comparison against a baseline method: t-tests, Bonferroni
//! correction and the significance report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::metrics::{Metric, MetricSuite};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least 2 samples per group, got {0} and {1}")]
    TooFewSamples(usize, usize),
    #[error("paired test needs equal sample counts, got {0} and {1}")]
    Unpaired(usize, usize),
    #[error("non-finite sample")]
    NonFinite,
    #[error("baseline method {0:?} not found in trials")]
    MissingBaseline(String),
    #[error("method {method:?} has seeds {found:?}, baseline has {expected:?}")]
    SeedMismatch { method: String, expected: Vec<u64>, found: Vec<u64> },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn two_sided(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.cdf(-t.abs())).min(1.0)
}

fn degenerate(diff: f64, df: f64) -> TTest {
    if diff == 0.0 {
        TTest { t: 0.0, df, p: 1.0 }
    } else {
        TTest { t: diff.signum() * f64::INFINITY, df, p: 0.0 }
    }
}

fn check(a: &[f64], b: &[f64]) -> Result<(), StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::TooFewSamples(a.len(), b.len()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

/// Unequal-variance two-sample t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest, StatsError> {
    check(a, b)?;
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(degenerate(ma - mb, (a.len() + b.len() - 2) as f64));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    Ok(TTest { t, df, p: two_sided(t, df) })
}

/// Paired t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, StatsError> {
    check(a, b)?;
    if a.len() != b.len() {
        return Err(StatsError::Unpaired(a.len(), b.len()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (m, v) = mean_var(&d);
    let df = (d.len() - 1) as f64;
    if v == 0.0 {
        return Ok(degenerate(m, df));
    }
    let t = m / (v / d.len() as f64).sqrt();
    Ok(TTest { t, df, p: two_sided(t, df) })
}

/// `min(1, p·m)`.
pub fn bonferroni_adjust(raw_p: f64, m: usize) -> f64 {
    (raw_p * m.max(1) as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Up,
    Down,
    None,
}

impl Verdict {
    pub fn decide(delta: f64, adjusted_p: f64, alpha: f64) -> Self {
        if adjusted_p < alpha && delta > 0.0 {
            Verdict::Up
        } else if adjusted_p < alpha && delta < 0.0 {
            Verdict::Down
        } else {
            Verdict::None
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Up => "up",
            Verdict::Down => "down",
            Verdict::None => "none",
        }
    }

    fn arrow(self) -> &'static str {
        match self {
            Verdict::Up => " ↑",
            Verdict::Down => " ↓",
            Verdict::None => "",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TestMode {
    #[default]
    Welch,
    Paired,
}

/// method → seed → metrics.
pub type TrialMatrix = BTreeMap<String, BTreeMap<u64, MetricSuite>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub delta: f64,
    pub t: f64,
    pub df: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub baseline: String,
    pub m: usize,
    pub alpha: f64,
    pub mode: TestMode,
    /// Metric name → baseline mean, in `[0, 1]`.
    pub baseline_means: BTreeMap<String, f64>,
    /// Method-major, metrics in [`Metric::ALL`] order.
    pub rows: Vec<Comparison>,
}

fn samples(trials: &BTreeMap<u64, MetricSuite>, m: Metric) -> Vec<f64> {
    trials.values().map(|s| s.get(m)).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Test every non-baseline method against `baseline` on every metric.
pub fn compare_to_baseline(
    trials: &TrialMatrix,
    baseline: &str,
    m: usize,
    alpha: f64,
    mode: TestMode,
) -> Result<SignificanceReport, StatsError> {
    if m == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::Invalid(format!("m = {m}, alpha = {alpha}")));
    }
    let base = trials.get(baseline).ok_or_else(|| StatsError::MissingBaseline(baseline.to_string()))?;
    let base_seeds: BTreeSet<u64> = base.keys().copied().collect();
    let mut baseline_means = BTreeMap::new();
    for metric in Metric::ALL {
        baseline_means.insert(metric.name().to_string(), mean(&samples(base, metric)));
    }
    let mut rows = Vec::new();
    for (method, runs) in trials {
        if method == baseline {
            continue;
        }
        let seeds: BTreeSet<u64> = runs.keys().copied().collect();
        if seeds != base_seeds {
            return Err(StatsError::SeedMismatch {
                method: method.clone(),
                expected: base_seeds.into_iter().collect(),
                found: seeds.into_iter().collect(),
            });
        }
        for metric in Metric::ALL {
            let a = samples(runs, metric);
            let b = samples(base, metric);
            let test = match mode {
                TestMode::Welch => welch_t_test(&a, &b)?,
                TestMode::Paired => paired_t_test(&a, &b)?,
            };
            let delta = mean(&a) - mean(&b);
            let p_adjusted = bonferroni_adjust(test.p, m);
            rows.push(Comparison {
                method: method.clone(),
                metric: metric.name().to_string(),
                mean: mean(&a),
                delta,
                t: test.t,
                df: test.df,
                p_raw: test.p,
                p_adjusted,
                verdict: Verdict::decide(delta, p_adjusted, alpha),
            });
        }
    }
    Ok(SignificanceReport { baseline: baseline.to_string(), m, alpha, mode, baseline_means, rows })
}

impl SignificanceReport {
    /// Markdown table: one row per method, one column per metric, values ×100.
    pub fn to_markdown(&self, title: &str) -> String {
        let mut out = format!("### {title}\n\n| Method |");
        for m in Metric::ALL {
            let _ = write!(out, " {} |", m.name());
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(Metric::ALL.len()));
        out.push('\n');
        let _ = write!(out, "| {} |", self.baseline);
        for m in Metric::ALL {
            let _ = write!(out, " {:.2} |", self.baseline_means[m.name()] * 100.0);
        }
        out.push('\n');
        let mut methods: Vec<&str> = self.rows.iter().map(|r| r.method.as_str()).collect();
        methods.dedup();
        for method in methods {
            let _ = write!(out, "| {method} |");
            for r in self.rows.iter().filter(|r| r.method == method) {
                let _ = write!(out, " {:.2} Δ{:+.2}{} |", r.mean * 100.0, r.delta * 100.0, r.verdict.arrow());
            }
            out.push('\n');
        }
        let _ = write!(
            out,
            "\n{} test against `{}`, two-sided, Bonferroni m = {}, α = {}. ↑/↓ mark significant changes.\n",
            match self.mode {
                TestMode::Welch => "Welch",
                TestMode::Paired => "Paired",
            },
            self.baseline,
            self.m,
            self.alpha
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,metric,mean,baseline_mean,delta,t,df,p_raw,p_adjusted,verdict\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.8},{:.8},{}",
                csv_field(&r.method),
                r.metric,
                r.mean * 100.0,
                self.baseline_means[&r.metric] * 100.0,
                r.delta * 100.0,
                r.t,
                r.df,
                r.p_raw,
                r.p_adjusted,
                r.verdict.as_str()
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Read `<dir>/<method>/seed_<n>.json` metric files.
pub fn load_trials(dir: &Path) -> Result<TrialMatrix, StatsError> {
    let io = |p: &Path, e: &dyn std::fmt::Display| StatsError::Io(format!("{}: {e}", p.display()));
    let mut trials = TrialMatrix::new();
    let mut methods: Vec<_> = fs::read_dir(dir).map_err(|e| io(dir, &e))?.filter_map(Result::ok).collect();
    methods.sort_by_key(|e| e.file_name());
    for entry in methods {
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let method = entry.file_name().to_string_lossy().into_owned();
        let mut runs = BTreeMap::new();
        for f in fs::read_dir(&path).map_err(|e| io(&path, &e))?.filter_map(Result::ok) {
            let name = f.file_name().to_string_lossy().into_owned();
            let Some(seed) = name.strip_prefix("seed_").and_then(|s| s.strip_suffix(".json")) else {
                continue;
            };
            let seed: u64 = seed.parse().map_err(|e| io(&f.path(), &e))?;
            let text = fs::read_to_string(f.path()).map_err(|e| io(&f.path(), &e))?;
            runs.insert(seed, MetricSuite::from_json(&text).map_err(|e| io(&f.path(), &e))?);
        }
        if !runs.is_empty() {
            trials.insert(method, runs);
        }
    }
    Ok(trials)
}
