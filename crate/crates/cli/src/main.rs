use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use ir2::corpus::{load_candidate_pools, load_corpus, load_judgments, write_atomic};
use ir2::encoder::{export_embeddings, import_embeddings, EncoderParams};
use ir2::gateway::{load_records, BackendKind, PriceTable, TokenUsage};
use ir2::metrics::{csv_header, csv_row, evaluate};
use ir2::par::Execution;
use ir2::pipeline::{emit_report, method_slug, run_through, Phase, ReportFormat, RunConfig, RunManifest, MANIFEST_FILE};
use ir2::retrieval::{load_rankings, rank_all, rank_pools, save_rankings, Similarity};
use ir2::stats::{compare_to_baseline, load_trials, TestMode};
use ir2::toy::{generate_toy, ToyConfig};

#[derive(Parser)]
#[command(name = "ir2", version, about = "Synthetic query generation, encoder fine-tuning and retrieval evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: data, keywords, datasets, training, evaluation, report.
    Run(ConfigArgs),
    /// Keyword extraction and synthetic dataset construction only.
    Generate(ConfigArgs),
    /// Everything up to and including encoder checkpoints.
    Train(ConfigArgs),
    /// Embed a JSONL file of `{id, text}` records with a checkpoint.
    Embed(EmbedArgs),
    /// Rank documents for each query from two embedding files.
    Rank(RankArgs),
    /// Score a run file against judgments.
    Evaluate(EvaluateArgs),
    /// Significance tests of every method against a baseline.
    Compare(CompareArgs),
    /// Dollar cost of recorded calls, or of a planned run (dry run on the mock backend).
    CostEstimate(CostArgs),
    /// Write the synthetic toy corpus, queries and judgments.
    ToyCorpus(ToyArgs),
    /// Check a run config against the schema and semantic rules.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute the digests recorded in a run manifest.
    Verify {
        /// Run output directory.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the backend kind: mock, remote or replay.
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Disable within-stage parallelism.
    #[arg(long)]
    sequential: bool,
    /// Train the seeds of a method concurrently.
    #[arg(long)]
    parallel_seeds: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(kind) = self.backend {
            cfg.backend.kind = kind;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if self.sequential {
            cfg.execution = Execution::Sequential;
        }
        if self.parallel_seeds {
            cfg.parallel_seeds = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL with `id` and `text` fields.
    #[arg(long)]
    input: PathBuf,
    /// `.jsonl` for text output, anything else for the binary store.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    docs: PathBuf,
    /// Candidate pools; when given, each pool is reranked in full.
    #[arg(long)]
    pools: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    #[arg(long, default_value = "cosine", value_parser = parse_enum::<Similarity>)]
    similarity: Similarity,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Metric JSON destination; printed as CSV when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    method: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    /// Directory of `<method>/seed_<n>.json` files.
    #[arg(long, alias = "metrics")]
    trials: PathBuf,
    #[arg(long)]
    baseline: String,
    /// Number of simultaneous comparisons for the Bonferroni correction.
    #[arg(long = "m", alias = "comparisons", default_value_t = 8)]
    comparisons: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value = "welch", value_parser = parse_enum::<TestMode>)]
    test: TestMode,
    #[arg(long, default_value = "markdown", value_parser = parse_enum::<ReportFormat>)]
    format: ReportFormat,
    #[arg(long, default_value = "Comparison")]
    title: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// USD per 1k tokens, keyed by model.
    #[arg(long)]
    prices: PathBuf,
    /// Generation records written by the remote backend.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    records: Option<PathBuf>,
    /// Run config whose generation stages are replayed on the mock backend.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Assumed completion length per call; mock completions are shorter than real ones.
    #[arg(long)]
    completion_tokens: Option<u64>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    documents: usize,
    /// Defaults to one query per document.
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn print_manifest(m: &RunManifest, dir: &Path) {
    for st in &m.stages {
        println!("{:<9} {:>8.2}s  {}", format!("{:?}", st.status).to_lowercase(), st.seconds, st.name);
    }
    println!(
        "{} stages, {} executed, {:.1}s; manifest at {}",
        m.stages.len(),
        m.executed(),
        m.seconds,
        dir.join(MANIFEST_FILE).display()
    );
}

fn pipeline(args: &ConfigArgs, last: Phase) -> Result<()> {
    let cfg = args.load()?;
    let m = run_through(&cfg, last)?;
    print_manifest(&m, &cfg.output_dir);
    if last == Phase::Report {
        print!("{}", fs::read_to_string(cfg.output_dir.join("report.md"))?);
    }
    Ok(())
}

fn embed(a: &EmbedArgs) -> Result<()> {
    let params = EncoderParams::load(&a.checkpoint)?;
    let records = load_corpus(&a.input)?;
    let items: Vec<(String, String)> = records.documents().iter().map(|d| (d.id.clone(), d.text.clone())).collect();
    let label = a.checkpoint.display().to_string();
    let store = params.embed_store(&label, &items, exec(a.sequential))?;
    export_embeddings(&store, &a.out)?;
    eprintln!("{} vectors of dimension {} -> {}", store.len(), store.dim(), a.out.display());
    Ok(())
}

fn rank(a: &RankArgs) -> Result<()> {
    let queries = import_embeddings(&a.queries)?;
    let docs = import_embeddings(&a.docs)?;
    let e = exec(a.sequential);
    let rankings = match &a.pools {
        Some(p) => rank_pools(&queries, &load_candidate_pools(p)?, &docs, a.similarity, e)?,
        None => rank_all(&queries, &docs, a.top_k, a.similarity, e)?,
    };
    save_rankings(&a.out, &rankings)?;
    eprintln!("{} rankings -> {}", rankings.len(), a.out.display());
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let rankings = load_rankings(&a.run)?;
    let judgments = load_judgments(&a.qrels)?;
    let eval = evaluate(&rankings, &judgments, Execution::Parallel);
    if eval.suite.queries == 0 {
        bail!("no query in {} has a relevant document in {}", a.run.display(), a.qrels.display());
    }
    if !eval.excluded.is_empty() {
        eprintln!("{} queries without relevant documents were skipped", eval.excluded.len());
    }
    match &a.out {
        Some(p) => output(Some(p), &eval.suite.to_json()),
        None => output(None, &format!("{}\n{}\n", csv_header(), csv_row(&a.method, a.seed, &eval.suite))),
    }
}

fn compare(a: &CompareArgs) -> Result<()> {
    let trials = load_trials(&a.trials)?;
    if trials.is_empty() {
        bail!("no metric files under {}", a.trials.display());
    }
    let baseline = method_slug(&a.baseline);
    let report = compare_to_baseline(&trials, &baseline, a.comparisons, a.alpha, a.test)?;
    output(a.out.as_deref(), &emit_report(&report, a.format, &a.title))
}

fn usage_cost(usage: &[(String, TokenUsage)], prices: &PriceTable, completion: Option<u64>) -> Result<f64> {
    let mut total = 0.0;
    println!("model,calls,prompt_tokens,completion_tokens,usd");
    for (model, u) in usage {
        let completion_tokens = completion.map_or(u.completion_tokens, |c| c * u.calls);
        let usd = prices.call_cost(model, u.prompt_tokens, completion_tokens)?;
        println!("{model},{},{},{completion_tokens},{usd:.4}", u.calls, u.prompt_tokens);
        total += usd;
    }
    Ok(total)
}

fn cost_estimate(a: &CostArgs) -> Result<()> {
    let prices: PriceTable = serde_json::from_str(&fs::read_to_string(&a.prices)?)
        .with_context(|| format!("parsing {}", a.prices.display()))?;
    let total = if let Some(path) = &a.records {
        let mut by_model = std::collections::BTreeMap::<String, TokenUsage>::new();
        for r in load_records(path)? {
            let u = by_model.entry(r.model).or_default();
            u.calls += 1;
            u.prompt_tokens += r.prompt_tokens;
            u.completion_tokens += r.completion_tokens;
        }
        usage_cost(&by_model.into_iter().collect::<Vec<_>>(), &prices, a.completion_tokens)?
    } else {
        let path = a.config.as_ref().expect("clap enforces one source");
        let mut cfg = RunConfig::load(path)?;
        let scratch = tempfile::tempdir()?;
        cfg.output_dir = scratch.path().to_path_buf();
        cfg.backend.kind = BackendKind::Mock;
        cfg.backend.records = None;
        let m = run_through(&cfg, Phase::Generate)?;
        let usage: Vec<_> = m.usage.into_iter().collect();
        if usage.is_empty() {
            println!("the configured methods make no generation calls");
        }
        usage_cost(&usage, &prices, a.completion_tokens)?
    };
    println!("total,,,,{total:.4}");
    Ok(())
}

fn toy_corpus(a: &ToyArgs) -> Result<()> {
    let cfg = ToyConfig { documents: a.documents, queries: a.queries.unwrap_or(a.documents), seed: a.seed, ..ToyConfig::default() };
    let toy = generate_toy(&cfg);
    toy.save(&a.out)?;
    eprintln!("{} documents, {} queries -> {}", toy.corpus.len(), toy.queries.len(), a.out.display());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(a) => pipeline(&a, Phase::Report),
        Command::Generate(a) => pipeline(&a, Phase::Generate),
        Command::Train(a) => pipeline(&a, Phase::Train),
        Command::Embed(a) => embed(&a),
        Command::Rank(a) => rank(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Compare(a) => compare(&a),
        Command::CostEstimate(a) => cost_estimate(&a),
        Command::ToyCorpus(a) => toy_corpus(&a),
        Command::Validate { config } => {
            RunConfig::load(&config)?;
            println!("{}: ok", config.display());
            Ok(())
        }
        Command::Verify { dir } => {
            let m = RunManifest::load(&dir.join(MANIFEST_FILE))?;
            let bad = m.verify(&dir);
            if bad.is_empty() {
                println!("{} stages verified", m.stages.len());
                Ok(())
            } else {
                bad.iter().for_each(|b| eprintln!("{b}"));
                bail!("{} outputs differ from the manifest", bad.len())
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
