use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use ir2::encoder::init_encoder;
use ir2::metrics::evaluate;
use ir2::par::Execution;
use ir2::retrieval::{rank_all, Similarity};
use ir2::toy::{generate_toy, ToyConfig};
use ir2::trainer::{train, PairSource, TrainConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn benches(c: &mut Criterion) {
    let toy = generate_toy(&ToyConfig { documents: 400, queries: 400, ..ToyConfig::default() });
    let docs: Vec<(String, String)> = toy.corpus.documents().iter().map(|d| (d.id.clone(), d.text.clone())).collect();
    let params = init_encoder(1 << 15, 128, 7).unwrap();
    let texts: Vec<&str> = docs.iter().map(|d| d.1.as_str()).collect();
    let doc_store = params.embed_store("bench", &docs, Execution::Parallel).unwrap();
    let query_store = params.embed_store("bench", &toy.queries, Execution::Parallel).unwrap();
    let rankings = rank_all(&query_store, &doc_store, 100, Similarity::Cosine, Execution::Parallel).unwrap();
    let pairs: Vec<(String, String)> =
        toy.queries.iter().zip(&docs).map(|((_, q), (_, d))| (q.clone(), d.clone())).collect();
    let cfg = TrainConfig { batch_size: 40, accumulation_steps: 2, learning_rate: 1e-2, ..TrainConfig::default() };

    let mut g = c.benchmark_group("embed_batch");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| params.embed_batch(black_box(&texts), e).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("rank_all");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| rank_all(black_box(&query_store), &doc_store, 100, Similarity::Cosine, e).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| evaluate(black_box(&rankings), &toy.judgments, e))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| train(params.clone(), PairSource::Texts(black_box(&pairs)), &cfg, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(parallel_vs_sequential, benches);
criterion_main!(parallel_vs_sequential);
