//! Microbenchmarks for the per-question hot paths: answer normalization,
//! soft-accuracy scoring, relevance aggregation, and cache key derivation.

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use kvqa_core::evaluate::vqa_score;
use kvqa_core::rationalize::{aggregate_relevance, token_relevance};
use kvqa_core::store::cache_key;
use kvqa_core::text::{normalize_answer, split_sentences};
use kvqa_core::types::DecodeParams;

fn bench_normalize_answer(c: &mut Criterion) {
    let inputs = [
        "A Dog, walking in the park.",
        "it's twenty-two degrees outside!",
        "1,000,000 dollars",
        "shouldnt've been there",
    ];
    c.bench_function("normalize_answer", |b| {
        b.iter(|| {
            for s in &inputs {
                black_box(normalize_answer(black_box(s)));
            }
        })
    });
}

fn bench_vqa_score(c: &mut Criterion) {
    let annotations: Vec<String> = (0..10)
        .map(|i| if i < 4 { "park".to_string() } else { format!("answer {i}") })
        .collect();
    c.bench_function("vqa_score", |b| {
        b.iter(|| black_box(vqa_score(black_box("park"), black_box(&annotations)).unwrap()))
    });
}

fn bench_relevance(c: &mut Criterion) {
    let heads = 4;
    let n = 256;
    let attn: Vec<Vec<f64>> = (0..heads)
        .map(|h| (0..n).map(|i| ((h + i) % 7) as f64 / 7.0).collect())
        .collect();
    let grads: Vec<Vec<f64>> = (0..heads)
        .map(|h| (0..n).map(|i| ((i as f64) - (h as f64) * 31.0) / 100.0).collect())
        .collect();
    c.bench_function("token_relevance_4h_256t", |b| {
        b.iter(|| black_box(token_relevance(black_box(&attn), black_box(&grads)).unwrap()))
    });

    let steps: Vec<Vec<f64>> = (0..8)
        .map(|k| (0..n + k).map(|i| (i % 13) as f64 / 13.0).collect())
        .collect();
    c.bench_function("aggregate_relevance_8steps", |b| {
        b.iter(|| black_box(aggregate_relevance(black_box(&steps), black_box(n)).unwrap()))
    });
}

fn bench_cache_key(c: &mut Criterion) {
    let params = DecodeParams::greedy(16);
    let prompt = "Please answer questions according to the given context.\n".repeat(8);
    c.bench_function("cache_key", |b| {
        b.iter(|| {
            black_box(cache_key(
                black_box("base-7b"),
                black_box(&params),
                black_box(prompt.as_bytes()),
            ))
        })
    });
}

fn bench_split_sentences(c: &mut Criterion) {
    let text = "Dogs are walked in parks. Mr. Smith knows this well. \
                Parks are public! Are they open at night? Usually, e.g. in summer."
        .repeat(4);
    c.bench_function("split_sentences", |b| {
        b.iter(|| black_box(split_sentences(black_box(&text))))
    });
}

criterion_group!(
    benches,
    bench_normalize_answer,
    bench_vqa_score,
    bench_relevance,
    bench_cache_key,
    bench_split_sentences
);
criterion_main!(benches);
