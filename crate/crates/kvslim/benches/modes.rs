//! Parallel-vs-sequential benchmark suite.
//!
//! Benchmark IDs carry the active execution mode, so comparing the two
//! builds is two runs of the same suite:
//!
//! ```text
//! cargo bench -p kvslim                          # parallel (default)
//! cargo bench -p kvslim --no-default-features    # sequential fallback
//! ```

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use kvslim::attention::{preprocess, KvCache};
use kvslim::balance::{balance_best_of, BalanceObjective, ObjectiveId};
use kvslim::compress::{embed_cache, halving_step, StepOptions};
use kvslim::features::{BlockSum, EmbeddingConfig};
use kvslim::verify::{
    build_query_suite, empirical_error, star_norm, StarNormOptions, SuiteCounts,
};

fn mode() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    }
}

fn bench_embed(c: &mut Criterion) {
    let raw = KvCache::random_unit(512, 4, 4, 11).unwrap();
    let (cache, _) = preprocess(&raw).unwrap();
    let cfg = EmbeddingConfig::with_defaults(8, 4, 4).unwrap();
    c.bench_function(&format!("embed_cache/{}/n=512,M=8", mode()), |b| {
        b.iter(|| black_box(embed_cache(&cache, &cfg).unwrap()))
    });
}

fn bench_balance(c: &mut Criterion) {
    let raw = KvCache::random_unit(512, 4, 4, 13).unwrap();
    let (cache, _) = preprocess(&raw).unwrap();
    let cfg = EmbeddingConfig::with_defaults(6, 4, 4).unwrap();
    let items = embed_cache(&cache, &cfg).unwrap();
    let seeds: Vec<u64> = (0..16).collect();
    c.bench_function(&format!("balance_best_of/{}/n=512,seeds=16", mode()), |b| {
        b.iter(|| {
            let o = BalanceObjective::new(ObjectiveId::Numerator, items.clone());
            black_box(balance_best_of(&[o], &seeds).unwrap())
        })
    });
}

fn bench_halving_step(c: &mut Criterion) {
    let raw = KvCache::random_unit(512, 4, 4, 17).unwrap();
    let (cache, _) = preprocess(&raw).unwrap();
    let cfg = EmbeddingConfig::with_defaults(8, 4, 4).unwrap();
    let opts = StepOptions {
        rho: 2.0,
        seeds: (0..16).collect(),
        star_norm: StarNormOptions {
            restarts: 4,
            max_iters: 80,
            tol: 1e-9,
        },
    };
    c.bench_function(&format!("halving_step/{}/n=512,M=8", mode()), |b| {
        b.iter(|| black_box(halving_step(&cache, &cfg, &opts).unwrap()))
    });
}

fn bench_star_norm(c: &mut Criterion) {
    let raw = KvCache::random_unit(256, 4, 4, 19).unwrap();
    let (cache, _) = preprocess(&raw).unwrap();
    let cfg = EmbeddingConfig::with_defaults(6, 4, 4).unwrap();
    let items = embed_cache(&cache, &cfg).unwrap();
    let signs: Vec<i8> = (0..256).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
    let sum = BlockSum::signed(&items, &signs);
    let opts = StarNormOptions::default();
    c.bench_function(&format!("star_norm/{}/m=4,restarts=32", mode()), |b| {
        b.iter(|| {
            black_box(star_norm(
                &sum.blocks[4],
                cfg.layout(4),
                4,
                &opts,
                7,
            ))
        })
    });
}

fn bench_query_suite(c: &mut Criterion) {
    let raw = KvCache::random_unit(1024, 4, 4, 23).unwrap();
    let (cache, _) = preprocess(&raw).unwrap();
    let half = cache
        .select(&(0..512).map(|i| i * 2).collect::<Vec<_>>())
        .unwrap();
    let suite = build_query_suite(
        &cache,
        2.0,
        SuiteCounts {
            random: 128,
            key_aligned: 32,
            ascent: 0,
        },
        3,
        None,
    );
    c.bench_function(
        &format!("empirical_error/{}/n=1024,queries=161", mode()),
        |b| b.iter(|| black_box(empirical_error(&suite, &cache, &half).unwrap())),
    );
}

criterion_group!(
    benches,
    bench_embed,
    bench_balance,
    bench_halving_step,
    bench_star_norm,
    bench_query_suite
);
criterion_main!(benches);
