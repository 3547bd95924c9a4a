//! Hot-path benchmarks: forward pass, regularizer construction, training
//! epochs with and without the CARMA terms.

use carma_bench::{bench_dataset, bench_model, bench_train_config};
use carma_core::carma::{mi_loss_batch, stability_loss_batch, CompositionGroups};
use carma_core::interventions::{cap_pool, PoolMode};
use carma_core::model::PatchMap;
use carma_core::tensor::Tape;
use carma_core::trainer::{train, Variant};
use carma_core::util::stream_rng;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn forward_pass(c: &mut Criterion) {
    let ds = bench_dataset();
    let model = bench_model(&ds);
    let enc = ds.encode(&ds.split.train[0]).unwrap();
    c.bench_function("forward_inference", |b| {
        b.iter(|| {
            let (logits, _) =
                model.forward(black_box(&enc.ids), &enc.word_spans, &PatchMap::new()).unwrap();
            black_box(logits.values()[0])
        })
    });
}

fn regularizer_losses(c: &mut Criterion) {
    let ds = bench_dataset();
    let model = bench_model(&ds);
    let cfg = bench_train_config(Variant::Carma).carma;
    let encs: Vec<_> = ds.split.train[..16]
        .iter()
        .map(|ex| ds.encode(ex).unwrap())
        .collect();
    c.bench_function("carma_losses_batch16", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let leaves = model.leaves(&tape).unwrap();
            let mut rng = stream_rng(7, "bench-neg");
            let mut traces = Vec::new();
            let mut groups = Vec::new();
            for enc in &encs {
                let (_, trace) = model
                    .forward_on(&leaves, &enc.ids, &enc.word_spans, &PatchMap::new())
                    .unwrap();
                groups.push(
                    CompositionGroups::from_spans(
                        &enc.word_spans,
                        enc.ids.len(),
                        cfg.max_negatives,
                        &mut rng,
                    )
                    .unwrap(),
                );
                traces.push(trace);
            }
            let pairs: Vec<_> = traces.iter().zip(groups.iter()).collect();
            let mi = mi_loss_batch(&pairs, &cfg).unwrap();
            let trace_refs: Vec<_> = traces.iter().collect();
            let stab = stability_loss_batch(&trace_refs, &cfg).unwrap();
            black_box((
                mi.loss.scalar_value().unwrap(),
                stab.scalar_value().unwrap(),
            ))
        })
    });
}

fn pooling(c: &mut Criterion) {
    let ds = bench_dataset();
    let model = bench_model(&ds);
    let enc = ds.encode(&ds.split.train[0]).unwrap();
    let (_, trace) = model.forward(&enc.ids, &enc.word_spans, &PatchMap::new()).unwrap();
    c.bench_function("cap_pool_mean", |b| {
        b.iter(|| black_box(cap_pool(&trace, 2, PoolMode::Mean).unwrap().0.rows))
    });
}

fn training_epoch(c: &mut Criterion) {
    let ds = bench_dataset();
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for variant in [Variant::Ft, Variant::Carma] {
        group.bench_function(variant.to_string(), |b| {
            b.iter(|| {
                let model = bench_model(&ds);
                let (m, _) = train(model, &ds, &bench_train_config(variant)).unwrap();
                black_box(m.n_params())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward_pass, regularizer_losses, pooling, training_epoch);
criterion_main!(benches);
