use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use indexflow_core::dataset::{build_company_dataset, DatasetConfig};
use indexflow_core::logit::{fit_dataset, LogitOptions};
use indexflow_core::mlp::{init_network, train, TrainOptions};
use indexflow_core::synth::{generate_corpus, SynthConfig};
use indexflow_core::LabeledDataset;

fn company(n_weeks: usize) -> LabeledDataset {
    let corpus = generate_corpus(&SynthConfig {
        n_companies: 1,
        n_weeks,
        ..SynthConfig::default()
    })
    .expect("corpus");
    build_company_dataset(&corpus.companies[0].panel, &corpus.snapshots, &DatasetConfig::default())
        .expect("dataset")
        .dataset
}

fn logit(c: &mut Criterion) {
    let ds = company(2001);
    c.bench_function("logit_fit_2000x8", |b| {
        b.iter(|| fit_dataset(black_box(&ds), &LogitOptions::default()).unwrap())
    });
}

fn mlp(c: &mut Criterion) {
    let ds = company(2001);
    let net = init_network(&[ds.n_features(), 8, 1], 1).unwrap();
    let opts = TrainOptions {
        epochs: 1,
        ..TrainOptions::default()
    };
    c.bench_function("mlp_epoch_2000x8", |b| {
        b.iter_batched(|| net.clone(), |m| train(&m, black_box(&ds), &opts).unwrap(), BatchSize::SmallInput)
    });
}

fn build(c: &mut Criterion) {
    let corpus = generate_corpus(&SynthConfig {
        n_companies: 1,
        ..SynthConfig::default()
    })
    .expect("corpus");
    c.bench_function("dataset_build_2000", |b| {
        b.iter(|| build_company_dataset(black_box(&corpus.companies[0].panel), &corpus.snapshots, &DatasetConfig::default()).unwrap())
    });
}

criterion_group!(benches, logit, mlp, build);
criterion_main!(benches);
