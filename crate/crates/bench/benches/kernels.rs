use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use repaug::augment::{AugmentationSpec, Method};
use repaug::autodiff::Tape;
use repaug::loss::{self, PairSet};
use repaug::synth::{generate, SynthConfig};
use repaug::{EncoderConfig, EncoderModel, Featurizer, PairData, Side, Split, Tensor};

/// Deterministic dense filler; benchmarks only need plausible magnitudes.
fn filled(rows: usize, cols: usize, phase: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|k| (k as f64 * 0.37 + phase).sin()).collect())
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256, 1024] {
        let a = filled(n, 128, 0.0);
        let b = filled(128, n, 1.0);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    g.finish();
}

fn augmented_infonce(c: &mut Criterion) {
    let mut g = c.benchmark_group("augmented_infonce_step");
    let q = filled(64, 128, 0.0).map(|v| 0.1 * v);
    let k = filled(64, 128, 2.0).map(|v| 0.1 * v);
    let spec = AugmentationSpec::for_method(Method::MixedInterpExtrap);
    for copies in [0, 5, 15] {
        g.bench_with_input(BenchmarkId::from_parameter(copies), &copies, |bench, &n| {
            bench.iter(|| {
                let tape = Tape::new();
                let (qv, cv) = (tape.param(q.clone()), tape.param(k.clone()));
                let (qp, cp, pairs) = loss::augmented_pools(qv, cv, &spec, n, 7).unwrap();
                let l = loss::augmented_infonce(qp, cp, &pairs, 1.0).unwrap();
                black_box(l.backward().unwrap());
            })
        });
    }
    g.finish();
    c.bench_function("pair_set_64x5", |bench| bench.iter(|| black_box(PairSet::new(64, 5).unwrap())));
}

fn encode(c: &mut Criterion) {
    let corpus = generate(&SynthConfig {
        pairs: 640,
        ..SynthConfig::default()
    })
    .unwrap();
    let f = Featurizer::new(repaug::encoder::DEFAULT_HASH_DIM);
    let data = PairData::from_records(&corpus.split(Split::Train), &f).unwrap();
    let batch = data.items.select_rows(&(0..64).collect::<Vec<_>>());
    let model = EncoderModel::new(EncoderConfig::default(), 0).unwrap();
    c.bench_function("encode_batch_64", |bench| {
        bench.iter(|| black_box(model.encode(Side::Item, &batch).unwrap()))
    });
    let texts: Vec<&str> = corpus
        .records
        .iter()
        .take(64)
        .map(|r| match &r.payload {
            repaug::io::Payload::Text { code, .. } => code.as_str(),
            repaug::io::Payload::Vectors { .. } => "",
        })
        .collect();
    c.bench_function("featurize_64_snippets", |bench| bench.iter(|| black_box(f.featurize_batch(&texts))));
}

criterion_group!(benches, matmul, augmented_infonce, encode);
criterion_main!(benches);
