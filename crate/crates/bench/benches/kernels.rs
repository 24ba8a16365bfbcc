use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use labelnoise_core::datagen::{generate_blobs, inject_noise, split, BlobSpec};
use labelnoise_core::losses::LossSpec;
use labelnoise_core::model::{init_mlp, MlpConfig};
use labelnoise_core::trainer::{train, TrainConfig};
use labelnoise_core::transition::{estimate_anchor, presets, RevisionMode};
use labelnoise_core::{Tape, Tensor};

fn forward_backward(c: &mut Criterion) {
    let data = generate_blobs(&BlobSpec::simplex(4, 16, 64, 6.0, 1.0, 0)).unwrap();
    let params = init_mlp(&MlpConfig::desk(16, 4, 0)).unwrap();
    let labels = data.clean_labels.clone();
    let t_hat = presets::circulant_03();
    let mut group = c.benchmark_group("forward_backward_256");
    for loss in [
        LossSpec::baseline(),
        LossSpec::forward(t_hat.clone()).unwrap(),
        LossSpec::revision(t_hat.clone(), RevisionMode::Softmax).unwrap(),
    ] {
        group.bench_function(loss.name(), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let vars = params.register(&mut tape);
                let delta = loss.needs_slack().then(|| tape.leaf(labelnoise_core::LeafId(params.tensor_count()), Tensor::zeros(&[4, 4])));
                let x = tape.constant(data.features.clone());
                let logits = params.record_forward(&mut tape, &vars, x, true, 1).unwrap();
                let l = loss.record(&mut tape, logits, &labels, delta).unwrap();
                black_box(tape.backward(l).unwrap())
            })
        });
    }
    group.finish();
}

fn anchor(c: &mut Criterion) {
    let data = generate_blobs(&BlobSpec::simplex(4, 16, 2500, 3.0, 1.0, 0)).unwrap();
    let params = init_mlp(&MlpConfig::desk(16, 4, 0)).unwrap();
    let posteriors = params.predict_proba(&data.features).unwrap();
    c.bench_function("estimate_anchor_10k", |b| b.iter(|| black_box(estimate_anchor(&posteriors, 97.0, 1).unwrap())));
}

fn epoch(c: &mut Criterion) {
    let data = generate_blobs(&BlobSpec::simplex(4, 16, 500, 4.0, 1.0, 0)).unwrap();
    let data = inject_noise(&data, &presets::circulant_03(), 0).unwrap();
    let (tr, va) = split(&data, 0.8, 0).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let params = init_mlp(&MlpConfig::desk(16, 4, 0)).unwrap();
    c.bench_function("train_epoch_1600", |b| {
        b.iter_batched(|| params.clone(), |p| black_box(train(p, &LossSpec::baseline(), &tr, &va, &cfg, None).unwrap()), BatchSize::SmallInput)
    });
}

criterion_group!(benches, forward_backward, anchor, epoch);
criterion_main!(benches);
