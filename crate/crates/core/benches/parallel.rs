//! Sequential vs rayon executor on the two hot per-example maps: a training
//! batch (loss and projector gradients) and teacher-forced evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dfr_core::backbone::{Backbone, BackboneConfig, Vocab};
use dfr_core::benchgen::{build_dataset, corpus_vocab_lines, DatasetConfig};
use dfr_core::geoworld::{GeoEncoder, World};
use dfr_core::par::{sum_in_order, Executor};
use dfr_core::projector::Projector;
use dfr_core::trainer::{evaluate_loss, projector_loss_and_grads, TrainContext};

fn bench(c: &mut Criterion) {
    let world = World::generate(300, 1).unwrap();
    let data = build_dataset(&world, &DatasetConfig::with_sizes(64, 32, 3)).unwrap();
    let enc = GeoEncoder::new(&world.stats, 64, 5);
    let store = enc.encode_all(&world.regions).unwrap();
    let mut lines = corpus_vocab_lines();
    lines.extend(data.all().flat_map(|e| [e.prompt.clone(), e.answer.clone()]));
    let vocab = Vocab::build(lines.iter().map(String::as_str));
    let mut backbone = Backbone::init(BackboneConfig {
        vocab_size: vocab.len(),
        d_llm: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 256,
        ..BackboneConfig::default()
    })
    .unwrap();
    backbone.freeze();
    let projector = Projector::init(store.d_e, 64, 4, 0).unwrap();
    let batch = &data.train[..16];

    let mut group = c.benchmark_group("executor");
    group.sample_size(10);
    for exec in [Executor::Sequential, Executor::Auto] {
        let ctx = TrainContext {
            vocab: &vocab,
            store: &store,
            profiles: None,
            exec,
        };
        let name = format!("{exec:?}");
        group.bench_with_input(BenchmarkId::new("train_batch_16", &name), &ctx, |b, ctx| {
            b.iter(|| {
                let parts = ctx.exec.map(batch, |ex| projector_loss_and_grads(&backbone, &projector, ex, ctx).unwrap().1);
                sum_in_order(parts)
            })
        });
        group.bench_with_input(BenchmarkId::new("eval_loss_32", &name), &ctx, |b, ctx| {
            b.iter(|| evaluate_loss(&backbone, &projector, &data.test, ctx).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
