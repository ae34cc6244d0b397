#![allow(dead_code)]

use dfr_core::backbone::{Backbone, BackboneConfig, Vocab};
use dfr_core::benchgen::{build_dataset, corpus_vocab_lines, Dataset, DatasetConfig};
use dfr_core::geoworld::{GeoEncoder, World};
use dfr_core::par::Executor;
use dfr_core::projector::Projector;
use dfr_core::sequencer::EmbeddingStore;
use dfr_core::trainer::TrainContext;

pub struct Fixture {
    pub world: World,
    pub data: Dataset,
    pub store: EmbeddingStore,
    pub vocab: Vocab,
    pub backbone: Backbone,
}

impl Fixture {
    pub fn ctx(&self) -> TrainContext<'_> {
        TrainContext {
            vocab: &self.vocab,
            store: &self.store,
            profiles: None,
            exec: Executor::Auto,
        }
    }

    pub fn projector(&self, n: usize, seed: u64) -> Projector {
        Projector::init(self.store.d_e, self.backbone.d_llm(), n, seed).unwrap()
    }
}

/// Small world, dataset and a randomly initialized frozen backbone.
pub fn fixture(train: usize, test: usize, d_llm: usize, layers: usize) -> Fixture {
    let world = World::generate(300, 1).unwrap();
    let data = build_dataset(&world, &DatasetConfig::with_sizes(train, test, 3)).unwrap();
    let enc = GeoEncoder::new(&world.stats, 48, 5);
    let mut store = enc.encode_all(&world.regions).unwrap();
    for c in &data.counties {
        store.insert(c.region_id.clone(), enc.encode(c)).unwrap();
    }
    let mut lines = corpus_vocab_lines();
    for e in data.all() {
        lines.push(e.prompt.clone());
        lines.push(e.answer.clone());
    }
    let vocab = Vocab::build(lines.iter().map(String::as_str));
    let mut backbone = Backbone::init(BackboneConfig {
        vocab_size: vocab.len(),
        d_llm,
        n_layers: layers,
        n_heads: 4,
        d_ff: 2 * d_llm,
        max_context: 512,
        seed: 0,
        ..BackboneConfig::default()
    })
    .unwrap();
    backbone.freeze();
    Fixture {
        world,
        data,
        store,
        vocab,
        backbone,
    }
}
