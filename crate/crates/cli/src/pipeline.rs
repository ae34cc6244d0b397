//! In-memory pipeline stages built from a [`RunConfig`]. The commands wrap
//! these with file I/O; the acceptance suite calls them directly.

use std::collections::BTreeSet;

use dfr_core::backbone::{pretrain_backbone, split_heldout, Backbone, BackboneConfig, PretrainConfig, PretrainReport, Vocab};
use dfr_core::benchgen::{build_corpus, build_dataset, corpus_vocab_lines, CorpusConfig, Dataset, DatasetConfig};
use dfr_core::error::Result;
use dfr_core::evalsuite::MlpConfig;
use dfr_core::geoworld::{GeoEncoder, World};
use dfr_core::par::Executor;
use dfr_core::projector::Projector;
use dfr_core::sequencer::EmbeddingStore;
use dfr_core::trainer::{TrainConfig, TrainContext};

use crate::config::RunConfig;

pub fn build_world(cfg: &RunConfig) -> Result<World> {
    World::generate(cfg.get("world.regions")?, cfg.get("world.seed")?)
}

pub fn build_encoder(cfg: &RunConfig, world: &World) -> Result<GeoEncoder> {
    Ok(GeoEncoder::with_shape(
        &world.stats,
        cfg.get("encoder.d_e")?,
        cfg.get("encoder.hidden")?,
        cfg.get("encoder.gain")?,
        cfg.get("encoder.seed")?,
    ))
}

pub fn dataset_config(cfg: &RunConfig) -> Result<DatasetConfig> {
    let mut d = DatasetConfig::with_sizes(cfg.get("data.train")?, cfg.get("data.test")?, cfg.get("data.seed")?);
    d.test_region_fraction = cfg.get("data.test_region_fraction")?;
    d.robust_n = cfg.get("data.robust_n")?;
    d.shift_n = cfg.get("data.shift_n")?;
    d.shift_pool_n = cfg.get("data.shift_pool_n")?;
    d.similarity_margin = cfg.get("data.similarity_margin")?;
    d.county_min = cfg.get("data.county_min")?;
    d.county_max = cfg.get("data.county_max")?;
    d.validate()?;
    Ok(d)
}

pub fn build_data(cfg: &RunConfig, world: &World) -> Result<Dataset> {
    build_dataset(world, &dataset_config(cfg)?)
}

/// Embeddings of every postal region and every county.
pub fn embed_all(encoder: &GeoEncoder, world: &World, data: &Dataset) -> Result<EmbeddingStore> {
    let mut store = encoder.encode_all(&world.regions)?;
    for c in &data.counties {
        store.insert(c.region_id.clone(), encoder.encode(c))?;
    }
    Ok(store)
}

pub fn corpus_config(cfg: &RunConfig) -> Result<CorpusConfig> {
    Ok(CorpusConfig {
        seed: cfg.get("corpus.seed")?,
        n_regions: cfg.get("corpus.regions")?,
        literal_per_task: cfg.get("corpus.literal_per_task")?,
        zero_context_per_task: cfg.get("corpus.zero_context_per_task")?,
        reports: cfg.get("corpus.reports")?,
        raw_input: cfg.get("corpus.raw_input")?,
        raw_budget: cfg.get("corpus.raw_budget")?,
        similarity_margin: cfg.get("data.similarity_margin")?,
    })
}

/// Corpus lines (benchmark regions excluded by id) and the vocabulary.
pub fn build_corpus_and_vocab(cfg: &RunConfig, world: &World) -> Result<(Vec<String>, Vocab)> {
    let exclude: BTreeSet<String> = world.regions.iter().map(|r| r.region_id.clone()).collect();
    let (corpus, _) = build_corpus(&corpus_config(cfg)?, &exclude)?;
    let mut lines = corpus_vocab_lines();
    lines.extend(corpus.iter().cloned());
    let vocab = Vocab::build(lines.iter().map(String::as_str));
    Ok((corpus, vocab))
}

pub fn backbone_config(cfg: &RunConfig, vocab: &Vocab) -> Result<BackboneConfig> {
    let c = BackboneConfig {
        vocab_size: vocab.len(),
        d_llm: cfg.get("backbone.d_llm")?,
        n_layers: cfg.get("backbone.layers")?,
        n_heads: cfg.get("backbone.heads")?,
        d_ff: cfg.get("backbone.d_ff")?,
        max_context: cfg.get("backbone.max_context")?,
        seed: cfg.get("backbone.seed")?,
        ..BackboneConfig::default()
    };
    c.validate()?;
    Ok(c)
}

pub fn pretrain_config(cfg: &RunConfig) -> Result<PretrainConfig> {
    Ok(PretrainConfig {
        epochs: cfg.get("pretrain.epochs")?,
        batch_size: cfg.get("pretrain.batch")?,
        lr: cfg.get("pretrain.lr")?,
        warmup_steps: cfg.get("pretrain.warmup")?,
        heldout_fraction: cfg.get("pretrain.heldout_fraction")?,
        seed: cfg.get("pretrain.seed")?,
        ..PretrainConfig::default()
    })
}

/// Pretrains and freezes a backbone.
pub fn pretrain(cfg: &RunConfig, corpus: &[String], vocab: &Vocab, exec: Executor) -> Result<(Backbone, PretrainReport)> {
    pretrain_backbone(corpus, vocab, backbone_config(cfg, vocab)?, &pretrain_config(cfg)?, exec)
}

/// The held-out corpus lines used for the forgetting proxy; the same split
/// pretraining used.
pub fn heldout_lines(cfg: &RunConfig, corpus: &[String]) -> Result<Vec<String>> {
    let p = pretrain_config(cfg)?;
    Ok(split_heldout(corpus, p.heldout_fraction, p.seed).1)
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let t = TrainConfig {
        mode: cfg.get("train.mode")?,
        strategy: cfg.get("train.strategy")?,
        n_tokens: cfg.get("train.n_tokens")?,
        lambda: cfg.get("train.lambda")?,
        tau: cfg.get("train.tau")?,
        lr_projector: cfg.get("train.lr")?,
        lr_backbone: cfg.get("train.lr_backbone")?,
        warmup_steps: cfg.get("train.warmup")?,
        epochs: cfg.get("train.epochs")?,
        batch_size: cfg.get("train.batch")?,
        clip: cfg.get("train.clip")?,
        seed: cfg.get("train.seed")?,
        val_fraction: cfg.get("train.val_fraction")?,
        train_vocab_table: true,
    };
    t.validate()?;
    Ok(t)
}

pub fn init_projector(cfg: &RunConfig, d_e: usize, backbone: &Backbone, n_tokens: usize) -> Result<Projector> {
    Projector::init(d_e, backbone.d_llm(), n_tokens, cfg.get("train.seed")?)
}

pub fn mlp_config(cfg: &RunConfig) -> Result<MlpConfig> {
    Ok(MlpConfig {
        hidden: cfg.get("mlp.hidden")?,
        epochs: cfg.get("mlp.epochs")?,
        lr: cfg.get("mlp.lr")?,
        batch_size: 16,
        seed: cfg.get("mlp.seed")?,
    })
}

pub fn executor(cfg: &RunConfig) -> Result<Executor> {
    let threads: usize = cfg.get("run.threads")?;
    Ok(if threads == 1 { Executor::Sequential } else { Executor::Auto })
}

/// Every artifact an evaluation needs, built in memory.
pub struct Experiment {
    pub cfg: RunConfig,
    pub world: World,
    pub data: Dataset,
    pub store: EmbeddingStore,
    pub corpus: Vec<String>,
    pub vocab: Vocab,
    pub backbone: Backbone,
    pub pretrain: PretrainReport,
    pub exec: Executor,
}

impl Experiment {
    /// Runs generation and pretraining. `backbone` skips pretraining when a
    /// cached model for the same config is supplied.
    pub fn build(cfg: RunConfig, backbone: Option<(Backbone, PretrainReport)>) -> Result<Self> {
        let exec = executor(&cfg)?;
        let world = build_world(&cfg)?;
        let data = build_data(&cfg, &world)?;
        let encoder = build_encoder(&cfg, &world)?;
        let store = embed_all(&encoder, &world, &data)?;
        let (corpus, vocab) = build_corpus_and_vocab(&cfg, &world)?;
        let (backbone, pretrain) = match backbone {
            Some(b) => b,
            None => pretrain(&cfg, &corpus, &vocab, exec)?,
        };
        Ok(Self {
            cfg,
            world,
            data,
            store,
            corpus,
            vocab,
            backbone,
            pretrain,
            exec,
        })
    }

    pub fn train_context(&self) -> TrainContext<'_> {
        TrainContext {
            vocab: &self.vocab,
            store: &self.store,
            profiles: None,
            exec: self.exec,
        }
    }
}
