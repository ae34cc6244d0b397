//! Toy decoder-only language model: word/digit vocabulary, RoPE transformer
//! with an `inputs_embeds` entry point, pretraining and greedy decoding.

mod model;
mod pretrain;
pub mod vocab;

pub use model::{argmax, Backbone, BackboneConfig, BoundBackbone};
pub use pretrain::{
    corpus_perplexity, encode_line, pretrain_backbone, split_heldout, unigram_perplexity, PretrainConfig,
    PretrainReport,
};
pub use vocab::Vocab;
