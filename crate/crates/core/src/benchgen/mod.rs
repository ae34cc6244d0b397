//! Benchmark generation: templated QA over synthetic regions, style
//! rewrites, baseline text serializations, few-shot prefixes and
//! region-disjoint splits.
//!
//! Every example carries a `meta` record with the quantities its answer
//! was derived from, so [`verify`] can recompute the answer from raw
//! features alone.

mod corpus;
mod dataset;
mod style;
mod tasks;
pub mod templates;
mod text;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DfrError;

pub use corpus::{build_corpus, corpus_vocab_lines, CorpusConfig};
pub use dataset::{
    build_dataset, read_jsonl, split_dataset, Dataset, DatasetConfig, Manifest, TaskCounts, GENERATOR_VERSION,
};
pub use style::{augment_style, informal_noise, PROTECTED_WORDS};
pub use tasks::{
    abs_distractors, gen_abs_value_mc, gen_abs_with_context, gen_cmp_avg, gen_cross_region_cmp, gen_describe,
    gen_feat_cmp, gen_least_similar, gen_most_similar, gen_multi_hop, profile_sentence, similarity_subset, verify,
    Skip, DEGENERATE_Z, FEAT_CMP_MIN_GAP, SIMILARITY_SUBSETS,
};
pub use text::{
    build_fewshot_context, describe_raw_data, describe_text, literal_prompt, region_text, render_prompt,
    serialize_raw_input, strip_placeholders, PromptMode, RawInput,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CmpAvg,
    FeatCmp,
    AbsValueMc,
    Describe,
    MostSimilar,
    LeastSimilar,
    AbsWithContext,
    CrossRegionCmp,
    MultiHop,
}

impl Task {
    pub const ALL: [Task; 9] = [
        Task::CmpAvg,
        Task::FeatCmp,
        Task::AbsValueMc,
        Task::Describe,
        Task::MostSimilar,
        Task::LeastSimilar,
        Task::AbsWithContext,
        Task::CrossRegionCmp,
        Task::MultiHop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::CmpAvg => "cmp_avg",
            Task::FeatCmp => "feat_cmp",
            Task::AbsValueMc => "abs_value_mc",
            Task::Describe => "describe",
            Task::MostSimilar => "most_similar",
            Task::LeastSimilar => "least_similar",
            Task::AbsWithContext => "abs_with_context",
            Task::CrossRegionCmp => "cross_region_cmp",
            Task::MultiHop => "multi_hop",
        }
    }

    /// Tasks answered by exact match rather than perplexity.
    pub fn is_discrete(self) -> bool {
        self != Task::Describe
    }

    pub fn is_multiple_choice(self) -> bool {
        matches!(self, Task::AbsValueMc | Task::AbsWithContext)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = DfrError;
    fn from_str(s: &str) -> Result<Self, DfrError> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| DfrError::invalid(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Canonical,
    Formal,
    Informal,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Canonical, Style::Formal, Style::Informal];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::Canonical => "canonical",
            Style::Formal => "formal",
            Style::Informal => "informal",
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    ShiftCounty,
}

/// Answer vocabulary of a template bank. Only `cmp_avg` has two.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerForm {
    #[default]
    Plain,
    YesNo,
}

/// Generation record: everything the answer was computed from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub uid: String,
    /// Uid of the canonical example this is a style rewrite of.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<String>,
    /// Template index within its bank.
    pub variant: usize,
    #[serde(default)]
    pub form: AnswerForm,
    /// Feature indices the question is about, in template order.
    pub features: Vec<usize>,
    /// Similarity subset name for similarity and multi-hop tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
    /// Values stated in the prompt text (context tasks).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context_values: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_letter: Option<char>,
    /// Seed of the informal noise pass, if one was applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub prompt: String,
    pub region_ids: Vec<String>,
    pub answer: String,
    pub task: Task,
    pub style: Style,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    pub meta: Meta,
}

impl QAExample {
    pub fn is_paired_rewrite(&self) -> bool {
        self.meta.pair.is_some()
    }
}

impl crate::sequencer::PromptSource for QAExample {
    fn prompt(&self) -> &str {
        &self.prompt
    }
    fn answer(&self) -> &str {
        &self.answer
    }
    fn region_ids(&self) -> &[String] {
        &self.region_ids
    }
}

pub const OPTION_LETTERS: [char; 4] = ['a', 'b', 'c', 'd'];
