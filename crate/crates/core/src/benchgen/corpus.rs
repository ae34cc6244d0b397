//! Pretraining corpus for the backbone, drawn from a separate world so no
//! benchmark region appears in it. Canonical style only.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{sample_example, Pool};
use super::style::augment_style;
use super::templates::all_templates;
use super::text::{describe_raw_data, literal_prompt, serialize_raw_input, strip_placeholders};
use super::{Style, Task, OPTION_LETTERS};
use crate::error::{DfrError, Result};
use crate::geoworld::{derive_seed, Region, World, WorldStats, FEATURES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Regions in the corpus world, before removing excluded ids.
    pub n_regions: usize,
    /// Per task: questions with literal feature values and their answers.
    pub literal_per_task: usize,
    /// Per task: questions with bare region ids and balanced answers.
    pub zero_context_per_task: usize,
    pub reports: usize,
    /// Questions preceded by a feature-value serialization.
    pub raw_input: usize,
    /// Token budget of a raw-input serialization.
    pub raw_budget: usize,
    pub similarity_margin: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_regions: 1500,
            literal_per_task: 500,
            zero_context_per_task: 120,
            reports: 300,
            raw_input: 300,
            raw_budget: 240,
            similarity_margin: 0.25,
        }
    }
}

fn lines_for<'a>(
    task: Task,
    n: usize,
    tag: &str,
    pool: &Pool<'a>,
    seed: u64,
    mut render: impl FnMut(&super::QAExample, &mut ChaCha8Rng) -> Result<String>,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("corpus/{tag}/{task}"), i as u64));
        let Some(ex) = sample_example(task, i, pool, &mut rng) else {
            return Err(DfrError::invalid(format!("corpus: could not sample {task}")));
        };
        let ex = augment_style(&ex, Style::Canonical, rng.gen());
        out.push(render(&ex, &mut rng)?);
    }
    Ok(out)
}

/// Corpus lines plus the statistics of the corpus world.
pub fn build_corpus(cfg: &CorpusConfig, exclude: &BTreeSet<String>) -> Result<(Vec<String>, WorldStats)> {
    let world = World::generate(cfg.n_regions, cfg.seed)?;
    let regions: Vec<&Region> = world.regions.iter().filter(|r| !exclude.contains(&r.region_id)).collect();
    if regions.len() < 16 {
        return Err(DfrError::Config("corpus: too few regions after exclusion".into()));
    }
    let lookup = |id: &str| world.region(id).cloned();
    let pool = Pool {
        regions,
        stats: &world.stats,
        margin: cfg.similarity_margin,
        yes_no_fraction: 0.5,
    };
    let mut lines = Vec::new();
    for task in Task::ALL {
        lines.extend(lines_for(task, cfg.literal_per_task, "literal", &pool, cfg.seed, |ex, _| {
            Ok(format!("{} {}", literal_prompt(ex, lookup)?, ex.answer))
        })?);
        lines.extend(lines_for(task, cfg.zero_context_per_task, "zero", &pool, cfg.seed, |ex, _| {
            Ok(format!("{} {}", strip_placeholders(&ex.prompt), ex.answer))
        })?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "corpus/reports", 0));
    for _ in 0..cfg.reports {
        let r = pool.regions[rng.gen_range(0..pool.regions.len())];
        lines.push(describe_raw_data(r, &world.stats));
    }
    let discrete: Vec<Task> = Task::ALL.into_iter().filter(|t| t.is_discrete()).collect();
    for i in 0..cfg.raw_input {
        let task = discrete[i % discrete.len()];
        lines.extend(lines_for(task, 1, &format!("raw{i}"), &pool, cfg.seed, |ex, _| {
            let regions: Vec<Region> = ex.region_ids.iter().filter_map(|id| lookup(id)).collect();
            let refs: Vec<&Region> = regions.iter().collect();
            let raw = serialize_raw_input(&refs, cfg.raw_budget);
            Ok(format!("{} {} {}", raw.text, strip_placeholders(&ex.prompt), ex.answer))
        })?);
    }
    Ok((lines, world.stats))
}

/// Extra lines that put every template word, feature name and option
/// letter into the vocabulary.
pub fn corpus_vocab_lines() -> Vec<String> {
    let mut out: Vec<String> = all_templates()
        .into_iter()
        .map(|t| t.replace(['{', '}'], " "))
        .collect();
    out.push(FEATURES.iter().map(|f| format!("{} {}", f.name, f.surface)).collect::<Vec<_>>().join(" "));
    out.push(OPTION_LETTERS.iter().map(|c| format!("{c})")).collect::<Vec<_>>().join(" "));
    out.push("u r pls abt cuz w b4 ok feature value region analyst report".into());
    out
}
