//! Evaluation of DFR and its baselines: exact-match accuracy, answer
//! perplexity, token accounting, the no-LLM probe, the fragmented
//! pipeline, style robustness, county shift, N sweeps and reports.

mod fragmented;
mod mlp;
mod report;
mod studies;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backbone::vocab::EOS;
use crate::backbone::{Backbone, Vocab};
use crate::benchgen::{render_prompt, PromptMode, QAExample, Style, Task};
use crate::error::{DfrError, Result};
use crate::geoworld::{Region, World, WorldStats};
use crate::numkernel::Graph;
use crate::par::Executor;
use crate::projector::Projector;
use crate::sequencer::{build_sequence, mixed_embeds_var, EmbeddingStore, SeqPlan};

pub use fragmented::{rank_candidates, run_fragmented, FeatureProbe, FragmentedOutcome, FragmentedRun, OracleProbe, RidgeProbes};
pub use mlp::{answer_candidates, run_no_llm_mlp, MlpConfig, MlpOutcome};
pub use report::{render_csv, render_markdown, write_report, ReportHeader};
pub use studies::{
    accuracy_of, eval_robustness, eval_shift, paired_deltas, sweep_n, Adaptation, Robustness, StyleDelta, SweepCell,
};

/// Extra decoding room beyond the gold answer length.
const DECODE_SLACK: usize = 8;

/// Everything needed to answer a prompt.
#[derive(Clone, Copy)]
pub struct ModelBundle<'a> {
    pub backbone: &'a Backbone,
    /// Required only for prompts that still contain placeholders.
    pub projector: Option<&'a Projector>,
    pub vocab: &'a Vocab,
    pub store: &'a EmbeddingStore,
    pub exec: Executor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Perplexity,
    TokenLenMin,
    TokenLenMean,
    TokenLenMax,
    /// Accuracy difference against a reference on paired examples.
    Delta,
    Ratio,
    /// Coefficient of determination of a probe.
    R2,
    /// Wall time in milliseconds.
    LatencyMs,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Perplexity => "perplexity",
            Metric::TokenLenMin => "token_len_min",
            Metric::TokenLenMean => "token_len_mean",
            Metric::TokenLenMax => "token_len_max",
            Metric::Delta => "delta",
            Metric::Ratio => "ratio",
            Metric::R2 => "r2",
            Metric::LatencyMs => "latency_ms",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Report section, e.g. `main`, `robustness`, `sweep`.
    pub experiment: String,
    pub method: String,
    /// Task name, or `all`.
    pub task: String,
    /// Style name, or `all`.
    pub style: String,
    pub split: String,
    pub metric: Metric,
    pub value: f64,
    pub count: usize,
    pub config_hash: String,
}

/// Identity shared by the results of one evaluation call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Label {
    pub experiment: String,
    pub method: String,
    pub split: String,
    pub config_hash: String,
}

impl Label {
    pub fn new(experiment: &str, method: &str, split: &str) -> Self {
        Self {
            experiment: experiment.into(),
            method: method.into(),
            split: split.into(),
            config_hash: String::new(),
        }
    }

    pub fn with_hash(mut self, hash: &str) -> Self {
        self.config_hash = hash.into();
        self
    }

    pub fn with_method(&self, method: &str) -> Self {
        Self {
            method: method.into(),
            ..self.clone()
        }
    }

    pub fn result(&self, task: &str, style: &str, metric: Metric, value: f64, count: usize) -> EvalResult {
        EvalResult {
            experiment: self.experiment.clone(),
            method: self.method.clone(),
            task: task.into(),
            style: style.into(),
            split: self.split.clone(),
            metric,
            value,
            count,
            config_hash: self.config_hash.clone(),
        }
    }
}

/// Lowercased first line with punctuation turned into spaces and runs of
/// whitespace collapsed.
pub fn normalize_answer(text: &str) -> String {
    let first = text.lines().next().unwrap_or("").to_lowercase();
    let kept: String = first
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '_' { c } else { ' ' })
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Exact match on normalized text; multiple-choice answers may also be
/// given as the option letter.
pub fn is_correct(prediction: &str, ex: &QAExample) -> bool {
    let p = normalize_answer(prediction);
    if p == normalize_answer(&ex.answer) {
        return true;
    }
    ex.task.is_multiple_choice() && ex.meta.answer_letter.is_some_and(|l| p == l.to_string())
}

/// Per-example evaluation record.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleOutcome {
    pub uid: String,
    pub task: Task,
    pub style: Style,
    pub prediction: Option<String>,
    pub correct: Option<bool>,
    /// Summed CE over answer tokens and `<eos>`.
    pub nll: f64,
    pub answer_tokens: usize,
    /// Input length as the backbone sees it (soft tokens counted).
    pub input_tokens: usize,
    pub truncated: bool,
}

/// Region lookup over a world plus any aggregated regions.
pub struct RegionIndex<'a> {
    map: HashMap<&'a str, &'a Region>,
    pub stats: &'a WorldStats,
}

impl<'a> RegionIndex<'a> {
    pub fn new(world: &'a World, extra: &'a [Region]) -> Self {
        let map = world
            .regions
            .iter()
            .chain(extra)
            .map(|r| (r.region_id.as_str(), r))
            .collect();
        Self {
            map,
            stats: &world.stats,
        }
    }

    pub fn get(&self, id: &str) -> Option<&'a Region> {
        self.map.get(id).copied()
    }
}

fn bundle_projector<'a>(bundle: &ModelBundle<'a>, plan: &SeqPlan) -> Result<Option<&'a Projector>> {
    match (plan.k(), bundle.projector) {
        (0, _) => Ok(None),
        (_, Some(p)) => Ok(Some(p)),
        (k, None) => Err(DfrError::Config(format!("prompt has {k} placeholders but no projector was given"))),
    }
}

/// Summed answer CE and the number of scored tokens, teacher forced.
fn answer_nll(bundle: &ModelBundle<'_>, plan: &SeqPlan, region_ids: &[String]) -> Result<(f64, usize)> {
    let bb = bundle.backbone;
    let proj = bundle_projector(bundle, plan)?;
    let n_tokens = proj.map_or(1, |p| p.n_tokens);
    let mut g = Graph::new();
    let bv = bb.bind(&mut g);
    let x = match proj {
        Some(p) => {
            let bp = p.bind(&mut g);
            mixed_embeds_var(&mut g, bb, &bv, p, &bp, plan, region_ids, bundle.store)?.0
        }
        None => bb.embed_var(&mut g, &bv, &plan.ids)?,
    };
    let (_, targets, mask) = plan.layout(n_tokens);
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(DfrError::EmptyMask);
    }
    let pos: Vec<usize> = (0..targets.len()).collect();
    let h = bb.hidden_var(&mut g, &bv, x, &pos)?;
    let logits = bb.logits_var(&mut g, &bv, h, Some(&rows))?;
    let tgt: Vec<usize> = rows.iter().map(|&r| targets[r]).collect();
    let ce = g.softmax_xent(logits, &tgt, &vec![true; rows.len()])?;
    Ok((g.scalar(ce) * rows.len() as f64, rows.len()))
}

/// Greedy continuation of `prompt` until `<eos>` or `max_new` tokens.
pub fn generate(bundle: &ModelBundle<'_>, prompt: &str, region_ids: &[String], max_new: usize) -> Result<String> {
    let plan = SeqPlan::new(bundle.vocab, prompt, None)?;
    let (embeds, pos) = match bundle_projector(bundle, &plan)? {
        Some(p) => {
            let seq = build_sequence(&plan, region_ids, bundle.store, p, bundle.backbone)?;
            (seq.embeds, seq.position_ids)
        }
        None => (bundle.backbone.embed_tokens(&plan.ids)?, (0..plan.ids.len()).collect()),
    };
    let ids = bundle.backbone.generate_greedy(&embeds, &pos, max_new, EOS)?;
    Ok(bundle.vocab.detokenize(&ids))
}

/// Scores one example on an already rendered prompt. Discrete tasks are
/// also decoded greedily.
pub fn score_example(bundle: &ModelBundle<'_>, ex: &QAExample, prompt: &str, region_ids: &[String]) -> Result<ExampleOutcome> {
    let plan = SeqPlan::new(bundle.vocab, prompt, Some(&ex.answer))?;
    let (nll, n) = answer_nll(bundle, &plan, region_ids)?;
    let prompt_plan = SeqPlan::new(bundle.vocab, prompt, None)?;
    let n_tokens = bundle_projector(bundle, &prompt_plan)?.map_or(1, |p| p.n_tokens);
    let (prediction, correct) = if ex.task.is_discrete() {
        let p = generate(bundle, prompt, region_ids, n + DECODE_SLACK)?;
        let ok = is_correct(&p, ex);
        (Some(p), Some(ok))
    } else {
        (None, None)
    };
    Ok(ExampleOutcome {
        uid: ex.meta.uid.clone(),
        task: ex.task,
        style: ex.style,
        prediction,
        correct,
        nll,
        answer_tokens: n,
        input_tokens: prompt_plan.mixed_len(n_tokens),
        truncated: false,
    })
}

/// Scores every example under `mode`, in input order.
pub fn score_examples(
    bundle: &ModelBundle<'_>,
    examples: &[QAExample],
    mode: PromptMode,
    regions: Option<&RegionIndex<'_>>,
) -> Result<Vec<ExampleOutcome>> {
    let needs_regions = matches!(mode, PromptMode::RawInput { .. } | PromptMode::RawDescription);
    if needs_regions && regions.is_none() {
        return Err(DfrError::Config("text baselines need the region index".into()));
    }
    // Only the text baselines read statistics, and they require `regions`.
    let no_stats = WorldStats {
        count: 0,
        mean: Vec::new(),
        std: Vec::new(),
    };
    let out = bundle.exec.map(examples, |ex| {
        let (prompt, truncated) = match regions {
            Some(ix) => render_prompt(ex, mode, |id| ix.get(id), ix.stats)?,
            None => render_prompt(ex, mode, |_| None, &no_stats)?,
        };
        let ids: &[String] = if mode == PromptMode::Dfr { &ex.region_ids } else { &[] };
        let mut o = score_example(bundle, ex, &prompt, ids)?;
        o.truncated = truncated;
        Ok(o)
    });
    out.into_iter().collect()
}

fn group_style(outcomes: &[&ExampleOutcome]) -> String {
    match outcomes.first() {
        Some(first) if outcomes.iter().all(|o| o.style == first.style) => first.style.to_string(),
        _ => "all".into(),
    }
}

/// Per-task accuracy or perplexity, then accuracy over all discrete tasks.
pub fn summarize(label: &Label, outcomes: &[ExampleOutcome]) -> Vec<EvalResult> {
    let mut out = Vec::new();
    for task in Task::ALL {
        let group: Vec<&ExampleOutcome> = outcomes.iter().filter(|o| o.task == task).collect();
        if group.is_empty() {
            continue;
        }
        let style = group_style(&group);
        if task.is_discrete() {
            let hits = group.iter().filter(|o| o.correct == Some(true)).count();
            out.push(label.result(task.as_str(), &style, Metric::Accuracy, hits as f64 / group.len() as f64, group.len()));
        } else {
            let nll: f64 = group.iter().map(|o| o.nll).sum();
            let n: usize = group.iter().map(|o| o.answer_tokens).sum();
            out.push(label.result(task.as_str(), &style, Metric::Perplexity, (nll / n as f64).exp(), group.len()));
        }
    }
    let disc: Vec<&ExampleOutcome> = outcomes.iter().filter(|o| o.correct.is_some()).collect();
    if !disc.is_empty() {
        let hits = disc.iter().filter(|o| o.correct == Some(true)).count();
        out.push(label.result("all", &group_style(&disc), Metric::Accuracy, hits as f64 / disc.len() as f64, disc.len()));
    }
    out
}

/// Evaluates one method (DFR or a text baseline) on `examples`.
pub fn run_method(
    bundle: &ModelBundle<'_>,
    examples: &[QAExample],
    mode: PromptMode,
    regions: Option<&RegionIndex<'_>>,
    label: &Label,
) -> Result<(Vec<ExampleOutcome>, Vec<EvalResult>)> {
    let outcomes = score_examples(bundle, examples, mode, regions)?;
    let results = summarize(label, &outcomes);
    Ok((outcomes, results))
}

/// Greedy exact-match accuracy of DFR over discrete-answer examples.
pub fn eval_accuracy(bundle: &ModelBundle<'_>, examples: &[QAExample], label: &Label) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(DfrError::invalid("no examples to evaluate"));
    }
    if let Some(e) = examples.iter().find(|e| !e.task.is_discrete()) {
        return Err(DfrError::invalid(format!("{} has no discrete answer", e.meta.uid)));
    }
    let outcomes = score_examples(bundle, examples, PromptMode::Dfr, None)?;
    let hits = outcomes.iter().filter(|o| o.correct == Some(true)).count();
    let refs: Vec<&ExampleOutcome> = outcomes.iter().collect();
    let task = single_task(examples);
    Ok(label.result(&task, &group_style(&refs), Metric::Accuracy, hits as f64 / outcomes.len() as f64, outcomes.len()))
}

/// `exp` of the mean answer-token CE over describe examples.
pub fn eval_perplexity(bundle: &ModelBundle<'_>, examples: &[QAExample], label: &Label) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(DfrError::invalid("no examples to evaluate"));
    }
    if let Some(e) = examples.iter().find(|e| e.task != Task::Describe) {
        return Err(DfrError::invalid(format!("{} is not a describe example", e.meta.uid)));
    }
    let outcomes = score_examples(bundle, examples, PromptMode::Dfr, None)?;
    let nll: f64 = outcomes.iter().map(|o| o.nll).sum();
    let n: usize = outcomes.iter().map(|o| o.answer_tokens).sum();
    let refs: Vec<&ExampleOutcome> = outcomes.iter().collect();
    Ok(label.result("describe", &group_style(&refs), Metric::Perplexity, (nll / n as f64).exp(), outcomes.len()))
}

pub(crate) fn group_style_of(examples: &[&QAExample]) -> String {
    match examples.first() {
        Some(f) if examples.iter().all(|e| e.style == f.style) => f.style.to_string(),
        _ => "all".into(),
    }
}

fn single_task(examples: &[QAExample]) -> String {
    match examples.first() {
        Some(f) if examples.iter().all(|e| e.task == f.task) => f.task.to_string(),
        _ => "all".into(),
    }
}

/// How prompt length is counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthMethod {
    /// Mixed-sequence length with `n_tokens` soft tokens per region.
    Dfr { n_tokens: usize },
    /// Backbone tokens of a text prompt.
    Text(PromptMode),
}

/// Input length of every example's prompt, `<bos>` included.
pub fn token_lengths(
    examples: &[QAExample],
    method: LengthMethod,
    vocab: &Vocab,
    regions: &RegionIndex<'_>,
) -> Result<Vec<usize>> {
    examples
        .iter()
        .map(|ex| match method {
            LengthMethod::Dfr { n_tokens } => Ok(SeqPlan::new(vocab, &ex.prompt, None)?.mixed_len(n_tokens)),
            LengthMethod::Text(mode) => {
                let (p, _) = render_prompt(ex, mode, |id| regions.get(id), regions.stats)?;
                Ok(SeqPlan::new(vocab, &p, None)?.l_text())
            }
        })
        .collect()
}

/// Min, mean and max prompt length.
pub fn token_length_stats(lengths: &[usize], label: &Label) -> Result<[EvalResult; 3]> {
    if lengths.is_empty() {
        return Err(DfrError::invalid("no lengths to summarize"));
    }
    let n = lengths.len();
    let min = *lengths.iter().min().expect("non-empty") as f64;
    let max = *lengths.iter().max().expect("non-empty") as f64;
    let mean = lengths.iter().sum::<usize>() as f64 / n as f64;
    Ok([
        label.result("all", "all", Metric::TokenLenMin, min, n),
        label.result("all", "all", Metric::TokenLenMean, mean, n),
        label.result("all", "all", Metric::TokenLenMax, max, n),
    ])
}
