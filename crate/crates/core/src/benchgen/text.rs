//! Prompt rendering and the text serializations used by the baselines.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::style::informal_noise;
use super::templates::{bank, fill};
use super::{QAExample, Style, Task, OPTION_LETTERS};
use crate::backbone::vocab::{emb_token, split_tokens};
use crate::error::{DfrError, Result};
use crate::geoworld::{format_value, name_order, Region, WorldStats, D_RAW, FEATURES};

use super::tasks::DEGENERATE_Z;

/// Text standing for region slot `k` in a DFR prompt.
pub fn region_text(k: usize, id: &str) -> String {
    format!("{id} {}", emb_token(k))
}

fn options_text(options: &[String]) -> String {
    options
        .iter()
        .zip(OPTION_LETTERS)
        .map(|(o, l)| format!("{l}) {o}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders the question of `ex` from its generation record, with region
/// slots in DFR form.
pub(super) fn render_question(ex: &QAExample) -> String {
    let templates = bank(ex.task, ex.style, ex.meta.form);
    let tpl = templates[ex.meta.variant % templates.len()];
    let regions: Vec<String> = ex.region_ids.iter().enumerate().map(|(k, id)| region_text(k, id)).collect();
    let surface = |i: usize| ex.meta.features.get(i).map(|&f| FEATURES[f].surface).unwrap_or("");
    let mut slots: Vec<(&str, String)> = Vec::new();
    for (k, key) in ["r0", "r1", "r2"].into_iter().enumerate() {
        if let Some(r) = regions.get(k) {
            slots.push((key, r.clone()));
        }
    }
    if let Some(r) = regions.first() {
        slots.push(("r", r.clone()));
    }
    match ex.task {
        Task::FeatCmp => {
            slots.push(("a", surface(0).into()));
            slots.push(("b", surface(1).into()));
        }
        Task::MostSimilar | Task::LeastSimilar | Task::MultiHop => {
            slots.push(("cands", regions[1..].join(", ")));
            slots.push(("s", ex.meta.subset.clone().unwrap_or_default()));
            if ex.task == Task::MultiHop {
                let g = *ex.meta.features.last().expect("multi-hop has a target feature");
                slots.push(("g", FEATURES[g].surface.into()));
            }
        }
        Task::CrossRegionCmp => {
            let f = ex.meta.features[0];
            slots.push(("f", surface(0).into()));
            slots.push(("ca", regions[0].clone()));
            slots.push(("cb", regions[1].clone()));
            slots.push(("cmp", if FEATURES[f].is_count { "more" } else { "higher" }.into()));
        }
        _ => slots.push(("f", surface(0).into())),
    }
    for (i, v) in ex.meta.context_values.iter().enumerate() {
        slots.push((["v0", "v1"][i.min(1)], v.clone()));
    }
    slots.push(("opts", options_text(&ex.options)));
    let borrowed: Vec<(&str, &str)> = slots.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let text = fill(tpl, &borrowed);
    match (ex.style, ex.meta.noise_seed) {
        (Style::Informal, Some(seed)) => informal_noise(&text, seed),
        _ => text,
    }
}

fn ranked_features(region: &Region, stats: &WorldStats) -> Vec<(usize, f64)> {
    let z = stats.z_scores(region);
    let mut order: Vec<(usize, f64)> = name_order().iter().map(|&f| (f, z[f])).collect();
    // Stable sort keeps name order among equal |z|.
    order.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    order
}

pub(super) fn overview(region: &Region, stats: &WorldStats) -> String {
    let ranked = ranked_features(region, stats);
    let (top, z) = ranked[0];
    if z.abs() < 0.5 {
        "this region has a typical profile.".into()
    } else {
        let dir = if z > 0.0 { "high" } else { "low" };
        format!("this region stands out for its {dir} {}.", FEATURES[top].surface)
    }
}

/// Gold description: overview sentence, then all features grouped by
/// direction, each group ordered by |z| descending with ties in name order.
pub fn describe_text(region: &Region, stats: &WorldStats) -> String {
    let ranked = ranked_features(region, stats);
    let x = region.raw();
    let mut out = overview(region, stats);
    let groups: [(&str, fn(f64) -> bool); 3] = [
        ("above average", |z| z > DEGENERATE_Z),
        ("below average", |z| z < -DEGENERATE_Z),
        ("at average", |z| z.abs() <= DEGENERATE_Z),
    ];
    for (label, keep) in groups {
        let items: Vec<String> = ranked
            .iter()
            .filter(|(_, z)| keep(*z))
            .map(|&(f, _)| format!("{} {}", FEATURES[f].surface, format_value(f, x[f])))
            .collect();
        if !items.is_empty() {
            out.push_str(&format!(" {label}: {}.", items.join(", ")));
        }
    }
    out
}

/// Analyst-report register of the same content, used as the raw-data
/// description baseline.
pub fn describe_raw_data(region: &Region, stats: &WorldStats) -> String {
    let ranked = ranked_features(region, stats);
    let x = region.raw();
    let items: Vec<String> = ranked
        .iter()
        .map(|&(f, z)| {
            let dir = if z > DEGENERATE_Z {
                "above average"
            } else if z < -DEGENERATE_Z {
                "below average"
            } else {
                "at average"
            };
            format!("{} {} ({dir})", FEATURES[f].surface, format_value(f, x[f]))
        })
        .collect();
    let kind = if ranked[0].1.abs() < 0.5 { "typical" } else { "distinctive" };
    format!(
        "analyst report for region {}. most significant indicators: {}. overall, the region has a {kind} profile.",
        region.region_id,
        items.join(", ")
    )
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawInput {
    pub text: String,
    pub truncated: bool,
    pub tokens: usize,
}

/// Feature-value serialization of `regions`, cut at whole lines so its
/// token count stays within `budget`.
pub fn serialize_raw_input(regions: &[&Region], budget: usize) -> RawInput {
    let mut lines = Vec::new();
    for r in regions {
        lines.push(format!("region: {}", r.region_id));
        let x = r.raw();
        for f in 0..D_RAW {
            lines.push(format!("feature: {} | value: {}", FEATURES[f].name, format_value(f, x[f])));
        }
    }
    let mut text = String::new();
    let mut tokens = 0;
    let mut truncated = false;
    for line in lines {
        let n = split_tokens(&line).len();
        if tokens + n > budget {
            truncated = true;
            break;
        }
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(&line);
        tokens += n;
    }
    RawInput { text, truncated, tokens }
}

/// Removes `<emb:k> ` markers, leaving region ids in place.
pub fn strip_placeholders(prompt: &str) -> String {
    let mut s = prompt.to_string();
    for k in 0..crate::backbone::vocab::MAX_SLOTS {
        s = s.replace(&format!(" {}", emb_token(k)), "");
        s = s.replace(&emb_token(k), "");
    }
    s
}

/// How region information reaches the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    /// Placeholders kept; soft tokens are spliced in.
    Dfr,
    /// Placeholders removed, nothing added.
    ZeroContext,
    /// Feature-value serialization prepended, within a token budget.
    RawInput { budget: usize },
    /// Analyst reports prepended.
    RawDescription,
}

/// Prompt text of `ex` under `mode`; the flag reports raw-input truncation.
pub fn render_prompt<'r>(
    ex: &QAExample,
    mode: PromptMode,
    lookup: impl Fn(&str) -> Option<&'r Region>,
    stats: &WorldStats,
) -> Result<(String, bool)> {
    let regions = || -> Result<Vec<&'r Region>> {
        ex.region_ids
            .iter()
            .map(|id| lookup(id).ok_or_else(|| DfrError::MissingRegion(id.clone())))
            .collect()
    };
    Ok(match mode {
        PromptMode::Dfr => (ex.prompt.clone(), false),
        PromptMode::ZeroContext => (strip_placeholders(&ex.prompt), false),
        PromptMode::RawInput { budget } => {
            let q = strip_placeholders(&ex.prompt);
            let room = budget.saturating_sub(split_tokens(&q).len());
            let raw = serialize_raw_input(&regions()?, room);
            (format!("{} {q}", raw.text), raw.truncated)
        }
        PromptMode::RawDescription => {
            let q = strip_placeholders(&ex.prompt);
            let reports: Vec<String> = regions()?.iter().map(|r| describe_raw_data(r, stats)).collect();
            (format!("{} {q}", reports.join(" ")), false)
        }
    })
}

/// The question with each region slot replaced by its id and the literal
/// values of the features the question is about.
pub fn literal_prompt(ex: &QAExample, region_of: impl Fn(&str) -> Option<Region>) -> Result<String> {
    let mut s = ex.prompt.clone();
    for (k, id) in ex.region_ids.iter().enumerate() {
        let r = region_of(id).ok_or_else(|| DfrError::MissingRegion(id.clone()))?;
        let x = r.raw();
        let vals: Vec<String> = ex
            .meta
            .features
            .iter()
            .map(|&f| format!("{} {}", FEATURES[f].surface, format_value(f, x[f])))
            .collect();
        s = s.replace(&region_text(k, id), &format!("{id} ({})", vals.join(", ")));
    }
    Ok(s)
}

/// `k` solved exemplars of `task` drawn from `pool`, avoiding every region
/// in `exclude`, rendered with literal feature values.
pub fn build_fewshot_context<R: Rng>(
    task: Task,
    k: usize,
    pool: &[QAExample],
    exclude: &BTreeSet<String>,
    region_of: impl Fn(&str) -> Option<Region>,
    rng: &mut R,
) -> Result<String> {
    if k == 0 {
        return Ok(String::new());
    }
    let eligible: Vec<&QAExample> = pool
        .iter()
        .filter(|e| e.task == task && e.region_ids.iter().all(|id| !exclude.contains(id)))
        .collect();
    if eligible.len() < k {
        return Err(DfrError::invalid(format!(
            "few-shot pool has {} usable {task} examples, need {k}",
            eligible.len()
        )));
    }
    let picks: Vec<&&QAExample> = eligible.choose_multiple(rng, k).collect();
    let mut blocks = Vec::with_capacity(k);
    for ex in picks {
        blocks.push(format!("{} {}.", literal_prompt(ex, &region_of)?, ex.answer));
    }
    Ok(blocks.join(" ") + " ")
}
