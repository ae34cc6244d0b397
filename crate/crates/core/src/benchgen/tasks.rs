//! Per-task generators and the answer recomputation rule for each task.

use rand::seq::SliceRandom;
use rand::Rng;

use super::text::{describe_text, render_question};
use super::{AnswerForm, Meta, QAExample, Split, Style, Task, OPTION_LETTERS};
use crate::geoworld::{feature_distance, format_value, Region, WorldStats, FEATURES, TEMP, BUSYNESS, TREND_BASE};

/// Values within this many standard deviations of the mean are too close
/// to call "higher" or "lower" and are never asked about.
pub const DEGENERATE_Z: f64 = 0.25;

/// Smallest relative gap `|a − b| / max(a, b)` for a feature comparison;
/// closer pairs are treated as ties.
pub const FEAT_CMP_MIN_GAP: f64 = 0.25;

/// Named feature subsets for similarity questions.
pub const SIMILARITY_SUBSETS: [(&str, &[usize]); 5] = [
    ("weather", &[TEMP]),
    ("food scene", &[2, 0, 1, TREND_BASE]),
    ("health", &[3, 4, TREND_BASE + 1]),
    ("leisure", &[5, 7, TREND_BASE + 2]),
    ("urban activity", &[BUSYNESS, 6, TREND_BASE + 3]),
];

pub fn similarity_subset(name: &str) -> Option<&'static [usize]> {
    SIMILARITY_SUBSETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Why a generator declined an input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Skip {
    Tie,
    Degenerate,
    NotCount,
    Options,
    Invalid(String),
}

fn draft(task: Task, regions: &[&Region], answer: String, meta: Meta, options: Vec<String>) -> QAExample {
    let mut ex = QAExample {
        prompt: String::new(),
        region_ids: regions.iter().map(|r| r.region_id.clone()).collect(),
        answer,
        task,
        style: Style::Canonical,
        split: Split::Train,
        options,
        meta,
    };
    ex.prompt = render_question(&ex);
    ex
}

fn side_of_mean(region: &Region, feature: usize, stats: &WorldStats) -> Result<bool, Skip> {
    let z = stats.z(feature, region.value(feature));
    if z.abs() <= DEGENERATE_Z {
        return Err(Skip::Degenerate);
    }
    Ok(z > 0.0)
}

pub fn gen_cmp_avg(region: &Region, feature: usize, stats: &WorldStats, form: AnswerForm) -> Result<QAExample, Skip> {
    let higher = side_of_mean(region, feature, stats)?;
    let answer = match (form, higher) {
        (AnswerForm::Plain, true) => "higher",
        (AnswerForm::Plain, false) => "lower",
        (AnswerForm::YesNo, true) => "yes",
        (AnswerForm::YesNo, false) => "no",
    };
    let meta = Meta {
        form,
        features: vec![feature],
        ..Meta::default()
    };
    Ok(draft(Task::CmpAvg, &[region], answer.into(), meta, Vec::new()))
}

/// `a` is mentioned first. Both features must be counts.
pub fn gen_feat_cmp(region: &Region, a: usize, b: usize) -> Result<QAExample, Skip> {
    if !FEATURES[a].is_count || !FEATURES[b].is_count {
        return Err(Skip::NotCount);
    }
    if a == b {
        return Err(Skip::Invalid("same feature twice".into()));
    }
    let (va, vb) = (region.value(a), region.value(b));
    if (va - vb).abs() < FEAT_CMP_MIN_GAP * va.max(vb) || va == vb {
        return Err(Skip::Tie);
    }
    let win = if va > vb { a } else { b };
    let meta = Meta {
        features: vec![a, b],
        ..Meta::default()
    };
    Ok(draft(Task::FeatCmp, &[region], FEATURES[win].surface.into(), meta, Vec::new()))
}

/// Three distinct distractors `c ± max(1, round(c·U(0.1, 0.5)))`, none
/// negative; `None` if fifty draws do not produce them.
pub fn abs_distractors<R: Rng>(count: u64, rng: &mut R) -> Option<[u64; 3]> {
    let mut out: Vec<u64> = Vec::with_capacity(3);
    for _ in 0..50 {
        let frac: f64 = rng.gen_range(0.1..0.5);
        let delta = ((count as f64 * frac).round() as u64).max(1);
        let up = rng.gen_bool(0.5) || delta > count;
        let v = if up { count + delta } else { count - delta };
        if v != count && !out.contains(&v) {
            out.push(v);
            if out.len() == 3 {
                return Some([out[0], out[1], out[2]]);
            }
        }
    }
    None
}

fn mc_options<R: Rng>(count: u64, rng: &mut R) -> Result<(Vec<String>, char), Skip> {
    let d = abs_distractors(count, rng).ok_or(Skip::Options)?;
    let mut opts = [count, d[0], d[1], d[2]];
    opts.shuffle(rng);
    let pos = opts.iter().position(|&v| v == count).expect("true count present");
    Ok((opts.iter().map(u64::to_string).collect(), OPTION_LETTERS[pos]))
}

pub fn gen_abs_value_mc<R: Rng>(region: &Region, feature: usize, rng: &mut R) -> Result<QAExample, Skip> {
    if !FEATURES[feature].is_count {
        return Err(Skip::NotCount);
    }
    let count = region.value(feature) as u64;
    let (options, letter) = mc_options(count, rng)?;
    let meta = Meta {
        features: vec![feature],
        answer_letter: Some(letter),
        ..Meta::default()
    };
    Ok(draft(Task::AbsValueMc, &[region], count.to_string(), meta, options))
}

pub fn gen_describe(region: &Region, stats: &WorldStats) -> QAExample {
    let meta = Meta {
        features: (0..FEATURES.len()).collect(),
        ..Meta::default()
    };
    draft(Task::Describe, &[region], describe_text(region, stats), meta, Vec::new())
}

/// Index and gap to the runner-up of the closest (or farthest) candidate.
fn rank_candidates(
    target: &Region,
    candidates: &[&Region],
    subset: &[usize],
    stats: &WorldStats,
    farthest: bool,
) -> Result<(usize, f64), Skip> {
    if candidates.len() < 2 {
        return Err(Skip::Invalid("need at least two candidates".into()));
    }
    let mut d: Vec<(f64, usize)> = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        if c.region_id == target.region_id {
            return Err(Skip::Invalid("candidate equals target".into()));
        }
        let dist = feature_distance(target, c, subset, stats).map_err(|e| Skip::Invalid(e.to_string()))?;
        d.push((if farthest { -dist } else { dist }, i));
    }
    d.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok((d[0].1, d[1].0 - d[0].0))
}

fn gen_similarity(
    task: Task,
    target: &Region,
    candidates: &[&Region],
    subset: &str,
    stats: &WorldStats,
    margin: f64,
) -> Result<QAExample, Skip> {
    let features = similarity_subset(subset).ok_or_else(|| Skip::Invalid(format!("unknown subset {subset}")))?;
    let (win, gap) = rank_candidates(target, candidates, features, stats, task == Task::LeastSimilar)?;
    if gap <= margin {
        return Err(Skip::Tie);
    }
    let mut regions = vec![target];
    regions.extend_from_slice(candidates);
    let meta = Meta {
        features: features.to_vec(),
        subset: Some(subset.into()),
        ..Meta::default()
    };
    Ok(draft(task, &regions, candidates[win].region_id.clone(), meta, Vec::new()))
}

/// Candidate closest to `target` on `subset`; near-ties (gap to the
/// runner-up ≤ `margin` z-units) are skipped.
pub fn gen_most_similar(
    target: &Region,
    candidates: &[&Region],
    subset: &str,
    stats: &WorldStats,
    margin: f64,
) -> Result<QAExample, Skip> {
    gen_similarity(Task::MostSimilar, target, candidates, subset, stats, margin)
}

pub fn gen_least_similar(
    target: &Region,
    candidates: &[&Region],
    subset: &str,
    stats: &WorldStats,
    margin: f64,
) -> Result<QAExample, Skip> {
    gen_similarity(Task::LeastSimilar, target, candidates, subset, stats, margin)
}

/// Counts of `regions[0]` and `regions[1]` are stated; `regions[2]` is asked.
pub fn gen_abs_with_context<R: Rng>(regions: [&Region; 3], feature: usize, rng: &mut R) -> Result<QAExample, Skip> {
    if !FEATURES[feature].is_count {
        return Err(Skip::NotCount);
    }
    let count = regions[2].value(feature) as u64;
    let (options, letter) = mc_options(count, rng)?;
    let meta = Meta {
        features: vec![feature],
        context_values: regions[..2].iter().map(|r| format_value(feature, r.value(feature))).collect(),
        answer_letter: Some(letter),
        ..Meta::default()
    };
    Ok(draft(Task::AbsWithContext, &regions, count.to_string(), meta, options))
}

pub fn gen_cross_region_cmp(a: &Region, b: &Region, feature: usize) -> Result<QAExample, Skip> {
    let (va, vb) = (a.value(feature), b.value(feature));
    if (va - vb).abs() < FEAT_CMP_MIN_GAP * va.max(vb) || va == vb {
        return Err(Skip::Tie);
    }
    let win = if va > vb { a } else { b };
    let meta = Meta {
        features: vec![feature],
        ..Meta::default()
    };
    Ok(draft(Task::CrossRegionCmp, &[a, b], win.region_id.clone(), meta, Vec::new()))
}

/// Hop 1: candidate most similar to `target` on `subset`. Hop 2: is its
/// `g` above the national mean.
pub fn gen_multi_hop(
    target: &Region,
    candidates: &[&Region],
    subset: &str,
    g: usize,
    stats: &WorldStats,
    margin: f64,
) -> Result<QAExample, Skip> {
    let features = similarity_subset(subset).ok_or_else(|| Skip::Invalid(format!("unknown subset {subset}")))?;
    let (win, gap) = rank_candidates(target, candidates, features, stats, false)?;
    if gap <= margin {
        return Err(Skip::Tie);
    }
    let higher = side_of_mean(candidates[win], g, stats)?;
    let mut regions = vec![target];
    regions.extend_from_slice(candidates);
    let mut feats = features.to_vec();
    feats.push(g);
    let meta = Meta {
        features: feats,
        subset: Some(subset.into()),
        ..Meta::default()
    };
    let answer = if higher { "yes" } else { "no" };
    Ok(draft(Task::MultiHop, &regions, answer.into(), meta, Vec::new()))
}

/// Overview sentence of a description.
pub fn profile_sentence(region: &Region, stats: &WorldStats) -> String {
    super::text::overview(region, stats)
}

/// Recomputes the answer of `ex` from raw features and checks it against
/// the stored one, along with option and slot structure.
pub fn verify<'r>(
    ex: &QAExample,
    lookup: impl Fn(&str) -> Option<&'r Region>,
    stats: &WorldStats,
    margin: f64,
) -> Result<(), String> {
    let regions: Vec<&Region> = ex
        .region_ids
        .iter()
        .map(|id| lookup(id).ok_or_else(|| format!("unknown region {id}")))
        .collect::<Result<_, _>>()?;
    let f = |i: usize| ex.meta.features.get(i).copied().ok_or("missing feature");
    let expected: String = match ex.task {
        Task::CmpAvg => {
            let higher = side_of_mean(regions[0], f(0)?, stats).map_err(|_| "degenerate value")?;
            match (ex.meta.form, higher) {
                (AnswerForm::Plain, true) => "higher".into(),
                (AnswerForm::Plain, false) => "lower".into(),
                (AnswerForm::YesNo, true) => "yes".into(),
                (AnswerForm::YesNo, false) => "no".into(),
            }
        }
        Task::FeatCmp => gen_feat_cmp(regions[0], f(0)?, f(1)?).map_err(|s| format!("{s:?}"))?.answer,
        Task::AbsValueMc | Task::AbsWithContext => {
            let target = *regions.last().ok_or("no regions")?;
            let v = target.value(f(0)?) as u64;
            check_options(ex, v)?;
            if ex.task == Task::AbsWithContext {
                for (r, stated) in regions[..2].iter().zip(&ex.meta.context_values) {
                    if format_value(f(0)?, r.value(f(0)?)) != *stated {
                        return Err("context value mismatch".into());
                    }
                }
            }
            v.to_string()
        }
        Task::Describe => describe_text(regions[0], stats),
        Task::MostSimilar | Task::LeastSimilar | Task::MultiHop => {
            let subset = ex.meta.subset.as_deref().ok_or("missing subset")?;
            let feats = similarity_subset(subset).ok_or("unknown subset")?;
            let farthest = ex.task == Task::LeastSimilar;
            let (win, gap) = rank_candidates(regions[0], &regions[1..], feats, stats, farthest)
                .map_err(|s| format!("{s:?}"))?;
            if gap <= margin {
                return Err("near tie".into());
            }
            if ex.task == Task::MultiHop {
                let g = *ex.meta.features.last().ok_or("missing feature")?;
                let higher = side_of_mean(regions[1 + win], g, stats).map_err(|_| "degenerate value")?;
                if higher { "yes" } else { "no" }.into()
            } else {
                regions[1 + win].region_id.clone()
            }
        }
        Task::CrossRegionCmp => gen_cross_region_cmp(regions[0], regions[1], f(0)?)
            .map_err(|s| format!("{s:?}"))?
            .answer,
    };
    if expected != ex.answer {
        return Err(format!("answer {:?}, recomputed {:?}", ex.answer, expected));
    }
    let mut rendered = ex.clone();
    rendered.prompt = render_question(ex);
    if rendered.prompt != ex.prompt {
        return Err("prompt does not match its generation record".into());
    }
    Ok(())
}

fn check_options(ex: &QAExample, v: u64) -> Result<(), String> {
    if ex.options.len() != 4 {
        return Err("expected 4 options".into());
    }
    let mut sorted = ex.options.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != 4 {
        return Err("duplicate options".into());
    }
    let pos = ex.options.iter().position(|o| *o == v.to_string()).ok_or("answer not among options")?;
    if ex.meta.answer_letter != Some(OPTION_LETTERS[pos]) {
        return Err("answer letter mismatch".into());
    }
    Ok(())
}
