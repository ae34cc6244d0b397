//! Style robustness, county shift with adaptation, and N × strategy sweeps.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{score_example, score_examples, summarize, EvalResult, ExampleOutcome, Label, Metric, ModelBundle, RegionIndex};
use crate::backbone::Backbone;
use crate::benchgen::{build_fewshot_context, PromptMode, QAExample, Style, Task};
use crate::error::{DfrError, Result};
use crate::geoworld::derive_seed;
use crate::projector::Projector;
use crate::trainer::{fewshot_finetune, train, Strategy, TrainConfig, TrainContext, TrainOutcome};

/// Accuracy change of one style against canonical on paired examples.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleDelta {
    pub style: Style,
    /// Task name, or `all`.
    pub task: String,
    pub canonical: f64,
    pub styled: f64,
    /// `styled − canonical`.
    pub delta: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Robustness {
    pub results: Vec<EvalResult>,
    pub deltas: Vec<StyleDelta>,
}

fn acc(xs: &[bool]) -> f64 {
    xs.iter().filter(|&&b| b).count() as f64 / xs.len() as f64
}

/// Deltas from already scored examples. Only rewrites whose canonical
/// partner was scored count, and both sides use the same pairs.
pub fn paired_deltas(canonical: &[ExampleOutcome], styled: &[(&QAExample, ExampleOutcome)]) -> Vec<StyleDelta> {
    let by_uid: HashMap<&str, &ExampleOutcome> = canonical.iter().map(|o| (o.uid.as_str(), o)).collect();
    let mut out = Vec::new();
    for style in [Style::Formal, Style::Informal] {
        let mut rows: Vec<(Task, bool, bool)> = Vec::new();
        for (ex, o) in styled.iter().filter(|(e, _)| e.style == style) {
            let Some(c) = ex.meta.pair.as_deref().and_then(|p| by_uid.get(p)) else {
                continue;
            };
            if let (Some(a), Some(b)) = (c.correct, o.correct) {
                rows.push((ex.task, a, b));
            }
        }
        if rows.is_empty() {
            continue;
        }
        let mut push = |task: String, sel: Vec<&(Task, bool, bool)>| {
            let a: Vec<bool> = sel.iter().map(|r| r.1).collect();
            let b: Vec<bool> = sel.iter().map(|r| r.2).collect();
            let (ca, sa) = (acc(&a), acc(&b));
            out.push(StyleDelta {
                style,
                task,
                canonical: ca,
                styled: sa,
                delta: sa - ca,
                pairs: sel.len(),
            });
        };
        for task in Task::ALL {
            let sel: Vec<_> = rows.iter().filter(|r| r.0 == task).collect();
            if !sel.is_empty() {
                push(task.to_string(), sel);
            }
        }
        push("all".into(), rows.iter().collect());
    }
    out
}

/// Scores canonical test examples and their rewrites under `mode`.
pub fn eval_robustness(
    bundle: &ModelBundle<'_>,
    canonical: &[QAExample],
    rewrites: &[QAExample],
    mode: PromptMode,
    regions: Option<&RegionIndex<'_>>,
    label: &Label,
) -> Result<Robustness> {
    let wanted: BTreeSet<&str> = rewrites.iter().filter_map(|e| e.meta.pair.as_deref()).collect();
    let canon: Vec<QAExample> = canonical
        .iter()
        .filter(|e| e.task.is_discrete() && wanted.contains(e.meta.uid.as_str()))
        .cloned()
        .collect();
    let styled: Vec<QAExample> = rewrites.iter().filter(|e| e.task.is_discrete()).cloned().collect();
    if canon.is_empty() || styled.is_empty() {
        return Err(DfrError::invalid("robustness: no paired discrete examples"));
    }
    let c_out = score_examples(bundle, &canon, mode, regions)?;
    let s_out = score_examples(bundle, &styled, mode, regions)?;
    let mut results = summarize(label, &c_out);
    for style in [Style::Formal, Style::Informal] {
        let part: Vec<ExampleOutcome> = s_out.iter().filter(|o| o.style == style).cloned().collect();
        results.extend(summarize(label, &part));
    }
    let pairs: Vec<(&QAExample, ExampleOutcome)> = styled.iter().zip(s_out).collect();
    Ok(Robustness {
        results,
        deltas: paired_deltas(&c_out, &pairs),
    })
}

/// How the model is adapted to county-level inputs before scoring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Adaptation {
    None,
    /// `k` solved county examples with literal values prepended.
    FewshotContext { k: usize },
    /// Projector-only fine-tuning on `n` pool examples.
    FewshotFinetune { n: usize, steps: usize, lr: f64 },
}

impl Adaptation {
    pub fn label(&self) -> String {
        match self {
            Adaptation::None => "none".into(),
            Adaptation::FewshotContext { k } => format!("{k}-shot context"),
            Adaptation::FewshotFinetune { n, .. } => format!("{n}-shot finetune"),
        }
    }
}

/// DFR accuracy on county examples under `adaptation`. Few-shot material
/// comes from `pool`, which holds other counties, and never uses a region
/// of the example being answered.
pub fn eval_shift(
    bundle: &ModelBundle<'_>,
    examples: &[QAExample],
    pool: &[QAExample],
    regions: &RegionIndex<'_>,
    adaptation: Adaptation,
    seed: u64,
    label: &Label,
) -> Result<Vec<EvalResult>> {
    let outcomes = match adaptation {
        Adaptation::None => score_examples(bundle, examples, PromptMode::Dfr, None)?,
        Adaptation::FewshotContext { k } => {
            let work: Vec<(usize, &QAExample)> = examples.iter().enumerate().collect();
            let out = bundle.exec.map(&work, |&(i, ex)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shift/context", i as u64));
                let exclude: BTreeSet<String> = ex.region_ids.iter().cloned().collect();
                let ctx = build_fewshot_context(ex.task, k, pool, &exclude, |id| regions.get(id).cloned(), &mut rng)?;
                score_example(bundle, ex, &format!("{ctx}{}", ex.prompt), &ex.region_ids)
            });
            out.into_iter().collect::<Result<Vec<_>>>()?
        }
        Adaptation::FewshotFinetune { n, steps, lr } => {
            let projector = bundle
                .projector
                .ok_or_else(|| DfrError::Config("few-shot fine-tuning needs a projector".into()))?;
            let used: BTreeSet<&String> = examples.iter().flat_map(|e| &e.region_ids).collect();
            let mut shots: Vec<QAExample> = pool
                .iter()
                .filter(|e| e.task.is_discrete() && e.region_ids.iter().all(|id| !used.contains(id)))
                .cloned()
                .collect();
            shots.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "shift/finetune", 0)));
            shots.truncate(n);
            if shots.len() < n {
                return Err(DfrError::invalid(format!("shift pool has {} usable examples, need {n}", shots.len())));
            }
            let ctx = TrainContext {
                vocab: bundle.vocab,
                store: bundle.store,
                profiles: None,
                exec: bundle.exec,
            };
            let tuned = fewshot_finetune(projector, bundle.backbone, &shots, steps, lr, n.clamp(1, 16), seed, &ctx)?;
            let b = ModelBundle {
                projector: Some(&tuned),
                ..*bundle
            };
            score_examples(&b, examples, PromptMode::Dfr, None)?
        }
    };
    let l = label.with_method(&format!("{} ({})", label.method, adaptation.label()));
    Ok(summarize(&l, &outcomes))
}

/// One trained configuration of a sweep.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub n_tokens: usize,
    /// `mix` or `separate`.
    pub strategy: String,
    pub results: Vec<EvalResult>,
    pub outcomes: Vec<TrainOutcome>,
}

/// Trains and evaluates DFR for every N in `ns`, with one mixed projector
/// and, if `separate` is set, one projector per discrete task.
#[allow(clippy::too_many_arguments)]
pub fn sweep_n(
    base: &TrainConfig,
    ns: &[usize],
    separate: bool,
    train_set: &[QAExample],
    test_set: &[QAExample],
    backbone: &Backbone,
    ctx: &TrainContext<'_>,
    label: &Label,
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    let d_e = ctx.store.d_e;
    for &n in ns {
        let mut plans: Vec<(String, Vec<Strategy>)> = vec![("mix".into(), vec![Strategy::Mix])];
        if separate {
            let tasks: BTreeSet<Task> = train_set.iter().map(|e| e.task).filter(|t| t.is_discrete()).collect();
            plans.push(("separate".into(), tasks.into_iter().map(Strategy::Separate).collect()));
        }
        for (name, strategies) in plans {
            let mut outcomes = Vec::new();
            let mut scored = Vec::new();
            for strategy in strategies {
                let cfg = TrainConfig {
                    n_tokens: n,
                    strategy,
                    ..base.clone()
                };
                let init = Projector::init(d_e, backbone.d_llm(), n, derive_seed(base.seed, "sweep", n as u64))?;
                let out = train(&cfg, train_set, backbone, init, ctx)?;
                let test: Vec<QAExample> = match strategy {
                    Strategy::Mix => test_set.to_vec(),
                    Strategy::Separate(t) => test_set.iter().filter(|e| e.task == t).cloned().collect(),
                };
                let bundle = ModelBundle {
                    backbone: out.backbone.as_ref().unwrap_or(backbone),
                    projector: Some(&out.projector),
                    vocab: ctx.vocab,
                    store: ctx.store,
                    exec: ctx.exec,
                };
                scored.extend(score_examples(&bundle, &test, PromptMode::Dfr, None)?);
                outcomes.push(out);
            }
            let l = Label {
                method: format!("DFR ({name}, N={n})"),
                ..label.clone()
            };
            log::info!("sweep N={n} {name}: {} test examples", scored.len());
            cells.push(SweepCell {
                n_tokens: n,
                strategy: name,
                results: summarize(&l, &scored),
                outcomes,
            });
        }
    }
    Ok(cells)
}

/// Accuracy of `task` in `results`, if present.
pub fn accuracy_of(results: &[EvalResult], task: &str) -> Option<f64> {
    results
        .iter()
        .find(|r| r.task == task && r.metric == Metric::Accuracy)
        .map(|r| r.value)
}
