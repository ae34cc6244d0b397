//! The no-LLM baseline: per-task candidate scorers trained directly on
//! region embeddings.
//!
//! Each example becomes a set of candidate answers with one input row per
//! candidate. A two-layer GELU network scores every row, and training
//! minimizes softmax cross-entropy over the candidate scores. Describe
//! has an open answer space and gets no model.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{normalize_answer, EvalResult, Label, Metric};
use crate::benchgen::{AnswerForm, QAExample, Task, SIMILARITY_SUBSETS};
use crate::error::{DfrError, Result};
use crate::geoworld::{FEATURES, D_RAW};
use crate::numkernel::{adam_update, AdamConfig, AdamState, Graph, Tensor};
use crate::sequencer::EmbeddingStore;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 30,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpOutcome {
    /// One accuracy per task seen in the test set; `None` for describe.
    pub per_task: BTreeMap<Task, Option<EvalResult>>,
    /// Accuracy over every discrete test example.
    pub overall: Option<EvalResult>,
}

impl MlpOutcome {
    pub fn results(&self) -> Vec<EvalResult> {
        self.per_task.values().flatten().chain(&self.overall).cloned().collect()
    }
}

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn subset_hot(ex: &QAExample) -> Result<Vec<f64>> {
    let name = ex.meta.subset.as_deref().unwrap_or("");
    let i = SIMILARITY_SUBSETS
        .iter()
        .position(|(n, _)| *n == name)
        .ok_or_else(|| DfrError::invalid(format!("{}: unknown subset {name:?}", ex.meta.uid)))?;
    Ok(one_hot(i, SIMILARITY_SUBSETS.len()))
}

fn feature(ex: &QAExample, k: usize) -> Result<usize> {
    ex.meta
        .features
        .get(k)
        .copied()
        .filter(|&f| f < D_RAW)
        .ok_or_else(|| DfrError::invalid(format!("{}: missing feature {k}", ex.meta.uid)))
}

fn log_count(s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| DfrError::invalid(format!("not a number: {s:?}")))?;
    Ok(v.max(0.0).ln_1p())
}

/// Candidate answers of `ex`, in a fixed order; `None` for describe.
pub fn answer_candidates(ex: &QAExample) -> Result<Option<Vec<String>>> {
    Ok(Some(match ex.task {
        Task::Describe => return Ok(None),
        Task::CmpAvg => match ex.meta.form {
            AnswerForm::Plain => vec!["higher".into(), "lower".into()],
            AnswerForm::YesNo => vec!["yes".into(), "no".into()],
        },
        Task::MultiHop => vec!["yes".into(), "no".into()],
        Task::FeatCmp => vec![
            FEATURES[feature(ex, 0)?].surface.into(),
            FEATURES[feature(ex, 1)?].surface.into(),
        ],
        Task::AbsValueMc | Task::AbsWithContext => ex.options.clone(),
        Task::MostSimilar | Task::LeastSimilar => ex.region_ids.iter().skip(1).cloned().collect(),
        Task::CrossRegionCmp => ex.region_ids.clone(),
    }))
}

/// One input row per candidate, all of the same width for a given task.
fn candidate_rows(ex: &QAExample, store: &EmbeddingStore, max_regions: usize) -> Result<Vec<Vec<f64>>> {
    let emb = |i: usize| -> Result<Vec<f64>> {
        let id = ex
            .region_ids
            .get(i)
            .ok_or_else(|| DfrError::invalid(format!("{}: missing region {i}", ex.meta.uid)))?;
        Ok(store.get(id)?.data().to_vec())
    };
    let cat = |parts: Vec<Vec<f64>>| parts.concat();
    Ok(match ex.task {
        Task::Describe => Vec::new(),
        Task::CmpAvg => {
            let shared = cat(vec![emb(0)?, one_hot(feature(ex, 0)?, D_RAW)]);
            (0..2).map(|i| cat(vec![shared.clone(), one_hot(i, 2)])).collect()
        }
        Task::FeatCmp => {
            let (a, b) = (feature(ex, 0)?, feature(ex, 1)?);
            let e = emb(0)?;
            [(a, b), (b, a)]
                .iter()
                .map(|&(this, other)| cat(vec![e.clone(), one_hot(this, D_RAW), one_hot(other, D_RAW)]))
                .collect()
        }
        Task::AbsValueMc | Task::AbsWithContext => {
            let asked = if ex.task == Task::AbsValueMc { 0 } else { 2 };
            let mut ctx = vec![0.0; 2];
            for (c, v) in ctx.iter_mut().zip(&ex.meta.context_values) {
                *c = log_count(v)?;
            }
            let shared = cat(vec![emb(asked)?, one_hot(feature(ex, 0)?, D_RAW), ctx]);
            let mut rows = Vec::with_capacity(ex.options.len());
            for o in &ex.options {
                rows.push(cat(vec![shared.clone(), vec![log_count(o)?]]));
            }
            rows
        }
        Task::MostSimilar | Task::LeastSimilar => {
            let t = emb(0)?;
            let s = subset_hot(ex)?;
            let mut rows = Vec::new();
            for i in 1..ex.region_ids.len() {
                let c = emb(i)?;
                let sq: Vec<f64> = t.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).collect();
                rows.push(cat(vec![t.clone(), c, sq, s.clone()]));
            }
            rows
        }
        Task::CrossRegionCmp => {
            let (a, b) = (emb(0)?, emb(1)?);
            let f = one_hot(feature(ex, 0)?, D_RAW);
            vec![
                cat(vec![a.clone(), b.clone(), f.clone()]),
                cat(vec![b, a, f]),
            ]
        }
        Task::MultiHop => {
            let mut parts = Vec::with_capacity(max_regions + 3);
            for i in 0..max_regions {
                parts.push(if i < ex.region_ids.len() { emb(i)? } else { vec![0.0; store.d_e] });
            }
            parts.push(subset_hot(ex)?);
            let g = *ex.meta.features.last().ok_or_else(|| DfrError::invalid("multi_hop without features"))?;
            parts.push(one_hot(g, D_RAW));
            let shared = cat(parts);
            (0..2).map(|i| cat(vec![shared.clone(), one_hot(i, 2)])).collect()
        }
    })
}

struct Encoded {
    rows: Tensor,
    target: Option<usize>,
    candidates: Vec<String>,
}

fn encode(ex: &QAExample, store: &EmbeddingStore, max_regions: usize) -> Result<Encoded> {
    let candidates = answer_candidates(ex)?.ok_or_else(|| DfrError::invalid("describe has no candidates"))?;
    let rows = candidate_rows(ex, store, max_regions)?;
    if rows.len() != candidates.len() || rows.is_empty() {
        return Err(DfrError::invalid(format!("{}: candidate/input mismatch", ex.meta.uid)));
    }
    let gold = normalize_answer(&ex.answer);
    let target = candidates.iter().position(|c| normalize_answer(c) == gold);
    let width = rows[0].len();
    let t = Tensor::new([rows.len(), width], rows.concat())?;
    Ok(Encoded { rows: t, target, candidates })
}

struct Scorer {
    params: Vec<Tensor>,
}

impl Scorer {
    fn init(d_in: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = (1.0 / d_in as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        Self {
            params: vec![
                Tensor::randn([hidden, d_in], s1, &mut rng).with_grad(),
                Tensor::zeros([hidden]).with_grad(),
                Tensor::randn([1, hidden], s2, &mut rng).with_grad(),
                Tensor::zeros([1]).with_grad(),
            ],
        }
    }

    /// Candidate scores, plus the CE loss and its gradients when a target
    /// is given.
    fn pass(&self, e: &Encoded, target: Option<usize>) -> Result<(Vec<f64>, Option<Vec<Vec<f64>>>)> {
        let mut g = Graph::new();
        let p: Vec<_> = self.params.iter().map(|t| g.leaf(t)).collect();
        let x = g.constant(e.rows.clone());
        let h = g.linear(x, p[0], Some(p[1]))?;
        let h = g.gelu(h)?;
        let s = g.linear(h, p[2], Some(p[3]))?;
        let c = e.rows.rows();
        let s = g.reshape(s, &[1, c])?;
        let scores = g.value(s).to_vec();
        let Some(t) = target else {
            return Ok((scores, None));
        };
        let loss = g.softmax_xent(s, &[t], &[true])?;
        let grads = g.backward(loss)?;
        let out = p
            .iter()
            .zip(&self.params)
            .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        Ok((scores, Some(out)))
    }

    fn predict(&self, e: &Encoded) -> Result<usize> {
        let (scores, _) = self.pass(e, None)?;
        Ok(crate::backbone::argmax(&scores))
    }
}

fn train_scorer(data: &[Encoded], cfg: &MlpConfig, seed: u64) -> Result<Scorer> {
    let d_in = data[0].rows.cols();
    let mut model = Scorer::init(d_in, cfg.hidden, seed);
    let mut state = AdamState::new();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6c70);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for &i in batch {
                let (_, g) = model.pass(&data[i], data[i].target)?;
                let g = g.expect("target given");
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| x.iter_mut().zip(y).for_each(|(p, q)| *p += q)),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let n = batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut ps: Vec<&mut Tensor> = model.params.iter_mut().collect();
            adam_update(&mut ps, &refs, &mut state, &adam, cfg.lr)?;
        }
    }
    Ok(model)
}

/// Trains one scorer per task on `train` and reports test accuracy.
pub fn run_no_llm_mlp(
    train: &[QAExample],
    test: &[QAExample],
    store: &EmbeddingStore,
    cfg: &MlpConfig,
    label: &Label,
) -> Result<MlpOutcome> {
    let max_regions = train.iter().chain(test).map(|e| e.region_ids.len()).max().unwrap_or(1);
    let mut per_task = BTreeMap::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for task in Task::ALL {
        let test_t: Vec<&QAExample> = test.iter().filter(|e| e.task == task).collect();
        if test_t.is_empty() {
            continue;
        }
        if !task.is_discrete() {
            per_task.insert(task, None);
            continue;
        }
        let train_t: Vec<Encoded> = train
            .iter()
            .filter(|e| e.task == task)
            .map(|e| encode(e, store, max_regions))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|e| e.target.is_some())
            .collect();
        if train_t.is_empty() {
            return Err(DfrError::invalid(format!("no-LLM baseline: no training examples for {task}")));
        }
        let seed = crate::geoworld::derive_seed(cfg.seed, "mlp", task as u64);
        let model = train_scorer(&train_t, cfg, seed)?;
        let mut h = 0;
        for ex in &test_t {
            let e = encode(ex, store, max_regions)?;
            let pick = model.predict(&e)?;
            h += (normalize_answer(&e.candidates[pick]) == normalize_answer(&ex.answer)) as usize;
        }
        hits += h;
        total += test_t.len();
        let style = super::group_style_of(&test_t);
        per_task.insert(
            task,
            Some(label.result(task.as_str(), &style, Metric::Accuracy, h as f64 / test_t.len() as f64, test_t.len())),
        );
    }
    let overall = (total > 0).then(|| label.result("all", "all", Metric::Accuracy, hits as f64 / total as f64, total));
    Ok(MlpOutcome { per_task, overall })
}
