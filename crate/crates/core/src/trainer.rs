//! Supervised training of the projector (and the backbone ablations) on
//! benchmark examples, with an optional SupCon term on pooled soft tokens.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Vocab};
use crate::benchgen::{QAExample, Task};
use crate::error::{DfrError, Result};
use crate::geoworld::{name_order, Region, WorldStats};
use crate::numkernel::{adam_update, clip_grad_norm, cosine_lr, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::par::{sum_in_order, Executor};
use crate::projector::Projector;
use crate::sequencer::{mixed_embeds_var, EmbeddingStore, SeqPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    DfrFrozen,
    ProjPlusFirstLayer,
    ProjPlusFull,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::DfrFrozen => "dfr_frozen",
            TrainMode::ProjPlusFirstLayer => "proj_plus_first_layer",
            TrainMode::ProjPlusFull => "proj_plus_full",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = DfrError;
    fn from_str(s: &str) -> Result<Self> {
        [TrainMode::DfrFrozen, TrainMode::ProjPlusFirstLayer, TrainMode::ProjPlusFull]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| DfrError::Config(format!("unknown training mode {s:?}")))
    }
}

/// One projector over all tasks, or one per task family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Mix,
    Separate(Task),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Mix => f.write_str("mix"),
            Strategy::Separate(t) => write!(f, "separate:{t}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = DfrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "mix" => Ok(Strategy::Mix),
            Some(("separate", t)) => Ok(Strategy::Separate(t.parse()?)),
            _ => Err(DfrError::Config(format!("unknown strategy {s:?} (mix or separate:<task>)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub strategy: Strategy,
    pub n_tokens: usize,
    /// SupCon weight; 0 disables the term and its forward pass.
    pub lambda: f64,
    pub tau: f64,
    pub lr_projector: f64,
    /// Used for backbone parameters in the two ablation modes.
    pub lr_backbone: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip: f64,
    pub seed: u64,
    /// Share of the training examples held out for checkpoint selection.
    pub val_fraction: f64,
    /// Whether `proj_plus_full` also trains the token table.
    pub train_vocab_table: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::DfrFrozen,
            strategy: Strategy::Mix,
            n_tokens: 4,
            lambda: 0.0,
            tau: 0.07,
            lr_projector: 1e-3,
            lr_backbone: 1e-4,
            warmup_steps: 20,
            epochs: 10,
            batch_size: 16,
            clip: 1.0,
            seed: 0,
            val_fraction: 0.1,
            train_vocab_table: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DfrError::Config(format!("train: {m}")));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if self.n_tokens == 0 || self.batch_size == 0 {
            return bad("n_tokens and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)".into());
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub mode: TrainMode,
    pub strategy: Strategy,
    #[serde(rename = "N")]
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best projector by validation score.
    pub projector: Projector,
    /// Trained backbone copy in the ablation modes; `None` when frozen.
    pub backbone: Option<Backbone>,
    pub metrics: Vec<MetricRecord>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
    /// Set when a non-finite loss stopped training early.
    pub aborted: Option<String>,
}

/// Parameters a mode updates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableSet {
    /// Indices into `Backbone::params`.
    pub backbone: Vec<usize>,
    pub projector_params: usize,
    pub backbone_params: usize,
}

impl TrainableSet {
    pub fn total(&self) -> usize {
        self.projector_params + self.backbone_params
    }
}

pub fn select_trainable(mode: TrainMode, backbone: &Backbone, projector: &Projector, train_vocab_table: bool) -> TrainableSet {
    let backbone_idx: Vec<usize> = match mode {
        TrainMode::DfrFrozen => Vec::new(),
        TrainMode::ProjPlusFirstLayer => backbone.layer_param_indices(0).collect(),
        TrainMode::ProjPlusFull => (0..backbone.params().len()).filter(|&i| train_vocab_table || i != 0).collect(),
    };
    let backbone_params = backbone_idx.iter().map(|&i| backbone.params()[i].numel()).sum();
    TrainableSet {
        backbone: backbone_idx,
        projector_params: projector.param_count(),
        backbone_params,
    }
}

/// Dominant-feature class: index of the largest |z|, ties in name order.
pub fn profile_label(region: &Region, stats: &WorldStats) -> usize {
    let z = stats.z_scores(region);
    let mut best = None::<(usize, f64)>;
    for f in name_order() {
        if best.is_none_or(|(_, b)| z[f].abs() > b) {
            best = Some((f, z[f].abs()));
        }
    }
    best.expect("at least one feature").0
}

/// SupCon over rows of `z: [B, d]` as a graph node: for each anchor `i` with
/// positives `P(i)` (same label, `j ≠ i`),
/// `−1/|P(i)| Σ_p log(exp(z_i·z_p/τ) / Σ_{a≠i} exp(z_i·z_a/τ))`, summed
/// over anchors. Anchors with no positive contribute zero.
pub fn supcon_var(g: &mut Graph<'_>, z: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let b = labels.len();
    if g.shape(z).len() != 2 || g.shape(z)[0] != b {
        return Err(DfrError::Shape {
            op: "supcon",
            lhs: g.shape(z).to_vec(),
            rhs: vec![b],
        });
    }
    if b < 2 {
        return Err(DfrError::invalid("supcon needs a batch of at least 2"));
    }
    if !(tau > 0.0) {
        return Err(DfrError::invalid("supcon temperature must be positive"));
    }
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let sim = g.scale(sim, 1.0 / tau)?;
    let allowed: Vec<bool> = (0..b * b).map(|k| k / b != k % b).collect();
    let logp = g.masked_log_softmax(sim, &allowed)?;
    let mut w = vec![0.0; b * b];
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
        for &j in &pos {
            w[i * b + j] = -1.0 / pos.len() as f64;
        }
    }
    g.weighted_sum(logp, &w)
}

/// Value of [`supcon_var`] for a plain tensor.
pub fn supcon_loss(pooled: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.leaf(pooled);
    let l = supcon_var(&mut g, z, labels, tau)?;
    Ok(g.scalar(l))
}

/// `L_CE + λ·L_SupCon`.
pub fn hybrid_loss(ce: f64, supcon: f64, lambda: f64) -> f64 {
    ce + lambda * supcon
}

/// Read-only inputs shared by every training step.
pub struct TrainContext<'a> {
    pub vocab: &'a Vocab,
    pub store: &'a EmbeddingStore,
    /// Profile class per region id; required when `lambda > 0`.
    pub profiles: Option<&'a HashMap<String, usize>>,
    pub exec: Executor,
}

/// Per-example pass result.
struct Pass {
    loss: f64,
    correct: bool,
    proj_grads: Vec<Vec<f64>>,
    bb_grads: Vec<Vec<f64>>,
}

/// Mean answer-token CE of one example. `correct` is teacher-forced exact
/// match, which equals greedy-decoding exact match on the token level.
fn example_pass(
    backbone: &Backbone,
    projector: &Projector,
    plan: &SeqPlan,
    ex: &QAExample,
    store: &EmbeddingStore,
    bb_train: &[usize],
    grads: bool,
) -> Result<Pass> {
    let mut g = Graph::new();
    let bb = backbone.bind(&mut g);
    let bp = projector.bind(&mut g);
    let (x, _) = mixed_embeds_var(&mut g, backbone, &bb, projector, &bp, plan, &ex.region_ids, store)?;
    let (_, targets, mask) = plan.layout(projector.n_tokens);
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(DfrError::EmptyMask);
    }
    let pos: Vec<usize> = (0..targets.len()).collect();
    let h = backbone.hidden_var(&mut g, &bb, x, &pos)?;
    let logits = backbone.logits_var(&mut g, &bb, h, Some(&rows))?;
    let tgt: Vec<usize> = rows.iter().map(|&r| targets[r]).collect();
    let ce = g.softmax_xent(logits, &tgt, &vec![true; rows.len()])?;
    let loss = g.scalar(ce);
    let v = g.value(logits);
    let vs = backbone.vocab_size();
    let correct = tgt
        .iter()
        .enumerate()
        .all(|(i, &t)| crate::backbone::argmax(&v[i * vs..(i + 1) * vs]) == t);
    if !grads {
        return Ok(Pass {
            loss,
            correct,
            proj_grads: Vec::new(),
            bb_grads: Vec::new(),
        });
    }
    let gr = g.backward(ce)?;
    let take = |var: Var, n: usize| gr.get(var).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let proj_grads = Projector::vars(&bp)
        .iter()
        .zip(projector.params())
        .map(|(&v, p)| take(v, p.numel()))
        .collect();
    let bb_grads = bb_train
        .iter()
        .map(|&i| take(bb.vars[i], backbone.params()[i].numel()))
        .collect();
    Ok(Pass {
        loss,
        correct,
        proj_grads,
        bb_grads,
    })
}

/// Answer CE of one example and its gradient with respect to the projector
/// parameters, as used by a training step.
pub fn projector_loss_and_grads(
    backbone: &Backbone,
    projector: &Projector,
    ex: &QAExample,
    ctx: &TrainContext<'_>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let plan = SeqPlan::new(ctx.vocab, &ex.prompt, Some(&ex.answer))?;
    let mut p = projector.clone();
    p.set_trainable(true);
    let pass = example_pass(backbone, &p, &plan, ex, ctx.store, &[], true)?;
    Ok((pass.loss, pass.proj_grads))
}

/// Gradient of `λ·SupCon` over the first region of each example.
fn supcon_grads(
    projector: &Projector,
    batch: &[&QAExample],
    store: &EmbeddingStore,
    profiles: &HashMap<String, usize>,
    tau: f64,
    lambda: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let bp = projector.bind(&mut g);
    let mut rows = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for ex in batch {
        let id = &ex.region_ids[0];
        let e = g.leaf(store.get(id)?);
        let z = projector.project_var(&mut g, &bp, e)?;
        let pooled = g.mean_rows(z)?;
        rows.push(g.reshape(pooled, &[1, projector.d_llm])?);
        labels.push(*profiles.get(id).ok_or_else(|| DfrError::MissingRegion(id.clone()))?);
    }
    let z = g.concat_rows(&rows)?;
    let l = supcon_var(&mut g, z, &labels, tau)?;
    let l = g.scale(l, lambda)?;
    let value = g.scalar(l);
    let gr = g.backward(l)?;
    let grads = Projector::vars(&bp)
        .iter()
        .zip(projector.params())
        .map(|(&v, p)| gr.get(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// Mean loss and teacher-forced accuracy over discrete-answer examples.
pub fn evaluate_loss(
    backbone: &Backbone,
    projector: &Projector,
    examples: &[QAExample],
    ctx: &TrainContext<'_>,
) -> Result<(f64, Option<f64>)> {
    if examples.is_empty() {
        return Ok((f64::NAN, None));
    }
    let parts = ctx.exec.map(examples, |ex| {
        let plan = SeqPlan::new(ctx.vocab, &ex.prompt, Some(&ex.answer))?;
        example_pass(backbone, projector, &plan, ex, ctx.store, &[], false)
    });
    let (mut loss, mut hits, mut n_disc) = (0.0, 0usize, 0usize);
    for (p, ex) in parts.into_iter().zip(examples) {
        let p = p?;
        loss += p.loss;
        if ex.task.is_discrete() {
            n_disc += 1;
            hits += p.correct as usize;
        }
    }
    let acc = (n_disc > 0).then(|| hits as f64 / n_disc as f64);
    Ok((loss / examples.len() as f64, acc))
}

fn split_val(examples: &[QAExample], fraction: f64, seed: u64) -> (Vec<QAExample>, Vec<QAExample>) {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x0076_616c));
    let n_val = ((examples.len() as f64) * fraction).round() as usize;
    let (val, train) = idx.split_at(n_val.min(examples.len().saturating_sub(1)));
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| examples[i].clone()).collect::<Vec<_>>()
    };
    (pick(train), pick(val))
}

/// Optimizer state over the trainable tensors of both models.
struct Optim {
    proj: AdamState,
    bb: AdamState,
    adam: AdamConfig,
}

struct StepStats {
    loss: f64,
    correct: usize,
}

/// One optimizer step on `batch`. Per-example losses are token means, and
/// the batch loss is their plain mean.
#[allow(clippy::too_many_arguments)]
fn train_step(
    backbone: &mut Backbone,
    projector: &mut Projector,
    batch: &[&QAExample],
    plans: &[&SeqPlan],
    bb_train: &[usize],
    cfg: &TrainConfig,
    ctx: &TrainContext<'_>,
    opt: &mut Optim,
    lr_scale: f64,
) -> Result<StepStats> {
    let items: Vec<(&QAExample, &SeqPlan)> = batch.iter().copied().zip(plans.iter().copied()).collect();
    let parts = {
        let (bbr, pr) = (&*backbone, &*projector);
        ctx.exec.map(&items, |(ex, plan)| example_pass(bbr, pr, plan, ex, ctx.store, bb_train, true))
    };
    let mut loss = 0.0;
    let mut correct = 0;
    let mut pg = Vec::with_capacity(parts.len());
    let mut bg = Vec::with_capacity(parts.len());
    for p in parts {
        let p = p?;
        loss += p.loss;
        correct += p.correct as usize;
        pg.push(p.proj_grads);
        bg.push(p.bb_grads);
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    if !loss.is_finite() {
        return Err(DfrError::Numeric(format!("non-finite training loss {loss}")));
    }
    let mut proj_g = sum_in_order(pg).expect("non-empty batch");
    proj_g.iter_mut().flatten().for_each(|x| *x *= inv);
    let mut bb_g = if bb_train.is_empty() {
        Vec::new()
    } else {
        let mut s = sum_in_order(bg).expect("non-empty batch");
        s.iter_mut().flatten().for_each(|x| *x *= inv);
        s
    };
    if cfg.lambda > 0.0 && batch.len() >= 2 {
        let profiles = ctx
            .profiles
            .ok_or_else(|| DfrError::Config("train: lambda > 0 needs region profile labels".into()))?;
        let (sc, sg) = supcon_grads(projector, batch, ctx.store, profiles, cfg.tau, cfg.lambda)?;
        if !sc.is_finite() {
            return Err(DfrError::Numeric(format!("non-finite SupCon loss {sc}")));
        }
        loss += sc;
        for (a, b) in proj_g.iter_mut().zip(&sg) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
    // One joint norm over everything that is updated.
    let n_proj = proj_g.len();
    let mut all: Vec<Vec<f64>> = proj_g.into_iter().chain(bb_g.drain(..)).collect();
    clip_grad_norm(&mut all, cfg.clip);
    let bb_g = all.split_off(n_proj);
    let proj_g = all;
    {
        let gref: Vec<&[f64]> = proj_g.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut Tensor> = projector.params_mut().iter_mut().collect();
        adam_update(&mut params, &gref, &mut opt.proj, &opt.adam, cfg.lr_projector * lr_scale)?;
    }
    if !bb_train.is_empty() {
        let gref: Vec<&[f64]> = bb_g.iter().map(Vec::as_slice).collect();
        let all_params = backbone.params_mut()?;
        let mut params: Vec<&mut Tensor> = all_params
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| bb_train.contains(i))
            .map(|(_, p)| p)
            .collect();
        adam_update(&mut params, &gref, &mut opt.bb, &opt.adam, cfg.lr_backbone * lr_scale)?;
    }
    Ok(StepStats { loss, correct })
}

fn strategy_filter(strategy: Strategy, examples: &[QAExample]) -> Vec<QAExample> {
    match strategy {
        Strategy::Mix => examples.to_vec(),
        Strategy::Separate(t) => examples.iter().filter(|e| e.task == t).cloned().collect(),
    }
}

/// Trains from `projector` on the train-split `examples`. The frozen
/// backbone is checked against its freeze-time hash at every epoch end.
pub fn train(
    cfg: &TrainConfig,
    examples: &[QAExample],
    backbone: &Backbone,
    projector: Projector,
    ctx: &TrainContext<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    backbone.verify_frozen()?;
    if let Some(e) = examples.iter().find(|e| e.split != crate::benchgen::Split::Train) {
        return Err(DfrError::invalid(format!("example {} is not in the train split", e.meta.uid)));
    }
    if projector.n_tokens != cfg.n_tokens || projector.d_llm != backbone.d_llm() {
        return Err(DfrError::Config(format!(
            "projector emits {}×{} but config asks N={} and backbone has d_llm={}",
            projector.n_tokens,
            projector.d_llm,
            cfg.n_tokens,
            backbone.d_llm()
        )));
    }
    let selected = strategy_filter(cfg.strategy, examples);
    if selected.is_empty() {
        return Err(DfrError::invalid(format!("no training examples for strategy {}", cfg.strategy)));
    }
    let (train_set, val_set) = split_val(&selected, cfg.val_fraction, cfg.seed);
    let plans: Vec<SeqPlan> = train_set
        .iter()
        .map(|e| SeqPlan::new(ctx.vocab, &e.prompt, Some(&e.answer)))
        .collect::<Result<_>>()?;

    let mut projector = projector;
    projector.set_trainable(true);
    let set = select_trainable(cfg.mode, backbone, &projector, cfg.train_vocab_table);
    let mut model = backbone.clone();
    if !set.backbone.is_empty() {
        model.unfreeze();
        for (i, p) in model.params_mut()?.iter_mut().enumerate() {
            p.requires_grad = set.backbone.contains(&i);
        }
    }

    let bs = cfg.batch_size;
    let steps_per_epoch = train_set.len().div_ceil(bs);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = Optim {
        proj: AdamState::new(),
        bb: AdamState::new(),
        adam: AdamConfig::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::new();
    let record = |step, epoch, split: &str, loss, accuracy| MetricRecord {
        step,
        epoch,
        split: split.into(),
        loss,
        accuracy,
        mode: cfg.mode,
        strategy: cfg.strategy,
        n: cfg.n_tokens,
    };
    let mut best: Option<(f64, f64, usize, Projector, Option<Backbone>)> = None;
    let mut step = 0;
    let mut aborted = None;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ep_loss, mut ep_correct, mut ep_n, mut ep_disc) = (0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(bs) {
            let batch: Vec<&QAExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let bplans: Vec<&SeqPlan> = chunk.iter().map(|&i| &plans[i]).collect();
            let lr_scale = cosine_lr(1.0, step, total_steps, cfg.warmup_steps);
            match train_step(&mut model, &mut projector, &batch, &bplans, &set.backbone, cfg, ctx, &mut opt, lr_scale) {
                Ok(s) => {
                    ep_loss += s.loss * batch.len() as f64;
                    ep_correct += s.correct;
                    ep_n += batch.len();
                    ep_disc += batch.iter().filter(|e| e.task.is_discrete()).count();
                }
                Err(e @ (DfrError::Numeric(_) | DfrError::NonFinite { .. })) => {
                    log::warn!("training aborted at step {step}: {e}");
                    aborted = Some(format!("step {step}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        if set.backbone.is_empty() {
            model.verify_frozen()?;
        }
        let train_acc = (ep_disc > 0).then(|| ep_correct as f64 / ep_disc as f64);
        metrics.push(record(step, epoch, "train", ep_loss / ep_n.max(1) as f64, train_acc));
        let (vl, va) = if val_set.is_empty() {
            (ep_loss / ep_n.max(1) as f64, train_acc)
        } else {
            evaluate_loss(&model, &projector, &val_set, ctx)?
        };
        metrics.push(record(step, epoch, "val", vl, va));
        log::info!("epoch {epoch}: train loss {:.4} val loss {vl:.4} val acc {va:?}", ep_loss / ep_n.max(1) as f64);
        let score = va.unwrap_or(0.0);
        let better = best.as_ref().is_none_or(|(bs_, bl, ..)| score > *bs_ || (score == *bs_ && vl < *bl));
        if better && vl.is_finite() {
            let bb_copy = (!set.backbone.is_empty()).then(|| model.clone());
            best = Some((score, vl, epoch, projector.clone(), bb_copy));
        }
    }
    let (projector, backbone_out, best_epoch) = match best {
        Some((_, _, e, p, b)) => (p, b, Some(e)),
        None => (projector, (!set.backbone.is_empty()).then_some(model), None),
    };
    Ok(TrainOutcome {
        projector,
        backbone: backbone_out.map(|mut b| {
            b.freeze();
            b
        }),
        metrics,
        best_epoch,
        steps: step,
        aborted,
    })
}

/// Projector-only adaptation on a few target-domain examples for `steps`
/// steps (cycling through the examples). The input projector is untouched.
pub fn fewshot_finetune(
    projector: &Projector,
    backbone: &Backbone,
    examples: &[QAExample],
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    ctx: &TrainContext<'_>,
) -> Result<Projector> {
    backbone.verify_frozen()?;
    let mut p = projector.clone();
    if steps == 0 || examples.is_empty() {
        return Ok(p);
    }
    p.set_trainable(true);
    let cfg = TrainConfig {
        lr_projector: lr,
        n_tokens: projector.n_tokens,
        batch_size,
        seed,
        ..TrainConfig::default()
    };
    let plans: Vec<SeqPlan> = examples
        .iter()
        .map(|e| SeqPlan::new(ctx.vocab, &e.prompt, Some(&e.answer)))
        .collect::<Result<_>>()?;
    let mut opt = Optim {
        proj: AdamState::new(),
        bb: AdamState::new(),
        adam: AdamConfig::default(),
    };
    let mut model = backbone.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..steps {
        if order.len() < batch_size.min(examples.len()) {
            let mut fresh: Vec<usize> = (0..examples.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let chunk: Vec<usize> = order.drain(..batch_size.min(examples.len())).collect();
        let batch: Vec<&QAExample> = chunk.iter().map(|&i| &examples[i]).collect();
        let bplans: Vec<&SeqPlan> = chunk.iter().map(|&i| &plans[i]).collect();
        train_step(&mut model, &mut p, &batch, &bplans, &[], &cfg, ctx, &mut opt, 1.0)?;
    }
    model.verify_frozen()?;
    Ok(p)
}
