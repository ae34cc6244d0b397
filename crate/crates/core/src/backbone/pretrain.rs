use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Backbone, BackboneConfig};
use super::vocab::{Vocab, BOS, EOS};
use crate::error::{DfrError, Result};
use crate::numkernel::{adam_update, clip_grad_norm, cosine_lr, AdamConfig, AdamState, Graph};
use crate::par::{sum_in_order, Executor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip: f64,
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 50,
            clip: 1.0,
            heldout_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub epoch_loss: Vec<f64>,
    pub heldout_ppl: f64,
    pub unigram_ppl: f64,
    pub train_lines: usize,
    pub heldout_lines: usize,
}

impl PretrainReport {
    /// `1 - heldout / unigram`.
    pub fn ppl_reduction(&self) -> f64 {
        1.0 - self.heldout_ppl / self.unigram_ppl
    }
}

/// `[<bos>] + tokens + [<eos>]`, truncated to `max_len`.
pub fn encode_line(vocab: &Vocab, line: &str, max_len: usize) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(vocab.tokenize(line));
    ids.push(EOS);
    ids.truncate(max_len.max(2));
    ids
}

/// Summed next-token cross-entropy of one encoded line, its target count and
/// (when `with_grads`) the gradient of the sum for every parameter.
fn line_loss(model: &Backbone, ids: &[usize], with_grads: bool) -> Result<(f64, usize, Vec<Vec<f64>>)> {
    let n = ids.len() - 1;
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let x = model.embed_var(&mut g, &b, &ids[..n])?;
    let pos: Vec<usize> = (0..n).collect();
    let h = model.hidden_var(&mut g, &b, x, &pos)?;
    let logits = model.logits_var(&mut g, &b, h, None)?;
    let mean = g.softmax_xent(logits, &ids[1..], &vec![true; n])?;
    let total = g.scale(mean, n as f64)?;
    let loss = g.scalar(total);
    if !with_grads {
        return Ok((loss, n, Vec::new()));
    }
    let grads = g.backward(total)?;
    let per_param = b
        .vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    Ok((loss, n, per_param))
}

/// `exp(mean next-token cross-entropy)` over all lines, `<eos>` included.
pub fn corpus_perplexity(model: &Backbone, vocab: &Vocab, lines: &[String], exec: Executor) -> Result<f64> {
    let encoded: Vec<Vec<usize>> = lines.iter().map(|l| encode_line(vocab, l, model.config.max_context)).collect();
    let parts = exec.map(&encoded, |ids| line_loss(model, ids, false));
    let (mut sum, mut count) = (0.0, 0usize);
    for p in parts {
        let (l, n, _) = p?;
        sum += l;
        count += n;
    }
    if count == 0 {
        return Err(DfrError::EmptyMask);
    }
    Ok((sum / count as f64).exp())
}

/// Add-one smoothed unigram model fitted on `train`, evaluated on `heldout`
/// with the same targets `corpus_perplexity` scores.
pub fn unigram_perplexity(vocab: &Vocab, train: &[String], heldout: &[String], max_len: usize) -> f64 {
    let mut counts = vec![1.0; vocab.len()];
    let mut total = vocab.len() as f64;
    for l in train {
        for &t in &encode_line(vocab, l, max_len)[1..] {
            counts[t] += 1.0;
            total += 1.0;
        }
    }
    let (mut nll, mut n) = (0.0, 0usize);
    for l in heldout {
        for &t in &encode_line(vocab, l, max_len)[1..] {
            nll -= (counts[t] / total).ln();
            n += 1;
        }
    }
    (nll / n.max(1) as f64).exp()
}

/// Deterministic held-out split: a seeded shuffle of line indices.
pub fn split_heldout(lines: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut idx: Vec<usize> = (0..lines.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6c64));
    let n_held = ((lines.len() as f64 * fraction).round() as usize).min(lines.len().saturating_sub(1));
    let (held, train) = idx.split_at(n_held);
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| lines[i].clone()).collect::<Vec<_>>()
    };
    (pick(train), pick(held))
}

/// Trains a fresh backbone on `corpus` with next-token cross-entropy, then
/// freezes it. A held-out slice of the corpus is scored against a unigram
/// model fitted on the rest.
pub fn pretrain_backbone(
    corpus: &[String],
    vocab: &Vocab,
    model_cfg: BackboneConfig,
    cfg: &PretrainConfig,
    exec: Executor,
) -> Result<(Backbone, PretrainReport)> {
    if corpus.is_empty() {
        return Err(DfrError::invalid("empty pretraining corpus"));
    }
    if model_cfg.vocab_size != vocab.len() {
        return Err(DfrError::Config(format!(
            "backbone vocab_size {} but vocabulary has {} tokens",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    let (train, heldout) = split_heldout(corpus, cfg.heldout_fraction, cfg.seed);
    let mut model = Backbone::init(model_cfg)?;
    for p in model.params_mut()? {
        p.requires_grad = true;
    }
    let max_len = model.config.max_context;
    let encoded: Vec<Vec<usize>> = train.iter().map(|l| encode_line(vocab, l, max_len)).collect();
    let bs = cfg.batch_size.max(1);
    let steps_per_epoch = encoded.len().div_ceil(bs);
    let total_steps = steps_per_epoch * cfg.epochs;
    let adam = AdamConfig::default();
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ep_sum, mut ep_count) = (0.0, 0usize);
        for chunk in order.chunks(bs) {
            let batch: Vec<&Vec<usize>> = chunk.iter().map(|&i| &encoded[i]).collect();
            let parts = exec.map(&batch, |ids| line_loss(&model, ids, true));
            let (mut sum, mut count) = (0.0, 0usize);
            let mut grads = Vec::with_capacity(parts.len());
            for p in parts {
                let (l, n, g) = p.map_err(|e| diverged(epoch, step, e))?;
                sum += l;
                count += n;
                grads.push(g);
            }
            let mut g = sum_in_order(grads).expect("non-empty batch");
            let inv = 1.0 / count as f64;
            g.iter_mut().flatten().for_each(|x| *x *= inv);
            clip_grad_norm(&mut g, cfg.clip);
            let loss = sum * inv;
            if !loss.is_finite() {
                return Err(DfrError::Numeric(format!("pretraining loss {loss} at epoch {epoch} step {step}")));
            }
            let lr = cosine_lr(cfg.lr, step, total_steps, cfg.warmup_steps);
            let gref: Vec<&[f64]> = g.iter().map(Vec::as_slice).collect();
            let mut params: Vec<_> = model.params_mut()?.iter_mut().collect();
            adam_update(&mut params, &gref, &mut state, &adam, lr)?;
            ep_sum += sum;
            ep_count += count;
            step += 1;
        }
        let l = ep_sum / ep_count.max(1) as f64;
        log::info!("pretrain epoch {epoch}: loss {l:.4}");
        epoch_loss.push(l);
    }
    model.freeze();
    let heldout_ppl = if heldout.is_empty() {
        f64::NAN
    } else {
        corpus_perplexity(&model, vocab, &heldout, exec)?
    };
    let unigram_ppl = unigram_perplexity(vocab, &train, &heldout, max_len);
    let report = PretrainReport {
        steps: step,
        epoch_loss,
        heldout_ppl,
        unigram_ppl,
        train_lines: train.len(),
        heldout_lines: heldout.len(),
    };
    Ok((model, report))
}

fn diverged(epoch: usize, step: usize, e: DfrError) -> DfrError {
    match e {
        DfrError::NonFinite { op } => {
            DfrError::Numeric(format!("pretraining diverged at epoch {epoch} step {step}: non-finite value in {op}"))
        }
        other => other,
    }
}
