//! Mixed-modality sequences: placeholder parsing, soft-token splicing with
//! position re-indexing, and answer-only loss masks.
//!
//! A prompt marks embedding slot `k` with the single token `<emb:k>`. When a
//! sequence is built the marker is replaced by the `N` soft tokens of the
//! region bound to slot `k`, and position ids are recomputed as `0..T`, so
//! `T = L_text − K + K·N` where `L_text` counts `<bos>`, prompt, answer and
//! `<eos>` tokens with each marker counted once.

use std::collections::HashMap;

use crate::backbone::vocab::{Vocab, BOS, EOS, PAD};
use crate::backbone::{Backbone, BoundBackbone};
use crate::error::{DfrError, Result};
use crate::numkernel::{Graph, Tensor, Var};
use crate::projector::{BoundProjector, Projector};

/// What produced one row of a mixed sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Text(usize),
    Soft { slot: usize, n: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSequence {
    pub embeds: Tensor,
    pub position_ids: Vec<usize>,
    /// `loss_mask[t]` marks rows whose next-token target is an answer token
    /// or the closing `<eos>`.
    pub loss_mask: Vec<bool>,
    /// Next-token target for every row (`<pad>` where there is none).
    pub targets: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl MixedSequence {
    pub fn len(&self) -> usize {
        self.position_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_ids.is_empty()
    }

    pub fn soft_runs(&self) -> Vec<(usize, usize)> {
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for p in &self.provenance {
            if let Provenance::Soft { slot, n } = *p {
                match runs.last_mut() {
                    Some((s, len)) if *s == slot && n == *len => *len += 1,
                    _ => runs.push((slot, 1)),
                }
            }
        }
        runs
    }
}

fn slot_at(s: &str) -> Option<(usize, usize)> {
    let rest = s.strip_prefix("<emb:")?;
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 || rest.as_bytes().get(digits) != Some(&b'>') {
        return None;
    }
    Some((rest[..digits].parse().ok()?, 5 + digits + 1))
}

fn check_slots(slots: &[usize]) -> Result<()> {
    let k = slots.len();
    let mut seen = vec![false; k];
    for &s in slots {
        if s >= k {
            let missing = seen.iter().position(|x| !x).unwrap_or(0);
            return Err(DfrError::Placeholder(format!(
                "slot {s} out of range for {k} placeholders (slot {missing} missing)"
            )));
        }
        if seen[s] {
            return Err(DfrError::Placeholder(format!("slot {s} appears more than once")));
        }
        seen[s] = true;
    }
    Ok(())
}

/// Splits a template at its `<emb:k>` markers. Returns the `K + 1` text
/// segments and the slot indices in written order.
pub fn parse_placeholders(template: &str) -> Result<(Vec<String>, Vec<usize>)> {
    let mut segments = Vec::new();
    let mut slots = Vec::new();
    let mut cur = String::new();
    let mut i = 0;
    while i < template.len() {
        let rest = &template[i..];
        if let Some((k, len)) = slot_at(rest) {
            segments.push(std::mem::take(&mut cur));
            slots.push(k);
            i += len;
        } else {
            let c = rest.chars().next().expect("non-empty");
            cur.push(c);
            i += c.len_utf8();
        }
    }
    segments.push(cur);
    check_slots(&slots)?;
    Ok((segments, slots))
}

/// Inverse of [`parse_placeholders`].
pub fn reassemble(segments: &[String], slots: &[usize]) -> String {
    let mut s = segments[0].clone();
    for (k, seg) in slots.iter().zip(&segments[1..]) {
        s.push_str(&format!("<emb:{k}>"));
        s.push_str(seg);
    }
    s
}

/// Token-level layout of one example before any embedding is looked up.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqPlan {
    /// `<bos>` + prompt (+ answer + `<eos>` when teacher forcing).
    pub ids: Vec<usize>,
    /// Index in `ids` of the first answer token; `ids.len()` for a bare prompt.
    pub answer_start: usize,
    /// Slot of every placeholder in `ids`, in written order.
    pub slots: Vec<usize>,
}

impl SeqPlan {
    pub fn new(vocab: &Vocab, prompt: &str, answer: Option<&str>) -> Result<Self> {
        let mut ids = vec![BOS];
        ids.extend(vocab.tokenize(prompt));
        let answer_start = ids.len();
        if let Some(a) = answer {
            let a_ids = vocab.tokenize(a);
            if a_ids.iter().any(|&t| Vocab::emb_slot(t).is_some()) {
                return Err(DfrError::Placeholder("answer contains a placeholder".into()));
            }
            ids.extend(a_ids);
            ids.push(EOS);
        }
        let slots: Vec<usize> = ids.iter().filter_map(|&t| Vocab::emb_slot(t)).collect();
        check_slots(&slots)?;
        Ok(Self {
            ids,
            answer_start,
            slots,
        })
    }

    pub fn l_text(&self) -> usize {
        self.ids.len()
    }

    pub fn k(&self) -> usize {
        self.slots.len()
    }

    /// `L_text − K + K·N`.
    pub fn mixed_len(&self, n_tokens: usize) -> usize {
        self.l_text() - self.k() + self.k() * n_tokens
    }

    /// Per-row provenance, targets and loss mask of the spliced sequence.
    pub fn layout(&self, n_tokens: usize) -> (Vec<Provenance>, Vec<usize>, Vec<bool>) {
        let mut prov = Vec::with_capacity(self.mixed_len(n_tokens));
        let mut targets = Vec::with_capacity(prov.capacity());
        let mut mask = Vec::with_capacity(prov.capacity());
        for (i, &t) in self.ids.iter().enumerate() {
            let next = self.ids.get(i + 1).copied();
            // Only the last row of a run predicts the following token.
            let (rows, last): (Vec<Provenance>, _) = match Vocab::emb_slot(t) {
                Some(slot) => ((0..n_tokens).map(|n| Provenance::Soft { slot, n }).collect(), n_tokens - 1),
                None => (vec![Provenance::Text(t)], 0),
            };
            for (r, p) in rows.into_iter().enumerate() {
                prov.push(p);
                let scored = r == last && next.is_some_and(|nt| Vocab::emb_slot(nt).is_none()) && i + 1 >= self.answer_start;
                let target = match next {
                    Some(nt) if r == last && Vocab::emb_slot(nt).is_none() => nt,
                    _ => PAD,
                };
                targets.push(target);
                mask.push(scored);
            }
        }
        (prov, targets, mask)
    }

    /// Maximal runs of consecutive text tokens, with an entry before, between
    /// and after placeholders (possibly empty): `K + 1` segments.
    pub fn text_segments(&self) -> Vec<Vec<usize>> {
        let mut segs = vec![Vec::new()];
        for &t in &self.ids {
            if Vocab::emb_slot(t).is_some() {
                segs.push(Vec::new());
            } else {
                segs.last_mut().expect("non-empty").push(t);
            }
        }
        segs
    }
}

/// Splices soft tokens (one `[N, d_llm]` tensor per slot index) into the
/// text embeddings of each segment and re-indexes positions `0..T`.
pub fn interleave_and_reindex(
    text_ids: &[Vec<usize>],
    text_embeds: &[Tensor],
    slots: &[usize],
    soft_tokens: &[Tensor],
) -> Result<MixedSequence> {
    if text_embeds.len() != slots.len() + 1 || text_ids.len() != text_embeds.len() {
        return Err(DfrError::invalid(format!(
            "{} text segments for {} slots",
            text_embeds.len(),
            slots.len()
        )));
    }
    let d = text_embeds[0].cols();
    let mut data = Vec::new();
    let mut prov = Vec::new();
    let push_text = |ids: &[usize], e: &Tensor, data: &mut Vec<f64>, prov: &mut Vec<Provenance>| -> Result<()> {
        if e.rows() != ids.len() || (e.numel() > 0 && e.cols() != d) {
            return Err(DfrError::Shape {
                op: "interleave",
                lhs: e.shape().to_vec(),
                rhs: vec![ids.len(), d],
            });
        }
        data.extend_from_slice(e.data());
        prov.extend(ids.iter().map(|&t| Provenance::Text(t)));
        Ok(())
    };
    push_text(&text_ids[0], &text_embeds[0], &mut data, &mut prov)?;
    for (j, &k) in slots.iter().enumerate() {
        let z = soft_tokens
            .get(k)
            .ok_or_else(|| DfrError::Placeholder(format!("no soft tokens for slot {k}")))?;
        if z.shape().len() != 2 || z.cols() != d {
            return Err(DfrError::Shape {
                op: "interleave",
                lhs: z.shape().to_vec(),
                rhs: vec![z.rows(), d],
            });
        }
        data.extend_from_slice(z.data());
        prov.extend((0..z.rows()).map(|n| Provenance::Soft { slot: k, n }));
        push_text(&text_ids[j + 1], &text_embeds[j + 1], &mut data, &mut prov)?;
    }
    let t = prov.len();
    Ok(MixedSequence {
        embeds: Tensor::new([t, d], data)?,
        position_ids: (0..t).collect(),
        loss_mask: vec![false; t],
        targets: vec![PAD; t],
        provenance: prov,
    })
}

/// Region embeddings keyed by region id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    pub d_e: usize,
    map: HashMap<String, Tensor>,
}

impl EmbeddingStore {
    pub fn new(d_e: usize) -> Self {
        Self {
            d_e,
            map: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, e: Vec<f64>) -> Result<()> {
        if e.len() != self.d_e {
            return Err(DfrError::Shape {
                op: "embedding store",
                lhs: vec![e.len()],
                rhs: vec![self.d_e],
            });
        }
        self.map.insert(id.into(), Tensor::from_vec(e));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.map.get(id).ok_or_else(|| DfrError::MissingRegion(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }
}

/// Builds the spliced input node inside a graph: text runs come from the
/// backbone's token table, slot `k` from projecting `region_ids[k]`.
/// Returns the embeddings node and the projected soft-token node per slot.
#[allow(clippy::too_many_arguments)]
pub fn mixed_embeds_var<'a>(
    g: &mut Graph<'a>,
    backbone: &'a Backbone,
    bb: &BoundBackbone,
    projector: &'a Projector,
    bp: &BoundProjector,
    plan: &SeqPlan,
    region_ids: &[String],
    store: &'a EmbeddingStore,
) -> Result<(Var, Vec<Var>)> {
    if region_ids.len() != plan.k() {
        return Err(DfrError::Placeholder(format!(
            "{} placeholders but {} region ids",
            plan.k(),
            region_ids.len()
        )));
    }
    let mut soft = Vec::with_capacity(plan.k());
    for rid in region_ids {
        let e = g.leaf(store.get(rid)?);
        soft.push(projector.project_var(g, bp, e)?);
    }
    let mut parts = Vec::new();
    let segs = plan.text_segments();
    for (j, seg) in segs.iter().enumerate() {
        if !seg.is_empty() {
            parts.push(backbone.embed_var(g, bb, seg)?);
        }
        if let Some(&k) = plan.slots.get(j) {
            parts.push(soft[k]);
        }
    }
    let x = g.concat_rows(&parts)?;
    Ok((x, soft))
}

/// Materializes the mixed sequence of one example.
pub fn build_sequence(
    plan: &SeqPlan,
    region_ids: &[String],
    store: &EmbeddingStore,
    projector: &Projector,
    backbone: &Backbone,
) -> Result<MixedSequence> {
    if region_ids.len() != plan.k() {
        return Err(DfrError::Placeholder(format!(
            "{} placeholders but {} region ids",
            plan.k(),
            region_ids.len()
        )));
    }
    let soft: Vec<Tensor> = region_ids
        .iter()
        .map(|r| projector.project(store.get(r)?))
        .collect::<Result<_>>()?;
    let segs = plan.text_segments();
    let embeds: Vec<Tensor> = segs.iter().map(|s| backbone.embed_tokens(s)).collect::<Result<_>>()?;
    let mut seq = interleave_and_reindex(&segs, &embeds, &plan.slots, &soft)?;
    let (prov, targets, mask) = plan.layout(projector.n_tokens);
    debug_assert_eq!(prov, seq.provenance);
    seq.targets = targets;
    seq.loss_mask = mask;
    Ok(seq)
}

/// Right-padded batch of mixed sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sequences: Vec<MixedSequence>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
    /// `[B, max_len, d_llm]`, zero rows past each sequence's length.
    pub embeds: Tensor,
    /// `[B, max_len]`, `<pad>` past each length.
    pub targets: Vec<Vec<usize>>,
    pub loss_mask: Vec<Vec<bool>>,
    /// `[B, max_len]`, true on valid rows.
    pub attention_mask: Vec<Vec<bool>>,
}

/// Example fields the sequencer needs.
pub trait PromptSource {
    fn prompt(&self) -> &str;
    fn answer(&self) -> &str;
    fn region_ids(&self) -> &[String];
}

pub fn build_training_batch<E: PromptSource>(
    examples: &[E],
    vocab: &Vocab,
    store: &EmbeddingStore,
    projector: &Projector,
    backbone: &Backbone,
) -> Result<Batch> {
    let d = backbone.d_llm();
    let mut sequences = Vec::with_capacity(examples.len());
    for ex in examples {
        let plan = SeqPlan::new(vocab, ex.prompt(), Some(ex.answer()))?;
        sequences.push(build_sequence(&plan, ex.region_ids(), store, projector, backbone)?);
    }
    let lengths: Vec<usize> = sequences.iter().map(MixedSequence::len).collect();
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let mut data = vec![0.0; examples.len() * max_len * d];
    let mut targets = Vec::new();
    let mut loss_mask = Vec::new();
    let mut attention_mask = Vec::new();
    for (b, s) in sequences.iter().enumerate() {
        let off = b * max_len * d;
        data[off..off + s.embeds.numel()].copy_from_slice(s.embeds.data());
        let pad = max_len - s.len();
        targets.push(s.targets.iter().copied().chain(std::iter::repeat_n(PAD, pad)).collect());
        loss_mask.push(s.loss_mask.iter().copied().chain(std::iter::repeat_n(false, pad)).collect());
        attention_mask.push((0..max_len).map(|t| t < s.len()).collect());
    }
    Ok(Batch {
        embeds: Tensor::new([examples.len(), max_len, d], data)?,
        sequences,
        lengths,
        max_len,
        targets,
        loss_mask,
        attention_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_simple() {
        let (segs, slots) = parse_placeholders("as shown in <emb:0> , which is larger").unwrap();
        assert_eq!(segs, ["as shown in ", " , which is larger"]);
        assert_eq!(slots, [0]);
        let (segs, slots) = parse_placeholders("plain text").unwrap();
        assert_eq!((segs.len(), slots.len()), (1, 0));
    }

    #[test]
    fn parse_rejects_bad_slots() {
        let e = parse_placeholders("<emb:0> and <emb:0>").unwrap_err().to_string();
        assert!(e.contains("slot 0"), "{e}");
        let e = parse_placeholders("<emb:1> only").unwrap_err().to_string();
        assert!(e.contains("slot 1") && e.contains("slot 0 missing"), "{e}");
    }

    #[test]
    fn yes_answer_has_two_scored_rows() {
        let v = Vocab::build(["is it higher ? yes"]);
        let plan = SeqPlan::new(&v, "is <emb:0> higher ?", Some("yes")).unwrap();
        let (prov, targets, mask) = plan.layout(3);
        assert_eq!(prov.len(), plan.mixed_len(3));
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
        let scored: Vec<usize> = targets.iter().zip(&mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
        assert_eq!(scored, [v.id("yes"), EOS]);
    }
}
