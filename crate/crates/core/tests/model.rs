mod common;

use dfr_core::backbone::Backbone;
use dfr_core::checkpoint::Checkpoint;
use dfr_core::numkernel::{grad_check_sampled, Graph, Tensor};
use dfr_core::projector::Projector;
use dfr_core::sequencer::{build_sequence, mixed_embeds_var, Provenance, SeqPlan};
use proptest::prelude::*;

use common::fixture;

/// Answer CE of one example and its gradient with respect to every projector
/// and backbone parameter, with `params` substituted in that order.
fn ce_and_grads(
    backbone: &Backbone,
    projector: &Projector,
    fx: &common::Fixture,
    ex: &dfr_core::benchgen::QAExample,
    params: &[Tensor],
) -> dfr_core::Result<(f64, Vec<Vec<f64>>)> {
    let mut p = projector.clone();
    for (dst, src) in p.params_mut().iter_mut().zip(&params[..4]) {
        dst.data_mut().copy_from_slice(src.data());
    }
    p.set_trainable(true);
    let mut b = backbone.clone();
    b.unfreeze();
    for (dst, src) in b.params_mut()?.iter_mut().zip(&params[4..]) {
        dst.data_mut().copy_from_slice(src.data());
        dst.requires_grad = true;
    }
    let plan = SeqPlan::new(&fx.vocab, &ex.prompt, Some(&ex.answer))?;
    let mut g = Graph::new();
    let bb = b.bind(&mut g);
    let bp = p.bind(&mut g);
    let (x, _) = mixed_embeds_var(&mut g, &b, &bb, &p, &bp, &plan, &ex.region_ids, &fx.store)?;
    let (_, targets, mask) = plan.layout(p.n_tokens);
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let pos: Vec<usize> = (0..targets.len()).collect();
    let h = b.hidden_var(&mut g, &bb, x, &pos)?;
    let logits = b.logits_var(&mut g, &bb, h, Some(&rows))?;
    let tgt: Vec<usize> = rows.iter().map(|&r| targets[r]).collect();
    let ce = g.softmax_xent(logits, &tgt, &vec![true; rows.len()])?;
    let gr = g.backward(ce)?;
    let mut vars: Vec<_> = Projector::vars(&bp).to_vec();
    vars.extend(&bb.vars);
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, t)| gr.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok((g.scalar(ce), grads))
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let fx = fixture(60, 20, 32, 2);
    let projector = fx.projector(4, 7);
    // A two-region example exercises two soft-token runs.
    let ex = fx.data.train.iter().find(|e| e.region_ids.len() == 2).expect("two-region example");
    let bb_params: Vec<Tensor> = fx.backbone.params().to_vec();
    let full = |ps: &[Tensor]| ce_and_grads(&fx.backbone, &projector, &fx, ex, ps);
    // Projector parameters, with the backbone held at its frozen values.
    let proj = |ps: &[Tensor]| {
        let all: Vec<Tensor> = ps.iter().chain(&bb_params).cloned().collect();
        let (l, g) = full(&all)?;
        Ok((l, g[..4].to_vec()))
    };
    let err = grad_check_sampled(proj, projector.params(), 1e-5, 64, 1).unwrap();
    assert!(err < 1e-3, "projector: max relative error {err}");

    // The backbone path is exercised too, since ablations train through it.
    let all: Vec<Tensor> = projector.params().iter().chain(&bb_params).cloned().collect();
    let err = grad_check_sampled(full, &all, 1e-5, 12, 2).unwrap();
    assert!(err < 1e-3, "all parameters: max relative error {err}");
}

#[test]
fn earlier_logits_ignore_later_tokens() {
    let fx = fixture(60, 20, 32, 2);
    let ids_a = fx.vocab.tokenize("which is higher in this region ?");
    let mut ids_b = ids_a.clone();
    *ids_b.last_mut().unwrap() = fx.vocab.id("region");
    let la = fx.backbone.forward_ids(&ids_a).unwrap();
    let lb = fx.backbone.forward_ids(&ids_b).unwrap();
    let v = fx.backbone.vocab_size();
    let n = ids_a.len() - 1;
    assert_eq!(la.data()[..n * v], lb.data()[..n * v]);
    assert_ne!(la.data()[n * v..], lb.data()[n * v..]);
}

#[test]
fn frozen_backbone_rejects_mutation_and_survives_checkpoints() {
    let fx = fixture(60, 20, 32, 2);
    let mut b = fx.backbone.clone();
    assert!(b.params_mut().is_err());
    b.verify_frozen().unwrap();
    let back = Backbone::from_checkpoint(&Checkpoint::from_bytes(&b.to_checkpoint().to_bytes()).unwrap()).unwrap();
    assert_eq!(back.content_hash(), b.content_hash());
    back.verify_frozen().unwrap();

    b.unfreeze();
    let frozen_at = fx.backbone.frozen_hash().unwrap().to_string();
    b.params_mut().unwrap()[0].data_mut()[0] += 1e-9;
    assert_ne!(b.content_hash(), frozen_at);
}

#[test]
fn reindexing_law_holds_over_the_dataset() {
    let fx = fixture(400, 100, 32, 1);
    for n in [1, 2, 4, 8] {
        let p = fx.projector(n, 3);
        let mut violations = 0;
        for ex in fx.data.all() {
            let plan = SeqPlan::new(&fx.vocab, &ex.prompt, Some(&ex.answer)).unwrap();
            let seq = build_sequence(&plan, &ex.region_ids, &fx.store, &p, &fx.backbone).unwrap();
            let t = plan.l_text() - plan.k() + plan.k() * n;
            if seq.len() != t || seq.position_ids != (0..t).collect::<Vec<_>>() || seq.embeds.shape() != [t, 32] {
                violations += 1;
            }
        }
        assert_eq!(violations, 0, "N={n}");
    }
}

#[test]
fn soft_rows_are_the_projected_embedding() {
    let fx = fixture(60, 20, 32, 1);
    let p = fx.projector(3, 9);
    let ex = fx.data.train.iter().find(|e| e.region_ids.len() == 2).unwrap();
    let plan = SeqPlan::new(&fx.vocab, &ex.prompt, Some(&ex.answer)).unwrap();
    let seq = build_sequence(&plan, &ex.region_ids, &fx.store, &p, &fx.backbone).unwrap();
    for (row, prov) in seq.provenance.iter().enumerate() {
        let want = match *prov {
            Provenance::Soft { slot, n } => p.project(fx.store.get(&ex.region_ids[slot]).unwrap()).unwrap().row(n).to_vec(),
            Provenance::Text(t) => fx.backbone.tok_emb().row(t).to_vec(),
        };
        assert_eq!(seq.embeds.row(row), &want[..]);
    }
    // Only answer tokens and the closing <eos> are scored.
    let answer_len = fx.vocab.tokenize(&ex.answer).len() + 1;
    assert_eq!(seq.loss_mask.iter().filter(|&&m| m).count(), answer_len);
}

#[test]
fn region_count_must_match_placeholders() {
    let fx = fixture(60, 20, 32, 1);
    let p = fx.projector(2, 0);
    let ex = fx.data.train.iter().find(|e| e.region_ids.len() == 2).unwrap();
    let plan = SeqPlan::new(&fx.vocab, &ex.prompt, Some(&ex.answer)).unwrap();
    let err = build_sequence(&plan, &ex.region_ids[..1], &fx.store, &p, &fx.backbone).unwrap_err();
    assert!(matches!(err, dfr_core::DfrError::Placeholder(_)));
    assert!(SeqPlan::new(&fx.vocab, "a <emb:0> b", Some("<emb:0>")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mixed_length_law(words in proptest::collection::vec(0usize..6, 0..12), k in 0usize..4, n in 1usize..8) {
        let fx = &*FX;
        let vocab_words = ["the", "region", "has", "more", "than", "average"];
        let mut prompt: Vec<String> = words.iter().map(|&w| vocab_words[w].to_string()).collect();
        for slot in 0..k {
            let at = (slot * 3).min(prompt.len());
            prompt.insert(at, format!("<emb:{slot}>"));
        }
        let plan = SeqPlan::new(&fx.vocab, &prompt.join(" "), Some("yes")).unwrap();
        let (prov, targets, mask) = plan.layout(n);
        prop_assert_eq!(plan.k(), k);
        prop_assert_eq!(prov.len(), plan.l_text() - k + k * n);
        prop_assert_eq!(targets.len(), prov.len());
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
        let soft = prov.iter().filter(|p| matches!(p, Provenance::Soft { .. })).count();
        prop_assert_eq!(soft, k * n);
    }
}

static FX: std::sync::LazyLock<common::Fixture> = std::sync::LazyLock::new(|| fixture(60, 20, 32, 1));

#[test]
fn training_gradient_path_matches_finite_differences() {
    let fx = fixture(60, 20, 32, 2);
    let projector = fx.projector(4, 3);
    let ex = fx.data.train.iter().find(|e| e.task == dfr_core::benchgen::Task::MostSimilar).unwrap();
    let ctx = fx.ctx();
    let f = |ps: &[Tensor]| {
        let mut p = projector.clone();
        for (dst, src) in p.params_mut().iter_mut().zip(ps) {
            dst.data_mut().copy_from_slice(src.data());
        }
        dfr_core::trainer::projector_loss_and_grads(&fx.backbone, &p, ex, &ctx)
    };
    let err = grad_check_sampled(f, projector.params(), 1e-5, 64, 4).unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn projector_shapes_and_checkpoint() {
    let p = Projector::init(48, 32, 4, 1).unwrap();
    assert_eq!(p.d_mid, 16);
    assert_eq!(p.w1().shape(), [16, 48]);
    assert_eq!(p.w2().shape(), [128, 16]);
    let e = Tensor::from_vec((0..48).map(|i| (i as f64 * 0.37).sin()).collect());
    let z = p.project(&e).unwrap();
    assert_eq!(z.shape(), [4, 32]);
    assert!(p.project_direct(e.data()).unwrap().max_abs_diff(&z) < 1e-12);
    let back = Projector::from_checkpoint(&p.to_checkpoint()).unwrap();
    assert_eq!(back.content_hash(), p.content_hash());
    assert_eq!(back.project(&e).unwrap(), z);
    let pooled = dfr_core::projector::pool_soft_tokens(&z);
    for c in 0..32 {
        let mean = (0..4).map(|r| z.row(r)[c]).sum::<f64>() / 4.0;
        assert!((pooled.data()[c] - mean).abs() < 1e-12);
    }
    assert!(Projector::init(0, 32, 4, 1).is_err());
    assert!(Projector::init(48, 32, 0, 1).is_err());
}
