mod common;

use std::collections::HashMap;

use dfr_core::benchgen::{PromptMode, QAExample, Style, Task};
use dfr_core::evalsuite::{
    answer_candidates, is_correct, normalize_answer, paired_deltas, rank_candidates, render_csv, render_markdown,
    run_fragmented, run_method, run_no_llm_mlp, score_examples, summarize, token_lengths, write_report, EvalResult,
    ExampleOutcome, Label, LengthMethod, Metric, MlpConfig, ModelBundle, OracleProbe, RegionIndex, ReportHeader,
    RidgeProbes,
};
use dfr_core::geoworld::{Region, D_RAW};
use proptest::prelude::*;

use common::fixture;

#[test]
fn answer_normalization() {
    assert_eq!(normalize_answer("  Hospitals.\nextra line"), "hospitals");
    assert_eq!(normalize_answer("Yes!"), "yes");
    assert_eq!(normalize_answer("coffee_shops , ok"), "coffee_shops ok");
    assert_eq!(normalize_answer(""), "");
}

fn outcome(uid: &str, task: Task, style: Style, correct: bool) -> ExampleOutcome {
    ExampleOutcome {
        uid: uid.into(),
        task,
        style,
        prediction: Some(String::new()),
        correct: Some(correct),
        nll: 1.0,
        answer_tokens: 1,
        input_tokens: 10,
        truncated: false,
    }
}

#[test]
fn mc_answers_accept_the_option_letter() {
    let fx = fixture(200, 60, 32, 1);
    let ex = fx.data.test.iter().find(|e| e.task == Task::AbsValueMc).unwrap();
    let letter = ex.meta.answer_letter.unwrap();
    assert!(is_correct(&ex.answer, ex));
    assert!(is_correct(&format!("{letter})"), ex));
    assert!(is_correct(&letter.to_uppercase().to_string(), ex));
    let wrong = ['a', 'b', 'c', 'd'].into_iter().find(|&l| l != letter).unwrap();
    assert!(!is_correct(&wrong.to_string(), ex));
    let fc = fx.data.test.iter().find(|e| e.task == Task::FeatCmp).unwrap();
    assert!(!is_correct("a", fc));
}

#[test]
fn paired_deltas_by_hand() {
    // Canonical: c1 right, c2 wrong, c3 right. Formal rewrites: r1 wrong,
    // r2 right, r3 right. Informal: i1 right only.
    let canon = vec![
        outcome("c1", Task::FeatCmp, Style::Canonical, true),
        outcome("c2", Task::FeatCmp, Style::Canonical, false),
        outcome("c3", Task::CmpAvg, Style::Canonical, true),
    ];
    let mk = |uid: &str, pair: &str, task: Task, style: Style| {
        let mut ex = QAExample {
            prompt: String::new(),
            region_ids: vec![],
            answer: String::new(),
            task,
            style,
            split: dfr_core::benchgen::Split::Test,
            options: vec![],
            meta: Default::default(),
        };
        ex.meta.uid = uid.into();
        ex.meta.pair = Some(pair.into());
        ex
    };
    let exs = [
        mk("r1", "c1", Task::FeatCmp, Style::Formal),
        mk("r2", "c2", Task::FeatCmp, Style::Formal),
        mk("r3", "c3", Task::CmpAvg, Style::Formal),
        mk("i1", "c1", Task::FeatCmp, Style::Informal),
        mk("orphan", "zz", Task::FeatCmp, Style::Informal),
    ];
    let outs = [(false), (true), (true), (true), (false)];
    let styled: Vec<(&QAExample, ExampleOutcome)> = exs
        .iter()
        .zip(outs)
        .map(|(e, c)| (e, outcome(&e.meta.uid, e.task, e.style, c)))
        .collect();
    let d = paired_deltas(&canon, &styled);
    let get = |s: Style, t: &str| d.iter().find(|x| x.style == s && x.task == t).unwrap();
    let f_all = get(Style::Formal, "all");
    assert_eq!((f_all.canonical, f_all.styled, f_all.pairs), (2.0 / 3.0, 2.0 / 3.0, 3));
    assert_eq!(f_all.delta, 0.0);
    let f_fc = get(Style::Formal, "feat_cmp");
    assert_eq!((f_fc.canonical, f_fc.styled, f_fc.delta), (0.5, 0.5, 0.0));
    let i_all = get(Style::Informal, "all");
    assert_eq!((i_all.pairs, i_all.delta), (1, 0.0));
    assert!(d.iter().all(|x| x.task != "cmp_avg" || x.style == Style::Formal));
}

#[test]
fn summary_counts_accuracy_and_describe_perplexity() {
    let l = Label::new("main", "m", "test");
    let mut outs = vec![
        outcome("a", Task::FeatCmp, Style::Canonical, true),
        outcome("b", Task::FeatCmp, Style::Canonical, false),
        outcome("c", Task::CmpAvg, Style::Canonical, true),
    ];
    let mut d = outcome("d", Task::Describe, Style::Canonical, true);
    d.correct = None;
    d.nll = 6.0;
    d.answer_tokens = 3;
    outs.push(d);
    let r = summarize(&l, &outs);
    let find = |t: &str, m: Metric| r.iter().find(|x| x.task == t && x.metric == m).unwrap();
    assert_eq!(find("feat_cmp", Metric::Accuracy).value, 0.5);
    assert_eq!(find("cmp_avg", Metric::Accuracy).value, 1.0);
    assert!((find("describe", Metric::Perplexity).value - 2f64.exp()).abs() < 1e-12);
    let all = find("all", Metric::Accuracy);
    assert_eq!((all.value, all.count), (2.0 / 3.0, 3));
}

fn sample_results() -> Vec<EvalResult> {
    let a = Label::new("main", "DFR (mix, N=4)", "test").with_hash("h");
    let b = Label::new("tokens", "raw input", "test");
    vec![
        a.result("most_similar", "all", Metric::Accuracy, 0.5, 10),
        a.result("feat_cmp", "all", Metric::Accuracy, 0.75, 20),
        a.result("describe", "all", Metric::Perplexity, 123.456, 5),
        b.result("all", "all", Metric::TokenLenMean, 88.0, 30),
        a.with_method("zero-context").result("feat_cmp", "all", Metric::Accuracy, f64::NAN, 20),
    ]
}

#[test]
fn report_is_order_independent_and_idempotent() {
    let r = sample_results();
    let mut rev = r.clone();
    rev.reverse();
    let h = ReportHeader {
        title: "t".into(),
        ..Default::default()
    };
    assert_eq!(render_markdown(&h, &r), render_markdown(&h, &rev));
    assert_eq!(render_csv(&r).unwrap(), render_csv(&rev).unwrap());
    let md = render_markdown(&h, &r);
    assert!(md.contains("0.750 (n=20)"));
    assert!(md.contains("123.5 (n=5)"));
    assert!(md.contains("n/a"));
    // Task columns follow the task order, not the alphabet.
    assert!(md.find("feat_cmp").unwrap() < md.find("most_similar").unwrap());

    let dir = tempfile::tempdir().unwrap();
    let first = write_report(dir.path(), &h, &r).unwrap();
    let bytes: Vec<Vec<u8>> = first.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let second = write_report(dir.path(), &h, &rev).unwrap();
    assert_eq!(first, second);
    for (p, b) in second.iter().zip(&bytes) {
        assert_eq!(&std::fs::read(p).unwrap(), b);
    }
    assert!(dir.path().join("plot_tokens.csv").exists());
}

#[test]
fn csv_has_one_row_per_result() {
    let r = sample_results();
    let text = render_csv(&r).unwrap();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let headers = rd.headers().unwrap().clone();
    assert_eq!(&headers[0], "experiment");
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), r.len());
    assert!(rows.iter().any(|row| &row[1] == "DFR (mix, N=4)" && &row[5] == "accuracy" && &row[6] == "0.75"));
}

#[test]
fn oracle_probes_select_the_gold_candidate() {
    let fx = fixture(300, 100, 32, 1);
    let regions: HashMap<&str, &Region> = fx.world.regions.iter().map(|r| (r.region_id.as_str(), r)).collect();
    let oracle = OracleProbe {
        regions,
        stats: &fx.world.stats,
    };
    let sim: Vec<QAExample> = fx
        .data
        .test
        .iter()
        .filter(|e| matches!(e.task, Task::MostSimilar | Task::LeastSimilar | Task::MultiHop))
        .cloned()
        .collect();
    assert!(!sim.is_empty());
    for ex in sim.iter().filter(|e| e.task != Task::MultiHop) {
        let i = rank_candidates(ex, &oracle).unwrap();
        assert_eq!(ex.region_ids[i + 1], ex.answer);
    }
    // A rigged stage 3 that repeats the selection scores every similarity
    // question; a constant reply scores none of them.
    let gold = |ex: &QAExample| Some(ex.region_ids[rank_candidates(ex, &oracle).unwrap() + 1].clone());
    let similar: Vec<QAExample> = sim.iter().filter(|e| e.task == Task::MostSimilar).cloned().collect();
    let l = Label::new("main", "fragmented", "test");
    let echo = |p: &str| {
        let rest = p.strip_prefix("analyst report for region ").expect("stage-3 prompt starts with the report");
        Ok(rest.split('.').next().unwrap().to_string())
    };
    let run = run_fragmented(&similar, &oracle, &fx.world.stats, gold, echo, &l).unwrap();
    assert_eq!(run.selection_accuracy, 1.0);
    assert_eq!(run.results[0].value, 1.0);
    let run = run_fragmented(&similar, &oracle, &fx.world.stats, gold, |_| Ok("nowhere".into()), &l).unwrap();
    assert_eq!(run.results[0].value, 0.0);
    let not_similar: Vec<QAExample> = fx.data.test.iter().filter(|e| e.task == Task::FeatCmp).take(1).cloned().collect();
    assert!(run_fragmented(&not_similar, &oracle, &fx.world.stats, gold, |_| Ok(String::new()), &l).is_err());
}

#[test]
fn ridge_probes_recover_features_from_embeddings() {
    let fx = fixture(60, 20, 32, 1);
    let (fit, held) = fx.world.regions.split_at(220);
    let fit: Vec<&Region> = fit.iter().collect();
    let held: Vec<&Region> = held.iter().collect();
    let all: Vec<usize> = (0..D_RAW).collect();
    let probes = RidgeProbes::fit(&fx.store, &fit, &fx.world.stats, &all, 1.0).unwrap();
    let r2: Vec<f64> = all.iter().map(|&f| probes.r_squared_on(f, &held, &fx.world.stats).unwrap()).collect();
    let mean = r2.iter().sum::<f64>() / r2.len() as f64;
    assert!(mean > 0.5, "{r2:?}");
    let partial = RidgeProbes::fit(&fx.store, &fit, &fx.world.stats, &[0], 1.0).unwrap();
    let ex = fx.data.test.iter().find(|e| e.task == Task::MostSimilar).unwrap();
    assert!(rank_candidates(ex, &partial).is_err());
}

#[test]
fn mlp_baseline_covers_discrete_tasks_only() {
    let fx = fixture(300, 100, 32, 1);
    let cfg = MlpConfig {
        epochs: 5,
        ..MlpConfig::default()
    };
    let l = Label::new("main", "no-LLM MLP", "test");
    let a = run_no_llm_mlp(&fx.data.train, &fx.data.test, &fx.store, &cfg, &l).unwrap();
    let b = run_no_llm_mlp(&fx.data.train, &fx.data.test, &fx.store, &cfg, &l).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_task[&Task::Describe], None);
    for t in Task::ALL.into_iter().filter(|t| t.is_discrete()) {
        let r = a.per_task[&t].as_ref().unwrap();
        assert!((0.0..=1.0).contains(&r.value));
    }
    for ex in fx.data.test.iter().filter(|e| e.task.is_discrete()) {
        let c = answer_candidates(ex).unwrap().unwrap();
        assert!(c.iter().any(|x| is_correct(x, ex)), "{}", ex.meta.uid);
    }
}

#[test]
fn dfr_prompts_are_shorter_than_raw_input() {
    let fx = fixture(200, 100, 32, 1);
    let index = RegionIndex::new(&fx.world, &fx.data.counties);
    let raw = PromptMode::RawInput { budget: usize::MAX };
    for n in [1, 4, 8] {
        let d = token_lengths(&fx.data.test, LengthMethod::Dfr { n_tokens: n }, &fx.vocab, &index).unwrap();
        let r = token_lengths(&fx.data.test, LengthMethod::Text(raw), &fx.vocab, &index).unwrap();
        assert!(d.iter().zip(&r).all(|(a, b)| a < b), "N={n}");
    }
    let zc = token_lengths(&fx.data.test, LengthMethod::Text(PromptMode::ZeroContext), &fx.vocab, &index).unwrap();
    let d1 = token_lengths(&fx.data.test, LengthMethod::Dfr { n_tokens: 1 }, &fx.vocab, &index).unwrap();
    assert!(zc.iter().zip(&d1).all(|(z, d)| z <= d));
}

#[test]
fn scoring_needs_regions_for_text_baselines_and_is_deterministic() {
    let fx = fixture(60, 40, 32, 1);
    let p = fx.projector(2, 0);
    let bundle = ModelBundle {
        backbone: &fx.backbone,
        projector: Some(&p),
        vocab: &fx.vocab,
        store: &fx.store,
        exec: dfr_core::par::Executor::Auto,
    };
    let few: Vec<QAExample> = fx.data.test.iter().take(12).cloned().collect();
    assert!(score_examples(&bundle, &few, PromptMode::RawDescription, None).is_err());
    let l = Label::new("main", "untrained", "test");
    let (a, ra) = run_method(&bundle, &few, PromptMode::Dfr, None, &l).unwrap();
    let seq = ModelBundle {
        exec: dfr_core::par::Executor::Sequential,
        ..bundle
    };
    let (b, rb) = run_method(&seq, &few, PromptMode::Dfr, None, &l).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert!(a.iter().all(|o| o.nll.is_finite() && o.answer_tokens > 0));
    let index = RegionIndex::new(&fx.world, &fx.data.counties);
    let text = ModelBundle { projector: None, ..bundle };
    let (outs, _) = run_method(&text, &few, PromptMode::RawDescription, Some(&index), &l).unwrap();
    assert_eq!(outs.len(), few.len());
    assert!(score_examples(&text, &few, PromptMode::Dfr, None).is_err());
}

proptest! {
    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,40}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once.clone());
        prop_assert!(!once.starts_with(' ') && !once.ends_with(' '));
    }
}
