//! The seven commands, each reading and writing files under one workspace.

use std::collections::BTreeSet;

use dfr_core::backbone::{corpus_perplexity, Backbone, Vocab};
use dfr_core::benchgen::{Dataset, PromptMode, QAExample, Task};
use dfr_core::checkpoint::Checkpoint;
use dfr_core::error::{DfrError, Result};
use dfr_core::evalsuite::{
    eval_robustness, eval_shift, rank_candidates, run_fragmented, run_method, run_no_llm_mlp, sweep_n, token_length_stats,
    token_lengths, write_report, Adaptation, EvalResult, Label, LengthMethod, Metric, ModelBundle, OracleProbe,
    RegionIndex, ReportHeader, RidgeProbes,
};
use dfr_core::geoworld::{load_embeddings, save_embeddings, Region, World, D_RAW};
use dfr_core::projector::Projector;
use dfr_core::sequencer::EmbeddingStore;
use dfr_core::trainer::{train, TrainConfig};

use crate::config::RunConfig;
use crate::pipeline;
use crate::workspace::Workspace;

pub const WORLD: &str = "world/world.jsonl";
pub const EMBEDDINGS: &str = "world/embeddings.jsonl";
pub const DATA_DIR: &str = "data";
pub const MANIFEST: &str = "data/manifest.json";
pub const CORPUS: &str = "backbone/corpus.txt";
pub const VOCAB: &str = "backbone/vocab.txt";
pub const BACKBONE: &str = "backbone/backbone.ckpt";
pub const PRETRAIN_REPORT: &str = "backbone/pretrain.json";

/// Evaluation methods accepted by `eval`.
pub const METHODS: [&str; 11] = [
    "dfr",
    "untrained",
    "zero_context",
    "raw_input",
    "raw_description",
    "mlp",
    "fragmented",
    "tokens",
    "robustness",
    "shift",
    "forgetting",
];

fn write_json<T: serde::Serialize>(ws: &Workspace, rel: &str, v: &T) -> Result<()> {
    ws.write(rel, serde_json::to_string_pretty(v)?.as_bytes())?;
    Ok(())
}

fn write_config(ws: &Workspace, cfg: &RunConfig) -> Result<()> {
    ws.write("config.txt", cfg.to_text().as_bytes())?;
    Ok(())
}

pub fn gen_world(ws: &Workspace, cfg: &RunConfig) -> Result<()> {
    let world = pipeline::build_world(cfg)?;
    let data = pipeline::build_data(cfg, &world)?;
    let encoder = pipeline::build_encoder(cfg, &world)?;
    let store = pipeline::embed_all(&encoder, &world, &data)?;
    ws.write(WORLD, world.to_jsonl().as_bytes())?;
    let mut ids: Vec<&str> = world.regions.iter().map(|r| r.region_id.as_str()).collect();
    ids.extend(data.counties.iter().map(|c| c.region_id.as_str()));
    let p = ws.path(EMBEDDINGS);
    save_embeddings(&p, &ids, &store)?;
    write_json(ws, "world/encoder.json", &encoder)?;
    write_config(ws, cfg)?;
    log::info!("world: {} regions, {} counties, d_e {}", world.regions.len(), data.counties.len(), store.d_e);
    ws.record("gen-world", &cfg.hash(), &[], &[WORLD, EMBEDDINGS, "world/encoder.json"])
}

pub fn gen_data(ws: &Workspace, cfg: &RunConfig) -> Result<()> {
    ws.verified_hash(WORLD)?;
    let world = World::load(&ws.path(WORLD))?;
    let dcfg = pipeline::dataset_config(cfg)?;
    let data = dfr_core::benchgen::build_dataset(&world, &dcfg)?;
    let bad = data.verify_all(&world, dcfg.similarity_margin);
    if let Some((uid, msg)) = bad.first() {
        return Err(DfrError::Integrity(format!("{} examples fail verification, first {uid}: {msg}", bad.len())));
    }
    data.save(&ws.path(DATA_DIR), &world, &dcfg)?;
    write_config(ws, cfg)?;
    let mut outs: Vec<String> = Dataset::FILES.iter().map(|f| format!("{DATA_DIR}/{f}")).collect();
    outs.push(format!("{DATA_DIR}/counties.jsonl"));
    outs.push(MANIFEST.into());
    let refs: Vec<&str> = outs.iter().map(String::as_str).collect();
    log::info!("data: {} train, {} test", data.train.len(), data.test.len());
    ws.record("gen-data", &cfg.hash(), &[WORLD], &refs)
}

pub fn pretrain(ws: &Workspace, cfg: &RunConfig) -> Result<()> {
    ws.verified_hash(WORLD)?;
    let world = World::load(&ws.path(WORLD))?;
    let (corpus, vocab) = pipeline::build_corpus_and_vocab(cfg, &world)?;
    let (backbone, report) = pipeline::pretrain(cfg, &corpus, &vocab, pipeline::executor(cfg)?)?;
    let mut text = corpus.join("\n");
    text.push('\n');
    ws.write(CORPUS, text.as_bytes())?;
    vocab.save(&ws.path(VOCAB))?;
    backbone.to_checkpoint().save(&ws.path(BACKBONE))?;
    write_json(ws, PRETRAIN_REPORT, &report)?;
    write_config(ws, cfg)?;
    log::info!(
        "pretrain: held-out ppl {:.3} (unigram {:.3})",
        report.heldout_ppl,
        report.unigram_ppl
    );
    ws.record("pretrain", &cfg.hash(), &[WORLD], &[CORPUS, VOCAB, BACKBONE, PRETRAIN_REPORT])
}

/// Artifacts shared by training and evaluation.
pub struct Loaded {
    pub world: World,
    pub data: Dataset,
    pub store: EmbeddingStore,
    pub vocab: Vocab,
    pub corpus: Vec<String>,
    pub backbone: Backbone,
}

pub fn load(ws: &Workspace) -> Result<Loaded> {
    for f in [WORLD, EMBEDDINGS, MANIFEST, CORPUS, VOCAB, BACKBONE] {
        ws.verified_hash(f)?;
    }
    let world = World::load(&ws.path(WORLD))?;
    let (data, manifest) = Dataset::load(&ws.path(DATA_DIR))?;
    let world_hash = dfr_core::checkpoint::sha256_hex(world.to_jsonl().as_bytes());
    if manifest.world_hash != world_hash {
        return Err(DfrError::Integrity(format!(
            "{} was generated from a different world",
            ws.path(MANIFEST).display()
        )));
    }
    let store = load_embeddings(&ws.path(EMBEDDINGS))?;
    let vocab = Vocab::load(&ws.path(VOCAB))?;
    let corpus = ws.read_string(CORPUS)?.lines().map(String::from).collect();
    let backbone = Backbone::from_checkpoint(&Checkpoint::load(&ws.path(BACKBONE))?)?;
    backbone.verify_frozen()?;
    Ok(Loaded {
        world,
        data,
        store,
        vocab,
        corpus,
        backbone,
    })
}

/// Directory of a training run, named by its distinguishing settings.
pub fn train_tag(t: &TrainConfig) -> String {
    let strategy = t.strategy.to_string().replace(':', "-");
    format!("{}_{strategy}_n{}_l{}", t.mode, t.n_tokens, t.lambda)
}

pub fn train_cmd(ws: &Workspace, cfg: &RunConfig) -> Result<String> {
    let l = load(ws)?;
    let tcfg = pipeline::train_config(cfg)?;
    let tag = train_tag(&tcfg);
    let init = pipeline::init_projector(cfg, l.store.d_e, &l.backbone, tcfg.n_tokens)?;
    let ctx = dfr_core::trainer::TrainContext {
        vocab: &l.vocab,
        store: &l.store,
        profiles: None,
        exec: pipeline::executor(cfg)?,
    };
    let profiles;
    let ctx = if tcfg.lambda > 0.0 {
        profiles = l
            .world
            .regions
            .iter()
            .chain(&l.data.counties)
            .map(|r| (r.region_id.clone(), dfr_core::trainer::profile_label(r, &l.world.stats)))
            .collect();
        dfr_core::trainer::TrainContext {
            profiles: Some(&profiles),
            ..ctx
        }
    } else {
        ctx
    };
    let out = train(&tcfg, &l.data.train, &l.backbone, init, &ctx)?;
    if let Some(reason) = &out.aborted {
        return Err(DfrError::Numeric(format!("training aborted: {reason}")));
    }
    let dir = format!("train/{tag}");
    let mut outputs = vec![format!("{dir}/projector.ckpt"), format!("{dir}/metrics.jsonl")];
    out.projector.to_checkpoint().save(&ws.path(&outputs[0]))?;
    let mut metrics = String::new();
    for m in &out.metrics {
        metrics.push_str(&serde_json::to_string(m)?);
        metrics.push('\n');
    }
    ws.write(&outputs[1], metrics.as_bytes())?;
    if let Some(b) = &out.backbone {
        outputs.push(format!("{dir}/backbone.ckpt"));
        b.to_checkpoint().save(&ws.path(&outputs[2]))?;
    }
    write_config(ws, cfg)?;
    log::info!("train {tag}: {} steps, best epoch {:?}", out.steps, out.best_epoch);
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    ws.record("train", &cfg.hash(), &[MANIFEST, EMBEDDINGS, BACKBONE, VOCAB], &refs)?;
    Ok(tag)
}

fn load_projector(ws: &Workspace, rel: &str) -> Result<Projector> {
    ws.verified_hash(rel)?;
    Projector::from_checkpoint(&Checkpoint::load(&ws.path(rel))?)
}

fn dfr_label(t: &TrainConfig) -> String {
    let s = match t.strategy {
        dfr_core::trainer::Strategy::Mix => "mix".to_string(),
        dfr_core::trainer::Strategy::Separate(task) => format!("separate {task}"),
    };
    format!("DFR ({s}, N={})", t.n_tokens)
}

/// Runs one evaluation method and writes `results/<method>.json`.
pub fn eval_cmd(ws: &Workspace, cfg: &RunConfig, method: &str, checkpoint: Option<&str>) -> Result<Vec<EvalResult>> {
    if !METHODS.contains(&method) {
        return Err(DfrError::Config(format!("unknown method {method:?} (one of {})", METHODS.join(", "))));
    }
    let l = load(ws)?;
    let tcfg = pipeline::train_config(cfg)?;
    let ckpt = checkpoint
        .map(String::from)
        .unwrap_or_else(|| format!("train/{}/projector.ckpt", train_tag(&tcfg)));
    let exec = pipeline::executor(cfg)?;
    let index = RegionIndex::new(&l.world, &l.data.counties);
    let hash = cfg.hash();
    let label = |exp: &str, m: &str| Label::new(exp, m, "test").with_hash(&hash);
    let mut inputs = vec![MANIFEST, EMBEDDINGS, BACKBONE, VOCAB];
    let needs_projector = matches!(method, "dfr" | "robustness" | "shift");
    let projector = if needs_projector {
        inputs.push(&ckpt);
        Some(load_projector(ws, &ckpt)?)
    } else {
        None
    };
    let bundle = ModelBundle {
        backbone: &l.backbone,
        projector: projector.as_ref(),
        vocab: &l.vocab,
        store: &l.store,
        exec,
    };
    let text_bundle = ModelBundle { projector: None, ..bundle };
    let budget: usize = cfg.get("eval.raw_budget")?;
    let results = match method {
        "dfr" => run_method(&bundle, &l.data.test, PromptMode::Dfr, None, &label("main", &dfr_label(&tcfg)))?.1,
        "untrained" => {
            let p = pipeline::init_projector(cfg, l.store.d_e, &l.backbone, tcfg.n_tokens)?;
            let b = ModelBundle { projector: Some(&p), ..bundle };
            let m = format!("untrained projector (N={})", tcfg.n_tokens);
            run_method(&b, &l.data.test, PromptMode::Dfr, None, &label("main", &m))?.1
        }
        "zero_context" => run_method(&text_bundle, &l.data.test, PromptMode::ZeroContext, None, &label("main", "zero-context"))?.1,
        "raw_input" => {
            let mode = PromptMode::RawInput { budget };
            run_method(&text_bundle, &l.data.test, mode, Some(&index), &label("main", "raw input"))?.1
        }
        "raw_description" => {
            let mode = PromptMode::RawDescription;
            run_method(&text_bundle, &l.data.test, mode, Some(&index), &label("main", "raw data description"))?.1
        }
        "mlp" => {
            let m = pipeline::mlp_config(cfg)?;
            run_no_llm_mlp(&l.data.train, &l.data.test, &l.store, &m, &label("main", "no-LLM MLP"))?.results()
        }
        "fragmented" => fragmented(&l, &text_bundle, cfg, &label("main", "fragmented pipeline"))?,
        "tokens" => tokens(&l, &index, tcfg.n_tokens, &hash)?,
        "robustness" => robustness(&l, &bundle, &hash)?,
        "shift" => shift(&l, &bundle, &index, cfg, &hash)?,
        "forgetting" => forgetting(ws, cfg, &l, &hash)?,
        _ => unreachable!("checked above"),
    };
    let out = format!("results/{method}.json");
    write_json(ws, &out, &results)?;
    write_config(ws, cfg)?;
    ws.record("eval", &hash, &inputs, &[&out])?;
    Ok(results)
}

/// Regions referenced by training examples, for fitting probes.
fn train_regions(l: &Loaded) -> Vec<&Region> {
    let ids: BTreeSet<&str> = l.data.train.iter().flat_map(|e| e.region_ids.iter().map(String::as_str)).collect();
    l.world.regions.iter().filter(|r| ids.contains(r.region_id.as_str())).collect()
}

fn fragmented(l: &Loaded, bundle: &ModelBundle<'_>, cfg: &RunConfig, label: &Label) -> Result<Vec<EvalResult>> {
    let features: Vec<usize> = (0..D_RAW).collect();
    let fit_on = train_regions(l);
    let probes = RidgeProbes::fit(&l.store, &fit_on, &l.world.stats, &features, cfg.get("eval.probe_lambda")?)?;
    let examples: Vec<QAExample> = l
        .data
        .test
        .iter()
        .filter(|e| matches!(e.task, Task::MostSimilar | Task::LeastSimilar | Task::MultiHop))
        .cloned()
        .collect();
    let test_ids: BTreeSet<&str> = examples.iter().flat_map(|e| e.region_ids.iter().map(String::as_str)).collect();
    let held: Vec<&Region> = l.world.regions.iter().filter(|r| test_ids.contains(r.region_id.as_str())).collect();
    let answer = |prompt: &str| dfr_core::evalsuite::generate(bundle, prompt, &[], 16);
    let oracle = OracleProbe {
        regions: l.world.regions.iter().map(|r| (r.region_id.as_str(), r)).collect(),
        stats: &l.world.stats,
    };
    let gold = |ex: &QAExample| rank_candidates(ex, &oracle).ok().map(|i| ex.region_ids[i + 1].clone());
    let run = run_fragmented(&examples, &probes, &l.world.stats, gold, answer, label)?;
    let mut results = run.results;
    results.push(label.result("selection", "all", Metric::Accuracy, run.selection_accuracy, examples.len()));
    for (i, d) in run.stage_latency.iter().enumerate() {
        results.push(label.result(&format!("stage{}", i + 1), "all", Metric::LatencyMs, d.as_secs_f64() * 1e3, examples.len()));
    }
    for f in features {
        let r2 = probes.r_squared_on(f, &held, &l.world.stats)?;
        results.push(label.result(dfr_core::geoworld::FEATURES[f].name, "all", Metric::R2, r2, held.len()));
    }
    Ok(results)
}

/// Prompt lengths; raw input is serialized without a budget so every
/// value is counted.
fn tokens(l: &Loaded, index: &RegionIndex<'_>, n: usize, hash: &str) -> Result<Vec<EvalResult>> {
    let mut out = Vec::new();
    let dfr = token_lengths(&l.data.test, LengthMethod::Dfr { n_tokens: n }, &l.vocab, index)?;
    let raw = token_lengths(&l.data.test, LengthMethod::Text(PromptMode::RawInput { budget: usize::MAX }), &l.vocab, index)?;
    let desc = token_lengths(&l.data.test, LengthMethod::Text(PromptMode::RawDescription), &l.vocab, index)?;
    for (m, v) in [(format!("DFR (N={n})"), &dfr), ("raw input".into(), &raw), ("raw data description".into(), &desc)] {
        out.extend(token_length_stats(v, &Label::new("tokens", &m, "test").with_hash(hash))?);
    }
    let ratio = dfr.iter().zip(&raw).map(|(a, b)| *a as f64 / *b as f64).sum::<f64>() / dfr.len() as f64;
    let shorter = dfr.iter().zip(&raw).filter(|(a, b)| a < b).count();
    let l = Label::new("tokens", "DFR vs raw input", "test").with_hash(hash);
    out.push(l.result("all", "all", Metric::Ratio, ratio, dfr.len()));
    out.push(l.result("shorter_share", "all", Metric::Ratio, shorter as f64 / dfr.len() as f64, dfr.len()));
    Ok(out)
}

fn robustness(l: &Loaded, bundle: &ModelBundle<'_>, hash: &str) -> Result<Vec<EvalResult>> {
    let mut out = Vec::new();
    let text = ModelBundle { projector: None, ..*bundle };
    for (name, b, mode) in [("DFR", bundle, PromptMode::Dfr), ("zero-context", &text, PromptMode::ZeroContext)] {
        let label = Label::new("robustness", name, "test").with_hash(hash);
        let r = eval_robustness(b, &l.data.test, &l.data.robust, mode, None, &label)?;
        out.extend(r.results);
        for d in r.deltas {
            out.push(label.result(&d.task, d.style.as_str(), Metric::Delta, d.delta, d.pairs));
        }
    }
    Ok(out)
}

fn shift(l: &Loaded, bundle: &ModelBundle<'_>, index: &RegionIndex<'_>, cfg: &RunConfig, hash: &str) -> Result<Vec<EvalResult>> {
    let label = Label::new("shift", "DFR", "shift_county").with_hash(hash);
    let seed: u64 = cfg.get("data.seed")?;
    let mut out = Vec::new();
    for a in [
        Adaptation::None,
        Adaptation::FewshotContext { k: cfg.get("eval.shots")? },
        Adaptation::FewshotFinetune {
            n: cfg.get("eval.finetune_n")?,
            steps: cfg.get("eval.finetune_steps")?,
            lr: cfg.get("eval.finetune_lr")?,
        },
    ] {
        out.extend(eval_shift(bundle, &l.data.shift, &l.data.shift_pool, index, a, seed, &label)?);
    }
    Ok(out)
}

/// Held-out corpus perplexity of the pretrained backbone and of every
/// backbone copy a training run produced.
fn forgetting(ws: &Workspace, cfg: &RunConfig, l: &Loaded, hash: &str) -> Result<Vec<EvalResult>> {
    let held = pipeline::heldout_lines(cfg, &l.corpus)?;
    let exec = pipeline::executor(cfg)?;
    let label = |m: &str| Label::new("forgetting", m, "heldout").with_hash(hash);
    let mut out = vec![label("pretrained").result("corpus", "all", Metric::Perplexity, corpus_perplexity(&l.backbone, &l.vocab, &held, exec)?, held.len())];
    let train_dir = ws.path("train");
    let mut tags: Vec<String> = match std::fs::read_dir(&train_dir) {
        Ok(rd) => rd.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect(),
        Err(_) => Vec::new(),
    };
    tags.sort();
    for tag in tags {
        let rel = format!("train/{tag}/backbone.ckpt");
        let model = if ws.path(&rel).exists() {
            ws.verified_hash(&rel)?;
            Backbone::from_checkpoint(&Checkpoint::load(&ws.path(&rel))?)?
        } else {
            l.backbone.clone()
        };
        let ppl = corpus_perplexity(&model, &l.vocab, &held, exec)?;
        out.push(label(&tag).result("corpus", "all", Metric::Perplexity, ppl, held.len()));
    }
    Ok(out)
}

pub fn sweep_cmd(ws: &Workspace, cfg: &RunConfig) -> Result<Vec<EvalResult>> {
    let l = load(ws)?;
    let base = pipeline::train_config(cfg)?;
    let ns: Vec<usize> = cfg.list("sweep.n")?;
    let separate: bool = cfg.get("sweep.separate")?;
    let ctx = dfr_core::trainer::TrainContext {
        vocab: &l.vocab,
        store: &l.store,
        profiles: None,
        exec: pipeline::executor(cfg)?,
    };
    let hash = cfg.hash();
    let cells = sweep_n(&base, &ns, separate, &l.data.train, &l.data.test, &l.backbone, &ctx, &Label::new("sweep", "", "test").with_hash(&hash))?;
    let results: Vec<EvalResult> = cells.into_iter().flat_map(|c| c.results).collect();
    write_json(ws, "results/sweep.json", &results)?;
    write_config(ws, cfg)?;
    ws.record("sweep", &hash, &[MANIFEST, EMBEDDINGS, BACKBONE, VOCAB], &["results/sweep.json"])?;
    Ok(results)
}

/// Collects every `results/*.json` into `report/`.
pub fn report_cmd(ws: &Workspace) -> Result<Vec<std::path::PathBuf>> {
    let dir = ws.path("results");
    let mut files: Vec<std::path::PathBuf> = match std::fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    let mut results: Vec<EvalResult> = Vec::new();
    let mut inputs = Vec::new();
    for f in &files {
        let rel = format!("results/{}", f.file_name().expect("file").to_string_lossy());
        ws.verified_hash(&rel)?;
        let text = ws.read_string(&rel)?;
        results.extend(serde_json::from_str::<Vec<EvalResult>>(&text)?);
        inputs.push(rel);
    }
    let hash_of = |rel: &str| ws.verified_hash(rel).unwrap_or_default();
    let mut notes = vec![
        "fragmented-pipeline retrievers are ridge probes, not gradient-boosted trees".to_string(),
        "forgetting is measured as held-out pretraining-corpus perplexity".to_string(),
    ];
    for r in ws.records()? {
        notes.push(format!("{}: config {}", r.command, &r.config_hash[..12.min(r.config_hash.len())]));
    }
    notes.dedup();
    let header = ReportHeader {
        title: "DFR evaluation report".into(),
        config_hash: ws
            .read_string("config.txt")
            .map(|t| dfr_core::checkpoint::sha256_hex(t.as_bytes()))
            .unwrap_or_default(),
        backbone_hash: hash_of(BACKBONE),
        data_hash: hash_of(MANIFEST),
        notes,
    };
    let written = write_report(&ws.path("report"), &header, &results)?;
    let outs: Vec<String> = written
        .iter()
        .map(|p| p.strip_prefix(&ws.root).unwrap_or(p).to_string_lossy().into_owned())
        .collect();
    let in_refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    let out_refs: Vec<&str> = outs.iter().map(String::as_str).collect();
    ws.record("report", &header.config_hash, &in_refs, &out_refs)?;
    Ok(written)
}

/// Parses `--module.key=value` flags; other arguments pass through.
pub fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            Some((k, v)) if k.contains('.') => overrides.push((k.to_string(), v.to_string())),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}
