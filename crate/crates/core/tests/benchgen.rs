use std::collections::{BTreeSet, HashMap};

use dfr_core::benchgen::{build_dataset, DatasetConfig, QAExample, Split, Style, Task, OPTION_LETTERS, SIMILARITY_SUBSETS};
use dfr_core::geoworld::{Region, World, FEATURES};

fn z(world: &World, f: usize, v: f64) -> f64 {
    (v - world.stats.mean[f]) / world.stats.std[f]
}

fn dist(world: &World, a: &Region, b: &Region, subset: &[usize]) -> f64 {
    subset
        .iter()
        .map(|&f| (z(world, f, a.value(f)) - z(world, f, b.value(f))).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Recomputes the answer from raw feature values, written without the
/// generator's helpers.
fn oracle(world: &World, regions: &HashMap<&str, &Region>, ex: &QAExample) -> Option<String> {
    let r: Vec<&Region> = ex.region_ids.iter().map(|id| regions[id.as_str()]).collect();
    let f = &ex.meta.features;
    let above = |reg: &Region, feat: usize| z(world, feat, reg.value(feat)) > 0.0;
    let subset = || {
        let name = ex.meta.subset.as_deref().unwrap();
        SIMILARITY_SUBSETS.iter().find(|(n, _)| *n == name).unwrap().1
    };
    let by_distance = |far: bool| {
        let d: Vec<f64> = r[1..].iter().map(|c| dist(world, r[0], c, subset())).collect();
        
        (0..d.len())
            .max_by(|&i, &j| if far { d[i].total_cmp(&d[j]) } else { d[j].total_cmp(&d[i]) })
            .unwrap()
    };
    Some(match ex.task {
        Task::CmpAvg => {
            let up = above(r[0], f[0]);
            match (ex.answer.as_str(), up) {
                ("yes" | "no", true) => "yes",
                ("yes" | "no", false) => "no",
                (_, true) => "higher",
                (_, false) => "lower",
            }
            .to_string()
        }
        Task::FeatCmp => {
            let w = if r[0].value(f[0]) > r[0].value(f[1]) { f[0] } else { f[1] };
            FEATURES[w].surface.to_string()
        }
        Task::AbsValueMc | Task::AbsWithContext => format!("{}", r.last().unwrap().value(f[0]).round() as u64),
        Task::Describe => return None,
        Task::MostSimilar => r[1 + by_distance(false)].region_id.clone(),
        Task::LeastSimilar => r[1 + by_distance(true)].region_id.clone(),
        Task::CrossRegionCmp => {
            if r[0].value(f[0]) > r[1].value(f[0]) { &r[0].region_id } else { &r[1].region_id }.clone()
        }
        Task::MultiHop => {
            let hop = r[1 + by_distance(false)];
            if above(hop, *f.last().unwrap()) { "yes" } else { "no" }.to_string()
        }
    })
}

fn setup() -> (World, dfr_core::benchgen::Dataset) {
    let world = World::generate(400, 2).unwrap();
    let data = build_dataset(&world, &DatasetConfig::with_sizes(600, 200, 5)).unwrap();
    (world, data)
}

#[test]
fn every_answer_matches_the_independent_oracle() {
    let (world, data) = setup();
    let mut regions: HashMap<&str, &Region> = world.regions.iter().map(|r| (r.region_id.as_str(), r)).collect();
    regions.extend(data.counties.iter().map(|r| (r.region_id.as_str(), r)));
    let mut checked = 0;
    for ex in data.all() {
        if let Some(want) = oracle(&world, &regions, ex) {
            assert_eq!(ex.answer, want, "{} ({})", ex.meta.uid, ex.task);
            checked += 1;
        }
        if ex.task.is_multiple_choice() {
            let letter = ex.meta.answer_letter.unwrap();
            let pos = OPTION_LETTERS.iter().position(|&l| l == letter).unwrap();
            assert_eq!(ex.options[pos], ex.answer);
        }
    }
    assert!(checked > 900);
    assert!(data.verify_all(&world, 0.25).is_empty());
}

#[test]
fn train_and_test_regions_are_disjoint() {
    let (_, data) = setup();
    let ids = |xs: &[QAExample]| -> BTreeSet<String> { xs.iter().flat_map(|e| e.region_ids.clone()).collect() };
    let (train, test) = (ids(&data.train), ids(&data.test));
    assert!(train.is_disjoint(&test));
    assert!(train.is_disjoint(&ids(&data.robust)));
    assert!(ids(&data.shift).is_disjoint(&ids(&data.shift_pool)));
    assert!(data.train.iter().all(|e| e.split == Split::Train));
    assert!(data.test.iter().all(|e| e.split == Split::Test && e.style == Style::Canonical));
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let world = World::generate(400, 2).unwrap();
    let cfg = DatasetConfig::with_sizes(200, 60, 5);
    let a = build_dataset(&world, &cfg).unwrap();
    let b = build_dataset(&world, &cfg).unwrap();
    assert_eq!(a, b);
    let c = build_dataset(&world, &DatasetConfig::with_sizes(200, 60, 6)).unwrap();
    assert_ne!(a.train, c.train);
}

#[test]
fn task_counts_follow_the_config() {
    let (_, data) = setup();
    let cfg = DatasetConfig::with_sizes(600, 200, 5);
    for t in Task::ALL {
        assert_eq!(data.train.iter().filter(|e| e.task == t).count(), cfg.train.get(t), "{t}");
        assert_eq!(data.test.iter().filter(|e| e.task == t).count(), cfg.test.get(t), "{t}");
    }
}

#[test]
fn binary_answers_are_roughly_balanced() {
    let (_, data) = setup();
    for t in [Task::FeatCmp, Task::CmpAvg, Task::MultiHop] {
        let xs: Vec<&QAExample> = data.train.iter().filter(|e| e.task == t).collect();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for e in &xs {
            *counts.entry(e.answer.as_str()).or_default() += 1;
        }
        let top = *counts.values().max().unwrap() as f64 / xs.len() as f64;
        assert!(top < 0.7, "{t}: {counts:?}");
    }
}

#[test]
fn rewrites_pair_with_canonical_test_examples() {
    let (_, data) = setup();
    let test: HashMap<&str, &QAExample> = data.test.iter().map(|e| (e.meta.uid.as_str(), e)).collect();
    assert!(!data.robust.is_empty());
    for r in &data.robust {
        let c = test[r.meta.pair.as_deref().unwrap()];
        assert_ne!(r.style, Style::Canonical);
        assert_eq!((&r.answer, &r.region_ids, r.task), (&c.answer, &c.region_ids, c.task));
    }
}

#[test]
fn saved_dataset_round_trips_and_detects_tampering() {
    let (world, data) = setup();
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig::with_sizes(600, 200, 5);
    data.save(dir.path(), &world, &cfg).unwrap();
    let (back, manifest) = dfr_core::benchgen::Dataset::load(dir.path()).unwrap();
    assert_eq!(back, data);
    assert_eq!(manifest.config, cfg);
    let p = dir.path().join("test.jsonl");
    let text = std::fs::read_to_string(&p).unwrap();
    std::fs::write(&p, text.replacen("\"answer\":\"", "\"answer\":\"x", 1)).unwrap();
    let err = dfr_core::benchgen::Dataset::load(dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
