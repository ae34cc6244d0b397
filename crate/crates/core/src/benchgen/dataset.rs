//! Dataset assembly: partition-aware sampling, label balancing, style
//! mixing, paired style rewrites, the county shift set and JSONL output.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::style::augment_style;
use super::tasks::{
    gen_abs_value_mc, gen_abs_with_context, gen_cmp_avg, gen_cross_region_cmp, gen_describe, gen_feat_cmp,
    gen_least_similar, gen_most_similar, gen_multi_hop, verify, Skip, SIMILARITY_SUBSETS,
};
use super::{AnswerForm, QAExample, Split, Style, Task};
use crate::checkpoint::sha256_hex;
use crate::error::{DfrError, Result};
use crate::geoworld::{build_counties, derive_seed, Region, World, WorldStats, D_RAW, FEATURES, N_POI};
use crate::par::map_ordered;

pub const GENERATOR_VERSION: &str = "benchgen-1";
const MAX_ATTEMPTS: usize = 4000;

/// Example count per task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts(pub BTreeMap<Task, usize>);

impl TaskCounts {
    /// Reference mix per 500 examples.
    const WEIGHTS: [(Task, usize); 9] = [
        (Task::FeatCmp, 100),
        (Task::CmpAvg, 60),
        (Task::AbsValueMc, 50),
        (Task::Describe, 40),
        (Task::MostSimilar, 100),
        (Task::LeastSimilar, 40),
        (Task::AbsWithContext, 30),
        (Task::CrossRegionCmp, 40),
        (Task::MultiHop, 40),
    ];

    /// Reference mix scaled to `total`; rounding remainder goes to the
    /// first tasks in the list.
    pub fn scaled(total: usize) -> Self {
        let mut m: BTreeMap<Task, usize> =
            Self::WEIGHTS.iter().map(|&(t, w)| (t, w * total / 500)).collect();
        let mut rest = total - m.values().sum::<usize>();
        for (t, _) in Self::WEIGHTS.iter().cycle() {
            if rest == 0 {
                break;
            }
            *m.get_mut(t).expect("task present") += 1;
            rest -= 1;
        }
        Self(m)
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }

    pub fn get(&self, t: Task) -> usize {
        self.0.get(&t).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train: TaskCounts,
    pub test: TaskCounts,
    /// Share of region ids held out for the test partition.
    pub test_region_fraction: f64,
    /// Train style mix (canonical, formal, informal); test is canonical.
    pub style_mix: [f64; 3],
    /// Share of `cmp_avg` examples in yes/no form.
    pub yes_no_fraction: f64,
    /// Canonical test examples given formal and informal rewrites.
    pub robust_n: usize,
    /// Minimum distance gap (z units) between the best and second-best
    /// candidate in similarity questions.
    pub similarity_margin: f64,
    pub county_min: usize,
    pub county_max: usize,
    /// County-level evaluation examples.
    pub shift_n: usize,
    /// County examples on disjoint counties, used for adaptation.
    pub shift_pool_n: usize,
}

impl DatasetConfig {
    pub fn with_sizes(train_n: usize, test_n: usize, seed: u64) -> Self {
        Self {
            seed,
            train: TaskCounts::scaled(train_n),
            test: TaskCounts::scaled(test_n),
            test_region_fraction: 0.25,
            style_mix: [0.5, 0.25, 0.25],
            yes_no_fraction: 0.5,
            robust_n: test_n * 2 / 5,
            similarity_margin: 0.25,
            county_min: 3,
            county_max: 8,
            shift_n: (test_n / 5).max(8),
            shift_pool_n: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DfrError::Config(format!("dataset: {m}")));
        if !(0.0..1.0).contains(&self.test_region_fraction) || self.test_region_fraction == 0.0 {
            return bad("test_region_fraction must be in (0, 1)");
        }
        if self.style_mix.iter().any(|&p| p < 0.0) || self.style_mix.iter().sum::<f64>() <= 0.0 {
            return bad("style_mix must be non-negative with positive sum");
        }
        if !(0.0..=1.0).contains(&self.yes_no_fraction) {
            return bad("yes_no_fraction must be in [0, 1]");
        }
        if self.similarity_margin < 0.0 {
            return bad("similarity_margin must be non-negative");
        }
        if self.county_min < 2 || self.county_max < self.county_min {
            return bad("county sizes must satisfy 2 <= min <= max");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: String,
    pub seed: u64,
    pub world_hash: String,
    pub config: DatasetConfig,
    /// Per file: example count by task.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    /// Per file: sha256 of its bytes.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<QAExample>,
    /// Canonical test examples.
    pub test: Vec<QAExample>,
    /// Formal and informal rewrites of test examples, paired by `meta.pair`.
    pub robust: Vec<QAExample>,
    /// County-level evaluation examples.
    pub shift: Vec<QAExample>,
    /// County examples for few-shot adaptation, on other counties.
    pub shift_pool: Vec<QAExample>,
    pub counties: Vec<Region>,
}

/// Bundle passed to the per-task samplers.
pub(super) struct Pool<'a> {
    pub regions: Vec<&'a Region>,
    pub stats: &'a WorldStats,
    pub margin: f64,
    pub yes_no_fraction: f64,
}

fn pick<'a, R: Rng>(pool: &Pool<'a>, rng: &mut R) -> &'a Region {
    pool.regions[rng.gen_range(0..pool.regions.len())]
}

fn pick_distinct<'a, R: Rng>(pool: &Pool<'a>, k: usize, rng: &mut R) -> Vec<&'a Region> {
    rand::seq::index::sample(rng, pool.regions.len(), k)
        .into_iter()
        .map(|i| pool.regions[i])
        .collect()
}

/// One example of `task`. `label` (an index, used modulo the label count)
/// steers the answer so that every split is balanced: binary answers
/// alternate, and answer positions rotate over region slots.
pub(super) fn sample_example<R: Rng>(task: Task, label: usize, pool: &Pool<'_>, rng: &mut R) -> Option<QAExample> {
    let counts: Vec<usize> = (0..N_POI).collect();
    for _ in 0..MAX_ATTEMPTS {
        let res: std::result::Result<QAExample, Skip> = match task {
            Task::CmpAvg => {
                let form = if rng.gen_bool(pool.yes_no_fraction) { AnswerForm::YesNo } else { AnswerForm::Plain };
                let f = rng.gen_range(0..D_RAW);
                let want_higher = label.is_multiple_of(2);
                let r = pick(pool, rng);
                gen_cmp_avg(r, f, pool.stats, form).and_then(|ex| {
                    let higher = matches!(ex.answer.as_str(), "higher" | "yes");
                    if higher == want_higher { Ok(ex) } else { Err(Skip::Tie) }
                })
            }
            Task::FeatCmp => {
                // Each unordered pair is balanced on its winner, and the
                // mention order is independent of it.
                let pair: Vec<usize> = counts.choose_multiple(rng, 2).copied().collect();
                let (lo, hi) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
                let want = if label.is_multiple_of(2) { lo } else { hi };
                let mut found = None;
                for _ in 0..200 {
                    let r = pick(pool, rng);
                    let (a, b) = if rng.gen_bool(0.5) { (lo, hi) } else { (hi, lo) };
                    if let Ok(ex) = gen_feat_cmp(r, a, b) {
                        if ex.answer == FEATURES[want].surface {
                            found = Some(ex);
                            break;
                        }
                    }
                }
                found.ok_or(Skip::Tie)
            }
            Task::AbsValueMc => {
                let f = rng.gen_range(0..N_POI);
                gen_abs_value_mc(pick(pool, rng), f, rng)
            }
            Task::Describe => Ok(gen_describe(pick(pool, rng), pool.stats)),
            Task::MostSimilar | Task::LeastSimilar => {
                let rs = pick_distinct(pool, 5, rng);
                let subset = SIMILARITY_SUBSETS[rng.gen_range(0..SIMILARITY_SUBSETS.len())].0;
                let gen = if task == Task::MostSimilar { gen_most_similar } else { gen_least_similar };
                gen(rs[0], &rs[1..], subset, pool.stats, pool.margin).and_then(|ex| {
                    // Move the winner to the requested candidate slot.
                    let win = rs[1..].iter().position(|r| r.region_id == ex.answer).expect("winner present");
                    let mut cands = rs[1..].to_vec();
                    let slot = label % cands.len();
                    cands.swap(win, slot);
                    gen(rs[0], &cands, subset, pool.stats, pool.margin)
                })
            }
            Task::AbsWithContext => {
                let rs = pick_distinct(pool, 3, rng);
                let f = rng.gen_range(0..N_POI);
                gen_abs_with_context([rs[0], rs[1], rs[2]], f, rng)
            }
            Task::CrossRegionCmp => {
                let rs = pick_distinct(pool, 2, rng);
                let f = rng.gen_range(0..D_RAW);
                gen_cross_region_cmp(rs[0], rs[1], f).and_then(|ex| {
                    let first_wins = ex.answer == rs[0].region_id;
                    if first_wins == label.is_multiple_of(2) {
                        Ok(ex)
                    } else {
                        gen_cross_region_cmp(rs[1], rs[0], f)
                    }
                })
            }
            Task::MultiHop => {
                let rs = pick_distinct(pool, 4, rng);
                let subset = SIMILARITY_SUBSETS[rng.gen_range(0..SIMILARITY_SUBSETS.len())].0;
                let g = rng.gen_range(0..D_RAW);
                gen_multi_hop(rs[0], &rs[1..], subset, g, pool.stats, pool.margin).and_then(|ex| {
                    if (ex.answer == "yes") == label.is_multiple_of(2) { Ok(ex) } else { Err(Skip::Tie) }
                })
            }
        };
        if let Ok(ex) = res {
            return Some(ex);
        }
    }
    None
}

fn pick_style<R: Rng>(mix: &[f64; 3], rng: &mut R) -> Style {
    let total: f64 = mix.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (p, s) in mix.iter().zip(Style::ALL) {
        if u < *p {
            return s;
        }
        u -= p;
    }
    Style::Canonical
}

/// Samples `counts` from `pool`; per-example seeds make the result
/// independent of scheduling.
fn generate_split(
    counts: &TaskCounts,
    pool: &Pool<'_>,
    split: Split,
    tag: &str,
    style_mix: Option<&[f64; 3]>,
    seed: u64,
) -> Result<Vec<QAExample>> {
    let jobs: Vec<(Task, usize)> = counts
        .0
        .iter()
        .flat_map(|(&t, &n)| (0..n).map(move |i| (t, i)))
        .collect();
    let made = map_ordered(&jobs, |&(task, i)| {
        let s = derive_seed(seed, &format!("{tag}/{task}"), i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut ex = sample_example(task, i, pool, &mut rng)?;
        ex.split = split;
        ex.meta.uid = format!("{tag}-{task}-{i:05}");
        let style = style_mix.map_or(Style::Canonical, |m| pick_style(m, &mut rng));
        let restyled = augment_style(&ex, style, rng.gen());
        Some(restyled)
    });
    let mut out = Vec::with_capacity(jobs.len());
    for (ex, (task, i)) in made.into_iter().zip(&jobs) {
        match ex {
            Some(e) => out.push(e),
            None => {
                return Err(DfrError::invalid(format!(
                    "could not generate {tag} {task} example {i}: region pool too small"
                )))
            }
        }
    }
    canonical_order(&mut out);
    Ok(out)
}

/// Sort by (task, region ids, template id), uid last for total order.
fn canonical_order(v: &mut [QAExample]) {
    v.sort_by(|a, b| {
        (a.task, &a.region_ids, a.meta.variant, &a.meta.uid).cmp(&(b.task, &b.region_ids, b.meta.variant, &b.meta.uid))
    });
}

/// Partitions region ids into train and test sets.
fn partition_regions(regions: &[Region], test_fraction: f64, seed: u64) -> (Vec<&Region>, Vec<&Region>) {
    let mut order: Vec<&Region> = regions.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "partition", 0)));
    let n_test = ((regions.len() as f64) * test_fraction).round() as usize;
    let test = order.split_off(order.len() - n_test);
    (order, test)
}

pub fn build_dataset(world: &World, cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (train_regions, test_regions) = partition_regions(&world.regions, cfg.test_region_fraction, cfg.seed);
    if train_regions.len() < 8 || test_regions.len() < 8 {
        return Err(DfrError::Config("dataset: too few regions for a disjoint split".into()));
    }
    fn pool<'a>(regions: Vec<&'a Region>, stats: &'a WorldStats, cfg: &DatasetConfig) -> Pool<'a> {
        Pool {
            regions,
            stats,
            margin: cfg.similarity_margin,
            yes_no_fraction: cfg.yes_no_fraction,
        }
    }
    let train = generate_split(&cfg.train, &pool(train_regions, &world.stats, cfg), Split::Train, "train", Some(&cfg.style_mix), cfg.seed)?;
    let test = generate_split(&cfg.test, &pool(test_regions.clone(), &world.stats, cfg), Split::Test, "test", None, cfg.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "robust", 0));
    let discrete: Vec<&QAExample> = test.iter().filter(|e| e.task.is_discrete()).collect();
    let mut chosen: Vec<&QAExample> = discrete.choose_multiple(&mut rng, cfg.robust_n.min(discrete.len())).copied().collect();
    chosen.sort_by(|a, b| a.meta.uid.cmp(&b.meta.uid));
    let mut robust = Vec::with_capacity(chosen.len() * 2);
    for ex in chosen {
        for style in [Style::Formal, Style::Informal] {
            let mut r = augment_style(ex, style, rng.gen());
            r.meta.pair = Some(ex.meta.uid.clone());
            r.meta.uid = format!("{}-{style}", ex.meta.uid);
            robust.push(r);
        }
    }

    // Counties are built from held-out regions only.
    let held: Vec<Region> = test_regions.iter().map(|r| (*r).clone()).collect();
    let counties = build_counties(&held, cfg.county_min, cfg.county_max, cfg.seed)?;
    if counties.len() < 4 {
        return Err(DfrError::Config("dataset: too few held-out regions to form counties".into()));
    }
    let half = counties.len() / 2;
    let shift_counts = TaskCounts([(Task::AbsValueMc, cfg.shift_n)].into_iter().collect());
    let pool_counts = TaskCounts([(Task::AbsValueMc, cfg.shift_pool_n)].into_iter().collect());
    let shift = generate_split(
        &shift_counts,
        &pool(counties[..half].iter().collect(), &world.stats, cfg),
        Split::ShiftCounty,
        "shift",
        None,
        cfg.seed,
    )?;
    let shift_pool = generate_split(
        &pool_counts,
        &pool(counties[half..].iter().collect(), &world.stats, cfg),
        Split::ShiftCounty,
        "shift-pool",
        None,
        cfg.seed,
    )?;
    Ok(Dataset {
        train,
        test,
        robust,
        shift,
        shift_pool,
        counties,
    })
}

/// Partitions the region ids of `examples` first, then keeps examples whose
/// regions all fall on one side. Mixed examples are dropped.
pub fn split_dataset(
    examples: &[QAExample],
    train_n: usize,
    test_n: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<QAExample>, Vec<QAExample>)> {
    let ids: BTreeSet<&String> = examples.iter().flat_map(|e| &e.region_ids).collect();
    let mut ids: Vec<&String> = ids.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", 0)));
    let n_test = ((ids.len() as f64) * test_fraction).round() as usize;
    let test_ids: BTreeSet<&String> = ids[ids.len() - n_test..].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for e in examples {
        let in_test = e.region_ids.iter().filter(|id| test_ids.contains(id)).count();
        if in_test == 0 && train.len() < train_n {
            let mut e = e.clone();
            e.split = Split::Train;
            train.push(e);
        } else if in_test == e.region_ids.len() && test.len() < test_n {
            let mut e = e.clone();
            e.split = Split::Test;
            test.push(e);
        }
    }
    if train.len() < train_n || test.len() < test_n {
        return Err(DfrError::invalid(format!(
            "split infeasible: got {} train / {} test, asked {train_n} / {test_n}",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

fn to_jsonl(examples: &[QAExample]) -> Result<String> {
    let mut s = String::new();
    for e in examples {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QAExample>> {
    let text = fs::read_to_string(path).map_err(|e| DfrError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DfrError::format(path.display().to_string(), format!("line {}: {e}", i + 1)))
        })
        .collect()
}

impl Dataset {
    pub const FILES: [&'static str; 5] = ["train.jsonl", "test.jsonl", "robust.jsonl", "shift.jsonl", "shift_pool.jsonl"];

    fn parts(&self) -> [&Vec<QAExample>; 5] {
        [&self.train, &self.test, &self.robust, &self.shift, &self.shift_pool]
    }

    pub fn all(&self) -> impl Iterator<Item = &QAExample> {
        self.parts().into_iter().flatten()
    }

    /// Looks up a postal region or a county.
    pub fn region<'a>(&'a self, world: &'a World, id: &str) -> Option<&'a Region> {
        world.region(id).or_else(|| self.counties.iter().find(|c| c.region_id == id))
    }

    /// Every example whose stored answer is not reproduced from raw features.
    pub fn verify_all(&self, world: &World, margin: f64) -> Vec<(String, String)> {
        let mut index: BTreeMap<&str, &Region> = world.index();
        index.extend(self.counties.iter().map(|c| (c.region_id.as_str(), c)));
        self.all()
            .filter_map(|e| {
                verify(e, |id| index.get(id).copied(), &world.stats, margin)
                    .err()
                    .map(|msg| (e.meta.uid.clone(), msg))
            })
            .collect()
    }

    /// Writes the five example files, `counties.jsonl` and `manifest.json`.
    pub fn save(&self, dir: &Path, world: &World, cfg: &DatasetConfig) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| DfrError::io(dir, e))?;
        let mut counts = BTreeMap::new();
        let mut files = BTreeMap::new();
        for (name, part) in Self::FILES.iter().zip(self.parts()) {
            let body = to_jsonl(part)?;
            let path = dir.join(name);
            fs::write(&path, &body).map_err(|e| DfrError::io(&path, e))?;
            files.insert(name.to_string(), sha256_hex(body.as_bytes()));
            let mut c: BTreeMap<String, usize> = BTreeMap::new();
            for e in part.iter() {
                *c.entry(e.task.to_string()).or_default() += 1;
            }
            counts.insert(name.to_string(), c);
        }
        let county_world = World {
            seed: world.seed,
            regions: self.counties.clone(),
            stats: world.stats.clone(),
        };
        let body = county_world.to_jsonl();
        let path = dir.join("counties.jsonl");
        fs::write(&path, &body).map_err(|e| DfrError::io(&path, e))?;
        files.insert("counties.jsonl".into(), sha256_hex(body.as_bytes()));
        let manifest = Manifest {
            generator_version: GENERATOR_VERSION.into(),
            seed: cfg.seed,
            world_hash: sha256_hex(world.to_jsonl().as_bytes()),
            config: cfg.clone(),
            counts,
            files,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| DfrError::io(&path, e))?;
        Ok(manifest)
    }

    /// Loads a dataset directory, checking every file against the manifest.
    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| DfrError::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        for (name, hash) in &manifest.files {
            let path = dir.join(name);
            let got = crate::checkpoint::sha256_file(&path)?;
            if &got != hash {
                return Err(DfrError::Integrity(format!("{} does not match the manifest hash", path.display())));
            }
        }
        let mut parts = Self::FILES.iter().map(|f| read_jsonl(&dir.join(f)));
        let mut next = || parts.next().expect("five files");
        let (train, test, robust, shift, shift_pool) = (next()?, next()?, next()?, next()?, next()?);
        let cpath = dir.join("counties.jsonl");
        let ctext = fs::read_to_string(&cpath).map_err(|e| DfrError::io(&cpath, e))?;
        let counties = World::from_jsonl(&ctext)?.regions;
        Ok((
            Self {
                train,
                test,
                robust,
                shift,
                shift_pool,
                counties,
            },
            manifest,
        ))
    }
}
