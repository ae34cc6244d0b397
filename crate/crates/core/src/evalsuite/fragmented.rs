//! Fragmented pipeline baseline for similarity and multi-hop questions.
//!
//! Stage 1 predicts feature values from embeddings with per-feature
//! probes. Stage 2 ranks the candidates by distance on the predicted
//! values. Stage 3 writes an analyst report of the selected region from
//! the predicted values and asks the backbone the stripped question.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use super::{is_correct, EvalResult, Label, Metric};
use crate::benchgen::{describe_raw_data, similarity_subset, strip_placeholders, QAExample, Task};
use crate::error::{DfrError, Result};
use crate::geoworld::{Region, WorldStats, BUSYNESS, D_RAW, FEATURES, TEMP, TREND_BASE};
use crate::ridge::{fit_ridge_multi, r_squared, RidgeModel};
use crate::sequencer::EmbeddingStore;

/// Predicts z-scored feature values of a region.
pub trait FeatureProbe: Sync {
    fn covers(&self, feature: usize) -> bool;
    fn predict_z(&self, region_id: &str, feature: usize) -> Result<f64>;
}

/// Ridge probes from region embedding to z-scored feature value.
pub struct RidgeProbes<'a> {
    store: &'a EmbeddingStore,
    models: HashMap<usize, RidgeModel>,
    /// In-sample R² per fitted feature.
    pub train_r2: HashMap<usize, f64>,
}

impl<'a> RidgeProbes<'a> {
    /// Fits one probe per entry of `features` on `regions`.
    pub fn fit(
        store: &'a EmbeddingStore,
        regions: &[&Region],
        stats: &WorldStats,
        features: &[usize],
        lambda: f64,
    ) -> Result<Self> {
        if regions.is_empty() {
            return Err(DfrError::invalid("probes: no training regions"));
        }
        if let Some(&f) = features.iter().find(|&&f| f >= D_RAW) {
            return Err(DfrError::invalid(format!("probes: unknown feature {f}")));
        }
        let rows: Vec<Vec<f64>> = regions
            .iter()
            .map(|r| Ok(store.get(&r.region_id)?.data().to_vec()))
            .collect::<Result<_>>()?;
        let targets: Vec<Vec<f64>> = features
            .iter()
            .map(|&f| regions.iter().map(|r| stats.z(f, r.value(f))).collect())
            .collect();
        let fitted = fit_ridge_multi(&rows, &targets, lambda)?;
        let mut models = HashMap::new();
        let mut train_r2 = HashMap::new();
        for ((&f, m), y) in features.iter().zip(fitted).zip(&targets) {
            let pred: Vec<f64> = rows.iter().map(|x| m.predict(x)).collect();
            train_r2.insert(f, r_squared(&pred, y));
            models.insert(f, m);
        }
        Ok(Self { store, models, train_r2 })
    }

    /// R² of the probe for `feature` on held-out `regions`.
    pub fn r_squared_on(&self, feature: usize, regions: &[&Region], stats: &WorldStats) -> Result<f64> {
        let mut pred = Vec::with_capacity(regions.len());
        let mut y = Vec::with_capacity(regions.len());
        for r in regions {
            pred.push(self.predict_z(&r.region_id, feature)?);
            y.push(stats.z(feature, r.value(feature)));
        }
        Ok(r_squared(&pred, &y))
    }
}

impl FeatureProbe for RidgeProbes<'_> {
    fn covers(&self, feature: usize) -> bool {
        self.models.contains_key(&feature)
    }

    fn predict_z(&self, region_id: &str, feature: usize) -> Result<f64> {
        let m = self
            .models
            .get(&feature)
            .ok_or_else(|| DfrError::invalid(format!("no probe trained for {}", FEATURES[feature.min(D_RAW - 1)].name)))?;
        Ok(m.predict(self.store.get(region_id)?.data()))
    }
}

/// Exact z-scores read from the regions themselves.
pub struct OracleProbe<'a> {
    pub regions: HashMap<&'a str, &'a Region>,
    pub stats: &'a WorldStats,
}

impl FeatureProbe for OracleProbe<'_> {
    fn covers(&self, feature: usize) -> bool {
        feature < D_RAW
    }

    fn predict_z(&self, region_id: &str, feature: usize) -> Result<f64> {
        let r = self
            .regions
            .get(region_id)
            .ok_or_else(|| DfrError::MissingRegion(region_id.into()))?;
        Ok(self.stats.z(feature, r.value(feature)))
    }
}

fn predicted(probe: &dyn FeatureProbe, id: &str, features: &[usize]) -> Result<Vec<f64>> {
    features
        .iter()
        .map(|&f| {
            if !probe.covers(f) {
                return Err(DfrError::invalid(format!("no probe trained for {}", FEATURES[f].name)));
            }
            probe.predict_z(id, f)
        })
        .collect()
}

/// Index (into `region_ids[1..]`) of the candidate closest to the target
/// on predicted values, or farthest for least-similar questions.
pub fn rank_candidates(ex: &QAExample, probe: &dyn FeatureProbe) -> Result<usize> {
    let subset = ex
        .meta
        .subset
        .as_deref()
        .and_then(similarity_subset)
        .ok_or_else(|| DfrError::invalid(format!("{}: no similarity subset", ex.meta.uid)))?;
    let (target, cands) = ex
        .region_ids
        .split_first()
        .filter(|(_, c)| !c.is_empty())
        .ok_or_else(|| DfrError::invalid(format!("{}: no candidates", ex.meta.uid)))?;
    let t = predicted(probe, target, subset)?;
    let mut best: Option<(f64, usize)> = None;
    for (i, id) in cands.iter().enumerate() {
        let c = predicted(probe, id, subset)?;
        let d = t.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let key = if ex.task == Task::LeastSimilar { -d } else { d };
        if best.is_none_or(|(k, _)| key < k) {
            best = Some((key, i));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// A region whose features sit at the predicted z-scores.
fn region_from_z(id: &str, z: &[f64; D_RAW], stats: &WorldStats) -> Region {
    let v = |f: usize| stats.mean[f] + z[f] * stats.std[f];
    Region {
        region_id: id.into(),
        poi_counts: std::array::from_fn(|i| v(i).round().max(0.0) as u32),
        weather_temp: v(TEMP),
        busyness: v(BUSYNESS),
        search_trends: std::array::from_fn(|i| v(TREND_BASE + i)),
        external_target: 0.0,
        members: Vec::new(),
    }
}

fn stage3_prompt(ex: &QAExample, selected: &str, probe: &dyn FeatureProbe, stats: &WorldStats) -> Result<String> {
    let all: Vec<usize> = (0..D_RAW).collect();
    let zs = predicted(probe, selected, &all)?;
    let z: [f64; D_RAW] = std::array::from_fn(|i| zs[i]);
    let report = describe_raw_data(&region_from_z(selected, &z, stats), stats);
    Ok(format!("{report} {}", strip_placeholders(&ex.prompt)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FragmentedOutcome {
    pub uid: String,
    pub task: Task,
    pub selected: String,
    pub prediction: String,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FragmentedRun {
    pub outcomes: Vec<FragmentedOutcome>,
    pub results: Vec<EvalResult>,
    /// Total wall time spent in each stage.
    pub stage_latency: [Duration; 3],
    /// Share of examples whose stage-2 choice is the gold most/least
    /// similar region (multi-hop included).
    pub selection_accuracy: f64,
}

impl FragmentedRun {
    pub const STAGES: usize = 3;
}

/// Runs the three stages over similarity and multi-hop examples.
/// `answer` maps a stage-3 prompt to the backbone's reply.
pub fn run_fragmented(
    examples: &[QAExample],
    probe: &dyn FeatureProbe,
    stats: &WorldStats,
    gold_selection: impl Fn(&QAExample) -> Option<String>,
    answer: impl Fn(&str) -> Result<String>,
    label: &Label,
) -> Result<FragmentedRun> {
    let mut outcomes = Vec::with_capacity(examples.len());
    let mut lat = [Duration::ZERO; 3];
    let (mut sel_hits, mut sel_n) = (0usize, 0usize);
    for ex in examples {
        if !matches!(ex.task, Task::MostSimilar | Task::LeastSimilar | Task::MultiHop) {
            return Err(DfrError::invalid(format!("fragmented pipeline does not handle {}", ex.task)));
        }
        let t0 = Instant::now();
        let subset = ex.meta.subset.as_deref().and_then(similarity_subset).unwrap_or(&[]);
        for id in &ex.region_ids {
            predicted(probe, id, subset)?;
        }
        let t1 = Instant::now();
        let pick = rank_candidates(ex, probe)?;
        let selected = ex.region_ids[pick + 1].clone();
        let t2 = Instant::now();
        let prompt = stage3_prompt(ex, &selected, probe, stats)?;
        let prediction = answer(&prompt)?;
        let t3 = Instant::now();
        lat[0] += t1 - t0;
        lat[1] += t2 - t1;
        lat[2] += t3 - t2;
        if let Some(g) = gold_selection(ex) {
            sel_n += 1;
            sel_hits += (g == selected) as usize;
        }
        log::debug!("fragmented {}: selected {selected}, answered {prediction:?}", ex.meta.uid);
        outcomes.push(FragmentedOutcome {
            uid: ex.meta.uid.clone(),
            task: ex.task,
            selected,
            correct: is_correct(&prediction, ex),
            prediction,
        });
    }
    let mut results = Vec::new();
    for task in Task::ALL {
        let group: Vec<&FragmentedOutcome> = outcomes.iter().filter(|o| o.task == task).collect();
        if group.is_empty() {
            continue;
        }
        let hits = group.iter().filter(|o| o.correct).count();
        results.push(label.result(task.as_str(), "all", Metric::Accuracy, hits as f64 / group.len() as f64, group.len()));
    }
    log::info!(
        "fragmented: {} examples, stage latency {:?} / {:?} / {:?}",
        outcomes.len(),
        lat[0],
        lat[1],
        lat[2]
    );
    Ok(FragmentedRun {
        outcomes,
        results,
        stage_latency: lat,
        selection_accuracy: if sel_n > 0 { sel_hits as f64 / sel_n as f64 } else { f64::NAN },
    })
}
