//! Synthetic regions with named raw features, the fixed encoder that turns
//! them into dense embeddings, and county-level aggregation.
//!
//! Feature model (all draws seeded per region index):
//!
//! * latent factors `u` (urbanity), `w` (climate), `h` (health orientation),
//!   each standard normal;
//! * POI count `c = round(exp(μ + a·u + b·h + s·ε))`, `ε ~ N(0,1)`;
//! * `weather_temp = 14 + 5w + ε` °C, rounded to 0.1;
//! * `busyness ~ Beta(2e^{0.4u}, 2e^{−0.4u})`, trends `~ Beta(3e^{0.4f}, 3e^{−0.4f})`
//!   with `f = 0.8·latent + 0.6·ε` (food, shopping: `u`; health: `h`;
//!   travel: `w`), all rounded to 0.01;
//! * `external_target` (unemployment rate, %) is
//!   `6 − 2.5·busyness − 0.02·restaurant + 0.05·weather_temp −
//!   trend_shopping + 0.03·hospital + 0.3·η`, where `η ~ N(0,1)` is seeded by the world seed
//!   and the region id.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DfrError, Result};
use crate::par::map_ordered;
use crate::sequencer::EmbeddingStore;

pub const D_RAW: usize = 14;
pub const N_POI: usize = 8;
pub const DEFAULT_D_E: usize = 330;
pub const POI_NAMES: [&str; N_POI] = [
    "coffee_shop", "milk_tea_shop", "restaurant", "gym", "hospital", "movie_theater", "grocery", "park",
];
pub const TREND_NAMES: [&str; 4] = ["food", "health", "travel", "shopping"];
pub const TEMP: usize = 8;
pub const BUSYNESS: usize = 9;
pub const TREND_BASE: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Feature {
    /// Identifier used in data files.
    pub name: &'static str,
    /// Plural surface form used in questions.
    pub surface: &'static str,
    pub is_count: bool,
}

/// Canonical feature order: the eight POI counts, temperature, busyness,
/// then the four search-trend topics.
pub const FEATURES: [Feature; D_RAW] = [
    Feature { name: "coffee_shop", surface: "coffee shops", is_count: true },
    Feature { name: "milk_tea_shop", surface: "milk tea shops", is_count: true },
    Feature { name: "restaurant", surface: "restaurants", is_count: true },
    Feature { name: "gym", surface: "gyms", is_count: true },
    Feature { name: "hospital", surface: "hospitals", is_count: true },
    Feature { name: "movie_theater", surface: "movie theaters", is_count: true },
    Feature { name: "grocery", surface: "grocery stores", is_count: true },
    Feature { name: "park", surface: "parks", is_count: true },
    Feature { name: "weather_temp", surface: "temperature", is_count: false },
    Feature { name: "busyness", surface: "busyness", is_count: false },
    Feature { name: "trend_food", surface: "food search interest", is_count: false },
    Feature { name: "trend_health", surface: "health search interest", is_count: false },
    Feature { name: "trend_travel", surface: "travel search interest", is_count: false },
    Feature { name: "trend_shopping", surface: "shopping search interest", is_count: false },
];

pub fn feature_index(name: &str) -> Result<usize> {
    FEATURES
        .iter()
        .position(|f| f.name == name)
        .ok_or_else(|| DfrError::invalid(format!("unknown feature {name:?}")))
}

/// Canonical indices sorted by feature name; the documented tie-break order.
pub fn name_order() -> [usize; D_RAW] {
    let mut idx: [usize; D_RAW] = std::array::from_fn(|i| i);
    idx.sort_by_key(|&i| FEATURES[i].name);
    idx
}

/// Text rendering of a feature value: integers for counts, one decimal for
/// temperature, two for the unit-interval features.
pub fn format_value(feature: usize, v: f64) -> String {
    if FEATURES[feature].is_count {
        format!("{}", v.round() as i64)
    } else if feature == TEMP {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub region_id: String,
    pub poi_counts: [u32; N_POI],
    pub weather_temp: f64,
    pub busyness: f64,
    pub search_trends: [f64; 4],
    pub external_target: f64,
    /// Member region ids for aggregated (county) regions; empty otherwise.
    pub members: Vec<String>,
}

impl Region {
    /// Raw feature vector in canonical order.
    pub fn raw(&self) -> [f64; D_RAW] {
        let mut x = [0.0; D_RAW];
        for (i, &c) in self.poi_counts.iter().enumerate() {
            x[i] = c as f64;
        }
        x[TEMP] = self.weather_temp;
        x[BUSYNESS] = self.busyness;
        x[TREND_BASE..].copy_from_slice(&self.search_trends);
        x
    }

    pub fn value(&self, feature: usize) -> f64 {
        self.raw()[feature]
    }

    pub fn is_finite(&self) -> bool {
        self.raw().iter().all(|v| v.is_finite()) && self.external_target.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldStats {
    pub count: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl WorldStats {
    /// Population mean and (population) standard deviation per feature.
    pub fn from_regions(regions: &[Region]) -> Self {
        let n = regions.len().max(1) as f64;
        let mut mean = vec![0.0; D_RAW];
        for r in regions {
            mean.iter_mut().zip(r.raw()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; D_RAW];
        for r in regions {
            for (j, v) in r.raw().iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).collect();
        Self {
            count: regions.len(),
            mean,
            std,
        }
    }

    pub fn z(&self, feature: usize, v: f64) -> f64 {
        let s = self.std[feature];
        if s > 0.0 {
            (v - self.mean[feature]) / s
        } else {
            0.0
        }
    }

    pub fn z_scores(&self, r: &Region) -> [f64; D_RAW] {
        let x = r.raw();
        std::array::from_fn(|j| self.z(j, x[j]))
    }
}

const POI_PARAMS: [(f64, f64, f64, f64); N_POI] = [
    (2.0, 0.6, 0.0, 0.7),
    (1.7, 0.7, 0.0, 0.8),
    (2.6, 0.7, 0.0, 0.6),
    (1.4, 0.4, 0.5, 0.7),
    (0.6, 0.3, 0.4, 0.7),
    (0.7, 0.5, 0.0, 0.8),
    (1.8, 0.4, 0.2, 0.6),
    (1.6, -0.2, 0.4, 0.7),
];

/// Independent sub-seed for `(tag, index)` under a parent seed.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn round_to(v: f64, places: i32) -> f64 {
    let s = 10f64.powi(places);
    (v * s).round() / s
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn beta01(rng: &mut ChaCha8Rng, base: f64, f: f64) -> f64 {
    let d = Beta::new(base * (0.4 * f).exp(), base * (-0.4 * f).exp()).expect("positive shape");
    round_to(d.sample(rng), 2)
}

/// Seeded noise term of the external target for one region id.
pub fn target_noise(seed: u64, region_id: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(b"target");
    h.update(region_id.as_bytes());
    let s = u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"));
    normal(&mut ChaCha8Rng::seed_from_u64(s))
}

/// The documented affine map from raw features to the external target.
pub fn external_target_of(raw: &[f64; D_RAW], noise: f64) -> f64 {
    6.0 - 2.5 * raw[BUSYNESS] - 0.02 * raw[2] + 0.05 * raw[TEMP] - raw[TREND_BASE + 3] + 0.03 * raw[4] + 0.3 * noise
}

fn generate_one(seed: u64, index: usize, region_id: String) -> Region {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "region", index as u64));
    let u = normal(&mut rng);
    let w = normal(&mut rng);
    let h = normal(&mut rng);
    let mut poi_counts = [0u32; N_POI];
    for (c, &(mu, a, b, s)) in poi_counts.iter_mut().zip(&POI_PARAMS) {
        let eps = normal(&mut rng);
        *c = (mu + a * u + b * h + s * eps).exp().round() as u32;
    }
    let weather_temp = round_to(14.0 + 5.0 * w + normal(&mut rng), 1);
    let busyness = beta01(&mut rng, 2.0, u);
    let mut search_trends = [0.0; 4];
    for (t, latent) in search_trends.iter_mut().zip([u, h, w, u]) {
        let f = 0.8 * latent + 0.6 * normal(&mut rng);
        *t = beta01(&mut rng, 3.0, f);
    }
    let mut r = Region {
        region_id,
        poi_counts,
        weather_temp,
        busyness,
        search_trends,
        external_target: 0.0,
        members: Vec::new(),
    };
    r.external_target = external_target_of(&r.raw(), target_noise(seed, &r.region_id));
    r
}

/// `count` regions with unique five-digit ids, plus their statistics.
pub fn generate_regions(count: usize, seed: u64) -> Result<(Vec<Region>, WorldStats)> {
    if count < 2 {
        return Err(DfrError::invalid("need at least 2 regions"));
    }
    if count > 90_000 {
        return Err(DfrError::invalid("at most 90000 five-digit region ids"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "ids", 0));
    let ids: Vec<(usize, String)> = sample(&mut rng, 90_000, count)
        .into_iter()
        .enumerate()
        .map(|(i, v)| (i, format!("{}", 10_000 + v)))
        .collect();
    let regions = map_ordered(&ids, |(i, id)| generate_one(seed, *i, id.clone()));
    let stats = WorldStats::from_regions(&regions);
    Ok((regions, stats))
}

/// Sums counts, averages the continuous features and recomputes the target
/// with noise keyed by `county_id`. Member order does not matter.
pub fn aggregate_to_county(members: &[Region], county_id: &str, seed: u64) -> Result<Region> {
    if members.is_empty() {
        return Err(DfrError::invalid(format!("county {county_id} has no members")));
    }
    let k = members.len() as f64;
    let mut sorted: Vec<&Region> = members.iter().collect();
    sorted.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    let mut poi_counts = [0u32; N_POI];
    let mut temp = 0.0;
    let mut busy = 0.0;
    let mut trends = [0.0; 4];
    for m in &sorted {
        poi_counts.iter_mut().zip(m.poi_counts).for_each(|(a, b)| *a += b);
        temp += m.weather_temp;
        busy += m.busyness;
        trends.iter_mut().zip(m.search_trends).for_each(|(a, b)| *a += b);
    }
    let mut r = Region {
        region_id: county_id.to_string(),
        poi_counts,
        weather_temp: round_to(temp / k, 1),
        busyness: round_to(busy / k, 2),
        search_trends: trends.map(|t| round_to(t / k, 2)),
        external_target: 0.0,
        members: sorted.iter().map(|m| m.region_id.clone()).collect(),
    };
    r.external_target = external_target_of(&r.raw(), target_noise(seed, county_id));
    Ok(r)
}

/// Groups `regions` (in a seeded order) into counties of `min..=max`
/// members with ids `c0000`, `c0001`, ... Leftover regions too few to form
/// a county are dropped.
pub fn build_counties(regions: &[Region], min: usize, max: usize, seed: u64) -> Result<Vec<Region>> {
    if min < 2 || max < min {
        return Err(DfrError::invalid("county size range must satisfy 2 <= min <= max"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "counties", 0));
    let mut order: Vec<usize> = (0..regions.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut out = Vec::new();
    let mut i = 0;
    while i + min <= order.len() {
        let size = rng.gen_range(min..=max).min(order.len() - i);
        let members: Vec<Region> = order[i..i + size].iter().map(|&j| regions[j].clone()).collect();
        let id = format!("c{:04}", out.len());
        out.push(aggregate_to_county(&members, &id, seed)?);
        i += size;
    }
    Ok(out)
}

/// Sum of squared differences of z-scored values over `subset`, square-rooted.
pub fn feature_distance(a: &Region, b: &Region, subset: &[usize], stats: &WorldStats) -> Result<f64> {
    if subset.is_empty() {
        return Err(DfrError::invalid("empty feature subset"));
    }
    let (xa, xb) = (a.raw(), b.raw());
    let mut s = 0.0;
    for &f in subset {
        if f >= D_RAW {
            return Err(DfrError::invalid(format!("unknown feature index {f}")));
        }
        s += (stats.z(f, xa[f]) - stats.z(f, xb[f])).powi(2);
    }
    Ok(s.sqrt())
}

pub fn feature_distance_by_name(a: &Region, b: &Region, names: &[&str], stats: &WorldStats) -> Result<f64> {
    let idx = names.iter().map(|n| feature_index(n)).collect::<Result<Vec<_>>>()?;
    feature_distance(a, b, &idx, stats)
}

/// Fixed seeded map `e = B · tanh(A · x̃ + c)` with `x̃` the raw features
/// z-scored by the statistics captured at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoEncoder {
    pub seed: u64,
    pub d_e: usize,
    pub hidden: usize,
    pub gain: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    a: Vec<f64>,
    c: Vec<f64>,
    b: Vec<f64>,
}

impl GeoEncoder {
    pub const DEFAULT_HIDDEN: usize = 64;
    pub const DEFAULT_GAIN: f64 = 0.4;

    pub fn new(stats: &WorldStats, d_e: usize, seed: u64) -> Self {
        Self::with_shape(stats, d_e, Self::DEFAULT_HIDDEN, Self::DEFAULT_GAIN, seed)
    }

    pub fn with_shape(stats: &WorldStats, d_e: usize, hidden: usize, gain: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "encoder", 0));
        let sa = gain / (D_RAW as f64).sqrt();
        let a = (0..hidden * D_RAW).map(|_| sa * normal(&mut rng)).collect();
        let c = (0..hidden).map(|_| 0.1 * normal(&mut rng)).collect();
        let sb = 1.0 / (hidden as f64).sqrt();
        let b = (0..d_e * hidden).map(|_| sb * normal(&mut rng)).collect();
        Self {
            seed,
            d_e,
            hidden,
            gain,
            mean: stats.mean.clone(),
            std: stats.std.clone(),
            a,
            c,
            b,
        }
    }

    pub fn encode(&self, region: &Region) -> Vec<f64> {
        let x = region.raw();
        let xt: Vec<f64> = (0..D_RAW)
            .map(|j| if self.std[j] > 0.0 { (x[j] - self.mean[j]) / self.std[j] } else { 0.0 })
            .collect();
        let hid: Vec<f64> = (0..self.hidden)
            .map(|i| {
                let s: f64 = (0..D_RAW).map(|j| self.a[i * D_RAW + j] * xt[j]).sum();
                (s + self.c[i]).tanh()
            })
            .collect();
        (0..self.d_e)
            .map(|r| (0..self.hidden).map(|i| self.b[r * self.hidden + i] * hid[i]).sum())
            .collect()
    }

    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("encoder serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn encode_all(&self, regions: &[Region]) -> Result<EmbeddingStore> {
        let es = map_ordered(regions, |r| self.encode(r));
        let mut store = EmbeddingStore::new(self.d_e);
        for (r, e) in regions.iter().zip(es) {
            store.insert(r.region_id.clone(), e)?;
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum WorldRecord {
    Stats {
        seed: u64,
        features: Vec<String>,
        #[serde(flatten)]
        stats: WorldStats,
    },
    Region(RegionRecord),
}

#[derive(Serialize, Deserialize)]
struct RegionRecord {
    region_id: String,
    poi_counts: BTreeMap<String, u32>,
    weather_temp: f64,
    busyness: f64,
    search_trends: BTreeMap<String, f64>,
    external_target: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    members: Vec<String>,
}

impl From<&Region> for RegionRecord {
    fn from(r: &Region) -> Self {
        Self {
            region_id: r.region_id.clone(),
            poi_counts: POI_NAMES.iter().map(|n| n.to_string()).zip(r.poi_counts).collect(),
            weather_temp: r.weather_temp,
            busyness: r.busyness,
            search_trends: TREND_NAMES.iter().map(|n| n.to_string()).zip(r.search_trends).collect(),
            external_target: r.external_target,
            members: r.members.clone(),
        }
    }
}

impl TryFrom<RegionRecord> for Region {
    type Error = DfrError;

    fn try_from(r: RegionRecord) -> Result<Self> {
        let missing = |what: &str| DfrError::format("world file", format!("region {} lacks {what}", r.region_id));
        let mut poi_counts = [0u32; N_POI];
        for (c, n) in poi_counts.iter_mut().zip(POI_NAMES) {
            *c = *r.poi_counts.get(n).ok_or_else(|| missing(n))?;
        }
        let mut search_trends = [0.0; 4];
        for (t, n) in search_trends.iter_mut().zip(TREND_NAMES) {
            *t = *r.search_trends.get(n).ok_or_else(|| missing(n))?;
        }
        Ok(Region {
            region_id: r.region_id,
            poi_counts,
            weather_temp: r.weather_temp,
            busyness: r.busyness,
            search_trends,
            external_target: r.external_target,
            members: r.members,
        })
    }
}

/// A generated population together with its frozen statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub seed: u64,
    pub regions: Vec<Region>,
    pub stats: WorldStats,
}

impl World {
    pub fn generate(count: usize, seed: u64) -> Result<Self> {
        let (regions, stats) = generate_regions(count, seed)?;
        Ok(Self { seed, regions, stats })
    }

    pub fn region(&self, id: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.region_id == id)
    }

    pub fn index(&self) -> BTreeMap<&str, &Region> {
        self.regions.iter().map(|r| (r.region_id.as_str(), r)).collect()
    }

    /// Stats record first, then one region per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        let head = WorldRecord::Stats {
            seed: self.seed,
            features: FEATURES.iter().map(|f| f.name.to_string()).collect(),
            stats: self.stats.clone(),
        };
        s.push_str(&serde_json::to_string(&head).expect("serializes"));
        s.push('\n');
        for r in &self.regions {
            s.push_str(&serde_json::to_string(&WorldRecord::Region(r.into())).expect("serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut stats = None;
        let mut regions = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: WorldRecord = serde_json::from_str(line)
                .map_err(|e| DfrError::format("world file", format!("line {}: {e}", i + 1)))?;
            match rec {
                WorldRecord::Stats { seed: s, stats: st, .. } => {
                    seed = Some(s);
                    stats = Some(st);
                }
                WorldRecord::Region(r) => regions.push(Region::try_from(r)?),
            }
        }
        let stats = stats.ok_or_else(|| DfrError::format("world file", "missing stats record"))?;
        Ok(Self {
            seed: seed.unwrap_or(0),
            regions,
            stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| DfrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| DfrError::io(path, e))?;
        Self::from_jsonl(&s)
    }
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    region_id: String,
    e: Vec<f64>,
}

/// Writes `{region_id, e}` lines in the order of `ids`.
pub fn save_embeddings(path: &Path, ids: &[&str], store: &EmbeddingStore) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| DfrError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for id in ids {
        let rec = EmbeddingRecord {
            region_id: id.to_string(),
            e: store.get(id)?.data().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| DfrError::io(path, e))?;
    }
    w.flush().map_err(|e| DfrError::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let f = fs::File::open(path).map_err(|e| DfrError::io(path, e))?;
    let mut store: Option<EmbeddingStore> = None;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| DfrError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line)
            .map_err(|e| DfrError::format("embedding file", format!("line {}: {e}", i + 1)))?;
        let s = store.get_or_insert_with(|| EmbeddingStore::new(rec.e.len()));
        s.insert(rec.region_id, rec.e)?;
    }
    store.ok_or_else(|| DfrError::format("embedding file", "no records"))
}
