use dfr_core::geoworld::*;
use dfr_core::ridge::{fit_ridge_multi, r_squared};

#[test]
fn generation_is_deterministic() {
    let (a, sa) = generate_regions(2, 11).unwrap();
    let (b, sb) = generate_regions(2, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_ne!(a[0].region_id, a[1].region_id);
    assert!(generate_regions(1, 0).is_err());
}

#[test]
fn support_and_unique_ids() {
    let (regions, _) = generate_regions(10_000, 3).unwrap();
    let mut ids: Vec<&str> = regions.iter().map(|r| r.region_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 10_000);
    for r in &regions {
        assert_eq!(r.region_id.len(), 5);
        assert!((0.0..=1.0).contains(&r.busyness));
        assert!(r.search_trends.iter().all(|t| (0.0..=1.0).contains(t)));
        assert!(r.is_finite());
    }
}

#[test]
fn stats_match_direct_averaging() {
    let (regions, stats) = generate_regions(500, 5).unwrap();
    for f in 0..D_RAW {
        let vals: Vec<f64> = regions.iter().map(|r| r.raw()[f]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!((stats.mean[f] - mean).abs() < 1e-9);
        assert!((stats.std[f] - var.sqrt()).abs() < 1e-9);
    }
}

#[test]
fn external_target_is_recomputable() {
    let (regions, _) = generate_regions(50, 9).unwrap();
    for r in &regions {
        let t = external_target_of(&r.raw(), target_noise(9, &r.region_id));
        assert_eq!(t, r.external_target);
    }
}

#[test]
fn encoder_is_deterministic_and_sized() {
    let (regions, stats) = generate_regions(20, 1).unwrap();
    let enc = GeoEncoder::new(&stats, DEFAULT_D_E, 4);
    assert_eq!(enc.content_hash(), GeoEncoder::new(&stats, DEFAULT_D_E, 4).content_hash());
    let e = enc.encode(&regions[0]);
    assert_eq!(e.len(), 330);
    let mut twin = regions[0].clone();
    twin.region_id = "99999".into();
    assert_eq!(enc.encode(&twin), e);
}

#[test]
fn ridge_probe_recovers_every_feature() {
    let (regions, stats) = generate_regions(3000, 21).unwrap();
    let enc = GeoEncoder::new(&stats, DEFAULT_D_E, 2);
    let (train, test) = regions.split_at(2000);
    let x: Vec<Vec<f64>> = train.iter().map(|r| enc.encode(r)).collect();
    let ys: Vec<Vec<f64>> = (0..D_RAW).map(|f| train.iter().map(|r| r.raw()[f]).collect()).collect();
    let probes = fit_ridge_multi(&x, &ys, 1e-3).unwrap();
    let xt: Vec<Vec<f64>> = test.iter().map(|r| enc.encode(r)).collect();
    for (f, p) in probes.iter().enumerate() {
        let pred: Vec<f64> = xt.iter().map(|e| p.predict(e)).collect();
        let y: Vec<f64> = test.iter().map(|r| r.raw()[f]).collect();
        let r2 = r_squared(&pred, &y);
        assert!(r2 > 0.9, "{} R² = {r2:.4}", FEATURES[f].name);
    }
}

#[test]
fn county_aggregation() {
    let (regions, _) = generate_regions(10, 2).unwrap();
    let a = &regions[0];
    let mut b = a.clone();
    b.region_id = "99998".into();
    let c = aggregate_to_county(&[a.clone(), b.clone()], "c0000", 2).unwrap();
    assert_eq!(c.weather_temp, a.weather_temp);
    assert!(c.poi_counts.iter().zip(a.poi_counts).all(|(x, y)| *x == 2 * y));
    let k3 = aggregate_to_county(&[a.clone(), a.clone(), a.clone()], "c0001", 2).unwrap();
    assert!(k3.poi_counts.iter().zip(a.poi_counts).all(|(x, y)| *x == 3 * y));
    let rev = aggregate_to_county(&[b, a.clone()], "c0000", 2).unwrap();
    assert_eq!(rev, c);
    assert!(aggregate_to_county(&[], "c9", 2).is_err());
}

#[test]
fn county_stats_match_recomputation() {
    let (regions, _) = generate_regions(200, 8).unwrap();
    let counties = build_counties(&regions, 3, 6, 8).unwrap();
    let stats = WorldStats::from_regions(&counties);
    let mean0 = counties.iter().map(|c| c.poi_counts[0] as f64).sum::<f64>() / counties.len() as f64;
    assert!((stats.mean[0] - mean0).abs() < 1e-9);
    for c in &counties {
        assert!((3..=6).contains(&c.members.len()));
    }
}

#[test]
fn distance_properties() {
    let (regions, stats) = generate_regions(40, 6).unwrap();
    let all: Vec<usize> = (0..D_RAW).collect();
    let (a, b) = (&regions[0], &regions[1]);
    assert_eq!(feature_distance(a, a, &all, &stats).unwrap(), 0.0);
    assert_eq!(feature_distance(a, b, &all, &stats).unwrap(), feature_distance(b, a, &all, &stats).unwrap());
    assert!(feature_distance(a, b, &[], &stats).is_err());
    assert!(feature_distance_by_name(a, b, &["nope"], &stats).is_err());
    let cands = &regions[2..6];
    let d: Vec<f64> = cands.iter().map(|c| feature_distance(a, c, &[TEMP], &stats).unwrap()).collect();
    let best = (0..4).min_by(|&i, &j| d[i].total_cmp(&d[j])).unwrap();
    for (i, c) in cands.iter().enumerate() {
        let z = |r: &Region| stats.z(TEMP, r.weather_temp);
        assert!((z(a) - z(&cands[best])).abs() <= (z(a) - z(c)).abs() + 1e-12, "{i}");
    }
}

#[test]
fn world_file_roundtrip() {
    let w = World::generate(30, 4).unwrap();
    let back = World::from_jsonl(&w.to_jsonl()).unwrap();
    assert_eq!(back, w);
    let first = w.to_jsonl().lines().next().unwrap().to_string();
    assert!(first.contains("\"kind\":\"stats\""));
}
