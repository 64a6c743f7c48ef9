use std::collections::BTreeMap;

use prp_locate::harness::{
    compare, evaluate, generate_dataset, summarize, to_canonical_json, write_comparison_csv, Config, Dataset, EvalReport, Method, Split,
    CSV_HEADER,
};

fn small_config(seed: u64, train: usize, val: usize, test: usize) -> Config {
    let mut c = Config::default();
    c.seed = seed;
    c.protocol.utterance_seconds = 0.5;
    c.dataset.train = train;
    c.dataset.val = val;
    c.dataset.test = test;
    c
}

#[test]
fn twelve_samples_fill_every_cell_once() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small_config(1, 12, 0, 0), dir.path(), None).unwrap();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in &ds.manifest.samples {
        *counts.entry(s.condition.tag()).or_default() += 1;
    }
    assert_eq!(counts.len(), 12);
    assert!(counts.values().all(|&n| n == 1), "{counts:?}");
}

#[test]
fn regeneration_is_identical_and_features_are_valid() {
    let config = small_config(5, 2, 1, 1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let da = generate_dataset(&config, a.path(), None).unwrap();
    let db = generate_dataset(&config, b.path(), None).unwrap();
    let scenes = |d: &Dataset| d.manifest.samples.iter().map(|s| serde_json::to_string(&s.scene).unwrap()).collect::<Vec<_>>();
    assert_eq!(scenes(&da), scenes(&db));
    for entry in &da.manifest.samples {
        let fa = std::fs::read(a.path().join(&entry.features)).unwrap();
        let fb = std::fs::read(b.path().join(&entry.features)).unwrap();
        assert_eq!(fa, fb, "{}", entry.id);
        let prp = da.features(entry).unwrap();
        assert!(prp.max_modulus_error() < 1e-5, "{}: {}", entry.id, prp.max_modulus_error());
    }
    // splits are disjoint and ids unique
    let mut ids: Vec<&str> = da.manifest.samples.iter().map(|s| s.id.as_str()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 4);
}

#[test]
fn missing_cache_is_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small_config(2, 1, 0, 0), dir.path(), None).unwrap();
    let entry = &ds.manifest.samples[0];
    let before = ds.features(entry).unwrap();
    std::fs::remove_file(dir.path().join(&entry.features)).unwrap();
    let reopened = Dataset::open(dir.path()).unwrap();
    assert_eq!(reopened.features(entry).unwrap(), before);
}

#[test]
fn failed_generation_leaves_no_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ds");
    let mut config = small_config(3, 1, 0, 0);
    config.protocol.signals = prp_locate::room::SignalSource::Manifest {
        files: vec![dir.path().join("missing.wav")],
    };
    assert!(generate_dataset(&config, &root, None).is_err());
    assert!(!root.join("manifest.json").exists());
}

fn batch_em_report(seed: u64) -> (tempfile::TempDir, EvalReport) {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(seed, 0, 0, 3);
    let ds = generate_dataset(&config, dir.path(), None).unwrap();
    let report = evaluate(&ds, Split::Test, &Method::BatchEm, &config, None).unwrap();
    (dir, report)
}

#[test]
fn reports_are_byte_identical_and_self_comparison_is_zero() {
    let (_a, ra) = batch_em_report(11);
    let (_b, rb) = batch_em_report(11);
    assert_eq!(to_canonical_json(&ra).unwrap(), to_canonical_json(&rb).unwrap());
    assert_eq!(ra.overall.n_samples, 3);
    assert!(ra.overall.rmse >= 0.0 && (0.0..=100.0).contains(&ra.overall.pct_over_half_meter));
    assert_eq!(summarize(&ra.samples), ra.overall);

    let cmp = compare(&ra, &rb).unwrap();
    for d in std::iter::once(&cmp.overall).chain(&cmp.by_condition).chain(&cmp.by_t60) {
        assert_eq!(d.delta, 0.0);
        assert_eq!(d.relative_reduction_pct, 0.0);
    }
    assert_eq!(cmp.sign_test.ties, 3);
    assert_eq!(cmp.sign_test.p_value, 1.0);

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    write_comparison_csv(&csv, &cmp).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(CSV_HEADER.split(',').collect::<Vec<_>>(), ["condition", "rmse_a", "rmse_b", "pct_a", "pct_b", "delta"]);
    assert!(lines.all(|l| l.split(',').count() == 6));
}

#[test]
fn compare_rejects_mismatched_reports() {
    let (_a, ra) = batch_em_report(12);
    let mut other = ra.clone();
    other.split = Split::Val;
    assert!(compare(&ra, &other).is_err());
    let mut other = ra.clone();
    other.samples.pop();
    assert!(compare(&ra, &other).is_err());
}

#[test]
fn estimate_order_does_not_change_errors() {
    let (_a, ra) = batch_em_report(13);
    for s in &ra.samples {
        let mut flipped = s.estimates.clone();
        flipped.reverse();
        let e1 = prp_locate::metrics::matched_errors(&s.estimates, &s.truth);
        let e2 = prp_locate::metrics::matched_errors(&flipped, &s.truth);
        assert_eq!(e1, e2);
    }
}

#[test]
fn config_round_trips_and_rejects_unknown_fields() {
    let c = Config::default();
    let text = serde_json::to_string(&c).unwrap();
    assert_eq!(Config::from_json(&text).unwrap(), c);
    assert!(Config::from_json(r#"{"sed": 3}"#).is_err());
    assert_eq!(Config::from_json(r#"{"seed": 3}"#).unwrap().seed, 3);
}
