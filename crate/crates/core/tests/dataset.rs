use std::fs;

use greybox::control::PulseShapeConfig;
use greybox::dataset::{generate_dataset, generate_sample, load_dataset, meta_path, save_dataset, DatasetMeta};
use greybox::noise::{NoiseKind, NoiseSpec, TimeGrid};
use greybox::{Error, Reduction};

fn meta(train: usize, test: usize) -> DatasetMeta {
    let shape = PulseShapeConfig {
        grid: TimeGrid::new(1.0, 64).unwrap(),
        ..PulseShapeConfig::default()
    };
    DatasetMeta::new(NoiseSpec::new(NoiseKind::Rtn, 1.0, 0.5).unwrap(), shape, 8, 21, train, test)
}

#[test]
fn regeneration_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = meta(2, 0);
    for name in ["a.csv", "b.csv"] {
        let ds = generate_dataset(&m, Reduction::Sequential).unwrap();
        save_dataset(&ds, &dir.path().join(name), serde_json::Value::Null).unwrap();
    }
    assert_eq!(fs::read(dir.path().join("a.csv")).unwrap(), fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a.meta.json")).unwrap(),
        fs::read(dir.path().join("b.meta.json")).unwrap()
    );
}

#[test]
fn round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let ds = generate_dataset(&meta(8, 2), Reduction::Sequential).unwrap();
    save_dataset(&ds, &path, serde_json::json!({"note": 1})).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);
    let (train, test) = back.split();
    assert_eq!((train.len(), test.len()), (8, 2));
}

#[test]
fn samples_do_not_depend_on_generation_order() {
    let m = meta(6, 3);
    let ds = generate_dataset(&m, Reduction::Sequential).unwrap();
    for i in (0..9).rev() {
        assert_eq!(generate_sample(&m, i, Reduction::Sequential).unwrap(), ds.samples[i]);
    }
    let mask = m.test_mask();
    let mut bigger = m.clone();
    bigger.realizations = 16;
    assert_eq!(bigger.test_mask(), mask);
}

#[test]
fn corrupted_row_reports_its_index() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let ds = generate_dataset(&meta(4, 1), Reduction::Sequential).unwrap();
    save_dataset(&ds, &path, serde_json::Value::Null).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[3] = lines[3].replacen(',', ",oops", 1);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    match load_dataset(&path) {
        Err(Error::Row { row, .. }) => assert_eq!(row, 2),
        other => panic!("expected row error, got {other:?}"),
    }
}

#[test]
fn tampered_values_fail_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let ds = generate_dataset(&meta(3, 0), Reduction::Sequential).unwrap();
    save_dataset(&ds, &path, serde_json::Value::Null).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let last_seed = ds.samples[2].seed.to_string();
    let changed = text.replacen(&last_seed, &(ds.samples[2].seed ^ 1).to_string(), 1);
    fs::write(&path, changed).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Checksum { .. })));
}

#[test]
fn missing_meta_is_distinct_from_corrupt_data() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let ds = generate_dataset(&meta(2, 0), Reduction::Sequential).unwrap();
    save_dataset(&ds, &path, serde_json::Value::Null).unwrap();
    fs::remove_file(meta_path(&path)).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::MissingMeta(_))));
}

#[test]
fn unsupported_version_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let ds = generate_dataset(&meta(2, 0), Reduction::Sequential).unwrap();
    save_dataset(&ds, &path, serde_json::Value::Null).unwrap();
    let mp = meta_path(&path);
    let text = fs::read_to_string(&mp).unwrap().replacen("\"version\": 1", "\"version\": 7", 1);
    fs::write(&mp, text).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Version { found: 7, .. })));
}

#[test]
fn label_spread_matches_reported_stderr() {
    // same pulses, independent noise seeds: the spread of labels across
    // replicas should agree with the per-label standard error
    let base = {
        let mut m = meta(1, 0);
        m.realizations = 200;
        m
    };
    let params = generate_sample(&base, 0, Reduction::Sequential).unwrap().params;
    let gates = greybox::qcore::gate_set(&base.gates).unwrap();
    let mut labels = Vec::new();
    let mut reported = Vec::new();
    for seed in 0..40u64 {
        let est = greybox::dynamics::gate_fidelities(&params, &base.noise, &base.shape, &gates, base.realizations, 1000 + seed, Reduction::Sequential).unwrap();
        labels.push(est.fidelity);
        reported.push(est.stderr);
    }
    for g in 0..gates.len() {
        let xs: Vec<f64> = labels.iter().map(|l| l[g]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        let se = reported.iter().map(|r| r[g]).sum::<f64>() / reported.len() as f64;
        let ratio = sd / se;
        assert!((0.5..2.0).contains(&ratio), "gate {g}: spread {sd} vs stderr {se}");
    }
}
