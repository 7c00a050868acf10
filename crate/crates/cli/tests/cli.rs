use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use greybox::noise::TimeGrid;
use greybox_cli::config::RunConfig;
use serde_json::Value;

/// A configuration small enough for every subcommand to finish in seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.join("out");
    cfg.shape.grid = TimeGrid::new(1.0, 128).unwrap();
    cfg.dataset.train = 16;
    cfg.dataset.test = 4;
    cfg.dataset.realizations = 16;
    cfg.model.epochs = 2;
    cfg.model.batch_size = 8;
    cfg.optimize.restarts = 2;
    cfg.optimize.iterations = 5;
    cfg.optimize.verify_realizations = 40;
    cfg.spectrum.trajectories = 200;
    cfg.sweep.g = vec![0.2, 1.0];
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn greybox(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_greybox"))
        .arg("--config")
        .arg(config)
        .arg("--deterministic")
        .args(args)
        .env_remove("GREYBOX_SEED")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"seed": 1, "colour": "blue"}"#).unwrap();
    assert_eq!(greybox(&path, &["spectrum"]).status.code(), Some(2));
}

#[test]
fn bad_flag_and_bad_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_eq!(greybox(&cfg, &["spectrum", "--bogus"]).status.code(), Some(2));
    assert_eq!(greybox(&cfg, &["--g", "-1", "spectrum"]).status.code(), Some(2));
    assert_eq!(greybox(&cfg, &["optimize", "--gate", "Rx45"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let missing = dir.path().join("nope.csv");
    let out = greybox(&cfg, &["train", "--data", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    let out = greybox(&cfg, &["verify", "--pulses", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn spectrum_tables_carry_theory_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut theory = Vec::new();
    for kind in ["rtn", "ou"] {
        let out = dir.path().join(kind);
        ok(greybox(&cfg, &["--kind", kind, "--out", out.to_str().unwrap(), "spectrum"]));
        let rows = csv_rows(&out.join("psd.csv"));
        assert_eq!(rows[0], ["omega", "psd", "psd_theory"]);
        for r in &rows[1..] {
            let w: f64 = r[0].parse().unwrap();
            let t: f64 = r[2].parse().unwrap();
            assert!((t - 4.0 / (4.0 + w * w)).abs() < 1e-12);
        }
        assert_eq!(csv_rows(&out.join("acf.csv"))[0], ["lag", "acf", "stderr"]);
        let summary = json(&out.join("spectrum.json"));
        assert_eq!(summary["provenance"]["config"]["noise"]["kind"], kind);
        theory.push(rows.into_iter().map(|r| r[2].clone()).collect::<Vec<_>>());
    }
    assert_eq!(theory[0], theory[1]);
}

#[test]
fn spectrum_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let read = |name: &str| {
        let out = dir.path().join(name);
        ok(greybox(&cfg, &["--seed", "11", "--out", out.to_str().unwrap(), "spectrum"]));
        (fs::read(out.join("acf.csv")).unwrap(), fs::read(out.join("psd.csv")).unwrap())
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn gen_data_echoes_config_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    ok(greybox(&cfg, &["--g", "0.7", "gen-data"]));
    let out = dir.path().join("out");
    let meta = json(&out.join("data.meta.json"));
    assert_eq!(meta["meta"]["noise"]["g"], 0.7);
    assert_eq!(meta["meta"]["train"], 16);
    assert_eq!(csv_rows(&out.join("data.csv")).len(), 1 + 20);
    assert!(out.join("gen-data.config.json").exists());

    let before = fs::read(out.join("data.csv")).unwrap();
    let again = greybox(&cfg, &["--g", "0.3", "gen-data"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(fs::read(out.join("data.csv")).unwrap(), before);

    ok(greybox(&cfg, &["--force", "--g", "0.3", "gen-data"]));
    assert_eq!(json(&out.join("data.meta.json"))["meta"]["noise"]["g"], 0.3);
}

#[test]
fn seed_resolution_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let seed_of = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_greybox"));
        cmd.arg("--config").arg(&cfg).arg("--out").arg(&out).env_remove("GREYBOX_SEED");
        if let Some(e) = env {
            cmd.env("GREYBOX_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        ok(cmd.arg("gen-data").output().unwrap());
        json(&out.join("data.meta.json"))["meta"]["master_seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of("a", None, None), 0);
    assert_eq!(seed_of("b", Some("5"), None), 5);
    assert_eq!(seed_of("c", Some("5"), Some("9")), 9);
}

#[test]
fn train_optimize_verify_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    ok(greybox(&cfg, &["gen-data"]));
    ok(greybox(&cfg, &["train"]));

    let history = csv_rows(&out.join("history.csv"));
    assert_eq!(history.len(), 3);
    let summary = json(&out.join("train.json"));
    assert!(summary["summary"]["final_test_mse"].as_f64().unwrap().is_finite());
    let ck = json(&out.join("checkpoint.json"));
    assert_eq!(ck["provenance"]["seed"], 0);

    // two more epochs from the checkpoint match a straight four-epoch run
    let resumed = dir.path().join("resumed");
    let ck_path = out.join("checkpoint.json");
    ok(greybox(
        &cfg,
        &["--out", resumed.to_str().unwrap(), "train", "--data", out.join("data.csv").to_str().unwrap(), "--epochs", "4", "--resume", ck_path.to_str().unwrap()],
    ));
    let straight = dir.path().join("straight");
    ok(greybox(
        &cfg,
        &["--out", straight.to_str().unwrap(), "train", "--data", out.join("data.csv").to_str().unwrap(), "--epochs", "4"],
    ));
    let (a, b) = (csv_rows(&resumed.join("history.csv")), csv_rows(&straight.join("history.csv")));
    assert_eq!(a.len(), 5);
    // deterministic mode zeroes the wall-clock column, so whole rows compare
    assert_eq!(a, b);

    ok(greybox(&cfg, &["optimize", "--all-gates"]));
    for gate in ["I", "Rx90", "Ry90", "Rx180", "Ry180", "H"] {
        let report = json(&out.join(format!("optimize_{gate}.json")));
        let f = report["verified"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f), "{gate}: {f}");
        assert!(out.join(format!("trace_{gate}.csv")).exists());
    }
    let pulses = out.join("pulses_Rx90.json");
    ok(greybox(&cfg, &["verify", "--pulses", pulses.to_str().unwrap()]));
    let v = json(&out.join("verify.json"));
    assert!(v.to_string().contains("Rx90"));
}

#[test]
fn two_point_sweep_has_a_row_per_coupling_and_gate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    ok(greybox(&cfg, &["sweep"]));
    let rows = csv_rows(&dir.path().join("out").join("sweep.csv"));
    assert_eq!(rows[0], ["g", "gate", "test_mse", "predicted_f", "verified_f", "stderr"]);
    assert_eq!(rows.len(), 1 + 2 * 6);
    for r in &rows[1..] {
        assert!(r[4].parse::<f64>().unwrap().is_finite());
    }
}
