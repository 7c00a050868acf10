//! Subcommand implementations. Each writes its artifacts under the run's
//! output directory together with the resolved configuration.

use std::path::{Path, PathBuf};

use greybox::control::PulseFile;
use greybox::dataset::{generate_dataset, load_dataset, recorded_checksum, save_dataset, write_atomic, Dataset, DatasetMeta};
use greybox::greybox::{history_csv, train as train_model, Checkpoint, Greybox, TrainOptions, TrainState};
use greybox::noise::{ensemble, estimate_autocorrelation, estimate_psd, lorentzian, NoiseSpec};
use greybox::optctrl::{optimize_pulses, verify_pulses, OptimizationReport};
use greybox::qcore::{default_gate_set, gate_set};
use greybox::stats::linear_fit;
use greybox::{rng, Reduction};
use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::CliError;

/// Flags that change how, not what, a command computes.
#[derive(Debug, Clone, Copy, Default)]
pub struct Context {
    pub deterministic: bool,
    pub force: bool,
}

impl Context {
    pub fn reduction(&self) -> Reduction {
        if self.deterministic {
            Reduction::Sequential
        } else {
            Reduction::Parallel
        }
    }
}

fn provenance(cfg: &RunConfig) -> Value {
    json!({ "seed": cfg.seed, "config": cfg.to_json() })
}

fn ensure_writable(path: &Path, ctx: &Context) -> Result<(), CliError> {
    if path.exists() && !ctx.force {
        return Err(CliError::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(CliError::from)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn dump_config(cfg: &RunConfig, dir: &Path, command: &str) -> Result<(), CliError> {
    write_json(&dir.join(format!("{command}.config.json")), &provenance(cfg))
}

/// Noise trajectories → `acf.csv` (lag,acf,stderr), `psd.csv`
/// (omega,psd,psd_theory) and `spectrum.json` with the fitted ACF slope.
pub fn spectrum(cfg: &RunConfig, ctx: &Context) -> Result<Value, CliError> {
    let out = &cfg.output_dir;
    let (acf_path, psd_path) = (out.join("acf.csv"), out.join("psd.csv"));
    ensure_writable(&acf_path, ctx)?;
    ensure_writable(&psd_path, ctx)?;
    let s = &cfg.spectrum;
    info!("sampling {} {} trajectories on {} steps", s.trajectories, cfg.noise.kind, cfg.shape.grid.steps);
    let trajs = ensemble(&cfg.noise, &cfg.shape.grid, s.trajectories, rng::derive(cfg.seed, rng::domain::NOISE, 0));
    let acf = estimate_autocorrelation(&trajs, s.max_lag)?;
    let psd = estimate_psd(&trajs, s.psd)?;
    drop(trajs);

    let mut text = String::from("lag,acf,stderr\n");
    for i in 0..acf.lag.len() {
        text.push_str(&format!("{},{},{}\n", acf.lag[i], acf.acf[i], acf.stderr[i]));
    }
    write_text(&acf_path, &text)?;
    let mut text = String::from("omega,psd,psd_theory\n");
    for i in 0..psd.omega.len() {
        let w = psd.omega[i];
        text.push_str(&format!("{},{},{}\n", w, psd.psd[i], lorentzian(cfg.noise.gamma, w)));
    }
    write_text(&psd_path, &text)?;

    let (x, y): (Vec<f64>, Vec<f64>) = acf
        .lag
        .iter()
        .zip(&acf.acf)
        .filter(|(_, a)| **a > 0.0)
        .map(|(l, a)| (*l, a.ln()))
        .unzip();
    let slope = if x.len() >= 2 { linear_fit(&x, &y).0 } else { f64::NAN };
    info!("log-ACF slope {slope:.4} (expected {:.4})", -2.0 * cfg.noise.gamma);
    let summary = json!({
        "acf_slope": slope,
        "expected_slope": -2.0 * cfg.noise.gamma,
        "acf": "acf.csv",
        "psd": "psd.csv",
        "provenance": provenance(cfg),
    });
    write_json(&out.join("spectrum.json"), &summary)?;
    dump_config(cfg, out, "spectrum")?;
    Ok(summary)
}

pub fn dataset_meta(cfg: &RunConfig) -> DatasetMeta {
    DatasetMeta::new(
        cfg.noise,
        cfg.shape.clone(),
        cfg.dataset.realizations,
        cfg.seed,
        cfg.dataset.train,
        cfg.dataset.test,
    )
}

pub fn gen_data(cfg: &RunConfig, ctx: &Context, path: &Path) -> Result<Dataset, CliError> {
    ensure_writable(path, ctx)?;
    let meta = dataset_meta(cfg);
    info!(
        "generating {} + {} samples, K = {}, {} g = {}",
        meta.train, meta.test, meta.realizations, meta.noise.kind, meta.noise.g
    );
    let ds = generate_dataset(&meta, ctx.reduction())?;
    save_dataset(&ds, path, provenance(cfg))?;
    let se: Vec<f64> = ds.samples.iter().flat_map(|s| s.stderr.iter().copied()).collect();
    let mean = se.iter().sum::<f64>() / se.len().max(1) as f64;
    let max = se.iter().cloned().fold(0.0, f64::max);
    info!("wrote {}: label stderr mean {mean:.2e}, max {max:.2e}", path.display());
    dump_config(cfg, path.parent().unwrap_or(Path::new(".")), "gen-data")?;
    Ok(ds)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_train_mse: f64,
    pub final_test_mse: f64,
    pub best_test_mse: f64,
    pub best_epoch: usize,
}

pub fn train(cfg: &RunConfig, ctx: &Context, data: &Path, resume: Option<&Path>) -> Result<(Checkpoint, TrainSummary), CliError> {
    let out = &cfg.output_dir;
    let ck_path = out.join("checkpoint.json");
    if resume.map(|r| r != ck_path).unwrap_or(true) {
        ensure_writable(&ck_path, ctx)?;
    }
    let ds = load_dataset(data)?;
    let checksum = recorded_checksum(data)?;
    let (model, mut state) = match resume {
        Some(r) => {
            let ck = Checkpoint::load(r)?;
            let mut resumed = ck.model.config.clone();
            resumed.epochs = cfg.model.epochs;
            if resumed != cfg.model {
                return Err(CliError::Config("resume: model config differs from the checkpoint".into()));
            }
            if ck.data_checksum != checksum {
                return Err(CliError::Config("resume: checkpoint was trained on a different dataset".into()));
            }
            let model = Greybox::new(cfg.model.clone(), ck.model.shape.clone(), ck.model.gates.clone())?;
            (model, ck.state)
        }
        None => {
            let model = Greybox::new(cfg.model.clone(), ds.meta.shape.clone(), gate_set(&ds.meta.gates)?)?;
            let state = TrainState::fresh(&model);
            (model, state)
        }
    };
    let (train_set, test_set) = ds.split();
    let train_set = model.prepare_samples(&train_set)?;
    let test_set = model.prepare_samples(&test_set)?;
    info!(
        "training {} parameters on {} samples ({} test), epochs {}..{}",
        model.param_count(),
        train_set.len(),
        test_set.len(),
        state.epochs_done(),
        cfg.model.epochs
    );
    let mut progress = |r: &greybox::greybox::EpochRecord| {
        if r.epoch % 10 == 0 || r.epoch + 1 == cfg.model.epochs {
            info!("epoch {:>4}  train {:.3e}  test {:.3e}", r.epoch, r.train_mse, r.test_mse);
        }
    };
    train_model(
        &model,
        &train_set,
        &test_set,
        &mut state,
        TrainOptions {
            epochs: cfg.model.epochs,
            deterministic: ctx.deterministic,
            progress: Some(&mut progress),
        },
    )?;
    let last = state.history.last().cloned();
    let summary = TrainSummary {
        epochs: state.epochs_done(),
        final_train_mse: last.as_ref().map(|r| r.train_mse).unwrap_or(f64::NAN),
        final_test_mse: last.as_ref().map(|r| r.test_mse).unwrap_or(f64::NAN),
        best_test_mse: state.best_test_mse,
        best_epoch: state.best_epoch,
    };
    info!(
        "final test MSE {:.3e}; best {:.3e} at epoch {}",
        summary.final_test_mse, summary.best_test_mse, summary.best_epoch
    );
    let mut prov = provenance(cfg);
    prov["dataset_meta"] = serde_json::to_value(&ds.meta)?;
    let ck = Checkpoint {
        model,
        state,
        data_checksum: checksum,
        provenance: prov.clone(),
    };
    ck.save(&ck_path)?;
    write_text(&out.join("history.csv"), &history_csv(&ck.state.history))?;
    write_json(&out.join("train.json"), &json!({ "summary": summary, "provenance": prov }))?;
    dump_config(cfg, out, "train")?;
    Ok((ck, summary))
}

/// Noise the model was trained for, falling back to the run config.
fn training_noise(ck: &Checkpoint, cfg: &RunConfig) -> NoiseSpec {
    ck.provenance
        .get("dataset_meta")
        .and_then(|m| m.get("noise"))
        .and_then(|n| serde_json::from_value(n.clone()).ok())
        .unwrap_or(cfg.noise)
}

pub fn optimize(cfg: &RunConfig, ctx: &Context, checkpoint: &Path, all_gates: bool) -> Result<Vec<OptimizationReport>, CliError> {
    let out = &cfg.output_dir;
    let ck = Checkpoint::load(checkpoint)?;
    let noise = training_noise(&ck, cfg);
    let labels: Vec<String> = if all_gates {
        ck.model.gates.iter().map(|g| g.label.clone()).collect()
    } else {
        vec![cfg.optimize.gate.clone()]
    };
    for label in &labels {
        ensure_writable(&out.join(format!("optimize_{label}.json")), ctx)?;
    }
    let mut reports = Vec::new();
    for label in labels {
        let mut ocfg = cfg.optimize.clone();
        ocfg.gate = label.clone();
        let report = optimize_pulses(&ck.model, &ck.state.best_weights, &ocfg, &noise, ctx.reduction())?;
        info!(
            "{label}: predicted {:.5}, verified {:.5} ± {:.1e} (restart {})",
            report.predicted, report.verified, report.stderr, report.best_restart
        );
        let trace = format!("trace_{label}.csv");
        let pulses = format!("pulses_{label}.json");
        write_text(&out.join(&trace), &report.trace_csv())?;
        write_json(&out.join(&pulses), &PulseFile::new(&report.params, &ck.model.shape))?;
        write_json(
            &out.join(format!("optimize_{label}.json")),
            &json!({
                "gate": report.gate,
                "pulses": report.params,
                "predicted": report.predicted,
                "verified": report.verified,
                "stderr": report.stderr,
                "gap": report.predicted - report.verified,
                "best_restart": report.best_restart,
                "restarts": report.restarts.iter().map(|r| json!({
                    "index": r.index,
                    "predicted": r.predicted,
                    "verified": r.verified,
                    "stderr": r.stderr,
                    "iterations": r.iterations,
                })).collect::<Vec<_>>(),
                "noise": noise,
                "trace": trace,
                "pulse_file": pulses,
                "provenance": provenance(cfg),
            }),
        )?;
        reports.push(report);
    }
    dump_config(cfg, out, "optimize")?;
    Ok(reports)
}

pub fn verify(cfg: &RunConfig, ctx: &Context, pulses: &Path) -> Result<(), CliError> {
    let out = &cfg.output_dir;
    let path = out.join("verify.json");
    ensure_writable(&path, ctx)?;
    let pf = PulseFile::load(pulses)?;
    let gates = default_gate_set();
    let k = cfg.optimize.verify_realizations;
    let est = verify_pulses(
        &pf.params(),
        &cfg.noise,
        &pf.shape,
        &gates,
        k,
        rng::derive(cfg.seed, rng::domain::SAMPLE, 0),
        ctx.reduction(),
    )?;
    for ((g, f), s) in gates.iter().zip(&est.fidelity).zip(&est.stderr) {
        println!("{:<6} {f:.6} ± {s:.1e}", g.label);
    }
    write_json(
        &path,
        &json!({
            "gates": gates.iter().map(|g| g.label.clone()).collect::<Vec<_>>(),
            "fidelity": est.fidelity,
            "stderr": est.stderr,
            "realizations": k,
            "noise": cfg.noise,
            "provenance": provenance(cfg),
        }),
    )?;
    dump_config(cfg, out, "verify")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub g: f64,
    pub gate: String,
    pub test_mse: f64,
    pub predicted_f: f64,
    pub verified_f: f64,
    pub stderr: f64,
}

pub fn sweep_dir(cfg: &RunConfig, g: f64) -> PathBuf {
    cfg.output_dir.join(format!("g_{g}"))
}

fn sweep_point(cfg: &RunConfig, ctx: &Context, g: f64) -> Result<Vec<SweepRow>, CliError> {
    let mut sub = cfg.clone();
    sub.noise.g = g;
    sub.output_dir = sweep_dir(cfg, g);
    let data = sub.output_dir.join("data.csv");
    gen_data(&sub, ctx, &data)?;
    let (_, summary) = train(&sub, ctx, &data, None)?;
    let reports = optimize(&sub, ctx, &sub.output_dir.join("checkpoint.json"), true)?;
    Ok(reports
        .into_iter()
        .map(|r| SweepRow {
            g,
            gate: r.gate,
            test_mse: summary.best_test_mse,
            predicted_f: r.predicted,
            verified_f: r.verified,
            stderr: r.stderr,
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut text = String::from("g,gate,test_mse,predicted_f,verified_f,stderr\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.g, r.gate, r.test_mse, r.predicted_f, r.verified_f, r.stderr
        ));
    }
    text
}

/// One pipeline run per coupling. A failing coupling is reported and the
/// sweep moves on; its rows carry NaN.
pub fn sweep(cfg: &RunConfig, ctx: &Context) -> Result<Vec<SweepRow>, CliError> {
    let out = &cfg.output_dir;
    let csv = out.join("sweep.csv");
    ensure_writable(&csv, ctx)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &g in &cfg.sweep.g {
        info!("sweep point g = {g}");
        match sweep_point(cfg, ctx, g) {
            Ok(r) => rows.extend(r),
            Err(e) => {
                warn!("g = {g} failed: {e}");
                failures.push(json!({ "g": g, "error": e.to_string() }));
                rows.extend(default_gate_set().into_iter().map(|gate| SweepRow {
                    g,
                    gate: gate.label,
                    test_mse: f64::NAN,
                    predicted_f: f64::NAN,
                    verified_f: f64::NAN,
                    stderr: f64::NAN,
                }));
            }
        }
    }
    write_text(&csv, &sweep_csv(&rows))?;
    write_json(
        &out.join("sweep.json"),
        &json!({ "rows": "sweep.csv", "failures": failures, "provenance": provenance(cfg) }),
    )?;
    dump_config(cfg, out, "sweep")?;
    Ok(rows)
}
