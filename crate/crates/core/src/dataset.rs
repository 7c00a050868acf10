//! Supervised samples: pulse amplitudes → Monte Carlo gate fidelities.
//!
//! On disk a dataset is a CSV (`ax1..ax5, ay1..ay5, f1..fN, se1..seN, seed`)
//! plus a sidecar `<stem>.meta.json` holding the generation metadata and the
//! SHA-256 of the CSV bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{random_pulse_params, PulseParams, PulseShapeConfig, PULSES_PER_AXIS};
use crate::dynamics::gate_fidelities;
use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use crate::qcore::{gate_set, DEFAULT_GATE_LABELS};
use crate::{rng, Reduction};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub params: PulseParams,
    pub labels: Vec<f64>,
    pub stderr: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub version: u32,
    pub noise: NoiseSpec,
    pub shape: PulseShapeConfig,
    pub gates: Vec<String>,
    /// Noise realizations per label.
    pub realizations: usize,
    pub master_seed: u64,
    pub train: usize,
    pub test: usize,
}

impl DatasetMeta {
    pub fn new(noise: NoiseSpec, shape: PulseShapeConfig, realizations: usize, master_seed: u64, train: usize, test: usize) -> Self {
        DatasetMeta {
            version: DATASET_VERSION,
            noise,
            shape,
            gates: DEFAULT_GATE_LABELS.iter().map(|s| s.to_string()).collect(),
            realizations,
            master_seed,
            train,
            test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != DATASET_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: DATASET_VERSION,
            });
        }
        self.noise.validate()?;
        self.shape.validate()?;
        gate_set(&self.gates)?;
        if self.realizations < 2 {
            return Err(Error::InvalidArgument("need at least 2 realizations per label".into()));
        }
        if self.train == 0 {
            return Err(Error::InvalidArgument("training set must be non-empty".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train + self.test
    }

    /// Per-index test membership: the `test` indices with the smallest
    /// split hash. Depends only on the seed and the counts.
    pub fn test_mask(&self) -> Vec<bool> {
        let mut order: Vec<(u64, usize)> = (0..self.total())
            .map(|i| (rng::derive(self.master_seed, rng::domain::SPLIT, i as u64), i))
            .collect();
        order.sort_unstable();
        let mut mask = vec![false; self.total()];
        for (_, i) in order.into_iter().take(self.test) {
            mask[i] = true;
        }
        mask
    }

    pub fn sample_seed(&self, index: usize) -> u64 {
        rng::derive(self.master_seed, rng::domain::SAMPLE, index as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    meta: DatasetMeta,
    checksum: String,
    #[serde(default)]
    provenance: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self) -> (Vec<Sample>, Vec<Sample>) {
        let mask = self.meta.test_mask();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (s, is_test) in self.samples.iter().zip(mask) {
            if is_test {
                test.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        (train, test)
    }

    pub fn to_csv(&self) -> String {
        let n = self.meta.gates.len();
        let mut header: Vec<String> = Vec::new();
        header.extend((1..=PULSES_PER_AXIS).map(|k| format!("ax{k}")));
        header.extend((1..=PULSES_PER_AXIS).map(|k| format!("ay{k}")));
        header.extend((1..=n).map(|k| format!("f{k}")));
        header.extend((1..=n).map(|k| format!("se{k}")));
        header.push("seed".into());
        let mut out = header.join(",");
        out.push('\n');
        for s in &self.samples {
            let mut cols: Vec<String> = Vec::with_capacity(header.len());
            cols.extend(s.params.ax.iter().chain(&s.params.ay).map(|v| v.to_string()));
            cols.extend(s.labels.iter().chain(&s.stderr).map(|v| v.to_string()));
            cols.push(s.seed.to_string());
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        out
    }
}

/// Sidecar path: `data.csv` → `data.meta.json`.
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn generate_sample(meta: &DatasetMeta, index: usize, reduction: Reduction) -> Result<Sample> {
    let gates = gate_set(&meta.gates)?;
    let seed = meta.sample_seed(index);
    let params = random_pulse_params(seed, &meta.shape);
    let est = gate_fidelities(&params, &meta.noise, &meta.shape, &gates, meta.realizations, seed, reduction)?;
    Ok(Sample {
        params,
        labels: est.fidelity,
        stderr: est.stderr,
        seed,
    })
}

/// Generate all samples in memory; indices run in parallel, and each sample
/// depends only on `(master_seed, index)`.
pub fn generate_dataset(meta: &DatasetMeta, reduction: Reduction) -> Result<Dataset> {
    meta.validate()?;
    let samples = (0..meta.total())
        .into_par_iter()
        .map(|i| generate_sample(meta, i, reduction))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        meta: meta.clone(),
        samples,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path, provenance: serde_json::Value) -> Result<()> {
    let csv = ds.to_csv();
    let meta = MetaFile {
        meta: ds.meta.clone(),
        checksum: checksum(csv.as_bytes()),
        provenance,
    };
    write_atomic(path, csv.as_bytes())?;
    write_atomic(&meta_path(path), serde_json::to_string_pretty(&meta)?.as_bytes())
}

fn parse_rows(text: &str, meta: &DatasetMeta) -> Result<Vec<Sample>> {
    let n = meta.gates.len();
    let width = 2 * PULSES_PER_AXIS + 2 * n + 1;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Schema(e.to_string()))?;
    if header.len() != width || header.get(0) != Some("ax1") || header.get(width - 1) != Some("seed") {
        return Err(Error::Schema(format!("unexpected CSV header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut samples = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let bad = |message: String| Error::Row { row, message };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != width {
            return Err(bad(format!("expected {width} fields, found {}", rec.len())));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = rec[i].trim().parse().map_err(|_| bad(format!("field {i} is not a number: {:?}", &rec[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(format!("field {i} is not finite")))
            }
        };
        let mut amps = [0.0; 2 * PULSES_PER_AXIS];
        for (k, a) in amps.iter_mut().enumerate() {
            *a = num(k)?;
        }
        let params = PulseParams::from_array(&amps);
        params
            .check_bounds(meta.shape.max_amplitude)
            .map_err(|e| bad(e.to_string()))?;
        let base = 2 * PULSES_PER_AXIS;
        let labels = (0..n).map(|k| num(base + k)).collect::<Result<Vec<_>>>()?;
        if let Some(l) = labels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(bad(format!("label {l} outside [0, 1]")));
        }
        let stderr = (0..n).map(|k| num(base + n + k)).collect::<Result<Vec<_>>>()?;
        let seed = rec[width - 1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("seed is not an integer: {:?}", &rec[width - 1])))?;
        samples.push(Sample {
            params,
            labels,
            stderr,
            seed,
        });
    }
    if samples.len() != meta.total() {
        return Err(Error::Schema(format!(
            "meta declares {} samples, CSV has {}",
            meta.total(),
            samples.len()
        )));
    }
    Ok(samples)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mp = meta_path(path);
    if !mp.exists() {
        return Err(Error::MissingMeta(mp));
    }
    let meta_text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let file: MetaFile = serde_json::from_str(&meta_text).map_err(|e| Error::Schema(format!("{}: {e}", mp.display())))?;
    file.meta.validate()?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = checksum(&bytes);
    let text = String::from_utf8(bytes).map_err(|_| Error::Schema("dataset is not UTF-8".into()))?;
    // parse first so a damaged row is reported by position
    let samples = parse_rows(&text, &file.meta)?;
    if found != file.checksum {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: file.checksum,
            found,
        });
    }
    Ok(Dataset {
        meta: file.meta,
        samples,
    })
}

/// Provenance block stored with the dataset.
pub fn load_provenance(path: &Path) -> Result<serde_json::Value> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let file: MetaFile = serde_json::from_str(&text)?;
    Ok(file.provenance)
}

/// Checksum recorded in the sidecar.
pub fn recorded_checksum(path: &Path) -> Result<String> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let file: MetaFile = serde_json::from_str(&text)?;
    Ok(file.checksum)
}
