use std::path::{Path, PathBuf};

use greybox::control::PulseShapeConfig;
use greybox::greybox::GreyboxConfig;
use greybox::noise::{NoiseKind, NoiseSpec, PsdMethod};
use greybox::optctrl::OptimizeConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSizes {
    pub train: usize,
    pub test: usize,
    /// Noise realizations per label.
    pub realizations: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        DatasetSizes {
            train: 4096,
            test: 512,
            realizations: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumConfig {
    pub trajectories: usize,
    pub max_lag: f64,
    pub psd: PsdMethod,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig {
            trajectories: 100_000,
            max_lag: 0.5,
            psd: PsdMethod::MaxEntropy {
                order: 8,
                omega_max: 8.0,
                points: 81,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub g: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { g: vec![0.2, 1.0, 2.0] }
    }
}

fn default_noise() -> NoiseSpec {
    NoiseSpec {
        kind: NoiseKind::Rtn,
        gamma: 1.0,
        g: 0.2,
    }
}

/// Everything a run depends on. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub noise: NoiseSpec,
    pub shape: PulseShapeConfig,
    pub dataset: DatasetSizes,
    pub model: GreyboxConfig,
    pub optimize: OptimizeConfig,
    pub spectrum: SpectrumConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            noise: default_noise(),
            shape: PulseShapeConfig::default(),
            dataset: DatasetSizes::default(),
            model: GreyboxConfig::default(),
            optimize: OptimizeConfig::default(),
            spectrum: SpectrumConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Push the master seed into every seeded sub-config.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.init_seed = seed;
        self.optimize.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let c = |e: greybox::Error| CliError::Config(e.to_string());
        self.noise.validate().map_err(c)?;
        self.shape.validate().map_err(c)?;
        self.model.validate().map_err(c)?;
        self.optimize.validate(&self.shape).map_err(c)?;
        if self.dataset.train == 0 || self.dataset.realizations < 2 {
            return Err(CliError::Config("dataset needs train >= 1 and realizations >= 2".into()));
        }
        if self.spectrum.trajectories < 2 || !(self.spectrum.max_lag > 0.0) {
            return Err(CliError::Config("spectrum needs >= 2 trajectories and a positive max_lag".into()));
        }
        if self.sweep.g.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(CliError::Config("sweep couplings must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
