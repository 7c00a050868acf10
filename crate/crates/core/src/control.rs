//! Drive fields built from five fixed Gaussian pulses per axis.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::TimeGrid;
use crate::rng;
use rand::Rng;

pub const PULSES_PER_AXIS: usize = 5;
pub const PARAM_COUNT: usize = 2 * PULSES_PER_AXIS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseShapeConfig {
    pub centers: [f64; PULSES_PER_AXIS],
    pub width: f64,
    pub max_amplitude: f64,
    pub grid: TimeGrid,
}

impl Default for PulseShapeConfig {
    fn default() -> Self {
        let grid = TimeGrid::default();
        let t = grid.total_time;
        PulseShapeConfig {
            centers: std::array::from_fn(|k| (k + 1) as f64 * t / 6.0),
            width: t / 30.0,
            max_amplitude: 100.0,
            grid,
        }
    }
}

impl PulseShapeConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.width > 0.0) {
            return Err(Error::InvalidArgument(format!("pulse width must be > 0, got {}", self.width)));
        }
        if !(self.max_amplitude > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "amplitude bound must be > 0, got {}",
                self.max_amplitude
            )));
        }
        let t = self.grid.total_time;
        let inside = self.centers.iter().all(|c| *c > 0.0 && *c < t);
        let increasing = self.centers.windows(2).all(|w| w[0] < w[1]);
        if !inside || !increasing {
            return Err(Error::InvalidArgument(format!(
                "pulse centers {:?} must be strictly increasing inside (0, {t})",
                self.centers
            )));
        }
        Ok(())
    }

    /// `basis[m][k] = exp(−(t_m − μ_k)² / 2σ²)` at step midpoints.
    pub fn basis(&self) -> Vec<[f64; PULSES_PER_AXIS]> {
        let inv = 1.0 / (2.0 * self.width * self.width);
        (0..self.grid.steps)
            .map(|m| {
                let t = self.grid.midpoint(m);
                self.centers.map(|c| (-(t - c) * (t - c) * inv).exp())
            })
            .collect()
    }

    /// Largest basis overlap between neighbouring centers.
    pub fn neighbour_overlap(&self) -> f64 {
        self.centers
            .windows(2)
            .map(|w| (-(w[1] - w[0]).powi(2) / (2.0 * self.width * self.width)).exp())
            .fold(0.0, f64::max)
    }
}

/// Amplitudes of the ten Gaussian pulses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseParams {
    pub ax: [f64; PULSES_PER_AXIS],
    pub ay: [f64; PULSES_PER_AXIS],
}

impl PulseParams {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Flattened as `ax1..ax5, ay1..ay5`.
    pub fn to_array(&self) -> [f64; PARAM_COUNT] {
        std::array::from_fn(|i| if i < PULSES_PER_AXIS { self.ax[i] } else { self.ay[i - PULSES_PER_AXIS] })
    }

    pub fn from_array(v: &[f64; PARAM_COUNT]) -> Self {
        PulseParams {
            ax: std::array::from_fn(|i| v[i]),
            ay: std::array::from_fn(|i| v[i + PULSES_PER_AXIS]),
        }
    }

    pub fn check_bounds(&self, bound: f64) -> Result<()> {
        for (axis, amps) in [('x', &self.ax), ('y', &self.ay)] {
            for (i, a) in amps.iter().enumerate() {
                if !(a.abs() <= bound) {
                    return Err(Error::AmplitudeOutOfBounds {
                        axis,
                        index: i + 1,
                        value: *a,
                        bound,
                    });
                }
            }
        }
        Ok(())
    }

    /// Componentwise projection onto `[−bound, bound]`.
    pub fn clamp(&self, bound: f64) -> Self {
        PulseParams {
            ax: self.ax.map(|a| a.clamp(-bound, bound)),
            ay: self.ay.map(|a| a.clamp(-bound, bound)),
        }
    }
}

impl std::ops::Add for PulseParams {
    type Output = PulseParams;
    fn add(self, rhs: PulseParams) -> PulseParams {
        PulseParams {
            ax: std::array::from_fn(|i| self.ax[i] + rhs.ax[i]),
            ay: std::array::from_fn(|i| self.ay[i] + rhs.ay[i]),
        }
    }
}

/// Fields `f_x, f_y` at every step midpoint.
pub fn field_values(p: &PulseParams, cfg: &PulseShapeConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    p.check_bounds(cfg.max_amplitude)?;
    Ok(fields_with_basis(p, &cfg.basis()))
}

/// Field evaluation against a precomputed basis; no bounds check.
pub fn fields_with_basis(p: &PulseParams, basis: &[[f64; PULSES_PER_AXIS]]) -> (Vec<f64>, Vec<f64>) {
    let dot = |amps: &[f64; PULSES_PER_AXIS], row: &[f64; PULSES_PER_AXIS]| {
        amps.iter().zip(row).map(|(a, b)| a * b).sum::<f64>()
    };
    basis.iter().map(|row| (dot(&p.ax, row), dot(&p.ay, row))).unzip()
}

/// Amplitudes i.i.d. uniform on `[−A_max, A_max]`.
pub fn random_pulse_params(seed: u64, cfg: &PulseShapeConfig) -> PulseParams {
    let mut rng = rng::stream(seed, rng::domain::PULSES, 0);
    let a = cfg.max_amplitude;
    let mut draw = || rng.gen_range(-a..=a);
    PulseParams {
        ax: std::array::from_fn(|_| draw()),
        ay: std::array::from_fn(|_| draw()),
    }
}

/// On-disk pulse description; the shape config travels along for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseFile {
    pub ax: [f64; PULSES_PER_AXIS],
    pub ay: [f64; PULSES_PER_AXIS],
    pub shape: PulseShapeConfig,
}

impl PulseFile {
    pub fn new(p: &PulseParams, shape: &PulseShapeConfig) -> Self {
        PulseFile {
            ax: p.ax,
            ay: p.ay,
            shape: shape.clone(),
        }
    }

    pub fn params(&self) -> PulseParams {
        PulseParams { ax: self.ax, ay: self.ay }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: PulseFile = serde_json::from_str(&text)?;
        file.shape.validate()?;
        file.params().check_bounds(file.shape.max_amplitude)?;
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_resolvable() {
        let cfg = PulseShapeConfig::default();
        cfg.validate().unwrap();
        assert!(cfg.neighbour_overlap() < 1e-3);
        let mut bad = cfg.clone();
        bad.centers[2] = bad.centers[1];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_amplitudes_give_zero_fields() {
        let (fx, fy) = field_values(&PulseParams::zero(), &PulseShapeConfig::default()).unwrap();
        assert!(fx.iter().chain(&fy).all(|v| *v == 0.0));
    }

    #[test]
    fn single_pulse_peaks_at_its_center() {
        let mut cfg = PulseShapeConfig::default();
        // put the center on a step midpoint so the sample lands exactly on it
        let m = 511;
        cfg.centers[2] = cfg.grid.midpoint(m);
        let mut p = PulseParams::zero();
        p.ax[2] = 42.0;
        let (fx, fy) = field_values(&p, &cfg).unwrap();
        assert!((fx[m] - 42.0).abs() < 1e-9);
        assert!(fy.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fields_are_linear() {
        let cfg = PulseShapeConfig::default();
        let p1 = random_pulse_params(1, &cfg).clamp(40.0);
        let p2 = random_pulse_params(2, &cfg).clamp(40.0);
        let (a, b) = field_values(&(p1 + p2), &cfg).unwrap();
        let (a1, b1) = field_values(&p1, &cfg).unwrap();
        let (a2, b2) = field_values(&p2, &cfg).unwrap();
        for m in 0..a.len() {
            assert!((a[m] - a1[m] - a2[m]).abs() < 1e-12);
            assert!((b[m] - b1[m] - b2[m]).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bound_amplitudes_are_rejected() {
        let cfg = PulseShapeConfig::default();
        let mut p = PulseParams::zero();
        p.ay[4] = 100.5;
        assert!(matches!(
            field_values(&p, &cfg),
            Err(Error::AmplitudeOutOfBounds { axis: 'y', index: 5, .. })
        ));
    }

    #[test]
    fn random_params_statistics() {
        let cfg = PulseShapeConfig::default();
        assert_eq!(random_pulse_params(9, &cfg), random_pulse_params(9, &cfg));
        let n = 10_000;
        let mut sums = [0.0; PARAM_COUNT];
        for s in 0..n {
            let p = random_pulse_params(s, &cfg);
            p.check_bounds(cfg.max_amplitude).unwrap();
            for (acc, v) in sums.iter_mut().zip(p.to_array()) {
                *acc += v;
            }
        }
        // uniform on [−a, a] has standard deviation a/√3
        let se = cfg.max_amplitude / 3f64.sqrt() / (n as f64).sqrt();
        for s in sums {
            assert!((s / n as f64).abs() < 3.0 * se);
        }
    }

    #[test]
    fn flat_round_trip() {
        let p = random_pulse_params(3, &PulseShapeConfig::default());
        assert_eq!(PulseParams::from_array(&p.to_array()), p);
    }
}
