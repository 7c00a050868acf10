//! Classical dephasing noise: random telegraph (RTN) and Ornstein-Uhlenbeck
//! (OU) trajectories, both with unit variance and autocorrelation
//! `exp(−2γ|τ|)`, i.e. power spectrum `4γ/(4γ² + ω²)`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::Welford;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Rtn,
    Ou,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::Rtn => "rtn",
            NoiseKind::Ou => "ou",
        })
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rtn" => Ok(NoiseKind::Rtn),
            "ou" => Ok(NoiseKind::Ou),
            other => Err(Error::InvalidArgument(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Noise process and its coupling to the qubit (`H_noise = g β(t) σz`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Switching rate (RTN) or inverse correlation scale (OU).
    pub gamma: f64,
    /// Coupling strength.
    pub g: f64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, gamma: f64, g: f64) -> Result<Self> {
        let spec = NoiseSpec { kind, gamma, g };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.g >= 0.0 && self.g.is_finite()) {
            return Err(Error::InvalidArgument(format!("g must be >= 0, got {}", self.g)));
        }
        Ok(())
    }

    pub fn sample(&self, grid: &TimeGrid, seed: u64) -> Trajectory {
        match self.kind {
            NoiseKind::Rtn => sample_rtn(self.gamma, grid, seed),
            NoiseKind::Ou => sample_ou(self.gamma, grid, seed),
        }
    }
}

/// Uniform grid of `steps` intervals over `[0, total_time]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub total_time: f64,
    pub steps: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid {
            total_time: 1.0,
            steps: 1024,
        }
    }
}

impl TimeGrid {
    pub fn new(total_time: f64, steps: usize) -> Result<Self> {
        let grid = TimeGrid { total_time, steps };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::InvalidArgument(format!("grid needs >= 2 steps, got {}", self.steps)));
        }
        if !(self.total_time > 0.0 && self.total_time.is_finite()) {
            return Err(Error::InvalidArgument(format!("total time must be > 0, got {}", self.total_time)));
        }
        Ok(())
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.total_time / self.steps as f64
    }

    /// Midpoint of step `m`, `(m + ½)·dt`.
    #[inline]
    pub fn midpoint(&self, m: usize) -> f64 {
        (m as f64 + 0.5) * self.dt()
    }
}

/// One noise realization sampled at step midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub values: Vec<f64>,
    pub dt: f64,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// RTN path with exponential waiting times; also returns the number of
/// switches in `[0, T]`.
pub fn sample_rtn_counted(gamma: f64, grid: &TimeGrid, seed: u64) -> (Trajectory, usize) {
    let mut rng = rng::stream(seed, rng::domain::NOISE, 0);
    let wait = Exp::new(gamma).expect("gamma > 0");
    let mut value = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let mut next_switch: f64 = wait.sample(&mut rng);
    let mut switches = 0;
    let mut values = Vec::with_capacity(grid.steps);
    for m in 0..grid.steps {
        let t = grid.midpoint(m);
        while next_switch < t {
            value = -value;
            switches += 1;
            next_switch += wait.sample(&mut rng);
        }
        values.push(value);
    }
    while next_switch < grid.total_time {
        switches += 1;
        next_switch += wait.sample(&mut rng);
    }
    (
        Trajectory {
            values,
            dt: grid.dt(),
            seed,
        },
        switches,
    )
}

pub fn sample_rtn(gamma: f64, grid: &TimeGrid, seed: u64) -> Trajectory {
    sample_rtn_counted(gamma, grid, seed).0
}

/// Exact AR(1) discretization of the unit-variance OU process.
pub fn sample_ou(gamma: f64, grid: &TimeGrid, seed: u64) -> Trajectory {
    let mut rng = rng::stream(seed, rng::domain::NOISE, 0);
    let dt = grid.dt();
    let decay = (-2.0 * gamma * dt).exp();
    let kick = (-(-4.0 * gamma * dt).exp_m1()).sqrt();
    let mut values = Vec::with_capacity(grid.steps);
    let mut beta: f64 = rng.sample(StandardNormal);
    values.push(beta);
    for _ in 1..grid.steps {
        let xi: f64 = rng.sample(StandardNormal);
        beta = beta * decay + kick * xi;
        values.push(beta);
    }
    Trajectory { values, dt, seed }
}

/// Power spectrum shared by both processes, `4γ/(4γ² + ω²)`.
pub fn lorentzian(gamma: f64, omega: f64) -> f64 {
    4.0 * gamma / (4.0 * gamma * gamma + omega * omega)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcfTable {
    pub lag: Vec<f64>,
    pub acf: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsdTable {
    pub omega: Vec<f64>,
    pub psd: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum PsdMethod {
    /// Trajectory-averaged periodogram at the record's Fourier frequencies.
    Periodogram,
    /// Autoregressive (maximum-entropy) spectrum fitted to the ensemble
    /// autocorrelation, evaluated on `points` frequencies up to `omega_max`.
    MaxEntropy { order: usize, omega_max: f64, points: usize },
}

fn check_grid(trajs: &[Trajectory]) -> Result<(usize, f64)> {
    if trajs.len() < 2 {
        return Err(Error::InvalidArgument(format!("need >= 2 trajectories, got {}", trajs.len())));
    }
    let n = trajs[0].len();
    let dt = trajs[0].dt;
    for t in trajs {
        if t.len() != n {
            return Err(Error::GridMismatch {
                expected: n,
                found: t.len(),
            });
        }
        if (t.dt - dt).abs() > 1e-12 * dt {
            return Err(Error::InvalidArgument(format!("trajectory dt {} differs from {}", t.dt, dt)));
        }
    }
    Ok((n, dt))
}

/// Per-trajectory lag sums `Σ_m β_m β_{m+k}` for `k < n`, via zero-padded FFT.
struct LagSums {
    n: usize,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    ifft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    buf: Vec<Complex64>,
}

impl LagSums {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let len = 2 * n;
        LagSums {
            n,
            fft: planner.plan_fft_forward(len),
            ifft: planner.plan_fft_inverse(len),
            buf: vec![Complex64::new(0.0, 0.0); len],
        }
    }

    fn compute(&mut self, values: &[f64], out: &mut [f64]) {
        let len = 2 * self.n;
        for (b, v) in self.buf.iter_mut().zip(values.iter().chain(std::iter::repeat(&0.0))) {
            *b = Complex64::new(*v, 0.0);
        }
        self.fft.process(&mut self.buf);
        for b in self.buf.iter_mut() {
            *b = Complex64::new(b.norm_sqr(), 0.0);
        }
        self.ifft.process(&mut self.buf);
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.buf[k].re / len as f64;
        }
    }
}

/// Unbiased ensemble + time average of `⟨β(t)β(t+τ)⟩` for lags `0..=max_lag`.
///
/// Standard errors treat each trajectory's time-average as one independent
/// observation.
pub fn estimate_autocorrelation(trajs: &[Trajectory], max_lag: f64) -> Result<AcfTable> {
    let (n, dt) = check_grid(trajs)?;
    let kmax = ((max_lag / dt).round() as usize).min(n - 1);
    let mut sums = LagSums::new(n);
    let mut lag_buf = vec![0.0; n];
    let mut acc = vec![Welford::default(); kmax + 1];
    for t in trajs {
        sums.compute(&t.values, &mut lag_buf);
        for k in 0..=kmax {
            acc[k].push(lag_buf[k] / (n - k) as f64);
        }
    }
    Ok(AcfTable {
        lag: (0..=kmax).map(|k| k as f64 * dt).collect(),
        acf: acc.iter().map(|w| w.mean).collect(),
        stderr: acc.iter().map(|w| w.std_err()).collect(),
    })
}

/// Biased ensemble autocorrelation `(1/(N·M)) Σ_n Σ_m β_m β_{m+k}` for all lags.
pub fn ensemble_biased_acf(trajs: &[Trajectory]) -> Result<Vec<f64>> {
    let (n, _) = check_grid(trajs)?;
    let mut sums = LagSums::new(n);
    let mut lag_buf = vec![0.0; n];
    let mut total = vec![0.0; n];
    for t in trajs {
        sums.compute(&t.values, &mut lag_buf);
        for (acc, v) in total.iter_mut().zip(&lag_buf) {
            *acc += v;
        }
    }
    let norm = (trajs.len() * n) as f64;
    Ok(total.into_iter().map(|v| v / norm).collect())
}

/// One-sided power spectrum normalized as the Fourier transform of the
/// autocorrelation, `S(ω) = ∫ C(τ) e^{iωτ} dτ`.
pub fn estimate_psd(trajs: &[Trajectory], method: PsdMethod) -> Result<PsdTable> {
    match method {
        PsdMethod::Periodogram => periodogram(trajs),
        PsdMethod::MaxEntropy {
            order,
            omega_max,
            points,
        } => max_entropy_psd(trajs, order, omega_max, points),
    }
}

fn periodogram(trajs: &[Trajectory]) -> Result<PsdTable> {
    let (n, dt) = check_grid(trajs)?;
    let total_time = n as f64 * dt;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let bins = n / 2 + 1;
    let mut acc = vec![Welford::default(); bins];
    for t in trajs {
        for (b, v) in buf.iter_mut().zip(&t.values) {
            *b = Complex64::new(*v, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            acc[k].push(buf[k].norm_sqr() * dt * dt / total_time);
        }
    }
    Ok(PsdTable {
        omega: (0..bins).map(|k| 2.0 * std::f64::consts::PI * k as f64 / total_time).collect(),
        psd: acc.iter().map(|w| w.mean).collect(),
        stderr: acc.iter().map(|w| w.std_err()).collect(),
    })
}

/// Levinson-Durbin recursion: AR coefficients `a[1..=p]` and innovation
/// variance for autocovariances `r[0..=p]`.
pub fn levinson_durbin(r: &[f64], order: usize) -> Result<(Vec<f64>, f64)> {
    if r.len() <= order || r[0] <= 0.0 {
        return Err(Error::InvalidArgument("autocovariance too short or non-positive".into()));
    }
    let mut a = vec![0.0; order + 1];
    let mut err = r[0];
    for k in 1..=order {
        let mut acc = r[k];
        for j in 1..k {
            acc -= a[j] * r[k - j];
        }
        let refl = acc / err;
        let prev = a.clone();
        a[k] = refl;
        for j in 1..k {
            a[j] = prev[j] - refl * prev[k - j];
        }
        err *= 1.0 - refl * refl;
        if err <= 0.0 {
            return Err(Error::InvalidArgument("autocovariance is not positive definite".into()));
        }
    }
    Ok((a[1..].to_vec(), err))
}

fn ar_spectrum(coeffs: &[f64], innovation: f64, dt: f64, omega: f64) -> f64 {
    let mut re = 1.0;
    let mut im = 0.0;
    for (k, a) in coeffs.iter().enumerate() {
        let phase = omega * dt * (k + 1) as f64;
        re -= a * phase.cos();
        im += a * phase.sin();
    }
    dt * innovation / (re * re + im * im)
}

fn max_entropy_psd(trajs: &[Trajectory], order: usize, omega_max: f64, points: usize) -> Result<PsdTable> {
    let (n, dt) = check_grid(trajs)?;
    if order == 0 || order >= n || points < 2 {
        return Err(Error::InvalidArgument(format!("bad AR order {order} or point count {points}")));
    }
    let omega: Vec<f64> = (0..points).map(|i| omega_max * i as f64 / (points - 1) as f64).collect();
    let spectrum = |set: &[Trajectory]| -> Result<Vec<f64>> {
        // The (1 − k/N) taper of the biased estimator is comparable to
        // 1 − C(dt) on fine grids, which would wreck the low-frequency fit.
        let r: Vec<f64> = ensemble_biased_acf(set)?
            .iter()
            .take(order + 1)
            .enumerate()
            .map(|(k, v)| v * n as f64 / (n - k) as f64)
            .collect();
        let (a, s2) = levinson_durbin(&r, order)?;
        Ok(omega.iter().map(|w| ar_spectrum(&a, s2, dt, *w)).collect())
    };
    let psd = spectrum(trajs)?;
    // batch-means standard error
    let batches = 10.min(trajs.len() / 2).max(2);
    let size = trajs.len() / batches;
    let mut acc = vec![Welford::default(); points];
    for b in 0..batches {
        let part = spectrum(&trajs[b * size..(b + 1) * size])?;
        for (w, v) in acc.iter_mut().zip(part) {
            w.push(v);
        }
    }
    Ok(PsdTable {
        omega,
        psd,
        stderr: acc.iter().map(|w| w.std_err()).collect(),
    })
}

/// Generate `count` trajectories with seeds derived from `master`.
pub fn ensemble(spec: &NoiseSpec, grid: &TimeGrid, count: usize, master: u64) -> Vec<Trajectory> {
    (0..count as u64)
        .map(|i| spec.sample(grid, rng::derive(master, rng::domain::NOISE, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::default()
    }

    #[test]
    fn rtn_values_are_signs_and_deterministic() {
        let a = sample_rtn(3.0, &grid(), 11);
        let b = sample_rtn(3.0, &grid(), 11);
        assert_eq!(a, b);
        assert!(a.values.iter().all(|v| *v == 1.0 || *v == -1.0));
        let c = sample_ou(3.0, &grid(), 11);
        assert_eq!(c, sample_ou(3.0, &grid(), 11));
        assert!(c.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rtn_without_switching_is_constant() {
        for seed in 0..20 {
            let t = sample_rtn(1e-12, &grid(), seed);
            assert!(t.values.iter().all(|v| *v == t.values[0]));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(NoiseSpec::new(NoiseKind::Ou, 0.0, 1.0).is_err());
        assert!(NoiseSpec::new(NoiseKind::Rtn, 1.0, -0.1).is_err());
        assert!(TimeGrid::new(1.0, 1).is_err());
    }

    #[test]
    fn ou_one_step_conditional_mean() {
        // regress β_{m+1} on β_m across an ensemble: slope = e^{−2γdt}
        let g = TimeGrid::new(1.0, 64).unwrap();
        let gamma = 4.0;
        let trajs = ensemble(&NoiseSpec::new(NoiseKind::Ou, gamma, 1.0).unwrap(), &g, 4000, 5);
        let (mut sxy, mut sxx) = (0.0, 0.0);
        let mut resid = Welford::default();
        for t in &trajs {
            for w in t.values.windows(2) {
                sxy += w[0] * w[1];
                sxx += w[0] * w[0];
            }
        }
        let slope = sxy / sxx;
        let want = (-2.0 * gamma * g.dt()).exp();
        for t in &trajs {
            for w in t.values.windows(2) {
                resid.push(w[1] - want * w[0]);
            }
        }
        let se = resid.variance().sqrt() / sxx.sqrt();
        assert!((slope - want).abs() < 4.0 * se, "slope {slope} want {want} se {se}");
    }

    #[test]
    fn constant_trajectories_have_unit_acf() {
        let trajs: Vec<Trajectory> = (0..3)
            .map(|s| Trajectory {
                values: vec![1.0; 128],
                dt: 1.0 / 128.0,
                seed: s,
            })
            .collect();
        let acf = estimate_autocorrelation(&trajs, 0.5).unwrap();
        assert_eq!(acf.lag.len(), 65);
        assert!(acf.acf.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn mismatched_grids_fail() {
        let a = sample_ou(1.0, &TimeGrid::new(1.0, 64).unwrap(), 1);
        let b = sample_ou(1.0, &TimeGrid::new(1.0, 32).unwrap(), 2);
        let both = vec![a, b];
        assert!(matches!(estimate_autocorrelation(&both, 0.1), Err(Error::GridMismatch { .. })));
        assert!(matches!(estimate_psd(&both, PsdMethod::Periodogram), Err(Error::GridMismatch { .. })));
        assert!(estimate_autocorrelation(&both[..1], 0.1).is_err());
    }

    #[test]
    fn white_noise_periodogram_is_flat() {
        let (n, dt) = (256, 1.0 / 256.0);
        let trajs: Vec<Trajectory> = (0..2000u64)
            .map(|s| {
                let mut r = rng::stream(s, 99, 0);
                Trajectory {
                    values: (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect(),
                    dt,
                    seed: s,
                }
            })
            .collect();
        let psd = estimate_psd(&trajs, PsdMethod::Periodogram).unwrap();
        // white noise of unit variance sampled at dt has flat density dt
        for (k, (p, se)) in psd.psd.iter().zip(&psd.stderr).enumerate().skip(1) {
            assert!((p - dt).abs() < 5.0 * se, "bin {k}: {p} vs {dt} ± {se}");
        }
    }

    #[test]
    fn periodogram_is_the_transform_of_the_biased_acf() {
        let g = TimeGrid::new(1.0, 128).unwrap();
        let trajs = ensemble(&NoiseSpec::new(NoiseKind::Rtn, 2.0, 1.0).unwrap(), &g, 50, 3);
        let psd = estimate_psd(&trajs, PsdMethod::Periodogram).unwrap();
        let r = ensemble_biased_acf(&trajs).unwrap();
        let dt = g.dt();
        for (w, p) in psd.omega.iter().zip(&psd.psd) {
            let mut s = r[0];
            for (k, c) in r.iter().enumerate().skip(1) {
                s += 2.0 * c * (w * k as f64 * dt).cos();
            }
            assert!((s * dt - p).abs() < 1e-12 * (1.0 + p.abs()), "ω={w}");
        }
    }

    #[test]
    fn levinson_recovers_ar1() {
        let phi: f64 = 0.9;
        let r: Vec<f64> = (0..4).map(|k| phi.powi(k)).collect();
        let (a, s2) = levinson_durbin(&r, 3).unwrap();
        assert!((a[0] - phi).abs() < 1e-14 && a[1].abs() < 1e-14 && a[2].abs() < 1e-14);
        assert!((s2 - (1.0 - phi * phi)).abs() < 1e-14);
    }
}
