//! Ground-truth stochastic Schrödinger Monte Carlo.
//!
//! Each realization draws one noise trajectory, propagates
//! `H(t) = f_x σx + f_y σy + g β(t) σz` with piecewise-constant SU(2) steps,
//! and records all 18 tomography expectations. The same realizations serve
//! every tomography cell.

use rayon::prelude::*;

use crate::control::{fields_with_basis, PulseParams, PulseShapeConfig};
use crate::error::{Error, Result};
use crate::noise::{NoiseSpec, Trajectory};
use crate::qcore::{
    avg_gate_fidelity, expectation, pauli, Axis, DensityMatrix, Expectations, GateTarget, Operator2,
    PauliTransferMatrix, Su2, TomoState,
};
use crate::rng;
use crate::stats::Welford;
use crate::Reduction;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealizationResult {
    pub unitary: Operator2,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: Expectations,
    pub stderr: Expectations,
    pub realizations: usize,
}

/// Fidelity per target gate with Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityEstimate {
    pub fidelity: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloRun {
    pub expectations: MonteCarloEstimate,
    pub ptm: PauliTransferMatrix,
    pub fidelities: FidelityEstimate,
}

/// Time-ordered product of SU(2) steps.
pub fn propagate(fx: &[f64], fy: &[f64], hz: impl Iterator<Item = f64>, dt: f64) -> Su2 {
    let mut u = Su2::IDENTITY;
    for ((x, y), z) in fx.iter().zip(fy).zip(hz) {
        u = Su2::step(*x, *y, z, dt) * u;
    }
    u.normalized()
}

pub fn simulate_realization(
    p: &PulseParams,
    traj: &Trajectory,
    spec: &NoiseSpec,
    cfg: &PulseShapeConfig,
) -> Result<RealizationResult> {
    let steps = cfg.grid.steps;
    if traj.len() != steps {
        return Err(Error::GridMismatch {
            expected: steps,
            found: traj.len(),
        });
    }
    p.check_bounds(cfg.max_amplitude)?;
    let (fx, fy) = fields_with_basis(p, &cfg.basis());
    let g = spec.g;
    let u = propagate(&fx, &fy, traj.values.iter().map(|b| g * b), cfg.grid.dt());
    Ok(RealizationResult {
        unitary: u.to_operator(),
        seed: traj.seed,
    })
}

/// Noise-free control propagator.
pub fn noiseless_unitary(p: &PulseParams, cfg: &PulseShapeConfig) -> Result<Operator2> {
    p.check_bounds(cfg.max_amplitude)?;
    let (fx, fy) = fields_with_basis(p, &cfg.basis());
    Ok(propagate(&fx, &fy, std::iter::repeat(0.0), cfg.grid.dt()).to_operator())
}

/// All 18 cells via [`expectation`].
pub fn tomography_expectations(u: &Operator2) -> Result<Expectations> {
    let obs = Axis::XYZ.map(pauli);
    let mut e = [[0.0; 3]; 6];
    for (s, state) in TomoState::ALL.iter().enumerate() {
        let rho = DensityMatrix::tomography(*state);
        for (o, op) in obs.iter().enumerate() {
            e[s][o] = expectation(&rho, u, op)?;
        }
    }
    Ok(e)
}

/// Per-realization observables: 18 expectations followed by one fidelity per gate.
fn realization_row(u: &Operator2, gates: &[GateTarget]) -> Result<Vec<f64>> {
    let e = tomography_expectations(u)?;
    let ptm = PauliTransferMatrix::from_expectations(&e);
    let mut row: Vec<f64> = e.iter().flatten().copied().collect();
    row.extend(gates.iter().map(|g| avg_gate_fidelity(&ptm, g)));
    Ok(row)
}

fn accumulate(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Vec<Welford> {
    let mut acc = vec![Welford::default(); width];
    for row in rows {
        for (w, v) in acc.iter_mut().zip(row) {
            w.push(v);
        }
    }
    acc
}

/// Full Monte Carlo: expectations, reconstructed channel and gate fidelities
/// from one set of `k` realizations seeded by `seed`.
pub fn run_monte_carlo(
    p: &PulseParams,
    spec: &NoiseSpec,
    cfg: &PulseShapeConfig,
    gates: &[GateTarget],
    k: usize,
    seed: u64,
    reduction: Reduction,
) -> Result<MonteCarloRun> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need K >= 2 realizations, got {k}")));
    }
    spec.validate()?;
    p.check_bounds(cfg.max_amplitude)?;
    let (fx, fy) = fields_with_basis(p, &cfg.basis());
    let dt = cfg.grid.dt();
    let width = 18 + gates.len();

    let acc = if spec.g == 0.0 {
        // every realization produces the same unitary
        let u = propagate(&fx, &fy, std::iter::repeat(0.0), dt).to_operator();
        let row = realization_row(&u, gates)?;
        accumulate(std::iter::repeat_n(row, k), width)
    } else {
        let one = |i: usize| -> Result<Vec<f64>> {
            let traj = spec.sample(&cfg.grid, rng::derive(seed, rng::domain::NOISE, i as u64));
            let u = propagate(&fx, &fy, traj.values.iter().map(|b| spec.g * b), dt).to_operator();
            realization_row(&u, gates)
        };
        match reduction {
            Reduction::Sequential => {
                let rows: Vec<Vec<f64>> = (0..k).into_par_iter().map(one).collect::<Result<_>>()?;
                accumulate(rows.into_iter(), width)
            }
            Reduction::Parallel => (0..k)
                .into_par_iter()
                .map(|i| one(i).map(|row| accumulate(std::iter::once(row), width)))
                .try_reduce(
                    || vec![Welford::default(); width],
                    |a, b| Ok(a.iter().zip(&b).map(|(x, y)| x.merge(y)).collect()),
                )?,
        }
    };

    let mut mean = [[0.0; 3]; 6];
    let mut stderr = [[0.0; 3]; 6];
    for s in 0..6 {
        for o in 0..3 {
            mean[s][o] = acc[3 * s + o].mean;
            stderr[s][o] = acc[3 * s + o].std_err();
        }
    }
    let ptm = PauliTransferMatrix::from_expectations(&mean);
    let fids = &acc[18..];
    Ok(MonteCarloRun {
        expectations: MonteCarloEstimate {
            mean,
            stderr,
            realizations: k,
        },
        ptm,
        fidelities: FidelityEstimate {
            fidelity: fids.iter().map(|w| w.mean.clamp(0.0, 1.0)).collect(),
            stderr: fids.iter().map(|w| w.std_err()).collect(),
        },
    })
}

pub fn monte_carlo_expectations(
    p: &PulseParams,
    spec: &NoiseSpec,
    cfg: &PulseShapeConfig,
    k: usize,
    seed: u64,
    reduction: Reduction,
) -> Result<MonteCarloEstimate> {
    Ok(run_monte_carlo(p, spec, cfg, &[], k, seed, reduction)?.expectations)
}

pub fn simulate_channel(
    p: &PulseParams,
    spec: &NoiseSpec,
    cfg: &PulseShapeConfig,
    k: usize,
    seed: u64,
    reduction: Reduction,
) -> Result<PauliTransferMatrix> {
    Ok(run_monte_carlo(p, spec, cfg, &[], k, seed, reduction)?.ptm)
}

/// Average gate fidelity of the Monte Carlo channel against each target.
///
/// Fidelity is linear in the channel, so the estimate equals the mean of the
/// per-realization fidelities; its standard error comes from their spread.
pub fn gate_fidelities(
    p: &PulseParams,
    spec: &NoiseSpec,
    cfg: &PulseShapeConfig,
    gates: &[GateTarget],
    k: usize,
    seed: u64,
    reduction: Reduction,
) -> Result<FidelityEstimate> {
    Ok(run_monte_carlo(p, spec, cfg, gates, k, seed, reduction)?.fidelities)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::random_pulse_params;
    use crate::noise::{sample_ou, NoiseKind, TimeGrid};
    use crate::qcore::{default_gate_set, exact_expectations};

    fn cfg() -> PulseShapeConfig {
        PulseShapeConfig::default()
    }

    #[test]
    fn zero_pulses_without_noise_give_identity() {
        let c = cfg();
        let spec = NoiseSpec::new(NoiseKind::Ou, 1.0, 0.0).unwrap();
        let traj = sample_ou(1.0, &c.grid, 4);
        let r = simulate_realization(&PulseParams::zero(), &traj, &spec, &c).unwrap();
        assert_eq!(r.unitary, Operator2::identity());
    }

    #[test]
    fn zero_pulses_give_diagonal_unitary() {
        let c = cfg();
        let spec = NoiseSpec::new(NoiseKind::Ou, 1.0, 3.0).unwrap();
        let traj = sample_ou(1.0, &c.grid, 4);
        let u = simulate_realization(&PulseParams::zero(), &traj, &spec, &c).unwrap().unitary;
        assert_eq!(u.m[0][1].norm(), 0.0);
        assert_eq!(u.m[1][0].norm(), 0.0);
        assert!(u.is_unitary(1e-12));
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let c = cfg();
        let spec = NoiseSpec::new(NoiseKind::Ou, 1.0, 1.0).unwrap();
        let traj = sample_ou(1.0, &TimeGrid::new(1.0, 100).unwrap(), 4);
        assert!(matches!(
            simulate_realization(&PulseParams::zero(), &traj, &spec, &c),
            Err(Error::GridMismatch { expected: 1024, found: 100 })
        ));
    }

    #[test]
    fn wide_constant_pulse_is_sqrt_x() {
        // one very wide pulse ≈ constant π/(4T) field: exp(−iπσx/4)
        let mut c = cfg();
        c.width = 1e6;
        let mut p = PulseParams::zero();
        p.ax[0] = std::f64::consts::PI / 4.0;
        let u = noiseless_unitary(&p, &c).unwrap();
        let target = GateTarget::named("Rx90").unwrap();
        let f = avg_gate_fidelity(&PauliTransferMatrix::from_unitary(&u), &target);
        assert!(f > 0.9999, "{f}");
    }

    #[test]
    fn noiseless_monte_carlo_is_exact() {
        let c = cfg();
        let p = random_pulse_params(2, &c);
        let spec = NoiseSpec::new(NoiseKind::Rtn, 1.0, 0.0).unwrap();
        let est = monte_carlo_expectations(&p, &spec, &c, 16, 1, Reduction::Sequential).unwrap();
        let want = exact_expectations(&noiseless_unitary(&p, &c).unwrap());
        for s in 0..6 {
            for o in 0..3 {
                assert!((est.mean[s][o] - want[s][o]).abs() < 1e-12);
                assert_eq!(est.stderr[s][o], 0.0);
            }
        }
    }

    #[test]
    fn dephasing_preserves_populations() {
        let c = cfg();
        for kind in [NoiseKind::Rtn, NoiseKind::Ou] {
            let spec = NoiseSpec::new(kind, 1.0, 2.0).unwrap();
            let est = monte_carlo_expectations(&PulseParams::zero(), &spec, &c, 50, 3, Reduction::Sequential).unwrap();
            assert!((est.mean[4][2] - 1.0).abs() < 1e-15);
            assert!((est.mean[5][2] + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn noiseless_fidelities() {
        let c = cfg();
        let spec = NoiseSpec::new(NoiseKind::Ou, 1.0, 0.0).unwrap();
        let gates = default_gate_set();
        let f = gate_fidelities(&PulseParams::zero(), &spec, &c, &gates, 4, 0, Reduction::Sequential).unwrap();
        assert!((f.fidelity[0] - 1.0).abs() < 1e-15);
        assert!((f.fidelity[3] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reductions_agree_and_are_reproducible() {
        let c = cfg();
        let p = random_pulse_params(5, &c).clamp(30.0);
        let spec = NoiseSpec::new(NoiseKind::Rtn, 1.0, 1.0).unwrap();
        let gates = default_gate_set();
        let a = run_monte_carlo(&p, &spec, &c, &gates, 200, 9, Reduction::Sequential).unwrap();
        let b = run_monte_carlo(&p, &spec, &c, &gates, 200, 9, Reduction::Sequential).unwrap();
        assert_eq!(a, b);
        let par = run_monte_carlo(&p, &spec, &c, &gates, 200, 9, Reduction::Parallel).unwrap();
        for (x, y) in a.fidelities.fidelity.iter().zip(&par.fidelities.fidelity) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fidelity_equals_fidelity_of_mean_channel() {
        let c = cfg();
        let p = random_pulse_params(8, &c).clamp(25.0);
        let spec = NoiseSpec::new(NoiseKind::Ou, 1.0, 1.5).unwrap();
        let gates = default_gate_set();
        let run = run_monte_carlo(&p, &spec, &c, &gates, 300, 2, Reduction::Sequential).unwrap();
        for (g, f) in gates.iter().zip(&run.fidelities.fidelity) {
            assert!((avg_gate_fidelity(&run.ptm, g) - f).abs() < 1e-12);
        }
    }
}
