//! Pulse design through the trained emulator.
//!
//! Projected Adam ascent on the ten amplitudes maximizes the predicted
//! fidelity of one target gate. Each restart is verified against the Monte
//! Carlo simulator and the best verified restart is returned.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::control::{PulseParams, PulseShapeConfig, PARAM_COUNT};
use crate::dynamics::{gate_fidelities, FidelityEstimate};
use crate::error::{Error, Result};
use crate::greybox::{AdamState, Greybox, GreyboxWeights};
use crate::noise::NoiseSpec;
use crate::qcore::GateTarget;
use crate::{rng, Reduction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    pub gate: String,
    pub restarts: usize,
    pub iterations: usize,
    /// Adam step size at the first iteration (amplitude units).
    pub learning_rate: f64,
    /// Step size at the last iteration; geometric interpolation in between.
    pub final_learning_rate: f64,
    /// Projection box half-width; `None` uses the pulse-shape `A_max`.
    pub bound: Option<f64>,
    pub seed: u64,
    /// Random initial guesses are uniform on `±init_scale · bound`.
    pub init_scale: f64,
    /// Start restart 0 from all-zero amplitudes.
    pub zero_first: bool,
    pub verify_realizations: usize,
    /// Halvings tried before a rejected step is abandoned.
    pub backtrack: usize,
    /// Stop once every gradient component is below this.
    pub grad_tol: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            gate: "Rx90".into(),
            restarts: 8,
            iterations: 300,
            learning_rate: 2.0,
            final_learning_rate: 0.02,
            bound: None,
            seed: 0,
            init_scale: 0.5,
            zero_first: true,
            verify_realizations: 10_000,
            backtrack: 4,
            grad_tol: 1e-9,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self, shape: &PulseShapeConfig) -> Result<()> {
        GateTarget::named(&self.gate)?;
        if self.restarts == 0 {
            return Err(Error::InvalidArgument("restarts must be >= 1".into()));
        }
        if let Some(b) = self.bound {
            if !(b > 0.0 && b <= shape.max_amplitude) {
                return Err(Error::InvalidArgument(format!(
                    "projection bound {b} must lie in (0, A_max = {}]",
                    shape.max_amplitude
                )));
            }
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.init_scale) {
            return Err(Error::InvalidArgument("init_scale must lie in [0, 1]".into()));
        }
        if self.verify_realizations < 2 {
            return Err(Error::InvalidArgument("verification needs at least 2 realizations".into()));
        }
        Ok(())
    }

    pub fn bound_for(&self, shape: &PulseShapeConfig) -> f64 {
        self.bound.unwrap_or(shape.max_amplitude)
    }

    fn step_size(&self, t: usize) -> f64 {
        if self.iterations <= 1 {
            return self.learning_rate;
        }
        let frac = t as f64 / (self.iterations - 1) as f64;
        self.learning_rate * (self.final_learning_rate / self.learning_rate).powf(frac)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub index: usize,
    pub params: PulseParams,
    pub predicted: f64,
    pub verified: f64,
    pub stderr: f64,
    pub iterations: usize,
    /// Best-so-far predicted fidelity after each iteration (index 0 = start).
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub gate: String,
    pub params: PulseParams,
    pub predicted: f64,
    pub verified: f64,
    pub stderr: f64,
    pub best_restart: usize,
    pub restarts: Vec<RestartReport>,
}

impl OptimizationReport {
    /// Per-iteration trace as CSV: `restart,iteration,predicted`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("restart,iteration,predicted\n");
        for r in &self.restarts {
            for (i, f) in r.trace.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", r.index, i, f));
            }
        }
        out
    }
}

/// Simulator fidelities of fixed pulses.
pub fn verify_pulses(
    p: &PulseParams,
    spec: &NoiseSpec,
    shape: &PulseShapeConfig,
    gates: &[GateTarget],
    k: usize,
    seed: u64,
    reduction: Reduction,
) -> Result<FidelityEstimate> {
    gate_fidelities(p, spec, shape, gates, k, seed, reduction)
}

fn project(x: &mut [f64; PARAM_COUNT], bound: f64) {
    for v in x.iter_mut() {
        *v = v.clamp(-bound, bound);
    }
}

struct Ascent {
    x: [f64; PARAM_COUNT],
    f: f64,
    iterations: usize,
    trace: Vec<f64>,
}

fn value_and_gradient(model: &Greybox, w: &GreyboxWeights, gate: usize, x: &[f64; PARAM_COUNT]) -> (f64, [f64; PARAM_COUNT]) {
    let tape = Tape::with_capacity(80_000);
    let xs: [Var; PARAM_COUNT] = x.map(|v| tape.var(v));
    let f = model.forward_pulses(&w.data, &xs, Some(gate))[0];
    let g = tape.gradient(f, &xs);
    (f.value(), std::array::from_fn(|i| g[i]))
}

fn ascend(model: &Greybox, w: &GreyboxWeights, gate: usize, cfg: &OptimizeConfig, bound: f64, start: [f64; PARAM_COUNT]) -> Result<Ascent> {
    let predict = |x: &[f64; PARAM_COUNT]| model.forward_pulses::<f64>(&w.data, x, Some(gate))[0];
    let mut x = start;
    project(&mut x, bound);
    let mut f = predict(&x);
    if !f.is_finite() {
        return Err(Error::NonFiniteLoss { index: 0 });
    }
    let mut trace = vec![f];
    let mut adam = AdamState::new(PARAM_COUNT);
    let mut scale = 1.0;
    let mut iterations = 0;
    for t in 0..cfg.iterations {
        if f >= 1.0 {
            break;
        }
        iterations = t + 1;
        let (fv, grad) = value_and_gradient(model, w, gate, &x);
        if !fv.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { index: t });
        }
        if grad.iter().all(|g| g.abs() < cfg.grad_tol) {
            trace.push(f);
            break;
        }
        let mut proposal = x;
        adam.update(&mut proposal, &grad, cfg.step_size(t) * scale, 0.9, 0.999, 1e-8, 1.0);
        let mut accepted = false;
        for _ in 0..=cfg.backtrack {
            let mut cand = proposal;
            project(&mut cand, bound);
            let fc = predict(&cand);
            if fc.is_finite() && fc >= f {
                x = cand;
                f = fc;
                accepted = true;
                break;
            }
            for i in 0..PARAM_COUNT {
                proposal[i] = x[i] + 0.5 * (proposal[i] - x[i]);
            }
        }
        if !accepted {
            scale *= 0.5;
        }
        trace.push(f);
    }
    Ok(Ascent { x, f, iterations, trace })
}

fn initial_guess(cfg: &OptimizeConfig, restart: usize, bound: f64) -> [f64; PARAM_COUNT] {
    if restart == 0 && cfg.zero_first {
        return [0.0; PARAM_COUNT];
    }
    let mut r = rng::stream(cfg.seed, rng::domain::RESTART, restart as u64);
    let a = cfg.init_scale * bound;
    std::array::from_fn(|_| if a > 0.0 { r.gen_range(-a..=a) } else { 0.0 })
}

/// Optimize pulses for `cfg.gate` through the emulator and verify every
/// restart against the simulator under `spec`.
pub fn optimize_pulses(
    model: &Greybox,
    w: &GreyboxWeights,
    cfg: &OptimizeConfig,
    spec: &NoiseSpec,
    reduction: Reduction,
) -> Result<OptimizationReport> {
    cfg.validate(&model.shape)?;
    let gate = model
        .gates
        .iter()
        .position(|g| g.label == cfg.gate)
        .ok_or_else(|| Error::InvalidArgument(format!("gate {} is not in the model's gate set", cfg.gate)))?;
    let target = [model.gates[gate].clone()];
    let bound = cfg.bound_for(&model.shape);
    let outcomes: Vec<std::result::Result<RestartReport, String>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let a = ascend(model, w, gate, cfg, bound, initial_guess(cfg, r, bound)).map_err(|e| format!("restart {r}: {e}"))?;
            let params = PulseParams::from_array(&a.x);
            let seed = rng::derive(cfg.seed, rng::domain::SAMPLE, r as u64);
            let v = verify_pulses(&params, spec, &model.shape, &target, cfg.verify_realizations, seed, reduction)
                .map_err(|e| format!("restart {r}: {e}"))?;
            Ok(RestartReport {
                index: r,
                params,
                predicted: a.f,
                verified: v.fidelity[0],
                stderr: v.stderr[0],
                iterations: a.iterations,
                trace: a.trace,
            })
        })
        .collect();
    let mut restarts = Vec::new();
    let mut diagnostics = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => restarts.push(r),
            Err(d) => diagnostics.push(d),
        }
    }
    let best = restarts
        .iter()
        .max_by(|a, b| a.verified.total_cmp(&b.verified).then(b.index.cmp(&a.index)))
        .cloned()
        .ok_or(Error::OptimizationFailed {
            restarts: cfg.restarts,
            diagnostics: diagnostics.join("; "),
        })?;
    Ok(OptimizationReport {
        gate: cfg.gate.clone(),
        params: best.params,
        predicted: best.predicted,
        verified: best.verified,
        stderr: best.stderr,
        best_restart: best.index,
        restarts,
    })
}
