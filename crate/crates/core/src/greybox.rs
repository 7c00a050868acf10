//! The hybrid model.
//!
//! A small transformer encoder reads the ten pulse amplitudes as five
//! `(A_x,k, A_y,k)` tokens and predicts, for each observable O ∈ {X, Y, Z}, a
//! Hermitian operator `V_O`. Fixed quantum layers then evaluate the control
//! propagator `U_c`, the 18 tomography expectations
//! `Re Tr(ρ U_c† O V_O U_c)`, a bounded residual refinement, the PTM and the
//! average gate fidelities. Only the encoder, the noise head and the
//! refinement head carry weights.
//!
//! All layers are generic over [`Scalar`], so the same code gives plain
//! inference (`f64`) and reverse-mode gradients ([`Var`]).

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot_const, Cx, Quat, Scalar, Tape, Var, M2};
use crate::encoder::{BlockIndex, EncoderCache, EncoderDims, EncoderIndex};
use crate::control::{PulseParams, PulseShapeConfig, PARAM_COUNT, PULSES_PER_AXIS};
use crate::dataset::Sample;
use crate::dynamics::noiseless_unitary;
use crate::error::{Error, Result};
use crate::qcore::{gate_set, pauli, Axis, DensityMatrix, GateTarget, Operator2, TomoState};
use crate::rng;

pub const NOISE_PARAMS: usize = 15;
pub const CHECKPOINT_VERSION: u32 = 1;
/// Reference loss below which the divergence check stops scaling; a model that
/// starts at the exact answer would otherwise abort on rounding noise.
const DIVERGENCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One refinement head shared by all gates.
    Shared,
    /// One refinement head per target gate.
    PerGate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GreyboxConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub refine_hidden: usize,
    pub head_mode: HeadMode,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_seed: u64,
    /// Standard deviation of the noise-head weights at initialization.
    pub noise_head_init: f64,
}

impl Default for GreyboxConfig {
    fn default() -> Self {
        GreyboxConfig {
            embed_dim: 16,
            layers: 2,
            heads: 2,
            ff_dim: 32,
            refine_hidden: 32,
            head_mode: HeadMode::Shared,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 200,
            init_seed: 0,
            noise_head_init: 1e-7,
        }
    }
}

impl GreyboxConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.embed_dim, self.heads, self.ff_dim, self.refine_hidden, self.batch_size];
        if widths.contains(&0) {
            return Err(Error::InvalidArgument("all widths, head count and batch size must be >= 1".into()));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "embedding width {} not divisible by head count {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.learning_rate > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::InvalidArgument("bad Adam hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered tensor table; the order is the serialization order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &GreyboxConfig, gates: usize) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec { name, shape, offset: total };
            total += spec.len();
            tensors.push(spec);
        };
        let (e, f) = (cfg.embed_dim, cfg.ff_dim);
        add("embed.w".into(), vec![e, 2]);
        add("embed.b".into(), vec![e]);
        add("embed.pos".into(), vec![PULSES_PER_AXIS, e]);
        for l in 0..cfg.layers {
            let p = format!("enc{l}");
            add(format!("{p}.ln1.g"), vec![e]);
            add(format!("{p}.ln1.b"), vec![e]);
            for m in ["q", "k", "v", "o"] {
                add(format!("{p}.attn.w{m}"), vec![e, e]);
                add(format!("{p}.attn.b{m}"), vec![e]);
            }
            add(format!("{p}.ln2.g"), vec![e]);
            add(format!("{p}.ln2.b"), vec![e]);
            add(format!("{p}.ff.w1"), vec![f, e]);
            add(format!("{p}.ff.b1"), vec![f]);
            add(format!("{p}.ff.w2"), vec![e, f]);
            add(format!("{p}.ff.b2"), vec![e]);
        }
        add("final_ln.g".into(), vec![e]);
        add("final_ln.b".into(), vec![e]);
        add("noise.w".into(), vec![NOISE_PARAMS, e]);
        add("noise.b".into(), vec![NOISE_PARAMS]);
        let heads = match cfg.head_mode {
            HeadMode::Shared => 1,
            HeadMode::PerGate => gates,
        };
        for h in 0..heads {
            add(format!("refine{h}.w1"), vec![cfg.refine_hidden, 18]);
            add(format!("refine{h}.b1"), vec![cfg.refine_hidden]);
            add(format!("refine{h}.w2"), vec![18, cfg.refine_hidden]);
            add(format!("refine{h}.b2"), vec![18]);
        }
        Layout { tensors, total }
    }

    pub fn get(&self, name: &str) -> &TensorSpec {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("no tensor {name}"))
    }
}

/// Flat trainable parameters in [`Layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GreyboxWeights {
    pub data: Vec<f64>,
}

impl GreyboxWeights {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Noise parameters per observable: Euler angles (3) then eigenvalue
/// pre-activations (2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseOperatorParams(pub [f64; NOISE_PARAMS]);

/// Pulse inputs with the weight-independent whitebox work done up front.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    pub tokens: [f64; PARAM_COUNT],
    /// `U_c ρ_s U_c†` for the six tomography states.
    pub states: [Operator2; 6],
}

/// Named view into a flat parameter slice.
struct View<'a, S> {
    layout: &'a Layout,
    w: &'a [S],
}

impl<'a, S: Scalar> View<'a, S> {
    fn t(&self, name: &str) -> &'a [S] {
        let spec = self.layout.get(name);
        &self.w[spec.offset..spec.offset + spec.len()]
    }
}

/// `W x + b` for row-major `W` of shape `[out, x.len()]`.
fn affine<S: Scalar>(w: &[S], b: &[S], x: &[S]) -> Vec<S> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(o, bias)| {
            S::dot(&w[o * n..(o + 1) * n], x, *bias)
        })
        .collect()
}

/// Rz(a)·Ry(b)·Rz(c) with `R(θ) = exp(−iθσ/2)`.
fn euler_unitary<S: Scalar>(a: S, b: S, c: S) -> M2<S> {
    let rz = |t: S| Quat {
        a: (t * 0.5).cos(),
        b: S::zero(),
        c: S::zero(),
        d: (t * 0.5).sin(),
    };
    let ry = |t: S| Quat {
        a: (t * 0.5).cos(),
        b: S::zero(),
        c: (t * 0.5).sin(),
        d: S::zero(),
    };
    rz(a).compose(ry(b)).compose(rz(c)).to_m2()
}

/// Eigenvalue squash: `1 − 2 tanh²(d)` maps ℝ onto (−1, 1] with 0 ↦ 1.
fn squash_eigenvalue<S: Scalar>(d: S) -> S {
    let t = d.tanh();
    S::cst(1.0) - t * t * 2.0
}

/// `V_O = Q diag(λ₁, λ₂) Q†` for each observable.
pub fn decode_noise_operators_generic<S: Scalar>(np: &[S]) -> [M2<S>; 3] {
    std::array::from_fn(|o| {
        let p = &np[5 * o..5 * o + 5];
        let q = euler_unitary(p[0], p[1], p[2]);
        let (l1, l2) = (squash_eigenvalue(p[3]), squash_eigenvalue(p[4]));
        let zero = Cx::real(S::zero());
        let d = M2 {
            m: [[Cx::real(l1), zero], [zero, Cx::real(l2)]],
        };
        q * d * q.adjoint()
    })
}

pub fn decode_noise_operators(np: &NoiseOperatorParams) -> [Operator2; 3] {
    decode_noise_operators_generic::<f64>(&np.0).map(|m| m.values())
}

/// `e[s][o] = Re Tr(ρ_s(T) · σ_o · V_o)` with `ρ_s(T) = U_c ρ_s U_c†`.
pub fn whitebox_expectations_generic<S: Scalar>(states: &[M2<S>; 6], v: &[M2<S>; 3]) -> [[S; 3]; 6] {
    let ov: [M2<S>; 3] = std::array::from_fn(|o| M2::from_operator(&pauli(Axis::XYZ[o])) * v[o]);
    std::array::from_fn(|s| std::array::from_fn(|o| states[s].trace_product_re(&ov[o])))
}

/// Noiseless control propagator on the pulse grid.
pub fn control_propagator<S: Scalar>(pulses: &[S; PARAM_COUNT], basis: &[[f64; PULSES_PER_AXIS]], dt: f64) -> M2<S> {
    let mut u = Quat::identity();
    for row in basis {
        let fx = dot_const(&pulses[..PULSES_PER_AXIS], row);
        let fy = dot_const(&pulses[PULSES_PER_AXIS..], row);
        u = Quat::step(fx, fy, S::zero(), dt).compose(u);
    }
    u.to_m2()
}

fn output_states<S: Scalar>(u: &M2<S>) -> [M2<S>; 6] {
    let ud = u.adjoint();
    TomoState::ALL.map(|s| *u * M2::from_operator(DensityMatrix::tomography(s).operator()) * ud)
}

/// Linear inversion of six-state tomography (no clamping).
fn ptm_generic<S: Scalar>(e: &[[S; 3]; 6]) -> [[S; 4]; 4] {
    let mut r = [[S::zero(); 4]; 4];
    r[0][0] = S::cst(1.0);
    for i in 0..3 {
        for j in 0..3 {
            r[i + 1][j + 1] = (e[2 * j][i] - e[2 * j + 1][i]) * 0.5;
        }
        r[i + 1][0] = (e[4][i] + e[5][i]) * 0.5;
    }
    r
}

fn avg_fidelity_generic<S: Scalar>(r: &[[S; 4]; 4], target: &GateTarget) -> S {
    let mut acc = S::zero();
    for i in 0..4 {
        for j in 0..4 {
            let t = target.ptm.0[i][j];
            if t != 0.0 {
                acc = acc + r[i][j] * t;
            }
        }
    }
    // F_avg = (2·F_pro + 1)/3, F_pro = Tr(R_tᵀR)/4
    (acc * 0.5 + 1.0) / 3.0
}

fn encoder_index(layout: &Layout, cfg: &GreyboxConfig) -> EncoderIndex {
    let o = |name: &str| layout.get(name).offset;
    let pair = |w: &str, b: &str| (o(w), o(b));
    EncoderIndex {
        dims: EncoderDims {
            tokens: PULSES_PER_AXIS,
            input: 2,
            embed: cfg.embed_dim,
            heads: cfg.heads,
            ff: cfg.ff_dim,
            output: NOISE_PARAMS,
        },
        embed: pair("embed.w", "embed.b"),
        pos: o("embed.pos"),
        blocks: (0..cfg.layers)
            .map(|l| {
                let p = |n: &str| format!("enc{l}.{n}");
                let pp = |w: &str, b: &str| pair(&p(w), &p(b));
                BlockIndex {
                    ln1: pp("ln1.g", "ln1.b"),
                    q: pp("attn.wq", "attn.bq"),
                    k: pp("attn.wk", "attn.bk"),
                    v: pp("attn.wv", "attn.bv"),
                    o: pp("attn.wo", "attn.bo"),
                    ln2: pp("ln2.g", "ln2.b"),
                    ff1: pp("ff.w1", "ff.b1"),
                    ff2: pp("ff.w2", "ff.b2"),
                }
            })
            .collect(),
        final_ln: pair("final_ln.g", "final_ln.b"),
        head: pair("noise.w", "noise.b"),
    }
}

/// A configured model: architecture, whitebox shape and gate set.
#[derive(Debug, Clone)]
pub struct Greybox {
    pub config: GreyboxConfig,
    pub shape: PulseShapeConfig,
    pub gates: Vec<GateTarget>,
    pub layout: Layout,
    encoder: EncoderIndex,
    /// First weight index owned by the refinement heads.
    refine_offset: usize,
    basis: Vec<[f64; PULSES_PER_AXIS]>,
}

impl Greybox {
    pub fn new(config: GreyboxConfig, shape: PulseShapeConfig, gates: Vec<GateTarget>) -> Result<Self> {
        config.validate()?;
        shape.validate()?;
        if gates.is_empty() {
            return Err(Error::InvalidArgument("gate set is empty".into()));
        }
        let layout = Layout::new(&config, gates.len());
        let encoder = encoder_index(&layout, &config);
        let refine_offset = layout.get("refine0.w1").offset;
        let basis = shape.basis();
        Ok(Greybox {
            config,
            shape,
            gates,
            layout,
            encoder,
            refine_offset,
            basis,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    fn head_count(&self) -> usize {
        match self.config.head_mode {
            HeadMode::Shared => 1,
            HeadMode::PerGate => self.gates.len(),
        }
    }

    /// Fresh weights: Xavier-uniform dense layers, unit layer-norm gains,
    /// near-zero noise head (so `V_O ≈ I`), zero residual output layer in the
    /// refinement head (so it starts as the identity map).
    pub fn init_weights(&self) -> GreyboxWeights {
        let mut rng = rng::stream(self.config.init_seed, rng::domain::INIT, 0);
        let mut data = vec![0.0; self.layout.total];
        let small = Normal::new(0.0, self.config.noise_head_init.max(0.0)).expect("finite std");
        for t in &self.layout.tensors {
            let slot = &mut data[t.offset..t.offset + t.len()];
            let leaf = t.name.rsplit('.').next().unwrap_or("");
            if t.name == "noise.w" {
                if self.config.noise_head_init > 0.0 {
                    slot.iter_mut().for_each(|v| *v = small.sample(&mut rng));
                }
            } else if t.name.starts_with("refine") && (leaf == "w2" || leaf == "b2") {
                // identity at init
            } else if leaf == "g" {
                slot.iter_mut().for_each(|v| *v = 1.0);
            } else if t.shape.len() == 2 {
                let limit = (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt();
                let uni = rand_distr::Uniform::new_inclusive(-limit, limit);
                slot.iter_mut().for_each(|v| *v = uni.sample(&mut rng));
            } else if t.name == "embed.pos" {
                let uni = rand_distr::Uniform::new_inclusive(-0.5, 0.5);
                slot.iter_mut().for_each(|v| *v = uni.sample(&mut rng));
            }
        }
        GreyboxWeights { data }
    }

    fn check_weights(&self, w: &GreyboxWeights) -> Result<()> {
        if w.len() != self.layout.total {
            return Err(Error::Shape(format!(
                "weights have {} entries, layout needs {}",
                w.len(),
                self.layout.total
            )));
        }
        Ok(())
    }

    /// Encoder input: token `k` is `(A_x,k, A_y,k) / A_max`.
    pub fn tokens<S: Scalar>(&self, pulses: &[S; PARAM_COUNT]) -> [S; PARAM_COUNT] {
        let inv = 1.0 / self.shape.max_amplitude;
        std::array::from_fn(|i| pulses[i / 2 + (i % 2) * PULSES_PER_AXIS] * inv)
    }

    pub fn prepare(&self, p: &PulseParams) -> Result<PreparedInput> {
        let u = noiseless_unitary(p, &self.shape)?;
        let ud = u.adjoint();
        Ok(PreparedInput {
            tokens: self.tokens(&p.to_array()),
            states: TomoState::ALL.map(|s| u * *DensityMatrix::tomography(s).operator() * ud),
        })
    }

    /// Transformer encoder → mean pool → linear map to the 15 noise parameters.
    pub fn encode(&self, w: &[f64], tokens: &[f64; PARAM_COUNT]) -> ([f64; NOISE_PARAMS], EncoderCache) {
        let (out, cache) = self.encoder.forward(w, tokens);
        (std::array::from_fn(|i| out[i]), cache)
    }

    /// `out_i = e_i + ½(1 − e_i²)·tanh(r_i)`, `r = W₂ tanh(W₁e + b₁) + b₂`.
    /// Maps `[−1, 1]` into itself and is the identity when `W₂ = b₂ = 0`.
    pub fn refine_generic<S: Scalar>(&self, w: &[S], head: usize, e: &[[S; 3]; 6]) -> [[S; 3]; 6] {
        let v = View { layout: &self.layout, w };
        let p = format!("refine{head}");
        let flat: Vec<S> = e.iter().flatten().copied().collect();
        let hidden: Vec<S> = affine(v.t(&format!("{p}.w1")), v.t(&format!("{p}.b1")), &flat)
            .into_iter()
            .map(|z| z.tanh())
            .collect();
        let r = affine(v.t(&format!("{p}.w2")), v.t(&format!("{p}.b2")), &hidden);
        std::array::from_fn(|s| {
            std::array::from_fn(|o| {
                let x = e[s][o];
                x + (S::cst(1.0) - x * x) * r[3 * s + o].tanh() * 0.5
            })
        })
    }

    /// Whitebox and heads for given output states; `gate` restricts the
    /// output to one target.
    fn head_fidelities<S: Scalar>(&self, w: &[S], states: &[M2<S>; 6], np: &[S; NOISE_PARAMS], only: Option<usize>) -> Vec<S> {
        let vops = decode_noise_operators_generic(np);
        let e = whitebox_expectations_generic(states, &vops);
        let gates: Vec<usize> = match only {
            Some(g) => vec![g],
            None => (0..self.gates.len()).collect(),
        };
        let mut shared: Option<[[S; 4]; 4]> = None;
        gates
            .into_iter()
            .map(|g| {
                let r = match self.config.head_mode {
                    HeadMode::Shared => *shared.get_or_insert_with(|| ptm_generic(&self.refine_generic(w, 0, &e))),
                    HeadMode::PerGate => ptm_generic(&self.refine_generic(w, g, &e)),
                };
                avg_fidelity_generic(&r, &self.gates[g]).clamp_to(0.0, 1.0)
            })
            .collect()
    }

    /// Predicted fidelities for a prepared input.
    pub fn forward_prepared(&self, w: &[f64], input: &PreparedInput) -> Vec<f64> {
        let (np, _) = self.encode(w, &input.tokens);
        let states = input.states.map(|s| M2::from_operator(&s));
        self.head_fidelities(w, &states, &np, None)
    }

    /// Full path from pulse amplitudes, including the control propagator,
    /// differentiable in the pulses. Weights are fixed. `only` selects a
    /// single gate.
    pub fn forward_pulses<S: Scalar>(&self, w: &[f64], pulses: &[S; PARAM_COUNT], only: Option<usize>) -> Vec<S> {
        let tokens = self.tokens(pulses);
        let values = tokens.map(|t| t.value());
        let (np_val, cache) = self.encode(w, &values);
        let np: [S; NOISE_PARAMS] = if pulses.iter().any(|p| p.is_tracked()) {
            let jac = self.encoder.token_jacobian(w, &cache);
            std::array::from_fn(|o| S::with_partials(&tokens, np_val[o], &jac[o]))
        } else {
            np_val.map(S::cst)
        };
        let ws: Vec<S> = w.iter().map(|v| S::cst(*v)).collect();
        let u = control_propagator(pulses, &self.basis, self.shape.grid.dt());
        let states = output_states(&u);
        self.head_fidelities(&ws, &states, &np, only)
    }

    pub fn blackbox_forward(&self, p: &PulseParams, w: &GreyboxWeights) -> Result<NoiseOperatorParams> {
        self.check_weights(w)?;
        Ok(NoiseOperatorParams(self.encode(&w.data, &self.tokens(&p.to_array())).0))
    }

    pub fn whitebox_expectations(&self, p: &PulseParams, v: &[Operator2; 3]) -> Result<[[f64; 3]; 6]> {
        let input = self.prepare(p)?;
        let states = input.states.map(|s| M2::<f64>::from_operator(&s));
        Ok(whitebox_expectations_generic(&states, &v.map(|o| M2::from_operator(&o))))
    }

    pub fn refine_expectations(&self, e: &[[f64; 3]; 6], w: &GreyboxWeights, head: usize) -> Result<[[f64; 3]; 6]> {
        self.check_weights(w)?;
        if head >= self.head_count() {
            return Err(Error::Shape(format!("head {head} out of range")));
        }
        Ok(self.refine_generic(&w.data, head, e))
    }

    /// Predicted fidelity per gate.
    pub fn predict(&self, p: &PulseParams, w: &GreyboxWeights) -> Result<Vec<f64>> {
        self.check_weights(w)?;
        Ok(self.forward_prepared(&w.data, &self.prepare(p)?))
    }

    /// Mean squared error over samples and gates, and its gradient.
    pub fn loss_and_gradients(&self, batch: &[(PreparedInput, Vec<f64>)], w: &GreyboxWeights) -> Result<(f64, Vec<f64>)> {
        self.check_weights(w)?;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let tape = Tape::with_capacity(8_000 * batch.len());
        let vars: Vec<Var> = w
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| if i >= self.refine_offset { tape.var(*v) } else { Var::Const(*v) })
            .collect();
        let norm = 1.0 / (batch.len() * self.gates.len()) as f64;
        let mut loss = Var::Const(0.0);
        let mut encoded = Vec::with_capacity(batch.len());
        for (i, (input, labels)) in batch.iter().enumerate() {
            let (np, cache) = self.encode(&w.data, &input.tokens);
            let np_vars: [Var; NOISE_PARAMS] = np.map(|v| tape.var(v));
            let states = input.states.map(|s| M2::from_operator(&s));
            let pred = self.head_fidelities(&vars, &states, &np_vars, None);
            let mut l = Var::Const(0.0);
            for (p, y) in pred.iter().zip(labels) {
                let d = *p - *y;
                l = l + d * d;
            }
            if !l.value().is_finite() {
                return Err(Error::NonFiniteLoss { index: i });
            }
            loss = loss + l * norm;
            encoded.push((np_vars, cache));
        }
        let adj = tape.adjoints(loss);
        let of = |v: &Var| match v {
            Var::Node { idx, .. } => adj[*idx as usize],
            Var::Const(_) => 0.0,
        };
        let mut grads: Vec<f64> = vars.iter().map(of).collect();
        for (np_vars, cache) in &encoded {
            let d_np: Vec<f64> = np_vars.iter().map(of).collect();
            self.encoder.backward(&w.data, cache, &d_np, &mut grads);
        }
        Ok((loss.value(), grads))
    }

    pub fn mse(&self, data: &[(PreparedInput, Vec<f64>)], w: &GreyboxWeights) -> f64 {
        if data.is_empty() {
            return f64::NAN;
        }
        let total: f64 = data
            .iter()
            .map(|(x, y)| {
                self.forward_prepared(&w.data, x)
                    .iter()
                    .zip(y)
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum::<f64>()
            })
            .sum();
        total / (data.len() * self.gates.len()) as f64
    }

    pub fn prepare_samples(&self, samples: &[Sample]) -> Result<Vec<(PreparedInput, Vec<f64>)>> {
        samples
            .iter()
            .map(|s| {
                if s.labels.len() != self.gates.len() {
                    return Err(Error::Shape(format!(
                        "sample has {} labels, model has {} gates",
                        s.labels.len(),
                        self.gates.len()
                    )));
                }
                Ok((self.prepare(&s.params)?, s.labels.clone()))
            })
            .collect()
    }
}

/// Adam state, serialized with checkpoints so training can resume exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One Adam step; `sign = −1` descends, `+1` ascends.
    pub fn update(&mut self, x: &mut [f64], grad: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64, sign: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..x.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] += sign * lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    pub wall_time: f64,
}

/// Everything needed to continue or reuse a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub weights: GreyboxWeights,
    pub best_weights: GreyboxWeights,
    pub best_test_mse: f64,
    pub best_epoch: usize,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
    pub initial_loss: f64,
}

impl TrainState {
    pub fn fresh(model: &Greybox) -> Self {
        let w = model.init_weights();
        TrainState {
            best_weights: w.clone(),
            adam: AdamState::new(w.len()),
            weights: w,
            best_test_mse: f64::INFINITY,
            best_epoch: 0,
            history: Vec::new(),
            initial_loss: f64::NAN,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }
}

pub struct TrainOptions<'a> {
    /// Total epochs to reach (counting those already in `state`).
    pub epochs: usize,
    /// Record zero wall time so histories are byte-reproducible.
    pub deterministic: bool,
    pub progress: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Adam on minibatch MSE. Batches are reshuffled each epoch from
/// `(init_seed, epoch)`, so resuming from a saved state continues identically.
pub fn train(
    model: &Greybox,
    train_set: &[(PreparedInput, Vec<f64>)],
    test_set: &[(PreparedInput, Vec<f64>)],
    state: &mut TrainState,
    opts: TrainOptions<'_>,
) -> Result<()> {
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::InvalidArgument("training and test sets must be non-empty".into()));
    }
    let cfg = &model.config;
    let start = std::time::Instant::now();
    let mut progress = opts.progress;
    if state.initial_loss.is_nan() {
        state.initial_loss = model.mse(train_set, &state.weights);
    }
    for epoch in state.epochs_done()..opts.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(cfg.init_seed, rng::domain::SHUFFLE, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(PreparedInput, Vec<f64>)> = chunk.iter().map(|i| train_set[*i].clone()).collect();
            let (_, grads) = model
                .loss_and_gradients(&batch, &state.weights)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { index } => Error::NonFiniteLoss { index: chunk[index] },
                    other => other,
                })?;
            state
                .adam
                .update(&mut state.weights.data, &grads, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, -1.0);
        }
        let train_mse = model.mse(train_set, &state.weights);
        let test_mse = model.mse(test_set, &state.weights);
        if !train_mse.is_finite() || train_mse > 1e3 * state.initial_loss.max(DIVERGENCE_FLOOR) {
            return Err(Error::Diverged {
                epoch,
                loss: train_mse,
                initial: state.initial_loss,
            });
        }
        if test_mse < state.best_test_mse {
            state.best_test_mse = test_mse;
            state.best_epoch = epoch;
            state.best_weights = state.weights.clone();
        }
        let record = EpochRecord {
            epoch,
            train_mse,
            test_mse,
            wall_time: if opts.deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
        };
        if let Some(cb) = progress.as_mut() {
            cb(&record);
        }
        state.history.push(record);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    config: GreyboxConfig,
    shape: PulseShapeConfig,
    gates: Vec<String>,
    data_checksum: String,
    tensors: Vec<TensorEntry>,
    best_tensors: Vec<TensorEntry>,
    best_test_mse: Option<f64>,
    best_epoch: usize,
    adam: AdamState,
    history: Vec<EpochRecord>,
    initial_loss: Option<f64>,
    #[serde(default)]
    provenance: serde_json::Value,
}

/// A trained model on disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Greybox,
    pub state: TrainState,
    pub data_checksum: String,
    pub provenance: serde_json::Value,
}

fn tensors_of(layout: &Layout, w: &GreyboxWeights) -> Vec<TensorEntry> {
    layout
        .tensors
        .iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data: w.data[t.offset..t.offset + t.len()].to_vec(),
        })
        .collect()
}

fn weights_of(layout: &Layout, entries: &[TensorEntry]) -> Result<GreyboxWeights> {
    if entries.len() != layout.tensors.len() {
        return Err(Error::Schema(format!(
            "checkpoint has {} tensors, layout has {}",
            entries.len(),
            layout.tensors.len()
        )));
    }
    let mut data = Vec::with_capacity(layout.total);
    for (spec, e) in layout.tensors.iter().zip(entries) {
        if spec.name != e.name || spec.shape != e.shape || e.data.len() != spec.len() {
            return Err(Error::Schema(format!("tensor {} does not match layout entry {}", e.name, spec.name)));
        }
        data.extend_from_slice(&e.data);
    }
    let w = GreyboxWeights { data };
    if !w.is_finite() {
        return Err(Error::Schema("non-finite weight".into()));
    }
    Ok(w)
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            shape: self.model.shape.clone(),
            gates: self.model.gates.iter().map(|g| g.label.clone()).collect(),
            data_checksum: self.data_checksum.clone(),
            tensors: tensors_of(&self.model.layout, &self.state.weights),
            best_tensors: tensors_of(&self.model.layout, &self.state.best_weights),
            best_test_mse: Some(self.state.best_test_mse).filter(|v| v.is_finite()),
            best_epoch: self.state.best_epoch,
            adam: self.state.adam.clone(),
            history: self.state.history.clone(),
            initial_loss: Some(self.state.initial_loss).filter(|v| v.is_finite()),
            provenance: self.provenance.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let model = Greybox::new(file.config, file.shape, gate_set(&file.gates)?)?;
        let weights = weights_of(&model.layout, &file.tensors)?;
        let best_weights = weights_of(&model.layout, &file.best_tensors)?;
        if file.adam.m.len() != model.layout.total || file.adam.v.len() != model.layout.total {
            return Err(Error::Schema("optimizer state does not match layout".into()));
        }
        Ok(Checkpoint {
            state: TrainState {
                weights,
                best_weights,
                best_test_mse: file.best_test_mse.unwrap_or(f64::INFINITY),
                best_epoch: file.best_epoch,
                adam: file.adam,
                history: file.history,
                initial_loss: file.initial_loss.unwrap_or(f64::NAN),
            },
            model,
            data_checksum: file.data_checksum,
            provenance: file.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataset::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// History as CSV: `epoch,train_mse,test_mse,wall_time`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_mse,test_mse,wall_time\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_mse, r.test_mse, r.wall_time));
    }
    out
}
