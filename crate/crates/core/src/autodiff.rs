//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Model code is written once against the [`Scalar`] trait and runs either on
//! plain `f64` (inference) or on [`Var`] (recording). Constants never touch
//! the tape, so whitebox layers that only see fixed inputs cost nothing to
//! record. Complex intermediates are pairs of real scalars ([`Cx`], [`M2`]).

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::qcore::Operator2;

/// Recording of every non-constant primal operation. Node `i` owns the
/// partial derivatives `edges[ends[i-1]..ends[i]]`.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

#[derive(Default)]
struct Inner {
    ends: Vec<u32>,
    edges: Vec<(u32, f64)>,
}

impl Inner {
    fn close(&mut self) -> u32 {
        let idx = self.ends.len();
        assert!(idx < u32::MAX as usize && self.edges.len() < u32::MAX as usize, "tape overflow");
        self.ends.push(self.edges.len() as u32);
        idx as u32
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            inner: RefCell::new(Inner {
                ends: Vec::with_capacity(n),
                edges: Vec::with_capacity(2 * n),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Forget all recorded operations. Requires that no [`Var`] is alive.
    pub fn clear(&mut self) {
        let inner = self.inner.get_mut();
        inner.ends.clear();
        inner.edges.clear();
    }

    /// New independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.inner.borrow_mut().close();
        Var::Node { tape: self, idx, val: value }
    }

    fn push(&self, edges: &[(u32, f64)]) -> u32 {
        let mut inner = self.inner.borrow_mut();
        inner.edges.extend_from_slice(edges);
        inner.close()
    }

    /// Adjoints `∂output/∂node` for every node on the tape.
    pub fn adjoints(&self, output: Var<'_>) -> Vec<f64> {
        let inner = self.inner.borrow();
        let mut adj = vec![0.0; inner.ends.len()];
        let Var::Node { idx, .. } = output else {
            return adj;
        };
        adj[idx as usize] = 1.0;
        for i in (0..=idx as usize).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let lo = if i == 0 { 0 } else { inner.ends[i - 1] as usize };
            for &(p, d) in &inner.edges[lo..inner.ends[i] as usize] {
                adj[p as usize] += g * d;
            }
        }
        adj
    }

    /// Gradient of `output` with respect to each of `inputs`.
    pub fn gradient(&self, output: Var<'_>, inputs: &[Var<'_>]) -> Vec<f64> {
        let adj = self.adjoints(output);
        inputs
            .iter()
            .map(|v| match v {
                Var::Node { idx, .. } => adj[*idx as usize],
                Var::Const(_) => 0.0,
            })
            .collect()
    }
}

/// A recorded value, or a constant that lives off-tape.
#[derive(Clone, Copy)]
pub enum Var<'t> {
    Const(f64),
    Node { tape: &'t Tape, idx: u32, val: f64 },
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Var::Const(v) => write!(f, "Const({v})"),
            Var::Node { idx, val, .. } => write!(f, "Node#{idx}({val})"),
        }
    }
}

impl<'t> Var<'t> {
    fn binary(self, rhs: Var<'t>, val: f64, da: f64, db: f64) -> Var<'t> {
        match (self, rhs) {
            (Var::Const(_), Var::Const(_)) => Var::Const(val),
            (Var::Node { tape, idx, .. }, Var::Const(_)) => Var::Node {
                tape,
                idx: tape.push(&[(idx, da)]),
                val,
            },
            (Var::Const(_), Var::Node { tape, idx, .. }) => Var::Node {
                tape,
                idx: tape.push(&[(idx, db)]),
                val,
            },
            (Var::Node { tape, idx: ia, .. }, Var::Node { idx: ib, .. }) => Var::Node {
                tape,
                idx: tape.push(&[(ia, da), (ib, db)]),
                val,
            },
        }
    }
}

/// Arithmetic shared by `f64` and [`Var`].
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    /// Elementwise function with known value and derivative at `self`.
    fn unary(self, val: f64, deriv: f64) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    /// Whether the value is recorded on a tape.
    fn is_tracked(self) -> bool {
        false
    }

    /// Result of an external computation with value `val` and partial
    /// derivatives `partials` with respect to `inputs`.
    fn with_partials(inputs: &[Self], val: f64, partials: &[f64]) -> Self;

    /// `init + Σ a_i b_i`, recorded as a single node.
    fn dot(a: &[Self], b: &[Self], init: Self) -> Self {
        a.iter().zip(b).fold(init, |acc, (x, y)| acc + *x * *y)
    }

    /// `Σ a_i w_i` with constant weights, recorded as a single node.
    fn dot_weights(a: &[Self], w: &[f64]) -> Self {
        a.iter().zip(w).fold(Self::zero(), |acc, (x, c)| acc + *x * *c)
    }

    fn tanh(self) -> Self {
        let t = self.value().tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn exp(self) -> Self {
        let e = self.value().exp();
        self.unary(e, e)
    }

    fn sqrt(self) -> Self {
        let s = self.value().sqrt();
        self.unary(s, 0.5 / s)
    }

    fn sin(self) -> Self {
        let (s, c) = self.value().sin_cos();
        self.unary(s, c)
    }

    fn cos(self) -> Self {
        let (s, c) = self.value().sin_cos();
        self.unary(c, -s)
    }

    fn square(self) -> Self {
        self * self
    }

    /// `cos(√u)` for `u ≥ 0`, smooth through `u = 0`.
    fn cos_sqrt(self) -> Self {
        let u = self.value();
        let (val, d) = if u < 1e-6 {
            (1.0 - u / 2.0 + u * u / 24.0, -0.5 + u / 12.0)
        } else {
            let x = u.sqrt();
            (x.cos(), -0.5 * x.sin() / x)
        };
        self.unary(val, d)
    }

    /// `sin(√u)/√u` for `u ≥ 0`, smooth through `u = 0`.
    fn sinc_sqrt(self) -> Self {
        let u = self.value();
        let (val, d) = if u < 1e-6 {
            (1.0 - u / 6.0 + u * u / 120.0, -1.0 / 6.0 + u / 60.0)
        } else {
            let x = u.sqrt();
            let (s, c) = x.sin_cos();
            (s / x, (x * c - s) / (2.0 * x * x * x))
        };
        self.unary(val, d)
    }

    /// GELU, tanh approximation.
    fn gelu(self) -> Self {
        const K: f64 = 0.797_884_560_802_865_4; // √(2/π)
        let x = self.value();
        let inner = K * (x + 0.044715 * x * x * x);
        let t = inner.tanh();
        let val = 0.5 * x * (1.0 + t);
        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x);
        self.unary(val, d)
    }

    /// Clamp with zero derivative outside `[lo, hi]`.
    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        let v = self.value();
        if v < lo {
            Self::cst(lo)
        } else if v > hi {
            Self::cst(hi)
        } else {
            self
        }
    }
}

/// `Σ a_i b_i` over a constant weight vector.
pub fn dot_const<S: Scalar>(a: &[S], b: &[f64]) -> S {
    S::dot_weights(a, b)
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn unary(self, val: f64, _deriv: f64) -> Self {
        val
    }
    #[inline]
    fn with_partials(_inputs: &[Self], val: f64, _partials: &[f64]) -> Self {
        val
    }
}

impl<'t> Scalar for Var<'t> {
    #[inline]
    fn cst(v: f64) -> Self {
        Var::Const(v)
    }
    #[inline]
    fn value(self) -> f64 {
        match self {
            Var::Const(v) => v,
            Var::Node { val, .. } => val,
        }
    }
    #[inline]
    fn unary(self, val: f64, deriv: f64) -> Self {
        match self {
            Var::Const(_) => Var::Const(val),
            Var::Node { tape, idx, .. } => Var::Node {
                tape,
                idx: tape.push(&[(idx, deriv)]),
                val,
            },
        }
    }

    fn dot(a: &[Self], b: &[Self], init: Self) -> Self {
        let val = a.iter().zip(b).fold(init.value(), |acc, (x, y)| acc + x.value() * y.value());
        let tape = a.iter().chain(b).chain(std::iter::once(&init)).find_map(|v| match v {
            Var::Node { tape, .. } => Some(*tape),
            Var::Const(_) => None,
        });
        let Some(tape) = tape else {
            return Var::Const(val);
        };
        let mut inner = tape.inner.borrow_mut();
        for (x, y) in a.iter().zip(b) {
            if let Var::Node { idx, .. } = x {
                inner.edges.push((*idx, y.value()));
            }
            if let Var::Node { idx, .. } = y {
                inner.edges.push((*idx, x.value()));
            }
        }
        if let Var::Node { idx, .. } = init {
            inner.edges.push((idx, 1.0));
        }
        let idx = inner.close();
        Var::Node { tape, idx, val }
    }

    fn dot_weights(a: &[Self], w: &[f64]) -> Self {
        let val = a.iter().zip(w).map(|(x, c)| x.value() * c).sum();
        Self::with_partials(a, val, w)
    }

    fn is_tracked(self) -> bool {
        matches!(self, Var::Node { .. })
    }

    fn with_partials(a: &[Self], val: f64, w: &[f64]) -> Self {
        let Some(tape) = a.iter().find_map(|x| match x {
            Var::Node { tape, .. } => Some(*tape),
            Var::Const(_) => None,
        }) else {
            return Var::Const(val);
        };
        let mut inner = tape.inner.borrow_mut();
        for (x, c) in a.iter().zip(w) {
            if let Var::Node { idx, .. } = x {
                inner.edges.push((*idx, *c));
            }
        }
        let idx = inner.close();
        Var::Node { tape, idx, val }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value() + rhs.value(), 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value() - rhs.value(), 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.binary(rhs, a * b, b, a)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.binary(rhs, a / b, 1.0 / b, -a / (b * b))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value(), -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.value() + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.value() - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        if rhs == 0.0 {
            return Var::Const(0.0);
        }
        self.unary(self.value() * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.unary(self.value() / rhs, 1.0 / rhs)
    }
}

/// Complex number over a [`Scalar`].
#[derive(Clone, Copy, Debug)]
pub struct Cx<S> {
    pub re: S,
    pub im: S,
}

impl<S: Scalar> Cx<S> {
    pub fn new(re: S, im: S) -> Self {
        Cx { re, im }
    }

    pub fn real(re: S) -> Self {
        Cx { re, im: S::zero() }
    }

    pub fn cst(re: f64, im: f64) -> Self {
        Cx {
            re: S::cst(re),
            im: S::cst(im),
        }
    }

    pub fn conj(self) -> Self {
        Cx {
            re: self.re,
            im: -self.im,
        }
    }

    pub fn scale(self, s: S) -> Self {
        Cx {
            re: self.re * s,
            im: self.im * s,
        }
    }

    /// Multiply by `i`.
    pub fn times_i(self) -> Self {
        Cx {
            re: -self.im,
            im: self.re,
        }
    }
}

impl<S: Scalar> Add for Cx<S> {
    type Output = Cx<S>;
    fn add(self, rhs: Cx<S>) -> Cx<S> {
        Cx::new(self.re + rhs.re, self.im + rhs.im)
    }
}

impl<S: Scalar> Sub for Cx<S> {
    type Output = Cx<S>;
    fn sub(self, rhs: Cx<S>) -> Cx<S> {
        Cx::new(self.re - rhs.re, self.im - rhs.im)
    }
}

impl<S: Scalar> Mul for Cx<S> {
    type Output = Cx<S>;
    fn mul(self, rhs: Cx<S>) -> Cx<S> {
        Cx::new(
            self.re * rhs.re - self.im * rhs.im,
            self.re * rhs.im + self.im * rhs.re,
        )
    }
}

impl<S: Scalar> Neg for Cx<S> {
    type Output = Cx<S>;
    fn neg(self) -> Cx<S> {
        Cx::new(-self.re, -self.im)
    }
}

/// 2×2 complex matrix over a [`Scalar`].
#[derive(Clone, Copy, Debug)]
pub struct M2<S> {
    pub m: [[Cx<S>; 2]; 2],
}

impl<S: Scalar> M2<S> {
    pub fn identity() -> Self {
        let (o, z) = (Cx::cst(1.0, 0.0), Cx::cst(0.0, 0.0));
        M2 { m: [[o, z], [z, o]] }
    }

    pub fn from_operator(op: &Operator2) -> Self {
        let c = |v: num_complex::Complex64| Cx::cst(v.re, v.im);
        M2 {
            m: [[c(op.m[0][0]), c(op.m[0][1])], [c(op.m[1][0]), c(op.m[1][1])]],
        }
    }

    pub fn adjoint(&self) -> Self {
        let m = &self.m;
        M2 {
            m: [[m[0][0].conj(), m[1][0].conj()], [m[0][1].conj(), m[1][1].conj()]],
        }
    }

    pub fn trace(&self) -> Cx<S> {
        self.m[0][0] + self.m[1][1]
    }

    /// Real part of `Tr(self · rhs)` without forming the product.
    pub fn trace_product_re(&self, rhs: &M2<S>) -> S {
        let (a, b) = (&self.m, &rhs.m);
        let t = a[0][0] * b[0][0] + a[0][1] * b[1][0] + a[1][0] * b[0][1] + a[1][1] * b[1][1];
        t.re
    }

    pub fn values(&self) -> Operator2 {
        let c = |v: Cx<S>| num_complex::Complex64::new(v.re.value(), v.im.value());
        Operator2::new(c(self.m[0][0]), c(self.m[0][1]), c(self.m[1][0]), c(self.m[1][1]))
    }
}

impl<S: Scalar> Mul for M2<S> {
    type Output = M2<S>;
    fn mul(self, rhs: M2<S>) -> M2<S> {
        let (a, b) = (&self.m, &rhs.m);
        M2 {
            m: [
                [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
                [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
            ],
        }
    }
}

/// Unit quaternion `a·I − i(b σx + c σy + d σz)` over a [`Scalar`].
#[derive(Clone, Copy, Debug)]
pub struct Quat<S> {
    pub a: S,
    pub b: S,
    pub c: S,
    pub d: S,
}

impl<S: Scalar> Quat<S> {
    pub fn identity() -> Self {
        Quat {
            a: S::cst(1.0),
            b: S::zero(),
            c: S::zero(),
            d: S::zero(),
        }
    }

    /// `exp(−i (hx σx + hy σy + hz σz) dt)`, differentiable at `h = 0`.
    pub fn step(hx: S, hy: S, hz: S, dt: f64) -> Self {
        let u = (hx * hx + hy * hy + hz * hz) * (dt * dt);
        let k = u.sinc_sqrt() * dt;
        Quat {
            a: u.cos_sqrt(),
            b: k * hx,
            c: k * hy,
            d: k * hz,
        }
    }

    /// `self · rhs`.
    pub fn compose(self, rhs: Quat<S>) -> Self {
        let (a1, b1, c1, d1) = (self.a, self.b, self.c, self.d);
        let (a2, b2, c2, d2) = (rhs.a, rhs.b, rhs.c, rhs.d);
        Quat {
            a: a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
            b: a1 * b2 + a2 * b1 + (c1 * d2 - d1 * c2),
            c: a1 * c2 + a2 * c1 + (d1 * b2 - b1 * d2),
            d: a1 * d2 + a2 * d1 + (b1 * c2 - c1 * b2),
        }
    }

    pub fn to_m2(self) -> M2<S> {
        M2 {
            m: [
                [Cx::new(self.a, -self.d), Cx::new(-self.c, -self.b)],
                [Cx::new(self.c, -self.b), Cx::new(self.a, self.d)],
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::su2_step;

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    fn composite<S: Scalar>(x: &[S]) -> S {
        let a = (x[0] * x[1]).tanh() + x[2].exp() / (x[0] * x[0] + 1.0);
        let b = (x[1] * x[1] + x[2] * x[2] + 0.5).sqrt().sin() * x[0].cos();
        let c = Cx::new(x[0], x[1]) * Cx::new(x[2], -x[0]).conj();
        let d = (x[1] * 3.0).gelu() - x[2].cos_sqrt() * x[2] * 0.0 + (x[0] * x[0]).sinc_sqrt();
        a * b + c.re * c.im - d / 2.0 + (x[1] - 4.0).clamp_to(-1.0, 1.0)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x0 = [0.3, -0.7, 0.45];
        let tape = Tape::new();
        let xs: Vec<Var> = x0.iter().map(|v| tape.var(*v)).collect();
        let y = composite(&xs);
        assert!((y.value() - composite(&x0)).abs() < 1e-15);
        let g = tape.gradient(y, &xs);
        for i in 0..3 {
            let fd = central_diff(|x| composite(x), &x0, i, 1e-6);
            assert!((g[i] - fd).abs() < 1e-8 * (1.0 + fd.abs()), "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn constants_stay_off_tape() {
        let tape = Tape::new();
        let c = Var::Const(2.0) * Var::Const(3.0) + 1.0;
        assert!(matches!(c, Var::Const(v) if v == 7.0));
        assert!(tape.is_empty());
        let x = tape.var(1.0);
        let y = x * 0.0;
        assert!(matches!(y, Var::Const(_)));
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn smooth_at_origin() {
        for u in [0.0, 1e-9, 5e-7, 2e-6, 0.3, 4.0] {
            let tape = Tape::new();
            let x = tape.var(u);
            for (y, exact) in [
                (x.cos_sqrt(), (|v: f64| v.sqrt().cos()) as fn(f64) -> f64),
                (x.sinc_sqrt(), |v: f64| if v == 0.0 { 1.0 } else { v.sqrt().sin() / v.sqrt() }),
            ] {
                assert!((y.value() - exact(u)).abs() < 1e-15);
                let g = tape.gradient(y, &[x])[0];
                let h = 1e-4;
                let fd = (exact(u + h) - exact((u - h).max(0.0))) / (u + h - (u - h).max(0.0));
                assert!((g - fd).abs() < 1e-4, "u={u}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn quaternion_step_matches_closed_form() {
        for (hx, hy, hz, dt) in [(0.0, 0.0, 0.0, 0.1), (3.0, -1.0, 0.2, 0.01), (80.0, 20.0, -2.0, 0.001)] {
            let q: Quat<f64> = Quat::step(hx, hy, hz, dt);
            assert!(q.to_m2().values().max_abs_diff(&su2_step(hx, hy, hz, dt)) < 1e-15);
        }
    }

    #[test]
    fn trace_product_matches_matrix_product() {
        let a: M2<f64> = M2::from_operator(&su2_step(1.0, 2.0, 3.0, 0.2));
        let b: M2<f64> = M2::from_operator(&su2_step(-1.0, 0.5, 0.3, 0.7));
        assert!(((a * b).trace().re - a.trace_product_re(&b)).abs() < 1e-15);
    }
}
