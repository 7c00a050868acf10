//! Exact single-qubit linear algebra: Pauli operators, SU(2) steps,
//! tomography and Pauli-transfer-matrix fidelities.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Imaginary residue above which an expectation value is rejected.
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-8;

/// Row-major 2×2 complex matrix.
#[derive(Clone, Copy, PartialEq)]
pub struct Operator2 {
    pub m: [[Complex64; 2]; 2],
}

impl fmt::Debug for Operator2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[[{}, {}], [{}, {}]]",
            self.m[0][0], self.m[0][1], self.m[1][0], self.m[1][1]
        )
    }
}

impl Operator2 {
    pub const fn new(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> Self {
        Operator2 { m: [[a, b], [c, d]] }
    }

    pub const fn identity() -> Self {
        Self::new(ONE, ZERO, ZERO, ONE)
    }

    pub const fn zero() -> Self {
        Self::new(ZERO, ZERO, ZERO, ZERO)
    }

    pub fn diag(a: Complex64, d: Complex64) -> Self {
        Self::new(a, ZERO, ZERO, d)
    }

    pub fn adjoint(&self) -> Self {
        let m = &self.m;
        Self::new(m[0][0].conj(), m[1][0].conj(), m[0][1].conj(), m[1][1].conj())
    }

    pub fn trace(&self) -> Complex64 {
        self.m[0][0] + self.m[1][1]
    }

    pub fn scale(&self, s: Complex64) -> Self {
        let m = &self.m;
        Self::new(m[0][0] * s, m[0][1] * s, m[1][0] * s, m[1][1] * s)
    }

    pub fn max_abs_diff(&self, other: &Operator2) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                worst = worst.max((self.m[i][j] - other.m[i][j]).norm());
            }
        }
        worst
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        (*self * self.adjoint()).max_abs_diff(&Operator2::identity()) <= tol
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.max_abs_diff(&self.adjoint()) <= tol
    }

    /// Distance up to a global phase: min over φ of ‖A − e^{iφ}B‖_max.
    pub fn phase_insensitive_diff(&self, other: &Operator2) -> f64 {
        let overlap = (other.adjoint() * *self).trace();
        let phase = if overlap.norm() > 0.0 {
            overlap / overlap.norm()
        } else {
            ONE
        };
        self.max_abs_diff(&other.scale(phase))
    }
}

impl Mul for Operator2 {
    type Output = Operator2;
    fn mul(self, rhs: Operator2) -> Operator2 {
        let a = &self.m;
        let b = &rhs.m;
        Operator2::new(
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        )
    }
}

impl Add for Operator2 {
    type Output = Operator2;
    fn add(self, rhs: Operator2) -> Operator2 {
        let (a, b) = (&self.m, &rhs.m);
        Operator2::new(a[0][0] + b[0][0], a[0][1] + b[0][1], a[1][0] + b[1][0], a[1][1] + b[1][1])
    }
}

impl Sub for Operator2 {
    type Output = Operator2;
    fn sub(self, rhs: Operator2) -> Operator2 {
        let (a, b) = (&self.m, &rhs.m);
        Operator2::new(a[0][0] - b[0][0], a[0][1] - b[0][1], a[1][0] - b[1][0], a[1][1] - b[1][1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    I,
    X,
    Y,
    Z,
}

impl Axis {
    pub const XYZ: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];
}

pub fn pauli(axis: Axis) -> Operator2 {
    match axis {
        Axis::I => Operator2::identity(),
        Axis::X => Operator2::new(ZERO, ONE, ONE, ZERO),
        Axis::Y => Operator2::new(ZERO, -I, I, ZERO),
        Axis::Z => Operator2::diag(ONE, -ONE),
    }
}

/// Unit quaternion form of an SU(2) element, `a·I − i(b σx + c σy + d σz)`.
///
/// Used on the simulator hot path: composing two steps costs 16 real
/// multiplications instead of a full complex 2×2 product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Su2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Su2 {
    pub const IDENTITY: Su2 = Su2 {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 0.0,
    };

    /// `exp(−i (hx σx + hy σy + hz σz) dt)`.
    #[inline]
    pub fn step(hx: f64, hy: f64, hz: f64, dt: f64) -> Su2 {
        let norm = (hx * hx + hy * hy + hz * hz).sqrt();
        let theta = norm * dt;
        if theta == 0.0 {
            return Su2::IDENTITY;
        }
        let (s, c) = theta.sin_cos();
        let k = s / norm;
        Su2 {
            a: c,
            b: k * hx,
            c: k * hy,
            d: k * hz,
        }
    }

    /// `self · rhs` (apply `rhs` first).
    #[inline]
    pub fn then_after(self, rhs: Su2) -> Su2 {
        let (a1, b1, c1, d1) = (self.a, self.b, self.c, self.d);
        let (a2, b2, c2, d2) = (rhs.a, rhs.b, rhs.c, rhs.d);
        Su2 {
            a: a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
            b: a1 * b2 + a2 * b1 + (c1 * d2 - d1 * c2),
            c: a1 * c2 + a2 * c1 + (d1 * b2 - b1 * d2),
            d: a1 * d2 + a2 * d1 + (b1 * c2 - c1 * b2),
        }
    }

    /// Rescale onto the unit sphere, removing accumulated rounding drift.
    pub fn normalized(self) -> Su2 {
        let n = (self.a * self.a + self.b * self.b + self.c * self.c + self.d * self.d).sqrt();
        Su2 {
            a: self.a / n,
            b: self.b / n,
            c: self.c / n,
            d: self.d / n,
        }
    }

    pub fn to_operator(self) -> Operator2 {
        Operator2::new(
            Complex64::new(self.a, -self.d),
            Complex64::new(-self.c, -self.b),
            Complex64::new(self.c, -self.b),
            Complex64::new(self.a, self.d),
        )
    }
}

impl Mul for Su2 {
    type Output = Su2;
    fn mul(self, rhs: Su2) -> Su2 {
        self.then_after(rhs)
    }
}

/// Closed-form `exp(−i(hx σx + hy σy + hz σz)dt) = cos θ·I − i sin θ·(n̂·σ)`, θ = |h|dt.
pub fn su2_step(hx: f64, hy: f64, hz: f64, dt: f64) -> Operator2 {
    Su2::step(hx, hy, hz, dt).to_operator()
}

/// A physical single-qubit state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityMatrix(Operator2);

impl DensityMatrix {
    /// `(I + r·σ)/2`; requires `|r| ≤ 1`.
    pub fn from_bloch(r: [f64; 3]) -> Result<Self> {
        let n2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
        if !(n2 <= 1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!("Bloch vector {r:?} has norm > 1")));
        }
        let half = Complex64::new(0.5, 0.0);
        let op = (Operator2::identity()
            + pauli(Axis::X).scale(r[0].into())
            + pauli(Axis::Y).scale(r[1].into())
            + pauli(Axis::Z).scale(r[2].into()))
        .scale(half);
        Ok(DensityMatrix(op))
    }

    pub fn tomography(state: TomoState) -> Self {
        let (axis, sign) = state.axis_sign();
        let mut r = [0.0; 3];
        r[axis] = sign;
        DensityMatrix::from_bloch(r).expect("unit Bloch vector")
    }

    pub fn operator(&self) -> &Operator2 {
        &self.0
    }

    pub fn bloch(&self) -> [f64; 3] {
        let m = &self.0.m;
        [2.0 * m[1][0].re, 2.0 * m[1][0].im, (m[0][0] - m[1][1]).re]
    }
}

/// The six Pauli eigenstates used for tomography, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TomoState {
    XPlus,
    XMinus,
    YPlus,
    YMinus,
    ZPlus,
    ZMinus,
}

impl TomoState {
    pub const ALL: [TomoState; 6] = [
        TomoState::XPlus,
        TomoState::XMinus,
        TomoState::YPlus,
        TomoState::YMinus,
        TomoState::ZPlus,
        TomoState::ZMinus,
    ];

    /// Bloch axis index (0 = x) and sign.
    pub fn axis_sign(self) -> (usize, f64) {
        match self {
            TomoState::XPlus => (0, 1.0),
            TomoState::XMinus => (0, -1.0),
            TomoState::YPlus => (1, 1.0),
            TomoState::YMinus => (1, -1.0),
            TomoState::ZPlus => (2, 1.0),
            TomoState::ZMinus => (2, -1.0),
        }
    }
}

/// `Tr(O·U·ρ·U†)`. Fails when the imaginary residue exceeds [`IMAG_RESIDUE_LIMIT`].
pub fn expectation(rho: &DensityMatrix, u: &Operator2, o: &Operator2) -> Result<f64> {
    let v = (*o * *u * rho.0 * u.adjoint()).trace();
    if v.im.abs() > IMAG_RESIDUE_LIMIT {
        return Err(Error::NonHermitian { residue: v.im.abs() });
    }
    Ok(v.re)
}

/// Tomography data: `e[state][observable]` with states in [`TomoState::ALL`]
/// order and observables σx, σy, σz.
pub type Expectations = [[f64; 3]; 6];

/// Noiseless expectations for every tomography cell under unitary `u`.
pub fn exact_expectations(u: &Operator2) -> Expectations {
    let obs = Axis::XYZ.map(pauli);
    let mut e = [[0.0; 3]; 6];
    for (s, state) in TomoState::ALL.iter().enumerate() {
        let rho = DensityMatrix::tomography(*state);
        for (o, op) in obs.iter().enumerate() {
            // The observables are Pauli matrices and `u` comes from a caller
            // who vouches for unitarity; take the real part unconditionally.
            e[s][o] = (*op * *u * rho.0 * u.adjoint()).trace().re;
        }
    }
    e
}

/// 4×4 real channel representation `R[i][j] = ½ Tr(σᵢ Λ(σⱼ))`, σ₀ = I.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PauliTransferMatrix(pub [[f64; 4]; 4]);

impl PauliTransferMatrix {
    pub fn identity() -> Self {
        let mut r = [[0.0; 4]; 4];
        for (i, row) in r.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        PauliTransferMatrix(r)
    }

    /// Analytic PTM of the unitary channel `ρ ↦ UρU†`.
    pub fn from_unitary(u: &Operator2) -> Self {
        let paulis = [Axis::I, Axis::X, Axis::Y, Axis::Z].map(pauli);
        let ud = u.adjoint();
        let mut r = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                r[i][j] = 0.5 * (paulis[i] * *u * paulis[j] * ud).trace().re;
            }
        }
        // trace preservation holds exactly; don't let rounding leak into row 0
        r[0] = [1.0, 0.0, 0.0, 0.0];
        PauliTransferMatrix(r)
    }

    /// Reconstruct from six-state tomography; see [`Self::from_expectations_counted`].
    pub fn from_expectations(e: &Expectations) -> Self {
        Self::from_expectations_counted(e).0
    }

    /// Linear inversion of six-state tomography. Entries outside `[−1, 1]` are
    /// clamped; the number of clamped entries is returned alongside.
    pub fn from_expectations_counted(e: &Expectations) -> (Self, usize) {
        let mut clamped = 0;
        let mut c = [[0.0; 3]; 6];
        for s in 0..6 {
            for o in 0..3 {
                let v = e[s][o];
                c[s][o] = if v > 1.0 {
                    clamped += 1;
                    1.0
                } else if v < -1.0 {
                    clamped += 1;
                    -1.0
                } else {
                    v
                };
            }
        }
        if clamped > 0 {
            log::warn!("clamped {clamped} tomography expectations into [-1, 1]");
        }
        let mut r = [[0.0; 4]; 4];
        r[0][0] = 1.0;
        for i in 0..3 {
            for j in 0..3 {
                r[i + 1][j + 1] = 0.5 * (c[2 * j][i] - c[2 * j + 1][i]);
            }
            r[i + 1][0] = 0.5 * (c[4][i] + c[5][i]);
        }
        (PauliTransferMatrix(r), clamped)
    }

    /// `Tr(Aᵀ B)`.
    pub fn inner(&self, other: &PauliTransferMatrix) -> f64 {
        let mut acc = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                acc += self.0[i][j] * other.0[i][j];
            }
        }
        acc
    }

    pub fn max_abs_diff(&self, other: &PauliTransferMatrix) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                worst = worst.max((self.0[i][j] - other.0[i][j]).abs());
            }
        }
        worst
    }

    /// Singular values of the lower-right 3×3 block, descending.
    pub fn block_singular_values(&self) -> [f64; 3] {
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = self.0[i + 1][j + 1];
            }
        }
        // eigenvalues of AᵀA via cyclic Jacobi
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| a[k][i] * a[k][j]).sum();
            }
        }
        for _ in 0..64 {
            let off = m[0][1].abs() + m[0][2].abs() + m[1][2].abs();
            if off < 1e-30 {
                break;
            }
            for (p, q) in [(0, 1), (0, 2), (1, 2)] {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..3 {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..3 {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
        let mut sv = [m[0][0].max(0.0).sqrt(), m[1][1].max(0.0).sqrt(), m[2][2].max(0.0).sqrt()];
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        sv
    }
}

/// Named target gate with its precomputed PTM.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTarget {
    pub label: String,
    pub unitary: Operator2,
    pub ptm: PauliTransferMatrix,
}

impl GateTarget {
    pub fn new(label: impl Into<String>, unitary: Operator2) -> Self {
        let ptm = PauliTransferMatrix::from_unitary(&unitary);
        GateTarget {
            label: label.into(),
            unitary,
            ptm,
        }
    }

    /// Look up one of the built-in gates by label.
    pub fn named(label: &str) -> Result<Self> {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let u = match label {
            "I" => Operator2::identity(),
            "Rx90" => rotation(Axis::X, std::f64::consts::FRAC_PI_2),
            "Ry90" => rotation(Axis::Y, std::f64::consts::FRAC_PI_2),
            "Rx180" => rotation(Axis::X, std::f64::consts::PI),
            "Ry180" => rotation(Axis::Y, std::f64::consts::PI),
            "H" => (pauli(Axis::X) + pauli(Axis::Z)).scale(h.into()),
            "X" => pauli(Axis::X),
            "Y" => pauli(Axis::Y),
            "Z" => pauli(Axis::Z),
            other => return Err(Error::InvalidArgument(format!("unknown gate label {other:?}"))),
        };
        Ok(GateTarget::new(label, u))
    }
}

/// Labels of the default universal six-gate set.
pub const DEFAULT_GATE_LABELS: [&str; 6] = ["I", "Rx90", "Ry90", "Rx180", "Ry180", "H"];

pub fn default_gate_set() -> Vec<GateTarget> {
    DEFAULT_GATE_LABELS
        .iter()
        .map(|l| GateTarget::named(l).expect("built-in gate"))
        .collect()
}

pub fn gate_set(labels: &[String]) -> Result<Vec<GateTarget>> {
    labels.iter().map(|l| GateTarget::named(l)).collect()
}

/// `exp(−i θ σ/2)`.
pub fn rotation(axis: Axis, theta: f64) -> Operator2 {
    let (s, c) = (theta / 2.0).sin_cos();
    Operator2::identity().scale(c.into()) - pauli(axis).scale(I * s)
}

/// `Tr(R_targetᵀ R) / d²` with d = 2.
pub fn process_fidelity(r: &PauliTransferMatrix, target: &GateTarget) -> f64 {
    target.ptm.inner(r) / 4.0
}

/// Average gate fidelity `(d·F_pro + 1)/(d + 1)`, d = 2.
pub fn avg_gate_fidelity(r: &PauliTransferMatrix, target: &GateTarget) -> f64 {
    (2.0 * process_fidelity(r, target) + 1.0) / 3.0
}
