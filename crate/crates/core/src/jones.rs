//! Complex 2-vector / 2×2 algebra for fully polarized light.
//!
//! Vectors and matrices are tagged with a reference frame at the type level.
//! Everything upstream of the analyzer lives in the [`Crystal`] frame, whose
//! first component is the ordinary axis of the LiNbO₃ modulators. The
//! [`Pbs`] frame is the one of the beam splitter ports. Mixing frames is a
//! compile error:
//!
//! ```compile_fail
//! use polqkd::jones::{JonesMatrix, JonesVector, Pbs};
//! let v: JonesVector<Pbs> = JonesVector::horizontal().reframe();
//! let m = JonesMatrix::identity(); // crystal frame
//! let _ = m.apply(&v);
//! ```
//!
//! Stokes convention: `s1 = |a_o|² − |a_e|²`, `s2 = 2 Re(a_o* a_e)`,
//! `s3 = 2 Im(a_o* a_e)`. The state `(1, i)/√2` (extraordinary component
//! leading by π/2) has `s3 = +1` and is called right circular here.

use std::fmt;
use std::marker::PhantomData;
use std::ops::Mul;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex64;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Tolerance for "normalized" checks on inputs.
pub const NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JonesError {
    #[error("state is not normalized (norm² = {0})")]
    NotNormalized(f64),
    #[error("zero vector has no polarization")]
    ZeroVector,
}

/// Marker trait for reference frames.
pub trait Frame: Copy + Clone + Default + fmt::Debug + PartialEq + 'static {
    const NAME: &'static str;
}

/// Modulator crystal axes: ordinary first, extraordinary second.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Crystal;

/// Polarization beam splitter ports: SPD1 first, SPD2 second.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Pbs;

impl Frame for Crystal {
    const NAME: &'static str = "crystal";
}

impl Frame for Pbs {
    const NAME: &'static str = "pbs";
}

#[derive(Clone, Copy, PartialEq)]
pub struct JonesVector<F: Frame = Crystal> {
    pub a_o: C64,
    pub a_e: C64,
    frame: PhantomData<F>,
}

impl<F: Frame> fmt::Debug for JonesVector<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "JonesVector<{}>({}, {})", F::NAME, self.a_o, self.a_e)
    }
}

impl<F: Frame> JonesVector<F> {
    pub const fn new(a_o: C64, a_e: C64) -> Self {
        Self {
            a_o,
            a_e,
            frame: PhantomData,
        }
    }

    pub fn horizontal() -> Self {
        Self::new(ONE, ZERO)
    }

    pub fn vertical() -> Self {
        Self::new(ZERO, ONE)
    }

    /// `(A, B·e^{iφ})` with real amplitudes, the modulator-input form.
    pub fn from_amplitudes(a: f64, b: f64, relative_phase: f64) -> Self {
        Self::new(C64::new(a, 0.0), C64::from_polar(b, relative_phase))
    }

    /// Point on the Poincaré sphere given by a unit Stokes direction.
    pub fn from_stokes(s: StokesVector) -> Self {
        let theta = s.s1.clamp(-1.0, 1.0).acos();
        let phi = s.s3.atan2(s.s2);
        Self::from_amplitudes((theta / 2.0).cos(), (theta / 2.0).sin(), phi)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.a_o.norm_sqr() + self.a_e.norm_sqr()
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm_sqr() - 1.0).abs() <= NORM_TOL
    }

    pub fn normalized(&self) -> Result<Self, JonesError> {
        let n = self.norm_sqr().sqrt();
        if n == 0.0 {
            return Err(JonesError::ZeroVector);
        }
        Ok(Self::new(self.a_o / n, self.a_e / n))
    }

    /// `A = |a_o|`.
    pub fn amplitude_o(&self) -> f64 {
        self.a_o.norm()
    }

    /// `B = |a_e|`.
    pub fn amplitude_e(&self) -> f64 {
        self.a_e.norm()
    }

    /// `arg(a_e) − arg(a_o)`.
    pub fn relative_phase(&self) -> f64 {
        self.a_e.arg() - self.a_o.arg()
    }

    /// ⟨self|other⟩
    pub fn inner(&self, other: &Self) -> C64 {
        self.a_o.conj() * other.a_o + self.a_e.conj() * other.a_e
    }

    /// Removes the global phase: `a_o` real non-negative, or `a_e` real
    /// positive when `a_o` vanishes.
    pub fn canonical(&self) -> Self {
        let (pivot, eps) = if self.a_o.norm() > 1e-15 {
            (self.a_o, 0)
        } else {
            (self.a_e, 1)
        };
        if pivot.norm() == 0.0 {
            return *self;
        }
        let rot = pivot.conj() / pivot.norm();
        let mut out = Self::new(self.a_o * rot, self.a_e * rot);
        if eps == 0 {
            out.a_o = C64::new(out.a_o.re, 0.0);
        } else {
            out.a_e = C64::new(out.a_e.re, 0.0);
        }
        out
    }

    pub fn approx_eq_up_to_phase(&self, other: &Self, tol: f64) -> bool {
        let a = self.canonical();
        let b = other.canonical();
        (a.a_o - b.a_o).norm() <= tol && (a.a_e - b.a_e).norm() <= tol
    }

    /// Explicitly relabels the frame. Use only where the axes of two frames
    /// physically coincide (e.g. the analyzer fiber feeding the PBS).
    pub fn reframe<G: Frame>(self) -> JonesVector<G> {
        JonesVector::new(self.a_o, self.a_e)
    }

    pub fn to_stokes(&self) -> Result<StokesVector, JonesError> {
        to_stokes(self)
    }
}

#[derive(Clone, Copy, PartialEq)]
pub struct JonesMatrix<F: Frame = Crystal> {
    /// Row-major `[[m00, m01], [m10, m11]]`.
    pub m: [[C64; 2]; 2],
    frame: PhantomData<F>,
}

impl<F: Frame> fmt::Debug for JonesMatrix<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "JonesMatrix<{}>[[{}, {}], [{}, {}]]",
            F::NAME,
            self.m[0][0],
            self.m[0][1],
            self.m[1][0],
            self.m[1][1]
        )
    }
}

impl<F: Frame> JonesMatrix<F> {
    pub const fn new(m: [[C64; 2]; 2]) -> Self {
        Self { m, frame: PhantomData }
    }

    pub fn identity() -> Self {
        Self::new([[ONE, ZERO], [ZERO, ONE]])
    }

    pub fn diag(d0: C64, d1: C64) -> Self {
        Self::new([[d0, ZERO], [ZERO, d1]])
    }

    /// Real rotation of the field axes by `angle`.
    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new([
            [C64::new(c, 0.0), C64::new(-s, 0.0)],
            [C64::new(s, 0.0), C64::new(c, 0.0)],
        ])
    }

    /// Linear retarder with fast axis at `axis` and retardance `retardance`,
    /// in the symmetric SU(2) form `R(θ)·diag(e^{-iδ/2}, e^{iδ/2})·R(−θ)`.
    pub fn retarder(axis: f64, retardance: f64) -> Self {
        let half = retardance / 2.0;
        let core = Self::diag(C64::from_polar(1.0, -half), C64::from_polar(1.0, half));
        Self::rotation(axis) * core * Self::rotation(-axis)
    }

    /// Half-wave plate with fast axis at `axis` (reflection form).
    pub fn half_wave_plate(axis: f64) -> Self {
        let (s, c) = (2.0 * axis).sin_cos();
        Self::new([
            [C64::new(c, 0.0), C64::new(s, 0.0)],
            [C64::new(s, 0.0), C64::new(-c, 0.0)],
        ])
    }

    /// SU(2) rotation of the Poincaré sphere by `angle` about unit axis `n`.
    pub fn poincare_rotation(axis: [f64; 3], angle: f64) -> Self {
        let (s, c) = (angle / 2.0).sin_cos();
        let [n1, n2, n3] = axis;
        // exp(-i θ/2 n·σ) with σ1 = Z, σ2 = X, σ3 = Y in this Stokes mapping
        Self::new([
            [C64::new(c, -s * n1), C64::new(-s * n3, -s * n2)],
            [C64::new(s * n3, -s * n2), C64::new(c, s * n1)],
        ])
    }

    /// `self` applied after `rhs`.
    pub fn compose(&self, rhs: &Self) -> Self {
        compose(self, rhs)
    }

    pub fn apply(&self, v: &JonesVector<F>) -> JonesVector<F> {
        apply(self, v)
    }

    pub fn adjoint(&self) -> Self {
        let m = &self.m;
        Self::new([[m[0][0].conj(), m[1][0].conj()], [m[0][1].conj(), m[1][1].conj()]])
    }

    pub fn determinant(&self) -> C64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// Frobenius norm of `self − other`.
    pub fn distance(&self, other: &Self) -> f64 {
        let mut acc = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                acc += (self.m[i][j] - other.m[i][j]).norm_sqr();
            }
        }
        acc.sqrt()
    }

    /// ‖M†M − I‖_F
    pub fn unitarity_defect(&self) -> f64 {
        (self.adjoint() * *self).distance(&Self::identity())
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_defect() <= tol
    }

    /// Largest off-diagonal magnitude.
    pub fn off_diagonal(&self) -> f64 {
        self.m[0][1].norm().max(self.m[1][0].norm())
    }

    /// Frobenius distance to `other` minimised over a global phase.
    pub fn distance_up_to_phase(&self, other: &Self) -> f64 {
        // min_θ ‖A − e^{iθ}B‖² = ‖A‖² + ‖B‖² − 2|tr(B†A)|
        let tr = (other.adjoint() * *self).trace();
        let na: f64 = self.m.iter().flatten().map(|z| z.norm_sqr()).sum();
        let nb: f64 = other.m.iter().flatten().map(|z| z.norm_sqr()).sum();
        (na + nb - 2.0 * tr.norm()).max(0.0).sqrt()
    }

    pub fn trace(&self) -> C64 {
        self.m[0][0] + self.m[1][1]
    }

    /// Nearest unitary via Gram-Schmidt on the columns.
    pub fn reunitarize(&self) -> Self {
        let c0 = [self.m[0][0], self.m[1][0]];
        let n0 = (c0[0].norm_sqr() + c0[1].norm_sqr()).sqrt();
        let c0 = [c0[0] / n0, c0[1] / n0];
        let c1 = [self.m[0][1], self.m[1][1]];
        let proj = c0[0].conj() * c1[0] + c0[1].conj() * c1[1];
        let c1 = [c1[0] - proj * c0[0], c1[1] - proj * c0[1]];
        let n1 = (c1[0].norm_sqr() + c1[1].norm_sqr()).sqrt();
        let c1 = [c1[0] / n1, c1[1] / n1];
        Self::new([[c0[0], c1[0]], [c0[1], c1[1]]])
    }

    pub fn reframe<G: Frame>(self) -> JonesMatrix<G> {
        JonesMatrix::new(self.m)
    }
}

impl<F: Frame> Mul for JonesMatrix<F> {
    type Output = JonesMatrix<F>;

    fn mul(self, rhs: Self) -> Self::Output {
        compose(&self, &rhs)
    }
}

impl<F: Frame> Mul<JonesVector<F>> for JonesMatrix<F> {
    type Output = JonesVector<F>;

    fn mul(self, rhs: JonesVector<F>) -> Self::Output {
        apply(&self, &rhs)
    }
}

/// Product `m1·m2`: `m2` acts first.
pub fn compose<F: Frame>(m1: &JonesMatrix<F>, m2: &JonesMatrix<F>) -> JonesMatrix<F> {
    let a = &m1.m;
    let b = &m2.m;
    JonesMatrix::new([
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ])
}

pub fn apply<F: Frame>(m: &JonesMatrix<F>, v: &JonesVector<F>) -> JonesVector<F> {
    JonesVector::new(
        m.m[0][0] * v.a_o + m.m[0][1] * v.a_e,
        m.m[1][0] * v.a_o + m.m[1][1] * v.a_e,
    )
}

/// Modulator Jones matrix `diag(e^{iφ_or}, e^{i(φ_ex + Δφ)})`.
pub fn phase_modulator_matrix(delta_phi: f64, phi_or: f64, phi_ex: f64) -> JonesMatrix {
    JonesMatrix::diag(C64::from_polar(1.0, phi_or), C64::from_polar(1.0, phi_ex + delta_phi))
}

/// `|⟨u|v⟩|²` for normalized states.
pub fn overlap<F: Frame>(u: &JonesVector<F>, v: &JonesVector<F>) -> Result<f64, JonesError> {
    for s in [u, v] {
        if !s.is_normalized() {
            return Err(JonesError::NotNormalized(s.norm_sqr()));
        }
    }
    Ok(u.inner(v).norm_sqr().min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StokesVector {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

impl StokesVector {
    pub fn new(s1: f64, s2: f64, s3: f64) -> Self {
        Self { s1, s2, s3 }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.s1 * other.s1 + self.s2 * other.s2 + self.s3 * other.s3
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Great-circle angle between two directions on the sphere.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let c = self.dot(other) / (self.norm() * other.norm());
        c.clamp(-1.0, 1.0).acos()
    }
}

/// Normalized Stokes parameters of a pure state.
pub fn to_stokes<F: Frame>(v: &JonesVector<F>) -> Result<StokesVector, JonesError> {
    let n = v.norm_sqr();
    if n == 0.0 {
        return Err(JonesError::ZeroVector);
    }
    let cross = v.a_o.conj() * v.a_e;
    Ok(StokesVector {
        s1: (v.a_o.norm_sqr() - v.a_e.norm_sqr()) / n,
        s2: 2.0 * cross.re / n,
        s3: 2.0 * cross.im / n,
    })
}

/// Section from the laser to Alice's modulator that splits horizontal light
/// equally over both crystal axes:
/// `(1/√2)·[[e^{iφ₁}, 1], [1, −e^{−iφ₁}]]`.
pub fn alice_section(phi1: f64) -> JonesMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    JonesMatrix::new([
        [C64::from_polar(s, phi1), C64::new(s, 0.0)],
        [C64::new(s, 0.0), -C64::from_polar(s, -phi1)],
    ])
}

/// Section between the two modulators: exchanges the crystal axes,
/// `[[0, 1], [e^{iφ₂}, 0]]`.
pub fn swap_section(phi2: f64) -> JonesMatrix {
    JonesMatrix::new([[ZERO, ONE], [C64::from_polar(1.0, phi2), ZERO]])
}

/// Section from Bob's modulator to the PBS:
/// `(1/√2)·[[1, e^{iφ₃}], [−e^{−iφ₃}, 1]]`.
///
/// Together with [`alice_section`] and [`swap_section`] the product is
/// diagonal whenever `φ₁ + φ₂ + φ₃ ≡ 0 (mod 2π)`.
pub fn bob_section(phi3: f64) -> JonesMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    JonesMatrix::new([
        [C64::new(s, 0.0), C64::from_polar(s, phi3)],
        [-C64::from_polar(s, -phi3), C64::new(s, 0.0)],
    ])
}

/// The four BB84 states produced by Alice's modulator for a given input
/// relative phase: `[ψ₁, ψ₂, χ₁, χ₂]`.
pub fn bb84_states(phi1: f64) -> [JonesVector; 4] {
    use std::f64::consts::{FRAC_1_SQRT_2 as S, FRAC_PI_2, PI};
    [0.0, PI, FRAC_PI_2, 3.0 * FRAC_PI_2].map(|offset| JonesVector::from_amplitudes(S, S, phi1 + offset))
}
