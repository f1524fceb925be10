//! Complex 2x2 unitaries, the Euler-type angle parametrization used for
//! polarization controllers, Haar sampling and Bloch-sphere geometry.
//!
//! Equality between unitaries is phase equality throughout: a global phase
//! carries no physical meaning for a polarization transformation.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::ops::Mul;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Entrywise tolerance for algebraic identities (unitarity, phase equality).
pub const ALGEBRA_TOL: f64 = 1e-12;
/// Tolerance used when validating caller-supplied matrices.
pub const VALIDATION_TOL: f64 = 1e-9;

/// Below this modulus a matrix entry is treated as zero when fixing phases.
const DEGENERATE: f64 = 1e-14;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Overridable tolerance pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub algebraic: f64,
    pub validation: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            algebraic: ALGEBRA_TOL,
            validation: VALIDATION_TOL,
        }
    }
}

/// A 2x2 complex matrix, row major, expected to be unitary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unitary2 {
    m: [[Complex64; 2]; 2],
}

impl Unitary2 {
    /// Builds a matrix from its entries without checking unitarity.
    pub const fn from_entries(u00: Complex64, u01: Complex64, u10: Complex64, u11: Complex64) -> Self {
        Unitary2 {
            m: [[u00, u01], [u10, u11]],
        }
    }

    /// Builds a matrix and rejects it if `U U^dagger` deviates from the
    /// identity by more than [`VALIDATION_TOL`].
    pub fn try_new(u00: Complex64, u01: Complex64, u10: Complex64, u11: Complex64) -> Result<Self> {
        let u = Self::from_entries(u00, u01, u10, u11);
        u.validate(VALIDATION_TOL)?;
        Ok(u)
    }

    pub const fn identity() -> Self {
        Self::from_entries(ONE, ZERO, ZERO, ONE)
    }

    /// Real matrix with all entries of modulus 1/sqrt(2): (1, -1; 1, 1)/sqrt(2).
    pub fn hadamard_like() -> Self {
        let h = Complex64::new(FRAC_1_SQRT_2, 0.0);
        Self::from_entries(h, -h, h, h)
    }

    /// Rotation of the Bloch sphere by `theta` about the y axis.
    pub fn ry(theta: f64) -> Self {
        su2_from_params(&Su2Params::new(0.0, 0.0, theta, 0.0))
    }

    /// Rotation of the Bloch sphere by `theta` about the unit axis `axis`.
    pub fn rotation(axis: [f64; 3], theta: f64) -> Self {
        let (s, c) = (0.5 * theta).sin_cos();
        let [nx, ny, nz] = axis;
        // cos(t/2) I - i sin(t/2) n.sigma
        Self::from_entries(
            Complex64::new(c, -s * nz),
            Complex64::new(-s * ny, -s * nx),
            Complex64::new(s * ny, -s * nx),
            Complex64::new(c, s * nz),
        )
    }

    #[inline]
    pub fn entry(&self, row: usize, col: usize) -> Complex64 {
        self.m[row][col]
    }

    pub fn entries(&self) -> [[Complex64; 2]; 2] {
        self.m
    }

    pub fn adjoint(&self) -> Self {
        let m = &self.m;
        Self::from_entries(m[0][0].conj(), m[1][0].conj(), m[0][1].conj(), m[1][1].conj())
    }

    pub fn det(&self) -> Complex64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// Multiplies every entry by `e^{i theta}`.
    pub fn with_phase(&self, theta: f64) -> Self {
        self.scaled(Complex64::from_polar(1.0, theta))
    }

    fn scaled(&self, z: Complex64) -> Self {
        let m = &self.m;
        Self::from_entries(m[0][0] * z, m[0][1] * z, m[1][0] * z, m[1][1] * z)
    }

    /// Applies the matrix to a single-qubit amplitude vector (|H>, |V>).
    pub fn apply(&self, v: [Complex64; 2]) -> [Complex64; 2] {
        [
            self.m[0][0] * v[0] + self.m[0][1] * v[1],
            self.m[1][0] * v[0] + self.m[1][1] * v[1],
        ]
    }

    /// Largest entrywise deviation of `U U^dagger` from the identity.
    pub fn unitarity_residual(&self) -> f64 {
        let p = *self * self.adjoint();
        let mut worst = 0.0_f64;
        for r in 0..2 {
            for c in 0..2 {
                let target = if r == c { ONE } else { ZERO };
                worst = worst.max((p.m[r][c] - target).norm());
            }
        }
        worst
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_residual() <= tol
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let residual = self.unitarity_residual();
        if residual <= tol && residual.is_finite() {
            Ok(())
        } else {
            Err(Error::NotUnitary { residual })
        }
    }

    /// Representative of the phase class: `u00` real and non-negative, or
    /// `u10` real and non-negative when `u00` vanishes.
    pub fn canonical(&self) -> Self {
        let pivot = if self.m[0][0].norm() > ALGEBRA_TOL {
            self.m[0][0]
        } else {
            self.m[1][0]
        };
        if pivot.norm() == 0.0 {
            return *self;
        }
        let mut out = self.with_phase(-pivot.arg());
        if self.m[0][0].norm() > ALGEBRA_TOL {
            out.m[0][0] = Complex64::new(out.m[0][0].norm(), 0.0);
        } else {
            out.m[1][0] = Complex64::new(out.m[1][0].norm(), 0.0);
        }
        out
    }

    /// Smallest entrywise distance between `self` and `e^{i theta} other`
    /// over all global phases.
    pub fn phase_distance(&self, other: &Unitary2) -> f64 {
        let mut inner = ZERO;
        for r in 0..2 {
            for c in 0..2 {
                inner += other.m[r][c].conj() * self.m[r][c];
            }
        }
        let aligned = other.with_phase(if inner.norm() > 0.0 { inner.arg() } else { 0.0 });
        max_entry_diff(self, &aligned)
    }

    pub fn phase_eq(&self, other: &Unitary2, tol: f64) -> bool {
        self.phase_distance(other) <= tol
    }
}

fn max_entry_diff(a: &Unitary2, b: &Unitary2) -> f64 {
    let mut worst = 0.0_f64;
    for r in 0..2 {
        for c in 0..2 {
            worst = worst.max((a.m[r][c] - b.m[r][c]).norm());
        }
    }
    worst
}

impl Mul for Unitary2 {
    type Output = Unitary2;

    fn mul(self, rhs: Unitary2) -> Unitary2 {
        let (a, b) = (&self.m, &rhs.m);
        Unitary2::from_entries(
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        )
    }
}

impl Default for Unitary2 {
    fn default() -> Self {
        Self::identity()
    }
}

/// Angles of the parametrization
///
/// ```text
/// U = e^{i alpha} ( e^{-i zeta} cos(gamma/2)   -e^{-i eta} sin(gamma/2) )
///                 ( e^{ i eta}  sin(gamma/2)    e^{ i zeta} cos(gamma/2) )
/// ```
///
/// with `zeta = (beta + delta)/2` and `eta = (beta - delta)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct Su2Params {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Su2Params {
    pub const fn new(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Self {
        Su2Params {
            alpha,
            beta,
            gamma,
            delta,
        }
    }

    pub fn zeta(&self) -> f64 {
        0.5 * (self.beta + self.delta)
    }

    pub fn eta(&self) -> f64 {
        0.5 * (self.beta - self.delta)
    }

    /// The three actuated angles `(beta, gamma, delta)`.
    pub fn actuated(&self) -> [f64; 3] {
        [self.beta, self.gamma, self.delta]
    }

    pub fn with_actuated(&self, angles: [f64; 3]) -> Self {
        Su2Params::new(self.alpha, angles[0], angles[1], angles[2])
    }
}

/// Matrix of the angle parametrization. Any real angles are accepted; gamma
/// outside `[0, pi]` yields a matrix phase-equal to its reduced form.
pub fn su2_from_params(p: &Su2Params) -> Unitary2 {
    let (s, c) = (0.5 * p.gamma).sin_cos();
    let (zeta, eta) = (p.zeta(), p.eta());
    let u = Unitary2::from_entries(
        Complex64::from_polar(c, -zeta),
        -Complex64::from_polar(s, -eta),
        Complex64::from_polar(s, eta),
        Complex64::from_polar(c, zeta),
    );
    if p.alpha == 0.0 {
        u
    } else {
        u.with_phase(p.alpha)
    }
}

/// Inverse of [`su2_from_params`] with `gamma` in `[0, pi]`.
///
/// When `gamma` is 0 or pi only one of `zeta`/`eta` is defined; `delta` is
/// then set to zero and the phase is absorbed into `beta`.
pub fn params_from_unitary(u: &Unitary2) -> Result<Su2Params> {
    params_from_unitary_with(u, &Tolerances::default())
}

pub fn params_from_unitary_with(u: &Unitary2, tol: &Tolerances) -> Result<Su2Params> {
    u.validate(tol.validation)?;
    let alpha = 0.5 * u.det().arg();
    let w = u.with_phase(-alpha);
    let (c, s) = (w.entry(0, 0).norm(), w.entry(1, 0).norm());
    // atan2 keeps full precision near gamma = 0 and gamma = pi
    let gamma = 2.0 * s.atan2(c);
    let (beta, delta) = if s < DEGENERATE {
        (-2.0 * w.entry(0, 0).arg(), 0.0)
    } else if c < DEGENERATE {
        (2.0 * w.entry(1, 0).arg(), 0.0)
    } else {
        let zeta = -w.entry(0, 0).arg();
        let eta = w.entry(1, 0).arg();
        (zeta + eta, zeta - eta)
    };
    Ok(Su2Params::new(alpha, beta, gamma, delta))
}

/// The `gamma` angle of `u`, in `[0, pi]`.
pub fn gamma_of(u: &Unitary2) -> Result<f64> {
    params_from_unitary(u).map(|p| p.gamma)
}

/// Draws a Haar-distributed unitary: uniform point on the 3-sphere for the
/// SU(2) part times a uniform global phase.
pub fn haar_random_unitary<R: Rng + ?Sized>(rng: &mut R) -> Unitary2 {
    let mut q = [0.0_f64; 4];
    let norm = loop {
        for x in q.iter_mut() {
            *x = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            break n;
        }
    };
    let [a, b, c, d] = q.map(|x| x / norm);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    Unitary2::from_entries(
        Complex64::new(a, b),
        Complex64::new(-c, d),
        Complex64::new(c, d),
        Complex64::new(a, -b),
    )
    .with_phase(phase)
}

/// Point on the unit Bloch (Poincare) sphere.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlochVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl BlochVector {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        BlochVector { x, y, z }
    }

    /// Bloch vector of a normalized single-qubit state.
    pub fn of_state(psi: [Complex64; 2]) -> Self {
        let cross = psi[0].conj() * psi[1];
        BlochVector::new(2.0 * cross.re, 2.0 * cross.im, psi[0].norm_sqr() - psi[1].norm_sqr())
    }

    pub fn dot(&self, o: &BlochVector) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: &BlochVector) -> BlochVector {
        BlochVector::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn neg(&self) -> BlochVector {
        BlochVector::new(-self.x, -self.y, -self.z)
    }
}

/// Bloch vector of `u^dagger |H>`; the measurement basis realised by `u`
/// followed by an H/V analyzer is the antipodal pair `+-` this vector.
pub fn bloch_vector_of(u: &Unitary2) -> Result<BlochVector> {
    u.validate(VALIDATION_TOL)?;
    let m = u.entries();
    Ok(BlochVector::of_state([m[0][0].conj(), m[0][1].conj()]))
}

/// Angle between two unit vectors on the sphere, in `[0, pi]`.
pub fn sphere_angle(a: &BlochVector, b: &BlochVector) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}
