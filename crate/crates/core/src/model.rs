//! Two-qubit states, channel stacks and the analytic correlation model.
//!
//! Every basis pair (i, j) sees the effective state
//! `(Ubar_Ai (x) Ubar_Bj) psi` with `Ubar_Ai = U_Ai U_A` and
//! `Ubar_Bj = U_Bj U_B`, measured in the Pauli-Z basis on both sides. For a
//! maximally entangled source `psi = (I (x) V) |psi->` the correlation is
//! governed by the single unitary `U_delta = Ubar_Bj V Ubar_Ai^dagger`
//! through `E = -cos(gamma(U_delta))`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;

use num_complex::Complex64;
use rand::Rng;

use crate::algebra::{gamma_of, haar_random_unitary, Unitary2, ALGEBRA_TOL};
use crate::error::{Error, Result};

/// Concurrence deficit tolerated by [`singlet_decompose`].
pub const MAX_ENTANGLED_TOL: f64 = 1e-6;

/// Default coincidence pair rate in pairs per second.
pub const DEFAULT_PAIR_RATE: f64 = 21_900.0;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// One of the two measurement bases of a party.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Basis {
    First,
    Second,
}

impl Basis {
    pub const BOTH: [Basis; 2] = [Basis::First, Basis::Second];

    /// 1 or 2.
    pub fn label(self) -> u8 {
        match self {
            Basis::First => 1,
            Basis::Second => 2,
        }
    }

    pub fn from_label(label: u8) -> Option<Basis> {
        match label {
            1 => Some(Basis::First),
            2 => Some(Basis::Second),
            _ => None,
        }
    }

    pub(crate) fn index(self) -> usize {
        self.label() as usize - 1
    }
}

/// Alice's basis `i` together with Bob's basis `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct BasisPair {
    pub alice: Basis,
    pub bob: Basis,
}

impl BasisPair {
    pub const B11: BasisPair = BasisPair::new(Basis::First, Basis::First);
    pub const B12: BasisPair = BasisPair::new(Basis::First, Basis::Second);
    pub const B21: BasisPair = BasisPair::new(Basis::Second, Basis::First);
    pub const B22: BasisPair = BasisPair::new(Basis::Second, Basis::Second);
    /// All four pairs in the order 11, 12, 21, 22.
    pub const ALL: [BasisPair; 4] = [Self::B11, Self::B12, Self::B21, Self::B22];

    pub const fn new(alice: Basis, bob: Basis) -> Self {
        BasisPair { alice, bob }
    }

    /// Position in [`BasisPair::ALL`].
    pub fn index(self) -> usize {
        2 * self.alice.index() + self.bob.index()
    }

    pub fn is_matched(self) -> bool {
        self.alice == self.bob
    }
}

impl fmt::Display for BasisPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A{}B{}", self.alice.label(), self.bob.label())
    }
}

/// Which correlation the aligned pairs (11 and 22) are driven to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum CorrelationSign {
    /// `E = +1`: identical outcomes.
    #[serde(rename = "+1")]
    Plus,
    /// `E = -1`: opposite outcomes, the natural target for a singlet.
    #[default]
    #[serde(rename = "-1")]
    Minus,
}

impl CorrelationSign {
    pub fn value(self) -> f64 {
        match self {
            CorrelationSign::Plus => 1.0,
            CorrelationSign::Minus => -1.0,
        }
    }

    pub fn from_value(v: i32) -> Option<Self> {
        match v {
            1 => Some(CorrelationSign::Plus),
            -1 => Some(CorrelationSign::Minus),
            _ => None,
        }
    }
}

/// Pure two-qubit state over the ordered basis HH, HV, VH, VV
/// (Alice's qubit first).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoQubitState {
    amp: [Complex64; 4],
}

impl TwoQubitState {
    /// Normalizes the amplitudes; fails on a zero vector.
    pub fn new(amp: [Complex64; 4]) -> Result<Self> {
        let norm = amp.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::OutOfRange {
                what: "state norm",
                value: norm,
            });
        }
        Ok(TwoQubitState {
            amp: amp.map(|a| a / norm),
        })
    }

    /// The singlet `(|HV> - |VH>)/sqrt(2)`.
    pub fn singlet() -> Self {
        let h = Complex64::new(FRAC_1_SQRT_2, 0.0);
        TwoQubitState {
            amp: [ZERO, h, -h, ZERO],
        }
    }

    pub fn product(a: [Complex64; 2], b: [Complex64; 2]) -> Result<Self> {
        Self::new([a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]])
    }

    pub fn amplitudes(&self) -> [Complex64; 4] {
        self.amp
    }

    pub fn norm(&self) -> f64 {
        self.amp.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `(a (x) b) psi`.
    #[allow(clippy::needless_range_loop)]
    pub fn apply_local(&self, a: &Unitary2, b: &Unitary2) -> Self {
        let (am, bm) = (a.entries(), b.entries());
        let mut out = [ZERO; 4];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = ZERO;
                for k in 0..2 {
                    for l in 0..2 {
                        acc += am[i][k] * bm[j][l] * self.amp[2 * k + l];
                    }
                }
                out[2 * i + j] = acc;
            }
        }
        TwoQubitState { amp: out }
    }

    /// Smallest distance to `e^{i theta} other` over global phases.
    pub fn phase_distance(&self, other: &TwoQubitState) -> f64 {
        let inner: Complex64 = self.amp.iter().zip(&other.amp).map(|(a, b)| b.conj() * a).sum();
        let phase = Complex64::from_polar(1.0, if inner.norm() > 0.0 { inner.arg() } else { 0.0 });
        self.amp
            .iter()
            .zip(&other.amp)
            .map(|(a, b)| (a - b * phase).norm())
            .fold(0.0, f64::max)
    }

    /// Born probabilities of the outcome pairs ++, +-, -+, -- in the Z basis.
    pub fn z_probabilities(&self) -> [f64; 4] {
        self.amp.map(|a| a.norm_sqr())
    }
}

/// Kinds of photon-pair source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceKind {
    Singlet,
    /// `(|HV> + e^{i phi}|VH>)/sqrt(2)`, as emitted by a Sagnac source.
    Sagnac {
        phi: f64,
    },
    /// `(I (x) V)|psi->` for an arbitrary unitary `V`.
    General {
        v: Unitary2,
    },
    /// `(a^dagger|H>) (x) (b^dagger|H>)`.
    Product {
        a: Unitary2,
        b: Unitary2,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceModel {
    pub kind: SourceKind,
    /// Pairs per second, used for timestamps and trace clocks only.
    pub pair_rate: f64,
}

impl SourceModel {
    pub fn new(kind: SourceKind) -> Self {
        SourceModel {
            kind,
            pair_rate: DEFAULT_PAIR_RATE,
        }
    }

    pub fn state(&self) -> TwoQubitState {
        make_source(self)
    }
}

pub fn make_source(m: &SourceModel) -> TwoQubitState {
    match m.kind {
        SourceKind::Singlet => TwoQubitState::singlet(),
        SourceKind::Sagnac { phi } => {
            let h = FRAC_1_SQRT_2;
            TwoQubitState {
                amp: [ZERO, Complex64::new(h, 0.0), Complex64::from_polar(h, phi), ZERO],
            }
        }
        SourceKind::General { v } => TwoQubitState::singlet().apply_local(&Unitary2::identity(), &v),
        SourceKind::Product { a, b } => {
            let h = [Complex64::new(1.0, 0.0), ZERO];
            TwoQubitState::product(a.adjoint().apply(h), b.adjoint().apply(h))
                .expect("unitary images of |H> are normalized")
        }
    }
}

/// The six unitaries between source and analyzers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChannelStack {
    pub ua: Unitary2,
    pub ub: Unitary2,
    pub ua1: Unitary2,
    pub ua2: Unitary2,
    pub ub1: Unitary2,
    pub ub2: Unitary2,
}

impl ChannelStack {
    pub fn identity() -> Self {
        ChannelStack::default()
    }

    /// All six unitaries drawn independently from the Haar measure.
    pub fn haar_random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        ChannelStack {
            ua: haar_random_unitary(rng),
            ub: haar_random_unitary(rng),
            ua1: haar_random_unitary(rng),
            ua2: haar_random_unitary(rng),
            ub1: haar_random_unitary(rng),
            ub2: haar_random_unitary(rng),
        }
    }

    /// Composite channel `U_Ai U_A` of Alice's basis `i`.
    pub fn alice(&self, i: Basis) -> Unitary2 {
        match i {
            Basis::First => self.ua1 * self.ua,
            Basis::Second => self.ua2 * self.ua,
        }
    }

    /// Composite channel `U_Bj U_B` of Bob's basis `j`.
    pub fn bob(&self, j: Basis) -> Unitary2 {
        match j {
            Basis::First => self.ub1 * self.ub,
            Basis::Second => self.ub2 * self.ub,
        }
    }

    pub fn entries(&self) -> [Unitary2; 6] {
        [self.ua, self.ub, self.ua1, self.ua2, self.ub1, self.ub2]
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.entries().iter().all(|u| u.is_unitary(tol))
    }
}

pub fn effective_state(psi: &TwoQubitState, stack: &ChannelStack, bp: BasisPair) -> TwoQubitState {
    psi.apply_local(&stack.alice(bp.alice), &stack.bob(bp.bob))
}

/// `<psi| sigma_z (x) sigma_z |psi>`.
pub fn expectation_zz(psi: &TwoQubitState) -> f64 {
    let p = psi.z_probabilities();
    (p[0] - p[1] - p[2] + p[3]).clamp(-1.0, 1.0)
}

/// Pure-state concurrence `2 |a_HH a_VV - a_HV a_VH|`.
pub fn concurrence(psi: &TwoQubitState) -> f64 {
    let a = psi.amp;
    2.0 * (a[0] * a[3] - a[1] * a[2]).norm()
}

/// Finds `V` with `(I (x) V)|psi-> = psi` up to a global phase.
pub fn singlet_decompose(psi: &TwoQubitState) -> Result<Unitary2> {
    let c = concurrence(psi);
    if c < 1.0 - MAX_ENTANGLED_TOL {
        return Err(Error::NotMaximallyEntangled { concurrence: c });
    }
    let a = psi.amp;
    let s = std::f64::consts::SQRT_2;
    // (I (x) V)|psi-> = (|H> V|V> - |V> V|H>)/sqrt(2)
    let col0 = [-s * a[2], -s * a[3]];
    let col1 = [s * a[0], s * a[1]];
    // project onto the nearest unitary: normalize the first column and give
    // the second the orthogonal direction with its own phase
    let n0 = (col0[0].norm_sqr() + col0[1].norm_sqr()).sqrt();
    let u0 = [col0[0] / n0, col0[1] / n0];
    let ortho = [-u0[1].conj(), u0[0].conj()];
    let overlap = ortho[0].conj() * col1[0] + ortho[1].conj() * col1[1];
    let ph = Complex64::from_polar(1.0, overlap.arg());
    Ok(Unitary2::from_entries(u0[0], ortho[0] * ph, u0[1], ortho[1] * ph))
}

/// `U_delta^{i,j} = Ubar_Bj V Ubar_Ai^dagger`.
pub fn u_delta(stack: &ChannelStack, v: &Unitary2, bp: BasisPair) -> Unitary2 {
    stack.bob(bp.bob) * *v * stack.alice(bp.alice).adjoint()
}

/// Overlaps `|<k| u1 u2^dagger |l>|^2` between the bases realised by `u1`
/// and `u2`.
pub fn mub_overlap_matrix(u1: &Unitary2, u2: &Unitary2) -> [[f64; 2]; 2] {
    let m = (*u1 * u2.adjoint()).entries();
    [
        [m[0][0].norm_sqr(), m[0][1].norm_sqr()],
        [m[1][0].norm_sqr(), m[1][1].norm_sqr()],
    ]
}

/// Noiseless visibility of basis pair `bp`.
pub fn predicted_visibility(psi: &TwoQubitState, stack: &ChannelStack, bp: BasisPair) -> f64 {
    expectation_zz(&effective_state(psi, stack, bp))
}

/// Noiseless visibilities of all four basis pairs in the order of
/// [`BasisPair::ALL`].
pub fn predicted_visibilities(psi: &TwoQubitState, stack: &ChannelStack) -> [f64; 4] {
    BasisPair::ALL.map(|bp| predicted_visibility(psi, stack, bp))
}

/// Free parameters of the aligned solution: global phases `alpha`, and the
/// `zeta`/`eta` phases of the three constrained `U_delta` matrices.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AlignedPhases {
    pub alpha11: f64,
    pub zeta11: f64,
    pub alpha22: f64,
    pub zeta22: f64,
    pub alpha12: f64,
    pub zeta12: f64,
    pub eta12: f64,
}

impl AlignedPhases {
    /// Each phase uniform in `[0, 2 pi)`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut draw = || rng.random_range(0.0..2.0 * PI);
        AlignedPhases {
            alpha11: draw(),
            zeta11: draw(),
            alpha22: draw(),
            zeta22: draw(),
            alpha12: draw(),
            zeta12: draw(),
            eta12: draw(),
        }
    }
}

/// `U_delta` with `gamma = 0` (sign -1) or `gamma = pi` (sign +1).
fn correlated_delta(sign: CorrelationSign, alpha: f64, phase: f64) -> Unitary2 {
    let u = match sign {
        CorrelationSign::Minus => Unitary2::from_entries(
            Complex64::from_polar(1.0, -phase),
            ZERO,
            ZERO,
            Complex64::from_polar(1.0, phase),
        ),
        CorrelationSign::Plus => Unitary2::from_entries(
            ZERO,
            -Complex64::from_polar(1.0, -phase),
            Complex64::from_polar(1.0, phase),
            ZERO,
        ),
    };
    u.with_phase(alpha)
}

/// `U_delta` with `gamma = pi/2`.
fn uncorrelated_delta(alpha: f64, zeta: f64, eta: f64) -> Unitary2 {
    let h = FRAC_1_SQRT_2;
    Unitary2::from_entries(
        Complex64::from_polar(h, -zeta),
        -Complex64::from_polar(h, -eta),
        Complex64::from_polar(h, eta),
        Complex64::from_polar(h, zeta),
    )
    .with_phase(alpha)
}

/// Constructs `U_B1`, `U_B2` and `U_A2` so that basis pairs 11 and 22 are
/// perfectly correlated with the requested sign and pair 12 is uncorrelated,
/// for the source `(I (x) v)|psi->`. Free phases are drawn from `rng`.
pub fn solve_aligned_channels<R: Rng + ?Sized>(
    u_a: &Unitary2,
    u_b: &Unitary2,
    u_a1: &Unitary2,
    v: &Unitary2,
    sign: CorrelationSign,
    rng: &mut R,
) -> ChannelStack {
    solve_aligned_channels_with(u_a, u_b, u_a1, v, sign, &AlignedPhases::random(rng))
}

pub fn solve_aligned_channels_with(
    u_a: &Unitary2,
    u_b: &Unitary2,
    u_a1: &Unitary2,
    v: &Unitary2,
    sign: CorrelationSign,
    ph: &AlignedPhases,
) -> ChannelStack {
    let d11 = correlated_delta(sign, ph.alpha11, ph.zeta11);
    let d22 = correlated_delta(sign, ph.alpha22, ph.zeta22);
    let d12 = uncorrelated_delta(ph.alpha12, ph.zeta12, ph.eta12);

    let a1 = *u_a1 * *u_a;
    let b1 = d11 * a1 * v.adjoint();
    let b2 = d12 * a1 * v.adjoint();
    let a2 = d22.adjoint() * d12 * a1;

    ChannelStack {
        ua: *u_a,
        ub: *u_b,
        ua1: *u_a1,
        ua2: a2 * u_a.adjoint(),
        ub1: b1 * u_b.adjoint(),
        ub2: b2 * u_b.adjoint(),
    }
}

/// `|E^{psi_21}|` of the source `(I (x) v)|psi->`, evaluated through
/// `-cos(gamma(U_delta^{2,1}))`.
pub fn cross_corr_residual(stack: &ChannelStack, v: &Unitary2) -> f64 {
    let g = gamma_of(&u_delta(stack, v, BasisPair::B21)).expect("products of unitaries are unitary");
    g.cos().abs()
}

/// Largest deviation of every overlap from `1/2`.
pub fn mub_deviation(u1: &Unitary2, u2: &Unitary2) -> f64 {
    mub_overlap_matrix(u1, u2)
        .iter()
        .flatten()
        .map(|x| (x - 0.5).abs())
        .fold(0.0, f64::max)
}

/// Checks `(U (x) U)|psi-> ~ |psi->`; returns the phase-distance residual.
pub fn singlet_invariance_residual(u: &Unitary2) -> f64 {
    let s = TwoQubitState::singlet();
    s.apply_local(u, u).phase_distance(&s)
}

impl TwoQubitState {
    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= ALGEBRA_TOL
    }
}
