//! Monte Carlo photon-pair detection, coincidence counting and visibility
//! estimation.
//!
//! Each pair is routed to one of Alice's and one of Bob's bases by a 50/50
//! splitter on each side, then produces Z-basis outcomes with the Born
//! probabilities of the effective state of that basis pair. Only true
//! coincidences are generated; there is no window matching of raw singles.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp, StandardNormal};

use crate::algebra::Unitary2;
use crate::error::{check_range, Error, Result};
use crate::model::{effective_state, Basis, BasisPair, ChannelStack, TwoQubitState};

/// Outcome of a polarizing beam splitter: `+` for the transmitted port
/// (eigenvalue +1), `-` for the reflected, primed detector (eigenvalue -1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Outcome {
    Plus,
    Minus,
}

impl Outcome {
    pub fn symbol(self) -> char {
        match self {
            Outcome::Plus => '+',
            Outcome::Minus => '-',
        }
    }

    pub fn from_symbol(s: &str) -> Option<Outcome> {
        match s {
            "+" => Some(Outcome::Plus),
            "-" => Some(Outcome::Minus),
            _ => None,
        }
    }

    fn index(self) -> usize {
        match self {
            Outcome::Plus => 0,
            Outcome::Minus => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairEvent {
    pub timestamp_ns: u64,
    pub alice_basis: Basis,
    pub bob_basis: Basis,
    pub alice_outcome: Outcome,
    pub bob_outcome: Outcome,
}

impl PairEvent {
    pub fn basis_pair(&self) -> BasisPair {
        BasisPair::new(self.alice_basis, self.bob_basis)
    }
}

/// Coincidence counts of one basis pair for the outcome combinations
/// `++`, `+-`, `-+`, `--` (Alice first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct CountsQuad {
    pub pp: u64,
    pub pm: u64,
    pub mp: u64,
    pub mm: u64,
}

impl CountsQuad {
    pub const fn new(pp: u64, pm: u64, mp: u64, mm: u64) -> Self {
        CountsQuad { pp, pm, mp, mm }
    }

    pub fn total(&self) -> u64 {
        self.pp + self.pm + self.mp + self.mm
    }

    pub fn add(&mut self, a: Outcome, b: Outcome) {
        match (a, b) {
            (Outcome::Plus, Outcome::Plus) => self.pp += 1,
            (Outcome::Plus, Outcome::Minus) => self.pm += 1,
            (Outcome::Minus, Outcome::Plus) => self.mp += 1,
            (Outcome::Minus, Outcome::Minus) => self.mm += 1,
        }
    }

    fn from_slots(c: [u64; 4]) -> Self {
        CountsQuad::new(c[0], c[1], c[2], c[3])
    }
}

impl std::ops::Add for CountsQuad {
    type Output = CountsQuad;

    fn add(self, o: CountsQuad) -> CountsQuad {
        CountsQuad::new(self.pp + o.pp, self.pm + o.pm, self.mp + o.mp, self.mm + o.mm)
    }
}

impl std::ops::AddAssign for CountsQuad {
    fn add_assign(&mut self, o: CountsQuad) {
        *self = *self + o;
    }
}

impl std::iter::Sum for CountsQuad {
    fn sum<I: Iterator<Item = CountsQuad>>(iter: I) -> Self {
        iter.fold(CountsQuad::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VisibilityEstimate {
    pub value: f64,
    pub sigma: f64,
    /// Total coincidences behind the estimate; zero for an exact value.
    pub n: u64,
    pub qber: f64,
}

impl VisibilityEstimate {
    /// A noiseless value, as produced by the analytic oracle.
    pub fn exact(value: f64) -> Self {
        let value = value.clamp(-1.0, 1.0);
        VisibilityEstimate {
            value,
            sigma: 0.0,
            n: 0,
            qber: 0.5 * (1.0 - value.abs()),
        }
    }
}

/// Contrast of the four coincidence counts with its Poisson uncertainty.
pub fn estimate_visibility(q: &CountsQuad) -> Result<VisibilityEstimate> {
    let n = q.total();
    if n == 0 {
        return Err(Error::EmptyCounts);
    }
    let same = (q.pp + q.mm) as f64;
    let diff = (q.pm + q.mp) as f64;
    let value = ((same - diff) / n as f64).clamp(-1.0, 1.0);
    Ok(VisibilityEstimate {
        value,
        sigma: visibility_sigma(value, n)?,
        n,
        qber: 0.5 * (1.0 - value.abs()),
    })
}

/// `(1 - |v|)/2`.
pub fn qber_from_visibility(v: f64) -> Result<f64> {
    let v = check_range("visibility", v, -1.0, 1.0)?;
    Ok(0.5 * (1.0 - v.abs()))
}

/// First-order Poisson propagation through the visibility formula,
/// `sqrt((1 - v^2)/n)`.
pub fn visibility_sigma(v: f64, n: u64) -> Result<f64> {
    let v = check_range("visibility", v, -1.0, 1.0)?;
    if n == 0 {
        return Err(Error::ZeroCounts);
    }
    Ok(((1.0 - v * v).max(0.0) / n as f64).sqrt())
}

/// Detector non-idealities. The default is ideal detection.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionModel {
    /// Fraction of coincidences with uniformly random outcomes, modelling
    /// accidental coincidences.
    pub background: f64,
    /// Detection efficiency indexed `[basis][outcome]` for Alice.
    pub alice_efficiency: [[f64; 2]; 2],
    /// Detection efficiency indexed `[basis][outcome]` for Bob.
    pub bob_efficiency: [[f64; 2]; 2],
}

impl Default for DetectionModel {
    fn default() -> Self {
        DetectionModel {
            background: 0.0,
            alice_efficiency: [[1.0; 2]; 2],
            bob_efficiency: [[1.0; 2]; 2],
        }
    }
}

impl DetectionModel {
    pub fn validate(&self) -> Result<()> {
        check_range("background fraction", self.background, 0.0, 1.0)?;
        for e in self.alice_efficiency.iter().chain(&self.bob_efficiency).flatten() {
            check_range("detector efficiency", *e, 0.0, 1.0)?;
        }
        Ok(())
    }

    pub fn is_ideal(&self) -> bool {
        *self == DetectionModel::default()
    }
}

/// Per-basis-pair probabilities of each outcome combination being detected
/// as a coincidence. Rows sum to at most one; the remainder is lost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BornTable {
    probs: [[f64; 4]; 4],
}

impl BornTable {
    pub fn new(psi: &TwoQubitState, stack: &ChannelStack, det: &DetectionModel) -> Self {
        let mut probs = [[0.0; 4]; 4];
        for bp in BasisPair::ALL {
            let born = effective_state(psi, stack, bp).z_probabilities();
            let row = &mut probs[bp.index()];
            for (k, p) in born.iter().enumerate() {
                let (a, b) = (k / 2, k % 2);
                let mixed = (1.0 - det.background) * p + 0.25 * det.background;
                let eff = det.alice_efficiency[bp.alice.index()][a] * det.bob_efficiency[bp.bob.index()][b];
                row[k] = mixed * eff;
            }
        }
        BornTable { probs }
    }

    pub fn probabilities(&self, bp: BasisPair) -> [f64; 4] {
        self.probs[bp.index()]
    }
}

const OUTCOMES: [(Outcome, Outcome); 4] = [
    (Outcome::Plus, Outcome::Plus),
    (Outcome::Plus, Outcome::Minus),
    (Outcome::Minus, Outcome::Plus),
    (Outcome::Minus, Outcome::Minus),
];

/// Event generator with an exponential inter-arrival clock. Keeps its clock
/// across calls so successive batches form one increasing stream.
#[derive(Debug, Clone)]
pub struct PairSource {
    rate: f64,
    clock_ns: f64,
    last_ns: Option<u64>,
}

impl PairSource {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::OutOfRange {
                what: "pair rate",
                value: rate,
            });
        }
        Ok(PairSource {
            rate,
            clock_ns: 0.0,
            last_ns: None,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Generates `n` pairs; undetected pairs advance the clock but emit no
    /// event.
    pub fn generate<R: Rng + ?Sized>(&mut self, table: &BornTable, n: u64, rng: &mut R, out: &mut Vec<PairEvent>) {
        let gap = Exp::new(self.rate).expect("rate checked positive");
        out.reserve(n as usize);
        for _ in 0..n {
            self.clock_ns += gap.sample(rng) * 1e9;
            let bits: u8 = rng.random();
            let alice_basis = if bits & 1 == 0 { Basis::First } else { Basis::Second };
            let bob_basis = if bits & 2 == 0 { Basis::First } else { Basis::Second };
            let bp = BasisPair::new(alice_basis, bob_basis);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut hit = None;
            for (k, p) in table.probs[bp.index()].iter().enumerate() {
                acc += p;
                if u < acc {
                    hit = Some(k);
                    break;
                }
            }
            let Some(k) = hit else { continue };
            let mut ts = self.clock_ns.round() as u64;
            if let Some(last) = self.last_ns {
                ts = ts.max(last + 1);
            }
            self.last_ns = Some(ts);
            let (alice_outcome, bob_outcome) = OUTCOMES[k];
            out.push(PairEvent {
                timestamp_ns: ts,
                alice_basis,
                bob_basis,
                alice_outcome,
                bob_outcome,
            });
        }
    }
}

/// `n` pairs from `psi` through `stack` with ideal detectors.
pub fn sample_pair_events<R: Rng + ?Sized>(
    psi: &TwoQubitState,
    stack: &ChannelStack,
    n: u64,
    rate: f64,
    rng: &mut R,
) -> Result<Vec<PairEvent>> {
    let table = BornTable::new(psi, stack, &DetectionModel::default());
    let mut source = PairSource::new(rate)?;
    let mut out = Vec::new();
    source.generate(&table, n, rng, &mut out);
    Ok(out)
}

fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("p in (0, 1)").sample(rng)
}

/// Draws the four coincidence quads of `n` pairs directly from the
/// multinomial law, without materialising events. Same distribution as
/// [`PairSource::generate`] followed by [`accumulate_counts`].
pub fn sample_counts<R: Rng + ?Sized>(table: &BornTable, n: u64, rng: &mut R) -> [CountsQuad; 4] {
    let mut per_pair = [0u64; 4];
    let mut rest = n;
    for (k, slot) in per_pair.iter_mut().enumerate() {
        *slot = if k == 3 {
            rest
        } else {
            binomial(rest, 1.0 / (4 - k) as f64, rng)
        };
        rest -= *slot;
    }
    let mut out = [CountsQuad::default(); 4];
    for (idx, quad) in out.iter_mut().enumerate() {
        let probs = table.probs[idx];
        let mut remaining_mass = 1.0;
        let mut rest = per_pair[idx];
        let mut slots = [0u64; 4];
        for k in 0..4 {
            let p = if remaining_mass > 0.0 {
                probs[k] / remaining_mass
            } else {
                0.0
            };
            slots[k] = binomial(rest, p, rng);
            rest -= slots[k];
            remaining_mass -= probs[k];
        }
        *quad = CountsQuad::from_slots(slots);
    }
    out
}

/// Tallies the events recorded in basis pair `bp`.
pub fn accumulate_counts<'a, I>(events: I, bp: BasisPair) -> CountsQuad
where
    I: IntoIterator<Item = &'a PairEvent>,
{
    let mut q = CountsQuad::default();
    for e in events.into_iter().filter(|e| e.basis_pair() == bp) {
        q.add(e.alice_outcome, e.bob_outcome);
    }
    q
}

/// All four quads in the order of [`BasisPair::ALL`] in one pass.
pub fn accumulate_all<'a, I>(events: I) -> [CountsQuad; 4]
where
    I: IntoIterator<Item = &'a PairEvent>,
{
    let mut out = [CountsQuad::default(); 4];
    for e in events {
        out[e.basis_pair().index()].add(e.alice_outcome, e.bob_outcome);
    }
    out
}

/// Which environmental channels wander.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DriftTargets {
    pub alice: bool,
    pub bob: bool,
}

/// Random walk of the environmental unitaries on the Bloch sphere.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DriftModel {
    /// RMS rotation angle accumulated per sqrt(second), rad/sqrt(s).
    pub angular_rate: f64,
    pub affected: DriftTargets,
}

impl DriftModel {
    pub fn none() -> Self {
        DriftModel {
            angular_rate: 0.0,
            affected: DriftTargets { alice: true, bob: true },
        }
    }

    pub fn new(angular_rate: f64) -> Result<Self> {
        check_range("drift rate", angular_rate, 0.0, f64::MAX)?;
        Ok(DriftModel {
            angular_rate,
            affected: DriftTargets { alice: true, bob: true },
        })
    }
}

fn random_rotation<R: Rng + ?Sized>(rms_angle: f64, rng: &mut R) -> Unitary2 {
    let per_axis = rms_angle / 3f64.sqrt();
    let w: [f64; 3] = std::array::from_fn(|_| {
        let g: f64 = StandardNormal.sample(rng);
        per_axis * g
    });
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if theta == 0.0 {
        return Unitary2::identity();
    }
    Unitary2::rotation(w.map(|x| x / theta), theta)
}

/// Left-multiplies each affected environmental unitary by an independent
/// small rotation with RMS angle `angular_rate * sqrt(dt)`.
pub fn apply_drift<R: Rng + ?Sized>(stack: &ChannelStack, dt: f64, d: &DriftModel, rng: &mut R) -> ChannelStack {
    let mut out = *stack;
    if dt <= 0.0 || d.angular_rate == 0.0 {
        return out;
    }
    let rms = d.angular_rate * dt.sqrt();
    if d.affected.alice {
        out.ua = random_rotation(rms, rng) * out.ua;
    }
    if d.affected.bob {
        out.ub = random_rotation(rms, rng) * out.ub;
    }
    out
}

pub const EVENTS_HEADER: &str = "timestamp_ns,a_basis,b_basis,a_out,b_out";

pub fn events_to_csv(events: &[PairEvent]) -> String {
    let mut s = String::with_capacity(16 * (events.len() + 1));
    s.push_str(EVENTS_HEADER);
    s.push('\n');
    for e in events {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            e.timestamp_ns,
            e.alice_basis.label(),
            e.bob_basis.label(),
            e.alice_outcome.symbol(),
            e.bob_outcome.symbol()
        );
    }
    s
}

pub fn events_from_csv(text: &str) -> Result<Vec<PairEvent>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == EVENTS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header `{EVENTS_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let basis = |s: &str| s.parse::<u8>().ok().and_then(Basis::from_label);
        out.push(PairEvent {
            timestamp_ns: f[0].parse().map_err(|_| bad("bad timestamp"))?,
            alice_basis: basis(f[1]).ok_or_else(|| bad("bad alice basis"))?,
            bob_basis: basis(f[2]).ok_or_else(|| bad("bad bob basis"))?,
            alice_outcome: Outcome::from_symbol(f[3]).ok_or_else(|| bad("bad alice outcome"))?,
            bob_outcome: Outcome::from_symbol(f[4]).ok_or_else(|| bad("bad bob outcome"))?,
        });
    }
    Ok(out)
}

impl Outcome {
    pub(crate) fn bit(self) -> u8 {
        self.index() as u8
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{bloch_vector_of, haar_random_unitary, sphere_angle};
    use crate::model::{make_source, predicted_visibility, SourceKind, SourceModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Poisson;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn basis_routing_is_uniform() {
        let mut r = rng(1);
        let psi = make_source(&SourceModel::new(SourceKind::Sagnac { phi: 0.3 }));
        let stack = ChannelStack::haar_random(&mut r);
        let n = 100_000u64;
        let ev = sample_pair_events(&psi, &stack, n, 21_900.0, &mut r).unwrap();
        assert_eq!(ev.len() as u64, n);
        let tol = 4.0 * (n as f64 * 3.0 / 16.0).sqrt();
        let quads = accumulate_all(&ev);
        for q in quads {
            assert!((q.total() as f64 - 25_000.0).abs() <= tol);
        }
        assert_eq!(quads.iter().map(CountsQuad::total).sum::<u64>(), n);
        assert!(ev.windows(2).all(|w| w[0].timestamp_ns < w[1].timestamp_ns));
    }

    #[test]
    fn singlet_never_gives_equal_outcomes() {
        let mut r = rng(2);
        let ev = sample_pair_events(
            &TwoQubitState::singlet(),
            &ChannelStack::identity(),
            20_000,
            1e4,
            &mut r,
        )
        .unwrap();
        for bp in BasisPair::ALL {
            let q = accumulate_counts(&ev, bp);
            assert_eq!(q.pp + q.mm, 0);
            assert!(q.total() > 0);
        }
    }

    #[test]
    fn hh_product_is_deterministic() {
        let mut r = rng(3);
        let id = Unitary2::identity();
        let psi = make_source(&SourceModel::new(SourceKind::Product { a: id, b: id }));
        let ev = sample_pair_events(&psi, &ChannelStack::identity(), 5_000, 1e4, &mut r).unwrap();
        let q = accumulate_counts(&ev, BasisPair::B11);
        assert_eq!(q.pp, q.total());
    }

    #[test]
    fn accumulate_examples() {
        assert_eq!(accumulate_counts(&[], BasisPair::B11), CountsQuad::default());
        let e = PairEvent {
            timestamp_ns: 1,
            alice_basis: Basis::First,
            bob_basis: Basis::Second,
            alice_outcome: Outcome::Plus,
            bob_outcome: Outcome::Minus,
        };
        assert_eq!(accumulate_counts(&[e, e], BasisPair::B11), CountsQuad::default());
        assert_eq!(accumulate_counts(&[e, e], BasisPair::B12), CountsQuad::new(0, 2, 0, 0));
    }

    #[test]
    fn visibility_examples() {
        assert_eq!(
            estimate_visibility(&CountsQuad::new(100, 0, 0, 100)).unwrap().value,
            1.0
        );
        assert_eq!(
            estimate_visibility(&CountsQuad::new(50, 50, 50, 50)).unwrap().value,
            0.0
        );
        let v = estimate_visibility(&CountsQuad::new(0, 100, 100, 0)).unwrap();
        assert_eq!(v.value, -1.0);
        assert_eq!(v.qber, 0.0);
        assert_eq!(estimate_visibility(&CountsQuad::default()), Err(Error::EmptyCounts));
    }

    #[test]
    fn qber_examples() {
        assert_eq!(qber_from_visibility(1.0).unwrap(), 0.0);
        assert_eq!(qber_from_visibility(0.0).unwrap(), 0.5);
        assert!((qber_from_visibility(0.957).unwrap() - 0.0215).abs() < 1e-12);
        assert!(matches!(qber_from_visibility(1.2), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(visibility_sigma(1.0, 17).unwrap(), 0.0);
        assert!((visibility_sigma(0.0, 100).unwrap() - 0.1).abs() < 1e-15);
        assert!((visibility_sigma(0.95, 1000).unwrap() - 0.00987).abs() < 5e-6);
        assert_eq!(visibility_sigma(0.5, 0), Err(Error::ZeroCounts));
        assert!(visibility_sigma(-1.5, 10).is_err());
    }

    /// Independent oracle: four Poisson counts with the means implied by
    /// (v, n), standard deviation of the resulting estimates.
    fn poisson_sigma(v: f64, n: f64, trials: usize, seed: u64) -> f64 {
        let mut r = rng(seed);
        let same = Poisson::new((n * (1.0 + v) / 4.0).max(1e-300)).unwrap();
        let diff = Poisson::new((n * (1.0 - v) / 4.0).max(1e-300)).unwrap();
        let mut xs = Vec::with_capacity(trials);
        while xs.len() < trials {
            let (a, d): (f64, f64) = (same.sample(&mut r), same.sample(&mut r));
            let (b, c): (f64, f64) = (diff.sample(&mut r), diff.sample(&mut r));
            let tot = a + b + c + d;
            if tot > 0.0 {
                xs.push((a + d - b - c) / tot);
            }
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    }

    #[test]
    fn sigma_matches_poisson_oracle() {
        let mc = poisson_sigma(0.0, 100.0, 10_000, 9);
        assert!((mc / 0.1 - 1.0).abs() < 0.05, "mc {mc}");
        let mc = poisson_sigma(0.95, 1000.0, 10_000, 10);
        assert!(
            (mc / visibility_sigma(0.95, 1000).unwrap() - 1.0).abs() < 0.05,
            "mc {mc}"
        );
    }

    #[test]
    fn counts_fast_path_matches_events() {
        let mut r = rng(40);
        let psi = make_source(&SourceModel::new(SourceKind::Singlet));
        let stack = ChannelStack::haar_random(&mut r);
        let table = BornTable::new(&psi, &stack, &DetectionModel::default());
        let n = 200_000;
        let fast = sample_counts(&table, n, &mut r);
        assert_eq!(fast.iter().map(CountsQuad::total).sum::<u64>(), n);
        for bp in BasisPair::ALL {
            let est = estimate_visibility(&fast[bp.index()]).unwrap();
            let truth = predicted_visibility(&psi, &stack, bp);
            assert!((est.value - truth).abs() < 4.0 * est.sigma.max(1e-3));
        }
    }

    #[test]
    fn born_consistency() {
        let mut r = rng(41);
        let mut inside = 0;
        for _ in 0..100 {
            let v = haar_random_unitary(&mut r);
            let psi = make_source(&SourceModel::new(SourceKind::General { v }));
            let stack = ChannelStack::haar_random(&mut r);
            let table = BornTable::new(&psi, &stack, &DetectionModel::default());
            let q = sample_counts(&table, 100_000, &mut r);
            let bp = BasisPair::ALL[r.random_range(0..4)];
            let est = estimate_visibility(&q[bp.index()]).unwrap();
            let truth = predicted_visibility(&psi, &stack, bp);
            if (est.value - truth).abs() <= 4.0 * est.sigma.max(1e-9) {
                inside += 1;
            }
        }
        assert!(inside >= 99, "{inside}");
    }

    #[test]
    fn detection_model_thins_and_mixes() {
        let mut r = rng(42);
        let det = DetectionModel {
            background: 0.2,
            alice_efficiency: [[0.5; 2]; 2],
            ..DetectionModel::default()
        };
        det.validate().unwrap();
        let table = BornTable::new(&TwoQubitState::singlet(), &ChannelStack::identity(), &det);
        let q = sample_counts(&table, 100_000, &mut r);
        let total: u64 = q.iter().map(CountsQuad::total).sum();
        assert!((total as f64 / 50_000.0 - 1.0).abs() < 0.02);
        let est = estimate_visibility(&q[0]).unwrap();
        assert!((est.value + 0.8).abs() < 4.0 * est.sigma);
        assert!(DetectionModel {
            background: 1.5,
            ..DetectionModel::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn drift_basics() {
        let mut r = rng(43);
        let stack = ChannelStack::haar_random(&mut r);
        assert_eq!(apply_drift(&stack, 5.0, &DriftModel::none(), &mut r), stack);
        assert_eq!(apply_drift(&stack, 0.0, &DriftModel::new(1.0).unwrap(), &mut r), stack);
        let moved = apply_drift(&stack, 2.0, &DriftModel::new(0.7).unwrap(), &mut r);
        assert!(moved.is_unitary(1e-12));
        assert_eq!(
            (moved.ua1, moved.ua2, moved.ub1, moved.ub2),
            (stack.ua1, stack.ua2, stack.ub1, stack.ub2)
        );
        assert_ne!(moved.ua, stack.ua);
    }

    #[test]
    fn drift_spreads_like_sqrt_time() {
        let d = DriftModel::new(0.02).unwrap();
        let mean_angle = |total: f64, steps: usize| {
            let mut sum = 0.0;
            for seed in 0..100 {
                let mut r = rng(1000 + seed);
                let mut s = ChannelStack::identity();
                for _ in 0..steps {
                    s = apply_drift(&s, total / steps as f64, &d, &mut r);
                }
                let a = bloch_vector_of(&s.ua).unwrap();
                sum += sphere_angle(&a, &crate::algebra::BlochVector::new(0.0, 0.0, 1.0));
            }
            sum / 100.0
        };
        let short = mean_angle(1.0, 50);
        let long = mean_angle(4.0, 200);
        assert!((long / short / 2.0 - 1.0).abs() < 0.1, "{short} {long}");
    }

    #[test]
    fn determinism() {
        let psi = TwoQubitState::singlet();
        let stack = ChannelStack::haar_random(&mut rng(5));
        let a = sample_pair_events(&psi, &stack, 1000, 1e4, &mut rng(6)).unwrap();
        let b = sample_pair_events(&psi, &stack, 1000, 1e4, &mut rng(6)).unwrap();
        assert_eq!(a, b);
        let t = BornTable::new(&psi, &stack, &DetectionModel::default());
        assert_eq!(
            sample_counts(&t, 1000, &mut rng(7)),
            sample_counts(&t, 1000, &mut rng(7))
        );
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let ev = sample_pair_events(
            &TwoQubitState::singlet(),
            &ChannelStack::identity(),
            50,
            1e4,
            &mut rng(8),
        )
        .unwrap();
        let text = events_to_csv(&ev);
        assert_eq!(events_from_csv(&text).unwrap(), ev);
        assert!(matches!(events_from_csv("nope\n"), Err(Error::Parse { line: 1, .. })));
        let bad = format!("{EVENTS_HEADER}\n1,3,1,+,-\n");
        assert!(matches!(events_from_csv(&bad), Err(Error::Parse { line: 2, .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn estimator_stays_in_range(pp in 0u64..500, pm in 0u64..500, mp in 0u64..500, mm in 0u64..500) {
                let q = CountsQuad::new(pp, pm, mp, mm);
                match estimate_visibility(&q) {
                    Ok(e) => {
                        prop_assert!((-1.0..=1.0).contains(&e.value));
                        prop_assert!((0.0..=0.5).contains(&e.qber));
                        prop_assert!((e.qber - 0.5 * (1.0 - e.value.abs())).abs() < 1e-12);
                        prop_assert!((e.sigma - ((1.0 - e.value * e.value) / e.n as f64).sqrt()).abs() < 1e-12);
                    }
                    Err(err) => prop_assert_eq!(err, Error::EmptyCounts),
                }
            }
        }
    }
}
