//! Adaptive alignment of the three actuated polarization controllers from
//! visibility estimates alone, drift stabilization and the witness check.
//!
//! Controller `C` sits after the fixed per-basis channel, so PCB1 turns
//! `U_B1` into `C U_B1`, PCB2 acts on `U_B2` and PCA2 on `U_A2`. Alice's first
//! basis is the reference and is never actuated.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::algebra::{params_from_unitary, su2_from_params, Su2Params, Unitary2};
use crate::error::{check_range, Error, Result};
use crate::model::{predicted_visibilities, Basis, BasisPair, ChannelStack, CorrelationSign, TwoQubitState};
use crate::sifting::{qber_report_merge, sift_events, QberReport};
use crate::sim::{
    accumulate_all, apply_drift, estimate_visibility, qber_from_visibility, sample_counts, BornTable, CountsQuad,
    DetectionModel, DriftModel, PairEvent, PairSource, VisibilityEstimate,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Controller {
    Pcb1,
    Pcb2,
    Pca2,
}

impl Controller {
    /// Interleaving order of simultaneous mode.
    pub const ALL: [Controller; 3] = [Controller::Pcb1, Controller::Pcb2, Controller::Pca2];

    pub fn index(self) -> usize {
        match self {
            Controller::Pcb1 => 0,
            Controller::Pcb2 => 1,
            Controller::Pca2 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Controller::Pcb1 => "PCB1",
            Controller::Pcb2 => "PCB2",
            Controller::Pca2 => "PCA2",
        }
    }

    pub fn step(self) -> AlignmentStep {
        match self {
            Controller::Pcb1 => AlignmentStep::One,
            Controller::Pcb2 => AlignmentStep::Two,
            Controller::Pca2 => AlignmentStep::Three,
        }
    }

    /// Whether moving this controller changes the statistics of `bp`.
    pub fn affects(self, bp: BasisPair) -> bool {
        match self {
            Controller::Pcb1 => bp.bob == Basis::First,
            Controller::Pcb2 => bp.bob == Basis::Second,
            Controller::Pca2 => bp.alice == Basis::Second,
        }
    }
}

/// The three alignment steps: maximize the correlation in bases 1/1,
/// null it in 1/2, maximize it in 2/2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlignmentStep {
    One,
    Two,
    Three,
}

impl AlignmentStep {
    pub const ALL: [AlignmentStep; 3] = [AlignmentStep::One, AlignmentStep::Two, AlignmentStep::Three];

    pub fn number(self) -> u8 {
        match self {
            AlignmentStep::One => 1,
            AlignmentStep::Two => 2,
            AlignmentStep::Three => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(AlignmentStep::One),
            2 => Some(AlignmentStep::Two),
            3 => Some(AlignmentStep::Three),
            _ => None,
        }
    }

    pub fn controller(self) -> Controller {
        match self {
            AlignmentStep::One => Controller::Pcb1,
            AlignmentStep::Two => Controller::Pcb2,
            AlignmentStep::Three => Controller::Pca2,
        }
    }

    pub fn basis_pair(self) -> BasisPair {
        match self {
            AlignmentStep::One => BasisPair::B11,
            AlignmentStep::Two => BasisPair::B12,
            AlignmentStep::Three => BasisPair::B22,
        }
    }

    /// Objective to maximize given the visibility of [`Self::basis_pair`].
    /// Steps 1 and 3 reward the requested correlation sign, so both key
    /// bases end up with the same sign; at the optimum this equals `|V|`.
    pub fn objective(self, sign: CorrelationSign, v: f64) -> f64 {
        match self {
            AlignmentStep::Two => -v.abs(),
            _ => sign.value() * v,
        }
    }

    fn reached(self, targets: &AlignmentTargets, v: f64) -> bool {
        match self {
            AlignmentStep::Two => v.abs() <= targets.t_uncorr,
            _ => targets.sign.value() * v >= targets.t_corr,
        }
    }
}

/// One actuated controller and its current angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerHandle {
    pub target: Controller,
    pub params: Su2Params,
}

impl ControllerHandle {
    pub fn identity(target: Controller) -> Self {
        ControllerHandle {
            target,
            params: Su2Params::default(),
        }
    }

    pub fn unitary(&self) -> Unitary2 {
        su2_from_params(&self.params)
    }

    /// `stack` with this controller inserted after its channel.
    pub fn apply(&self, stack: &ChannelStack) -> ChannelStack {
        let c = self.unitary();
        let mut out = *stack;
        match self.target {
            Controller::Pcb1 => out.ub1 = c * out.ub1,
            Controller::Pcb2 => out.ub2 = c * out.ub2,
            Controller::Pca2 => out.ua2 = c * out.ua2,
        }
        out
    }
}

fn identity_handles() -> [ControllerHandle; 3] {
    Controller::ALL.map(ControllerHandle::identity)
}

fn apply_handles(stack: &ChannelStack, handles: &[ControllerHandle]) -> ChannelStack {
    handles.iter().fold(*stack, |s, h| h.apply(&s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentTargets {
    pub sign: CorrelationSign,
    pub t_corr: f64,
    pub t_uncorr: f64,
}

impl Default for AlignmentTargets {
    fn default() -> Self {
        AlignmentTargets {
            sign: CorrelationSign::Minus,
            t_corr: 0.98,
            t_uncorr: 0.05,
        }
    }
}

impl AlignmentTargets {
    pub fn validate(&self) -> Result<()> {
        check_range("t_corr", self.t_corr, f64::MIN_POSITIVE, 1.0)?;
        check_range("t_uncorr", self.t_uncorr, f64::MIN_POSITIVE, 1.0)?;
        if self.t_uncorr >= self.t_corr {
            return Err(Error::Config(format!(
                "t_uncorr ({}) must be below t_corr ({})",
                self.t_uncorr, self.t_corr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Sequential,
    Simultaneous,
}

/// Where visibilities come from: sampled coincidences or the exact model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Oracle {
    MonteCarlo,
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Pairs per visibility evaluation, spread over all four basis pairs.
    pub batch_size: u64,
    pub initial_step: f64,
    /// Step factor applied after a full sweep of rejected moves.
    pub shrink: f64,
    pub step_floor: f64,
    /// A run only counts as converged once every controller's step has
    /// shrunk to this size.
    pub settle_step: f64,
    pub max_pairs: u64,
    pub max_evaluations: u64,
    /// Batches pooled into the baseline estimate of the current setting.
    pub pool_batches: usize,
    /// Upper limit on batches spent on one candidate while its gain stays
    /// within one standard error of zero.
    pub max_candidate_batches: u64,
    pub mode: SearchMode,
    pub oracle: Oracle,
    pub pair_rate: f64,
    pub detection: DetectionModel,
    /// Stabilization re-optimizes once a visibility is more than
    /// `guard_sigmas` standard errors beyond its threshold relaxed by
    /// `guard_band`.
    pub guard_band: f64,
    pub guard_sigmas: f64,
    /// Sample batches pooled while stabilizing.
    pub stabilize_pool: usize,
    /// Initial step of a re-optimization triggered while stabilizing.
    pub reoptimize_step: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            batch_size: 10_000,
            initial_step: 0.4,
            shrink: 0.5,
            step_floor: 1e-3,
            settle_step: 0.03,
            max_pairs: 4_000_000,
            max_evaluations: 100_000,
            pool_batches: 16,
            max_candidate_batches: 4,
            mode: SearchMode::Simultaneous,
            oracle: Oracle::MonteCarlo,
            pair_rate: crate::model::DEFAULT_PAIR_RATE,
            detection: DetectionModel::default(),
            guard_band: 0.01,
            guard_sigmas: 3.0,
            stabilize_pool: 2,
            reoptimize_step: 0.1,
        }
    }
}

impl OptimizerConfig {
    /// Noiseless settings used for exact convergence checks.
    pub fn analytic() -> Self {
        OptimizerConfig {
            oracle: Oracle::Analytic,
            step_floor: 1e-9,
            ..OptimizerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::OutOfRange { what, value: v })
            }
        };
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_evaluations < 2 {
            return Err(Error::Config("max_evaluations must be at least 2".into()));
        }
        if self.pool_batches == 0 || self.stabilize_pool == 0 || self.max_candidate_batches == 0 {
            return Err(Error::Config("pool sizes must be positive".into()));
        }
        positive("initial_step", self.initial_step)?;
        positive("step_floor", self.step_floor)?;
        positive("settle_step", self.settle_step)?;
        positive("reoptimize_step", self.reoptimize_step)?;
        positive("pair_rate", self.pair_rate)?;
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::OutOfRange {
                what: "shrink",
                value: self.shrink,
            });
        }
        if self.step_floor > self.initial_step {
            return Err(Error::Config("step_floor exceeds initial_step".into()));
        }
        if self.oracle == Oracle::MonteCarlo && self.max_pairs < 2 * self.batch_size {
            return Err(Error::Config("max_pairs must cover at least two batches".into()));
        }
        check_range("guard_band", self.guard_band, 0.0, 1.0)?;
        check_range("guard_sigmas", self.guard_sigmas, 0.0, f64::MAX)?;
        self.detection.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Converged,
    FailedWitness,
    BudgetExhausted,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Running => "running",
            RunStatus::Converged => "converged",
            RunStatus::FailedWitness => "failed_witness",
            RunStatus::BudgetExhausted => "budget_exhausted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            RunStatus::Running,
            RunStatus::Converged,
            RunStatus::FailedWitness,
            RunStatus::BudgetExhausted,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
    }
}

/// One sample of the alignment time series. Visibilities are magnitudes;
/// `None` marks a quantity with no estimate yet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub pairs_total: u64,
    pub seconds: f64,
    pub v: [Option<f64>; 4],
    pub qber11: Option<f64>,
    pub qber22: Option<f64>,
    pub status: RunStatus,
    /// Actuated `(β, γ, δ)` of PCB1, PCB2 and PCA2. Not part of the CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angles: Option<[[f64; 3]; 3]>,
}

pub const TRACE_HEADER: &str = "pairs_total,seconds,v11,v12,v21,v22,qber11,qber22,status";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTrace {
    pub rows: Vec<TraceRow>,
    pub status: RunStatus,
}

impl Default for AlignmentTrace {
    fn default() -> Self {
        AlignmentTrace {
            rows: Vec::new(),
            status: RunStatus::Running,
        }
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.9}")).unwrap_or_default()
}

impl AlignmentTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(TRACE_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.9},{},{},{},{},{},{},{}",
                r.pairs_total,
                r.seconds,
                fmt_opt(r.v[0]),
                fmt_opt(r.v[1]),
                fmt_opt(r.v[2]),
                fmt_opt(r.v[3]),
                fmt_opt(r.qber11),
                fmt_opt(r.qber22),
                r.status.as_str()
            );
        }
        s
    }

    /// Parses [`Self::to_csv`] output. Lines starting with `#` are skipped.
    /// The terminal status is taken from the last row.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let err = |msg: String| Error::Parse { line: lineno, msg };
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !header_seen {
                if line != TRACE_HEADER {
                    return Err(err(format!("expected header `{TRACE_HEADER}`")));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(err(format!("expected 9 fields, found {}", f.len())));
            }
            let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| err(format!("bad number `{s}`"))) };
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    num(s).map(Some)
                }
            };
            rows.push(TraceRow {
                pairs_total: f[0].parse().map_err(|_| err(format!("bad pair count `{}`", f[0])))?,
                seconds: num(f[1])?,
                v: [opt(f[2])?, opt(f[3])?, opt(f[4])?, opt(f[5])?],
                qber11: opt(f[6])?,
                qber22: opt(f[7])?,
                status: RunStatus::parse(f[8]).ok_or_else(|| err(format!("unknown status `{}`", f[8])))?,
                angles: None,
            });
        }
        if !header_seen {
            return Err(Error::Parse {
                line: 0,
                msg: "missing header".into(),
            });
        }
        let status = rows.last().map_or(RunStatus::Running, |r| r.status);
        Ok(AlignmentTrace { rows, status })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WitnessVerdict {
    EntangledCertified,
    NotCertified,
}

/// `|v11| + |v22| > 1` certifies entanglement; with sigmas the sum must
/// clear the bound by `3 (σ11 + σ22)`.
pub fn witness_check(v11: f64, v22: f64, sigmas: Option<(f64, f64)>) -> WitnessVerdict {
    let margin = sigmas.map_or(0.0, |(s11, s22)| 3.0 * (s11 + s22));
    witness_check_margin(v11, v22, margin)
}

pub fn witness_check_margin(v11: f64, v22: f64, margin: f64) -> WitnessVerdict {
    if v11.abs() + v22.abs() > 1.0 + margin {
        WitnessVerdict::EntangledCertified
    } else {
        WitnessVerdict::NotCertified
    }
}

/// Objective of `step` for the current `stack`, plus the estimate it came
/// from: one fresh batch (Monte Carlo) or the exact value (analytic).
pub fn evaluate_objective<R: Rng + ?Sized>(
    step: AlignmentStep,
    psi: &TwoQubitState,
    stack: &ChannelStack,
    sign: CorrelationSign,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<(f64, VisibilityEstimate)> {
    cfg.validate()?;
    let bp = step.basis_pair();
    let est = match cfg.oracle {
        Oracle::Analytic => VisibilityEstimate::exact(predicted_visibilities(psi, stack)[bp.index()]),
        Oracle::MonteCarlo => {
            let counts = sample_counts(&BornTable::new(psi, stack, &cfg.detection), cfg.batch_size, rng);
            estimate_visibility(&counts[bp.index()])?
        }
    };
    Ok((step.objective(sign, est.value), est))
}

fn rotate_about(p: &Su2Params, axis: usize, angle: f64) -> Su2Params {
    let mut n = [0.0; 3];
    n[axis] = 1.0;
    let moved = su2_from_params(p) * Unitary2::rotation(n, angle);
    params_from_unitary(&moved).expect("products of unitaries are unitary")
}

fn wrap_pi(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y == -PI {
        PI
    } else {
        y
    }
}

/// Best offset along one rotation axis from visibilities at `0`, `+s` and
/// `-s`. A visibility is linear in each party's Bloch vector, so along a
/// fixed rotation axis it is exactly `a + b cos x + c sin x`.
fn line_optimum(step: AlignmentStep, sign: CorrelationSign, s: f64, f0: f64, fp: f64, fm: f64) -> Option<f64> {
    let denom = 1.0 - s.cos();
    if denom < 1e-12 {
        return None;
    }
    let c = (fp - fm) / (2.0 * s.sin());
    let b = (f0 - 0.5 * (fp + fm)) / denom;
    let a = f0 - b;
    let r = b.hypot(c);
    if r < 1e-12 {
        return None;
    }
    let phi = c.atan2(b);
    let x = match step {
        AlignmentStep::Two => {
            let q = -a / r;
            if q.abs() >= 1.0 {
                if a > 0.0 {
                    phi + PI
                } else {
                    phi
                }
            } else {
                let d = q.acos();
                let (x1, x2) = (wrap_pi(phi + d), wrap_pi(phi - d));
                if x1.abs() <= x2.abs() {
                    x1
                } else {
                    x2
                }
            }
        }
        _ if sign == CorrelationSign::Plus => phi,
        _ => phi + PI,
    };
    Some(wrap_pi(x))
}

/// Coordinate search state of one controller. Each rotation axis is probed
/// at `±step`; an improving probe is taken and repeated, and when both are
/// rejected the line optimum through the two probes and the baseline is
/// taken if it is resolved beyond its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
struct CoordinateSearch {
    step: f64,
    axis: usize,
    dir: f64,
    /// The rejected first probe of the current axis.
    first: Option<VisibilityEstimate>,
    idle_axes: usize,
    floor_sweeps: usize,
}

impl CoordinateSearch {
    fn new(step: f64) -> Self {
        CoordinateSearch {
            step,
            axis: 0,
            dir: 1.0,
            first: None,
            idle_axes: 0,
            floor_sweeps: 0,
        }
    }

    fn offset(&self) -> f64 {
        match self.first {
            None => self.dir * self.step,
            Some(_) => -self.dir * self.step,
        }
    }

    fn propose(&self, p: &Su2Params) -> Su2Params {
        rotate_about(p, self.axis, self.offset())
    }

    fn accepted(&mut self, offset: f64) {
        self.dir = offset.signum();
        self.first = None;
        self.idle_axes = 0;
        self.floor_sweeps = 0;
    }

    /// Records a rejected probe. Returns the probes at `+step` and `-step`
    /// once both are known.
    fn rejected(&mut self, est: Option<VisibilityEstimate>) -> Option<(VisibilityEstimate, VisibilityEstimate)> {
        match (self.first.take(), est) {
            (None, Some(e)) => {
                self.first = Some(e);
                None
            }
            (Some(first), Some(second)) => Some(if self.dir > 0.0 {
                (first, second)
            } else {
                (second, first)
            }),
            _ => None,
        }
    }

    /// Moves on after both probes of an axis were rejected. Three such axes
    /// in a row shrink the step, whether or not a fitted move was made.
    fn next_axis(&mut self, cfg: &OptimizerConfig) {
        self.first = None;
        self.dir = 1.0;
        self.axis = (self.axis + 1) % 3;
        self.idle_axes += 1;
        if self.idle_axes >= 3 {
            self.idle_axes = 0;
            if self.step <= cfg.step_floor {
                self.floor_sweeps += 1;
            }
            self.step = (self.step * cfg.shrink).max(cfg.step_floor);
        }
    }
}

#[derive(Debug, Clone)]
enum Batch {
    Counts([CountsQuad; 4]),
    Exact([f64; 4]),
}

impl Batch {
    fn merge(&mut self, other: &Batch) {
        match (self, other) {
            (Batch::Counts(a), Batch::Counts(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            (me, other) => *me = other.clone(),
        }
    }

    fn estimate(&self, bp: BasisPair) -> Option<VisibilityEstimate> {
        match self {
            Batch::Counts(c) => estimate_visibility(&c[bp.index()]).ok(),
            Batch::Exact(v) => Some(VisibilityEstimate::exact(v[bp.index()])),
        }
    }
}

/// Baseline estimates of the current setting, one pool per basis pair.
#[derive(Debug, Clone)]
struct Pools {
    counts: [VecDeque<CountsQuad>; 4],
    exact: [Option<f64>; 4],
    cap: usize,
}

impl Pools {
    fn new(cap: usize) -> Self {
        Pools {
            counts: Default::default(),
            exact: [None; 4],
            cap,
        }
    }

    fn reset(&mut self, bp: BasisPair) {
        self.counts[bp.index()].clear();
        self.exact[bp.index()] = None;
    }

    fn push(&mut self, batch: &Batch, bp: BasisPair) {
        let i = bp.index();
        match batch {
            Batch::Counts(c) => {
                let pool = &mut self.counts[i];
                pool.push_back(c[i]);
                while pool.len() > self.cap {
                    pool.pop_front();
                }
            }
            Batch::Exact(v) => self.exact[i] = Some(v[i]),
        }
    }

    fn is_empty(&self, bp: BasisPair) -> bool {
        self.counts[bp.index()].is_empty() && self.exact[bp.index()].is_none()
    }

    fn estimate(&self, bp: BasisPair) -> Option<VisibilityEstimate> {
        if let Some(v) = self.exact[bp.index()] {
            return Some(VisibilityEstimate::exact(v));
        }
        let total: CountsQuad = self.counts[bp.index()].iter().copied().sum();
        estimate_visibility(&total).ok()
    }
}

/// Pairs consumed per purpose; the three fields partition the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairAccounting {
    pub alignment: u64,
    pub stabilization_sample: u64,
    pub key_eligible: u64,
}

impl PairAccounting {
    pub fn total(&self) -> u64 {
        self.alignment + self.stabilization_sample + self.key_eligible
    }
}

/// One feedback window of a stabilization run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilizeWindow {
    pub seconds: f64,
    pub sample_pairs: u64,
    pub key_pairs: u64,
    pub key_bits: u64,
    /// Error fraction of the sifted key bits of this window, per basis.
    pub key_qber11: Option<f64>,
    pub key_qber22: Option<f64>,
    /// Model visibilities of the setting used in this window.
    pub true_v: [f64; 4],
    pub reoptimizing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilizeOutcome {
    pub trace: AlignmentTrace,
    pub windows: Vec<StabilizeWindow>,
    pub report: QberReport,
    pub accounting: PairAccounting,
    pub reoptimizations: u64,
}

/// Result of [`run_alignment`].
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentOutcome {
    pub trace: AlignmentTrace,
    pub handles: [ControllerHandle; 3],
    /// The channel stack with the final controller settings applied.
    pub aligned: ChannelStack,
    pub pairs_used: u64,
    pub evaluations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Reached,
    BudgetExhausted,
}

/// Result of [`optimize_controller`].
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerRun {
    pub handle: ControllerHandle,
    pub trace: AlignmentTrace,
    pub outcome: StepOutcome,
}

/// The control loop. Owns the unknown channels, the controller settings
/// and the estimate pools; all randomness comes from the caller's RNG.
#[derive(Debug, Clone)]
pub struct Aligner {
    psi: TwoQubitState,
    base: ChannelStack,
    handles: [ControllerHandle; 3],
    targets: AlignmentTargets,
    cfg: OptimizerConfig,
    searches: [CoordinateSearch; 3],
    pools: Pools,
    pairs: u64,
    evaluations: u64,
    trace: AlignmentTrace,
}

impl Aligner {
    pub fn new(
        psi: &TwoQubitState,
        stack: &ChannelStack,
        targets: AlignmentTargets,
        cfg: OptimizerConfig,
    ) -> Result<Self> {
        targets.validate()?;
        cfg.validate()?;
        Ok(Aligner {
            psi: *psi,
            base: *stack,
            handles: identity_handles(),
            targets,
            cfg,
            searches: [CoordinateSearch::new(cfg.initial_step); 3],
            pools: Pools::new(cfg.pool_batches),
            pairs: 0,
            evaluations: 0,
            trace: AlignmentTrace::default(),
        })
    }

    pub fn handles(&self) -> &[ControllerHandle; 3] {
        &self.handles
    }

    pub fn set_handle(&mut self, handle: ControllerHandle) {
        self.handles[handle.target.index()] = handle;
        for bp in BasisPair::ALL {
            if handle.target.affects(bp) {
                self.pools.reset(bp);
            }
        }
    }

    /// The unknown channels, without controllers.
    pub fn base(&self) -> &ChannelStack {
        &self.base
    }

    /// Channels as seen by the analyzers, controllers included.
    pub fn stack(&self) -> ChannelStack {
        apply_handles(&self.base, &self.handles)
    }

    pub fn trace(&self) -> &AlignmentTrace {
        &self.trace
    }

    pub fn pairs_used(&self) -> u64 {
        self.pairs
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    /// Exact visibilities of the current setting, for diagnostics.
    pub fn true_visibilities(&self) -> [f64; 4] {
        predicted_visibilities(&self.psi, &self.stack())
    }

    /// Pooled estimates of the current setting.
    pub fn estimates(&self) -> [Option<VisibilityEstimate>; 4] {
        BasisPair::ALL.map(|bp| self.pools.estimate(bp))
    }

    fn stack_with(&self, ctrl: Controller, params: Su2Params) -> ChannelStack {
        let mut handles = self.handles;
        handles[ctrl.index()].params = params;
        apply_handles(&self.base, &handles)
    }

    /// Whether another evaluation fits, keeping one in reserve so the final
    /// setting can always be measured.
    fn budget_left(&self) -> bool {
        self.budget_for(2)
    }

    fn budget_for(&self, evaluations: u64) -> bool {
        if self.evaluations + evaluations > self.cfg.max_evaluations {
            return false;
        }
        match self.cfg.oracle {
            Oracle::Analytic => true,
            Oracle::MonteCarlo => self.pairs + evaluations * self.cfg.batch_size <= self.cfg.max_pairs,
        }
    }

    fn measure<R: Rng + ?Sized>(&mut self, stack: &ChannelStack, rng: &mut R) -> Batch {
        self.evaluations += 1;
        match self.cfg.oracle {
            Oracle::Analytic => Batch::Exact(predicted_visibilities(&self.psi, stack)),
            Oracle::MonteCarlo => {
                self.pairs += self.cfg.batch_size;
                let table = BornTable::new(&self.psi, stack, &self.cfg.detection);
                Batch::Counts(sample_counts(&table, self.cfg.batch_size, rng))
            }
        }
    }

    fn seconds(&self, pairs: u64) -> f64 {
        pairs as f64 / self.cfg.pair_rate
    }

    fn record(&mut self, status: RunStatus) {
        let est = self.estimates();
        let v = est.map(|e| e.map(|e| e.value.abs()));
        let qber = |e: Option<VisibilityEstimate>| e.and_then(|e| qber_from_visibility(e.value).ok());
        self.trace.rows.push(TraceRow {
            pairs_total: self.pairs,
            seconds: self.seconds(self.pairs),
            v,
            qber11: qber(est[0]),
            qber22: qber(est[3]),
            status,
            angles: Some(self.handles.map(|h| h.params.actuated())),
        });
    }

    /// Measures the current setting into every pool.
    fn measure_baseline<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let batch = self.measure(&self.stack(), rng);
        for bp in BasisPair::ALL {
            self.pools.push(&batch, bp);
        }
        self.record(RunStatus::Running);
    }

    /// Objective gain of `batch` over the pooled baseline for `ctrl`, and
    /// the standard error of that difference.
    fn compare(&self, ctrl: Controller, batch: &Batch) -> Option<(f64, f64)> {
        let step = ctrl.step();
        let bp = step.basis_pair();
        let sign = self.targets.sign;
        let base = self.pools.estimate(bp)?;
        let new = batch.estimate(bp)?;
        let gain = step.objective(sign, new.value) - step.objective(sign, base.value);
        Some((gain, base.sigma.hypot(new.sigma)))
    }

    /// Moves `ctrl` to `params` and invalidates every estimate it affects.
    fn apply_move(&mut self, ctrl: Controller, params: Su2Params, batch: Option<&Batch>) {
        self.handles[ctrl.index()].params = params;
        for p in BasisPair::ALL {
            if ctrl.affects(p) {
                self.pools.reset(p);
                // exact values carry no selection bias
                if let Some(b @ Batch::Exact(_)) = batch {
                    self.pools.push(b, p);
                }
            } else if let Some(b) = batch {
                self.pools.push(b, p);
            }
        }
        for other in Controller::ALL {
            if other != ctrl && ctrl.affects(other.step().basis_pair()) {
                // a pending probe of `other` was taken against the old baseline
                self.searches[other.index()].first = None;
            }
        }
    }

    /// Commits the verdict on the probe of `ctrl` measured in `batch`.
    /// A winning batch is biased upwards, so it never seeds the new
    /// baseline of the pairs the controller affects.
    fn conclude_probe(&mut self, ctrl: Controller, candidate: Su2Params, batch: &Batch, accepted: bool) {
        let i = ctrl.index();
        let offset = self.searches[i].offset();
        if accepted {
            self.apply_move(ctrl, candidate, Some(batch));
            self.searches[i].accepted(offset);
            return;
        }
        let bp = ctrl.step().basis_pair();
        let probes = self.searches[i].rejected(batch.estimate(bp));
        for p in BasisPair::ALL {
            if !ctrl.affects(p) {
                self.pools.push(batch, p);
            }
        }
        let Some((plus, minus)) = probes else {
            if self.searches[i].first.is_none() {
                // an empty probe leaves nothing to fit
                self.searches[i].next_axis(&self.cfg);
            }
            return;
        };
        let search = self.searches[i];
        let target = self.interpolate(ctrl, search.step, plus, minus);
        if let Some(x) = target {
            let params = rotate_about(&self.handles[i].params, search.axis, x);
            self.apply_move(ctrl, params, None);
        }
        self.searches[i].next_axis(&self.cfg);
    }

    /// Line optimum along the current axis of `ctrl`, if it differs from the
    /// present setting by more than its propagated standard error.
    fn interpolate(
        &self,
        ctrl: Controller,
        s: f64,
        plus: VisibilityEstimate,
        minus: VisibilityEstimate,
    ) -> Option<f64> {
        let step = ctrl.step();
        let sign = self.targets.sign;
        let base = self.pools.estimate(step.basis_pair())?;
        let f = [base.value, plus.value, minus.value];
        let sig = [base.sigma, plus.sigma, minus.sigma];
        let x = line_optimum(step, sign, s, f[0], f[1], f[2])?;
        let mut var = 0.0;
        for k in 0..3 {
            if sig[k] == 0.0 {
                continue;
            }
            let mut g = f;
            g[k] += sig[k];
            let xk = line_optimum(step, sign, s, g[0], g[1], g[2])?;
            var += wrap_pi(xk - x).powi(2);
        }
        let resolved = x.abs() > var.sqrt() && x.abs() > 0.0 && x.abs() <= 2.0 * s;
        resolved.then_some(x)
    }

    /// One optimization move of `ctrl`, measuring a fresh baseline first
    /// when none is pooled. Returns `false` when the budget ran out.
    fn step_move<R: Rng + ?Sized>(&mut self, ctrl: Controller, rng: &mut R) -> bool {
        let bp = ctrl.step().basis_pair();
        if self.pools.is_empty(bp) {
            if !self.budget_left() {
                return false;
            }
            self.measure_baseline(rng);
        }
        if !self.budget_left() {
            return false;
        }
        let i = ctrl.index();
        let candidate = self.searches[i].propose(&self.handles[i].params);
        let stack = self.stack_with(ctrl, candidate);
        let mut batch = self.measure(&stack, rng);
        let mut batches = 1;
        // undecided comparisons collect more pairs for the same candidate
        let accepted = loop {
            match self.compare(ctrl, &batch) {
                Some((gain, se)) if gain > se => break true,
                Some((gain, se))
                    if gain >= -se
                        && self.cfg.oracle == Oracle::MonteCarlo
                        && batches < self.cfg.max_candidate_batches
                        && self.budget_left() =>
                {
                    let more = self.measure(&stack, rng);
                    batch.merge(&more);
                    batches += 1;
                }
                _ => break false,
            }
        };
        self.conclude_probe(ctrl, candidate, &batch, accepted);
        let reached = self.step_reached(ctrl);
        let search = &mut self.searches[i];
        if search.floor_sweeps > 0 && !reached {
            // stuck at the floor short of the target: widen the search again
            *search = CoordinateSearch::new(self.cfg.initial_step);
        }
        self.record(RunStatus::Running);
        true
    }

    fn settled(&self, ctrl: Controller) -> bool {
        self.searches[ctrl.index()].step <= self.cfg.settle_step
    }

    fn objective_met(&self, step: AlignmentStep) -> bool {
        self.pools
            .estimate(step.basis_pair())
            .is_some_and(|e| step.reached(&self.targets, e.value))
    }

    fn step_reached(&self, ctrl: Controller) -> bool {
        self.objective_met(ctrl.step()) && self.settled(ctrl)
    }

    fn converged(&self) -> bool {
        Controller::ALL.iter().all(|c| self.step_reached(*c))
    }

    fn classify(&self) -> RunStatus {
        if AlignmentStep::ALL.iter().all(|s| self.objective_met(*s)) {
            return RunStatus::Converged;
        }
        let (e11, e22) = (self.pools.estimate(BasisPair::B11), self.pools.estimate(BasisPair::B22));
        let (v11, s11) = e11.map_or((0.0, 0.0), |e| (e.value, e.sigma));
        let (v22, s22) = e22.map_or((0.0, 0.0), |e| (e.value, e.sigma));
        // a residual V12 can lift V22 of a separable state up to t_uncorr
        let margin = 3.0 * (s11 + s22) + self.targets.t_uncorr;
        match witness_check_margin(v11, v22, margin) {
            WitnessVerdict::NotCertified => RunStatus::FailedWitness,
            WitnessVerdict::EntangledCertified => RunStatus::BudgetExhausted,
        }
    }

    fn finish<R: Rng + ?Sized>(&mut self, rng: &mut R) -> RunStatus {
        if BasisPair::ALL.iter().any(|bp| self.pools.is_empty(*bp)) && self.budget_for(1) {
            self.measure_baseline(rng);
        }
        let status = self.classify();
        self.record(status);
        self.trace.status = status;
        status
    }

    /// Runs the configured alignment procedure to completion.
    pub fn run<R: Rng + ?Sized>(&mut self, rng: &mut R) -> RunStatus {
        self.searches = [CoordinateSearch::new(self.cfg.initial_step); 3];
        if self.budget_left() {
            self.measure_baseline(rng);
        }
        match self.cfg.mode {
            SearchMode::Sequential => {
                'steps: for ctrl in Controller::ALL {
                    while !self.step_reached(ctrl) {
                        if !self.step_move(ctrl, rng) {
                            break 'steps;
                        }
                    }
                }
            }
            SearchMode::Simultaneous => {
                'rounds: while !self.converged() {
                    for ctrl in Controller::ALL {
                        if self.converged() || !self.step_move(ctrl, rng) {
                            break 'rounds;
                        }
                    }
                }
            }
        }
        self.finish(rng)
    }

    /// Optimizes one controller until its own target is reached or the
    /// budget is spent.
    pub fn optimize<R: Rng + ?Sized>(&mut self, ctrl: Controller, rng: &mut R) -> StepOutcome {
        self.searches[ctrl.index()] = CoordinateSearch::new(self.cfg.initial_step);
        while !self.step_reached(ctrl) {
            if !self.step_move(ctrl, rng) {
                return StepOutcome::BudgetExhausted;
            }
        }
        StepOutcome::Reached
    }

    /// Runs the link for `duration` seconds while the channels drift.
    /// A fraction `f` of pairs is disclosed to monitor visibilities and
    /// the rest goes to sifting; controller moves resume whenever a
    /// monitored visibility leaves its guard band.
    pub fn stabilize<R: Rng + ?Sized>(
        &mut self,
        drift: &DriftModel,
        f: f64,
        duration: f64,
        rng: &mut R,
    ) -> Result<StabilizeOutcome> {
        let f = check_range("disclosed fraction", f, 0.0, 1.0)?;
        let duration = check_range("duration", duration, 0.0, f64::MAX)?;
        let cfg = self.cfg;
        let sign = self.targets.sign;
        let rate = cfg.pair_rate;
        let total = (duration * rate).round() as u64;
        let chunk = if f > 0.0 {
            ((cfg.batch_size as f64 / f).ceil() as u64).max(1)
        } else {
            cfg.batch_size
        };
        let flip = u8::from(sign == CorrelationSign::Minus);
        let offset = self.pairs;
        let mut source = PairSource::new(rate)?;
        let mut trace = AlignmentTrace::default();
        let mut windows = Vec::new();
        let mut reports = Vec::new();
        let mut accounting = PairAccounting {
            alignment: offset,
            ..PairAccounting::default()
        };
        let mut pools = Pools::new(cfg.stabilize_pool);
        std::mem::swap(&mut self.pools, &mut pools);
        let mut reoptimizing = false;
        let mut reoptimizations = 0;
        let mut cursor = 0usize;
        let mut events: Vec<PairEvent> = Vec::new();
        let mut key_events: Vec<PairEvent> = Vec::new();
        let mut done = 0u64;

        while done < total {
            let m = chunk.min(total - done);
            let candidate = if reoptimizing {
                // probe only controllers whose own objective has slipped
                while self.objective_met(Controller::ALL[cursor % 3].step())
                    && !Controller::ALL.iter().all(|c| self.objective_met(c.step()))
                {
                    cursor += 1;
                }
                let ctrl = Controller::ALL[cursor % 3];
                // an emptied pool gets a fresh baseline before any probe
                if self.pools.is_empty(ctrl.step().basis_pair()) {
                    None
                } else {
                    cursor += 1;
                    Some((
                        ctrl,
                        self.searches[ctrl.index()].propose(&self.handles[ctrl.index()].params),
                    ))
                }
            } else {
                None
            };
            let stack = match candidate {
                Some((ctrl, p)) => self.stack_with(ctrl, p),
                None => self.stack(),
            };
            let table = BornTable::new(&self.psi, &stack, &cfg.detection);
            events.clear();
            key_events.clear();
            source.generate(&table, m, rng, &mut events);

            let mut sample = [CountsQuad::default(); 4];
            let mut disclosed = [0u64; 2];
            let mut disclosed_errors = [0u64; 2];
            let mut sampled = 0u64;
            for e in &events {
                if f > 0.0 && rng.random::<f64>() < f {
                    sampled += 1;
                    let bp = e.basis_pair();
                    sample[bp.index()].add(e.alice_outcome, e.bob_outcome);
                    if bp.is_matched() {
                        let b = bp.alice.index();
                        disclosed[b] += 1;
                        disclosed_errors[b] += u64::from(e.alice_outcome.bit() != e.bob_outcome.bit() ^ flip);
                    }
                } else {
                    key_events.push(*e);
                }
            }
            let key = sift_events(&key_events, sign);
            let key_errors = key.errors_by_basis();
            let key_counts = key.counts_by_basis();
            reports.push(QberReport::from_counts(disclosed, disclosed_errors, key.len() as u64));
            accounting.stabilization_sample += sampled;
            accounting.key_eligible += m - sampled;

            if f > 0.0 {
                let batch = Batch::Counts(sample);
                match candidate {
                    Some((ctrl, p)) => {
                        let accepted = self.compare(ctrl, &batch).is_some_and(|(gain, se)| gain > se);
                        self.conclude_probe(ctrl, p, &batch, accepted);
                        if self.searches[ctrl.index()].floor_sweeps > 0 && !self.objective_met(ctrl.step()) {
                            self.searches[ctrl.index()] = CoordinateSearch::new(cfg.reoptimize_step);
                        }
                    }
                    None => {
                        for bp in BasisPair::ALL {
                            self.pools.push(&batch, bp);
                        }
                    }
                }
                if reoptimizing {
                    if self.all_objectives_met() {
                        reoptimizing = false;
                    }
                } else if self.outside_guard() {
                    reoptimizing = true;
                    reoptimizations += 1;
                    self.searches = [CoordinateSearch::new(cfg.reoptimize_step); 3];
                }
            }

            done += m;
            let pairs_total = offset + done;
            let seconds = self.seconds(pairs_total);
            let all = accumulate_all(&events);
            let empirical = BasisPair::ALL.map(|bp| estimate_visibility(&all[bp.index()]).ok().map(|e| e.value.abs()));
            let rate_of = |e: u64, n: u64| (n > 0).then(|| e as f64 / n as f64);
            let key_qber11 = rate_of(key_errors[0], key_counts[0]);
            let key_qber22 = rate_of(key_errors[1], key_counts[1]);
            trace.rows.push(TraceRow {
                pairs_total,
                seconds,
                v: empirical,
                qber11: key_qber11,
                qber22: key_qber22,
                status: RunStatus::Running,
                angles: Some(self.handles.map(|h| h.params.actuated())),
            });
            windows.push(StabilizeWindow {
                seconds,
                sample_pairs: sampled,
                key_pairs: m - sampled,
                key_bits: key.len() as u64,
                key_qber11,
                key_qber22,
                true_v: predicted_visibilities(&self.psi, &stack),
                reoptimizing,
            });

            self.base = apply_drift(&self.base, m as f64 / rate, drift, rng);
        }
        self.pairs = offset + done;

        let status = if f > 0.0 {
            // a held link sits inside the guard band, not necessarily on target
            if self.outside_guard() {
                self.classify()
            } else {
                RunStatus::Converged
            }
        } else {
            // no disclosed pairs: judge by what the key itself would show
            let v = trace.last().map(|r| r.v).unwrap_or([None; 4]);
            let get = |i: usize| v[i].unwrap_or(0.0);
            if get(0) >= self.targets.t_corr && get(3) >= self.targets.t_corr && get(1) <= self.targets.t_uncorr {
                RunStatus::Converged
            } else if witness_check_margin(get(0), get(3), self.targets.t_uncorr) == WitnessVerdict::NotCertified {
                RunStatus::FailedWitness
            } else {
                RunStatus::BudgetExhausted
            }
        };
        if let Some(last) = trace.rows.last_mut() {
            last.status = status;
        }
        trace.status = status;
        Ok(StabilizeOutcome {
            trace,
            windows,
            report: qber_report_merge(&reports),
            accounting,
            reoptimizations,
        })
    }

    fn all_objectives_met(&self) -> bool {
        AlignmentStep::ALL.iter().all(|s| self.objective_met(*s))
    }

    fn outside_guard(&self) -> bool {
        let t = &self.targets;
        let g = self.cfg.guard_band;
        let k = self.cfg.guard_sigmas;
        AlignmentStep::ALL.iter().any(|step| {
            let Some(e) = self.pools.estimate(step.basis_pair()) else {
                return false;
            };
            match step {
                AlignmentStep::Two => e.value.abs() > t.t_uncorr + g + k * e.sigma,
                _ => t.sign.value() * e.value < t.t_corr - g - k * e.sigma,
            }
        })
    }
}

/// Aligns the three controllers for the unknown `stack` and state `psi`.
pub fn run_alignment<R: Rng + ?Sized>(
    psi: &TwoQubitState,
    stack: &ChannelStack,
    targets: &AlignmentTargets,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<AlignmentOutcome> {
    let mut aligner = Aligner::new(psi, stack, *targets, *cfg)?;
    aligner.run(rng);
    Ok(AlignmentOutcome {
        trace: aligner.trace.clone(),
        handles: aligner.handles,
        aligned: aligner.stack(),
        pairs_used: aligner.pairs,
        evaluations: aligner.evaluations,
    })
}

/// Optimizes `handle` for `step` with every other controller folded into
/// `stack`.
pub fn optimize_controller<R: Rng + ?Sized>(
    handle: ControllerHandle,
    step: AlignmentStep,
    psi: &TwoQubitState,
    stack: &ChannelStack,
    targets: &AlignmentTargets,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<ControllerRun> {
    if handle.target != step.controller() {
        return Err(Error::Config(format!(
            "step {} is driven by {}, not {}",
            step.number(),
            step.controller().name(),
            handle.target.name()
        )));
    }
    if !handle.params.actuated().iter().all(|a| a.is_finite()) {
        return Err(Error::Config("controller angles must be finite".into()));
    }
    let mut aligner = Aligner::new(psi, stack, *targets, *cfg)?;
    aligner.handles[handle.target.index()] = handle;
    let outcome = aligner.optimize(handle.target, rng);
    aligner.trace.status = match outcome {
        StepOutcome::Reached => RunStatus::Converged,
        StepOutcome::BudgetExhausted => RunStatus::BudgetExhausted,
    };
    Ok(ControllerRun {
        handle: aligner.handles[handle.target.index()],
        trace: aligner.trace,
        outcome,
    })
}

/// Stabilizes an already aligned `stack` (controllers folded in).
#[allow(clippy::too_many_arguments)]
pub fn stabilize<R: Rng + ?Sized>(
    psi: &TwoQubitState,
    stack: &ChannelStack,
    targets: &AlignmentTargets,
    drift: &DriftModel,
    f: f64,
    duration: f64,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<StabilizeOutcome> {
    let mut aligner = Aligner::new(psi, stack, *targets, *cfg)?;
    aligner.stabilize(drift, f, duration, rng)
}
