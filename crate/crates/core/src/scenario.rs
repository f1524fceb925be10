//! Scenario files and the experiments the command line runs.
//!
//! A scenario is a TOML document. Every key has a default, unknown keys are
//! rejected, and all randomness derives from `seed` through separate
//! ChaCha streams, so a file plus a seed reproduces a run exactly.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{haar_random_unitary, su2_from_params, Su2Params, Unitary2, VALIDATION_TOL};
use crate::control::{
    Aligner, AlignmentOutcome, AlignmentTargets, AlignmentTrace, OptimizerConfig, RunStatus, StabilizeOutcome,
};
use crate::error::{check_range, Error, Result};
use crate::model::{make_source, Basis, ChannelStack, SourceKind, SourceModel, TwoQubitState};
use crate::sim::{estimate_visibility, visibility_sigma, CountsQuad, DriftModel, DriftTargets};

const STREAM_CHANNELS: u64 = 1;
const STREAM_SOURCE: u64 = 2;
const STREAM_RUN: u64 = 3;

/// Seeded generator for one purpose of a scenario.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Keyword {
    Random,
    Identity,
    Aligned,
}

/// An angle given literally or drawn uniformly from `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AngleSpec {
    Value(f64),
    Keyword(Keyword),
}

/// A unitary given by its parameters or by keyword. `aligned` is only
/// meaningful for Alice's product factor: her photon then arrives in an
/// eigenstate of her first basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UnitarySpec {
    Params(Su2Params),
    Keyword(Keyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SourceKindSpec {
    Singlet,
    Sagnac,
    General,
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSpec {
    pub kind: SourceKindSpec,
    /// Sagnac phase.
    pub phi: AngleSpec,
    /// Local unitary of the general source `(I (x) v)|psi->`.
    pub v: UnitarySpec,
    /// Product-state factors.
    pub alice: UnitarySpec,
    pub bob: UnitarySpec,
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec {
            kind: SourceKindSpec::Sagnac,
            phi: AngleSpec::Keyword(Keyword::Random),
            v: UnitarySpec::Keyword(Keyword::Random),
            alice: UnitarySpec::Keyword(Keyword::Aligned),
            bob: UnitarySpec::Keyword(Keyword::Random),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Haar,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    /// Seed of the channel draw; defaults to the scenario seed.
    pub seed: Option<u64>,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec {
            kind: ChannelKind::Haar,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftSpec {
    /// rad per sqrt(s).
    pub angular_rate: f64,
    pub alice: bool,
    pub bob: bool,
}

impl Default for DriftSpec {
    fn default() -> Self {
        DriftSpec {
            angular_rate: 0.0,
            alice: true,
            bob: true,
        }
    }
}

impl DriftSpec {
    pub fn model(&self) -> Result<DriftModel> {
        let mut d = DriftModel::new(self.angular_rate)?;
        d.affected = DriftTargets {
            alice: self.alice,
            bob: self.bob,
        };
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilizeSpec {
    /// Share of pairs disclosed for monitoring.
    pub fraction: f64,
    /// Simulated seconds.
    pub duration: f64,
}

impl Default for StabilizeSpec {
    fn default() -> Self {
        StabilizeSpec {
            fraction: 0.05,
            duration: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub trace: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub format: OutputFormat,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub source: SourceSpec,
    pub channels: ChannelSpec,
    pub targets: AlignmentTargets,
    pub optimizer: OptimizerConfig,
    pub drift: DriftSpec,
    pub stabilize: StabilizeSpec,
    pub output: OutputSpec,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| line_of(text, s.start));
            Error::Parse {
                line,
                msg: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| Error::Config(format!("{name}: {e}"));
        self.targets.validate().map_err(|e| field("targets", e))?;
        self.optimizer.validate().map_err(|e| field("optimizer", e))?;
        self.drift.model().map_err(|e| field("drift.angular_rate", e))?;
        check_range("fraction", self.stabilize.fraction, 0.0, 1.0).map_err(|e| field("stabilize.fraction", e))?;
        check_range("duration", self.stabilize.duration, 0.0, 1e7).map_err(|e| field("stabilize.duration", e))?;
        if let AngleSpec::Value(phi) = self.source.phi {
            if !phi.is_finite() {
                return Err(Error::Config("source.phi must be finite".into()));
            }
        }
        if let AngleSpec::Keyword(k) = self.source.phi {
            if k != Keyword::Random {
                return Err(Error::Config("source.phi must be a number or \"random\"".into()));
            }
        }
        for (name, spec) in [("source.v", self.source.v), ("source.bob", self.source.bob)] {
            if spec == UnitarySpec::Keyword(Keyword::Aligned) {
                return Err(Error::Config(format!("{name} cannot be \"aligned\"")));
            }
        }
        Ok(())
    }
}

/// A scenario turned into concrete physics.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub psi: TwoQubitState,
    pub stack: ChannelStack,
    pub source: SourceModel,
}

fn resolve_unitary<R: Rng + ?Sized>(spec: UnitarySpec, aligned: Unitary2, rng: &mut R) -> Unitary2 {
    match spec {
        UnitarySpec::Params(p) => su2_from_params(&p),
        UnitarySpec::Keyword(Keyword::Identity) => Unitary2::identity(),
        UnitarySpec::Keyword(Keyword::Aligned) => aligned,
        UnitarySpec::Keyword(Keyword::Random) => haar_random_unitary(rng),
    }
}

pub fn resolve(cfg: &ScenarioConfig) -> Result<Resolved> {
    cfg.validate()?;
    let mut channel_rng = stream_rng(cfg.channels.seed.unwrap_or(cfg.seed), STREAM_CHANNELS);
    let stack = match cfg.channels.kind {
        ChannelKind::Haar => ChannelStack::haar_random(&mut channel_rng),
        ChannelKind::Identity => ChannelStack::identity(),
    };
    let mut rng = stream_rng(cfg.seed, STREAM_SOURCE);
    let kind = match cfg.source.kind {
        SourceKindSpec::Singlet => SourceKind::Singlet,
        SourceKindSpec::Sagnac => SourceKind::Sagnac {
            phi: match cfg.source.phi {
                AngleSpec::Value(phi) => phi,
                AngleSpec::Keyword(_) => rng.random::<f64>() * std::f64::consts::TAU,
            },
        },
        SourceKindSpec::General => SourceKind::General {
            v: resolve_unitary(cfg.source.v, Unitary2::identity(), &mut rng),
        },
        SourceKindSpec::Product => SourceKind::Product {
            a: resolve_unitary(cfg.source.alice, stack.alice(Basis::First), &mut rng),
            b: resolve_unitary(cfg.source.bob, Unitary2::identity(), &mut rng),
        },
    };
    let source = SourceModel {
        kind,
        pair_rate: cfg.optimizer.pair_rate,
    };
    if let SourceKind::General { v } | SourceKind::Product { a: v, .. } = kind {
        v.validate(VALIDATION_TOL)?;
    }
    Ok(Resolved {
        psi: make_source(&source),
        stack,
        source,
    })
}

/// Alignment run of a scenario. Keeps the aligner so a stabilization run
/// can continue from it.
#[derive(Debug, Clone)]
pub struct AlignRun {
    pub resolved: Resolved,
    pub aligner: Aligner,
    pub outcome: AlignmentOutcome,
    rng: ChaCha8Rng,
}

pub fn run_align(cfg: &ScenarioConfig) -> Result<AlignRun> {
    let resolved = resolve(cfg)?;
    let mut rng = stream_rng(cfg.seed, STREAM_RUN);
    let mut aligner = Aligner::new(&resolved.psi, &resolved.stack, cfg.targets, cfg.optimizer)?;
    aligner.run(&mut rng);
    let outcome = AlignmentOutcome {
        trace: aligner.trace().clone(),
        handles: *aligner.handles(),
        aligned: aligner.stack(),
        pairs_used: aligner.pairs_used(),
        evaluations: aligner.evaluations(),
    };
    Ok(AlignRun {
        resolved,
        aligner,
        outcome,
        rng,
    })
}

#[derive(Debug, Clone)]
pub struct StabilizeRun {
    pub align: AlignmentOutcome,
    /// `None` when alignment did not converge and stabilization was skipped.
    pub stabilize: Option<StabilizeOutcome>,
}

impl StabilizeRun {
    /// Alignment rows followed by stabilization rows.
    pub fn trace(&self) -> AlignmentTrace {
        let mut t = self.align.trace.clone();
        if let Some(s) = &self.stabilize {
            t.rows.extend_from_slice(&s.trace.rows);
            t.status = s.trace.status;
        }
        t
    }

    pub fn status(&self) -> RunStatus {
        self.stabilize
            .as_ref()
            .map_or(self.align.trace.status, |s| s.trace.status)
    }
}

/// Aligns, then stabilizes for the configured duration if alignment
/// converged.
pub fn run_stabilize(cfg: &ScenarioConfig) -> Result<StabilizeRun> {
    let mut run = run_align(cfg)?;
    let stabilize = if run.outcome.trace.status == RunStatus::Converged {
        Some(run.aligner.stabilize(
            &cfg.drift.model()?,
            cfg.stabilize.fraction,
            cfg.stabilize.duration,
            &mut run.rng,
        )?)
    } else {
        None
    };
    Ok(StabilizeRun {
        align: run.outcome,
        stabilize,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurveRow {
    pub v: f64,
    pub n: u64,
    pub sigma_formula: f64,
    pub sigma_mc: f64,
}

pub const ERROR_CURVE_HEADER: &str = "v,n,sigma_formula,sigma_mc";

/// Standard deviation of the visibility estimator over `trials` batches of
/// `n` coincidences at true visibility `v`.
pub fn visibility_sigma_mc<R: Rng + ?Sized>(v: f64, n: u64, trials: u64, rng: &mut R) -> Result<f64> {
    check_range("visibility", v, -1.0, 1.0)?;
    if n == 0 {
        return Err(Error::ZeroCounts);
    }
    if trials < 2 {
        return Err(Error::Config("at least two trials are needed".into()));
    }
    let same = Binomial::new(n, 0.5 * (1.0 + v)).map_err(|e| Error::Config(e.to_string()))?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let s = same.sample(rng);
        let pp = Binomial::new(s, 0.5).expect("p = 1/2").sample(rng);
        let pm = Binomial::new(n - s, 0.5).expect("p = 1/2").sample(rng);
        let est = estimate_visibility(&CountsQuad::new(pp, pm, n - s - pm, s - pp))?.value;
        sum += est;
        sum_sq += est * est;
    }
    let t = trials as f64;
    let var = (sum_sq - sum * sum / t) / (t - 1.0);
    Ok(var.max(0.0).sqrt())
}

/// Closed-form and Monte Carlo uncertainty for every `(v, n)` on the grid,
/// in `v`-major order. Grid points run in parallel on independent streams,
/// so the result does not depend on the thread count.
pub fn error_curve(vs: &[f64], ns: &[u64], trials: u64, seed: u64) -> Result<Vec<ErrorCurveRow>> {
    if vs.is_empty() || ns.is_empty() {
        return Err(Error::Config("error curve needs at least one v and one n".into()));
    }
    let grid: Vec<(f64, u64)> = vs.iter().flat_map(|&v| ns.iter().map(move |&n| (v, n))).collect();
    grid.par_iter()
        .enumerate()
        .map(|(i, &(v, n))| {
            let mut rng = stream_rng(seed, 16 + i as u64);
            Ok(ErrorCurveRow {
                v,
                n,
                sigma_formula: visibility_sigma(v, n)?,
                sigma_mc: visibility_sigma_mc(v, n, trials, &mut rng)?,
            })
        })
        .collect()
}

pub fn error_curve_csv(rows: &[ErrorCurveRow]) -> String {
    let mut s = String::from(ERROR_CURVE_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{:.9},{:.9}\n", r.v, r.n, r.sigma_formula, r.sigma_mc));
    }
    s
}

/// `text` with every line prefixed by `# `, for echoing configs into CSV.
pub fn comment_block(text: &str) -> String {
    text.lines().map(|l| format!("# {l}\n")).collect()
}
