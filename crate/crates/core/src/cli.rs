//! Command-line front end. `run` parses arguments, executes one subcommand
//! and returns the process exit code.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::control::{witness_check, AlignmentTrace, Oracle, RunStatus, SearchMode, WitnessVerdict};
use crate::error::{Error, Result};
use crate::model::{CorrelationSign, SourceKind};
use crate::scenario::{
    comment_block, error_curve, error_curve_csv, resolve, run_align, run_stabilize, AngleSpec, Keyword, OutputFormat,
    ScenarioConfig, SourceKindSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_WITNESS: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;

pub fn exit_code(status: RunStatus) -> i32 {
    match status {
        RunStatus::Converged => EXIT_OK,
        RunStatus::FailedWitness => EXIT_WITNESS,
        RunStatus::BudgetExhausted | RunStatus::Running => EXIT_BUDGET,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "entalign",
    version,
    about = "Simulated polarization alignment of an entangled-photon link"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Align all three controllers from a random starting point.
    Align(ScenarioArgs),
    /// Align, then keep the link aligned under drift while distilling key.
    Stabilize(StabilizeArgs),
    /// Closed-form against Monte Carlo uncertainty of the visibility estimate.
    ErrorCurve(ErrorCurveArgs),
    /// Check whether two visibilities certify entanglement.
    Witness(WitnessArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    source: Option<SourceKindSpec>,
    /// Sagnac phase in radians, or "random".
    #[arg(long, allow_negative_numbers = true)]
    phi: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<SearchMode>,
    #[arg(long, value_enum)]
    oracle: Option<Oracle>,
    /// Target correlation, +1 or -1.
    #[arg(long, allow_negative_numbers = true)]
    sign: Option<i8>,
    #[arg(long)]
    channel_seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<u64>,
    #[arg(long)]
    max_pairs: Option<u64>,
    /// Coincidences per second.
    #[arg(long)]
    pair_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct StabilizeArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Share of pairs disclosed for monitoring.
    #[arg(long)]
    fraction: Option<f64>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Drift in rad per sqrt(s).
    #[arg(long)]
    drift_rate: Option<f64>,
    /// Where the QBER report goes; next to the trace by default.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ErrorCurveArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
    /// Visibilities, comma separated.
    #[arg(long = "v", value_delimiter = ',', required = true, allow_negative_numbers = true)]
    v: Vec<f64>,
    /// Coincidence counts, comma separated.
    #[arg(long = "n", value_delimiter = ',', required = true)]
    n: Vec<u64>,
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
}

#[derive(Debug, Args)]
struct WitnessArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
    #[arg(long, allow_negative_numbers = true, required_unless_present = "trace")]
    v11: Option<f64>,
    #[arg(long, allow_negative_numbers = true, required_unless_present = "trace")]
    v22: Option<f64>,
    #[arg(long, requires = "s22")]
    s11: Option<f64>,
    #[arg(long, requires = "s11")]
    s22: Option<f64>,
    /// Take v11 and v22 from the last row of an alignment trace.
    #[arg(long, conflicts_with_all = ["v11", "v22"])]
    trace: Option<PathBuf>,
}

/// Runs the command line and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Align(a) => cmd_align(&a),
        Command::Stabilize(a) => cmd_stabilize(&a),
        Command::ErrorCurve(a) => cmd_error_curve(&a),
        Command::Witness(a) => cmd_witness(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn parse_phi(s: &str) -> Result<AngleSpec> {
    if s == "random" {
        return Ok(AngleSpec::Keyword(Keyword::Random));
    }
    s.parse::<f64>()
        .map(AngleSpec::Value)
        .map_err(|_| Error::Config(format!("--phi: expected radians or \"random\", got {s:?}")))
}

fn scenario_config(a: &ScenarioArgs) -> Result<ScenarioConfig> {
    let mut cfg = match &a.common.config {
        Some(p) => ScenarioConfig::load(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(p) = &a.common.out {
        cfg.output.trace = Some(p.clone());
    }
    if let Some(f) = a.common.format {
        cfg.output.format = f;
    }
    if let Some(k) = a.source {
        cfg.source.kind = k;
    }
    if let Some(phi) = &a.phi {
        cfg.source.phi = parse_phi(phi)?;
    }
    if let Some(m) = a.mode {
        cfg.optimizer.mode = m;
    }
    if let Some(o) = a.oracle {
        cfg.optimizer.oracle = o;
    }
    if let Some(s) = a.sign {
        cfg.targets.sign = match s {
            1 => CorrelationSign::Plus,
            -1 => CorrelationSign::Minus,
            _ => return Err(Error::Config(format!("--sign: expected +1 or -1, got {s}"))),
        };
    }
    if let Some(s) = a.channel_seed {
        cfg.channels.seed = Some(s);
    }
    if let Some(b) = a.batch_size {
        cfg.optimizer.batch_size = b;
    }
    if let Some(m) = a.max_pairs {
        cfg.optimizer.max_pairs = m;
    }
    if let Some(r) = a.pair_rate {
        cfg.optimizer.pair_rate = r;
    }
    Ok(cfg)
}

/// Config echo plus the values drawn at resolution time.
fn header(cfg: &ScenarioConfig) -> Result<String> {
    let mut h = comment_block(&cfg.to_toml());
    if let SourceKind::Sagnac { phi } = resolve(cfg)?.source.kind {
        h.push_str(&format!("# resolved phi = {phi:.9}\n"));
    }
    Ok(h)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    let io = |e: std::io::Error| Error::Config(format!("cannot write output: {e}"));
    match path {
        Some(p) => std::fs::write(p, text).map_err(io),
        None => std::io::stdout().lock().write_all(text.as_bytes()).map_err(io),
    }
}

fn render_trace(cfg: &ScenarioConfig, trace: &AlignmentTrace) -> Result<String> {
    Ok(match cfg.output.format {
        OutputFormat::Csv => header(cfg)? + &trace.to_csv(),
        OutputFormat::Json => {
            let doc = serde_json::json!({ "config": cfg, "trace": trace });
            serde_json::to_string_pretty(&doc).expect("plain data serializes") + "\n"
        }
    })
}

fn cmd_align(a: &ScenarioArgs) -> Result<i32> {
    let cfg = scenario_config(a)?;
    let run = run_align(&cfg)?;
    write_output(cfg.output.trace.as_deref(), &render_trace(&cfg, &run.outcome.trace)?)?;
    Ok(exit_code(run.outcome.trace.status))
}

fn cmd_stabilize(a: &StabilizeArgs) -> Result<i32> {
    let mut cfg = scenario_config(&a.scenario)?;
    if let Some(f) = a.fraction {
        cfg.stabilize.fraction = f;
    }
    if let Some(d) = a.duration {
        cfg.stabilize.duration = d;
    }
    if let Some(r) = a.drift_rate {
        cfg.drift.angular_rate = r;
    }
    if let Some(p) = &a.report {
        cfg.output.report = Some(p.clone());
    }
    cfg.validate()?;
    let run = run_stabilize(&cfg)?;
    write_output(cfg.output.trace.as_deref(), &render_trace(&cfg, &run.trace())?)?;
    let report_path = cfg
        .output
        .report
        .clone()
        .or_else(|| cfg.output.trace.as_ref().map(|p| p.with_extension("report.json")));
    if let Some(s) = &run.stabilize {
        let doc = serde_json::json!({
            "report": s.report,
            "accounting": s.accounting,
            "reoptimizations": s.reoptimizations,
            "status": run.status(),
        });
        let text = serde_json::to_string_pretty(&doc).expect("plain data serializes") + "\n";
        match report_path {
            Some(p) => write_output(Some(&p), &text)?,
            None => eprint!("{text}"),
        }
    }
    Ok(exit_code(run.status()))
}

fn cmd_error_curve(a: &ErrorCurveArgs) -> Result<i32> {
    let rows = error_curve(&a.v, &a.n, a.trials, a.seed.unwrap_or(0))?;
    let text = match a.format.unwrap_or_default() {
        OutputFormat::Csv => error_curve_csv(&rows),
        OutputFormat::Json => serde_json::to_string_pretty(&rows).expect("plain data serializes") + "\n",
    };
    write_output(a.out.as_deref(), &text)?;
    Ok(EXIT_OK)
}

fn cmd_witness(a: &WitnessArgs) -> Result<i32> {
    let (v11, v22) = match &a.trace {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            let trace = AlignmentTrace::from_csv(&text)?;
            let last = trace.last().ok_or_else(|| Error::Config("trace has no rows".into()))?;
            match (last.v[0], last.v[3]) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Config("last trace row lacks v11 or v22".into())),
            }
        }
        None => (a.v11.unwrap_or_default(), a.v22.unwrap_or_default()),
    };
    let sigmas = a.s11.zip(a.s22);
    let verdict = witness_check(v11, v22, sigmas);
    let certified = verdict == WitnessVerdict::EntangledCertified;
    let margin = sigmas.map_or(0.0, |(s11, s22)| 3.0 * (s11 + s22));
    let text = match a.format.unwrap_or_default() {
        OutputFormat::Csv => format!("v11,v22,margin,certified\n{v11:.9},{v22:.9},{margin:.9},{certified}\n"),
        OutputFormat::Json => {
            let doc = serde_json::json!({ "v11": v11, "v22": v22, "margin": margin, "certified": certified });
            serde_json::to_string_pretty(&doc).expect("plain data serializes") + "\n"
        }
    };
    write_output(a.out.as_deref(), &text)?;
    Ok(if certified { EXIT_OK } else { EXIT_WITNESS })
}
