use std::path::Path;
use std::process::{Command, Output};

use entalign::control::AlignmentTrace;

fn entalign(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entalign"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn align_sagnac_converges_with_trace_header() {
    let dir = tempfile::tempdir().unwrap();
    let o = entalign(
        dir.path(),
        &[
            "align",
            "--source",
            "sagnac",
            "--phi",
            "random",
            "--seed",
            "7",
            "--mode",
            "simultaneous",
            "--out",
            "t.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(text.starts_with("# seed = 7\n"));
    assert!(text.contains("# resolved phi = "));
    let first_data = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(first_data, "pairs_total,seconds,v11,v12,v21,v22,qber11,qber22,status");
    let trace = AlignmentTrace::from_csv(&text).unwrap();
    assert_eq!(trace.status.as_str(), "converged");
    // the echoed header is comments; the trace itself round-trips exactly
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    assert_eq!(trace.to_csv(), body);
}

#[test]
fn identical_invocations_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["align", "--seed", "11", "--out", "t.csv"];
    assert_eq!(code(&entalign(dir.path(), &args)), 0);
    let a = std::fs::read(dir.path().join("t.csv")).unwrap();
    assert_eq!(code(&entalign(dir.path(), &args)), 0);
    let b = std::fs::read(dir.path().join("t.csv")).unwrap();
    assert_eq!(a, b);

    let curve = [
        "error-curve",
        "--v",
        "0,0.5",
        "--n",
        "10,100",
        "--trials",
        "500",
        "--seed",
        "4",
    ];
    assert_eq!(entalign(dir.path(), &curve).stdout, entalign(dir.path(), &curve).stdout);
}

#[test]
fn product_source_fails_the_witness() {
    let dir = tempfile::tempdir().unwrap();
    let o = entalign(dir.path(), &["align", "--source", "product", "--seed", "7"]);
    assert_eq!(code(&o), 2);
    let trace = AlignmentTrace::from_csv(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(trace.status.as_str(), "failed_witness");
    assert!(trace.last().unwrap().v[3].unwrap().abs() <= 0.05);
}

#[test]
fn short_budget_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = entalign(dir.path(), &["align", "--seed", "7", "--max-pairs", "400000"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_errors_exit_one_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "seed = 1\n\n[optimizer]\nbatch = 3\n").unwrap();
    let o = entalign(dir.path(), &["align", "--config", "bad.toml"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4") && err.contains("batch"), "{err}");

    std::fs::write(dir.path().join("range.toml"), "[targets]\nt_uncorr = 0.99\n").unwrap();
    let o = entalign(dir.path(), &["align", "--config", "range.toml"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("targets"));

    assert_eq!(code(&entalign(dir.path(), &["align", "--phi", "sideways"])), 1);
    assert_eq!(code(&entalign(dir.path(), &["align", "--no-such-flag"])), 1);
    assert_eq!(
        code(&entalign(dir.path(), &["error-curve", "--v", "3", "--n", "10"])),
        1
    );
    assert_eq!(code(&entalign(dir.path(), &["--help"])), 0);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.toml"), "seed = 1\n[source]\nkind = \"singlet\"\n").unwrap();
    let o = entalign(dir.path(), &["align", "--config", "s.toml", "--seed", "5"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("# seed = 5\n"));
    assert!(text.contains("# kind = \"singlet\""));
}

#[test]
fn error_curve_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = entalign(
        dir.path(),
        &[
            "error-curve",
            "--v",
            "0,0.5,0.95",
            "--n",
            "100,1000,10000",
            "--trials",
            "200",
            "--seed",
            "1",
        ],
    );
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    assert_eq!(lines[0], "v,n,sigma_formula,sigma_mc");
    assert!(lines[1].starts_with("0,100,0.100000000,"));
}

#[test]
fn stabilize_reports_key_and_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let o = entalign(
        dir.path(),
        &[
            "stabilize",
            "--seed",
            "7",
            "--fraction",
            "0.05",
            "--duration",
            "60",
            "--out",
            "s.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.report.json")).unwrap()).unwrap();
    let bits = report["report"]["key_bits_remaining"].as_f64().unwrap();
    let expected = 0.95 * 0.5 * 21_900.0 * 60.0;
    assert!((bits / expected - 1.0).abs() < 0.05, "{bits}");
    assert_eq!(report["report"]["no_estimate"], false);
    assert_eq!(report["status"], "converged");

    let o = entalign(
        dir.path(),
        &[
            "stabilize",
            "--seed",
            "7",
            "--fraction",
            "0",
            "--duration",
            "10",
            "--out",
            "z.csv",
        ],
    );
    assert_eq!(code(&o), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("z.report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["no_estimate"], true);

    let o = entalign(
        dir.path(),
        &["stabilize", "--source", "product", "--seed", "7", "--out", "p.csv"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn witness_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let o = entalign(dir.path(), &["witness", "--v11", "0.957", "--v22", "0.942"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("true"));
    let o = entalign(
        dir.path(),
        &[
            "witness", "--v11", "0.5", "--v22", "0.52", "--s11", "0.01", "--s22", "0.01",
        ],
    );
    assert_eq!(code(&o), 2);
    let o = entalign(
        dir.path(),
        &["witness", "--v11", "0.9", "--v22", "0.9", "--format", "json"],
    );
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["certified"], true);
}

#[test]
fn json_output_carries_config_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = entalign(dir.path(), &["align", "--seed", "3", "--format", "json"]);
    assert_eq!(code(&o), 0);
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["config"]["seed"], 3);
    assert_eq!(doc["trace"]["status"], "converged");
}
