//! Acceptance criteria. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

use std::f64::consts::{FRAC_PI_2, PI};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use entalign::algebra::{bloch_vector_of, gamma_of, haar_random_unitary, sphere_angle, Unitary2};
use entalign::control::{
    run_alignment, witness_check, Aligner, AlignmentTargets, OptimizerConfig, RunStatus, WitnessVerdict,
};
use entalign::model::{
    effective_state, expectation_zz, make_source, mub_overlap_matrix, predicted_visibilities, solve_aligned_channels,
    u_delta, Basis, BasisPair, ChannelStack, CorrelationSign, SourceKind, SourceModel, TwoQubitState,
};
use entalign::scenario::{error_curve, run_align, ScenarioConfig, SourceKindSpec};
use entalign::sifting::{disclose_fraction, sift_events};
use entalign::sim::{BornTable, DetectionModel, DriftModel, PairSource};

const RUNS: u64 = 100;
const THEOREM_DRAWS: u64 = 1000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_mub_deviation(s: &ChannelStack) -> f64 {
    let a = mub_overlap_matrix(&s.alice(Basis::First), &s.alice(Basis::Second));
    let b = mub_overlap_matrix(&s.bob(Basis::First), &s.bob(Basis::Second));
    a.iter()
        .chain(b.iter())
        .flatten()
        .map(|x| (x - 0.5).abs())
        .fold(0.0, f64::max)
}

/// Final model visibilities, MUB deviation and pairs of one default
/// Monte Carlo alignment.
struct CampaignRun {
    status: RunStatus,
    v: [f64; 4],
    mub: f64,
    pairs: u64,
}

fn sagnac_campaign() -> Vec<CampaignRun> {
    (0..RUNS)
        .into_par_iter()
        .map(|seed| {
            let cfg = ScenarioConfig {
                seed,
                ..Default::default()
            };
            let run = run_align(&cfg).expect("default scenario is valid");
            CampaignRun {
                status: run.outcome.trace.status,
                v: run.aligner.true_visibilities(),
                mub: max_mub_deviation(&run.outcome.aligned),
                pairs: run.outcome.pairs_used,
            }
        })
        .collect()
}

fn meets_visibility_targets(r: &CampaignRun) -> bool {
    r.v[0].abs() >= 0.98 && r.v[3].abs() >= 0.98 && r.v[1].abs() <= 0.05 && r.v[2].abs() <= 0.05
}

fn criterion_1(runs: &[CampaignRun], seconds: f64) -> Verdict {
    let ok = runs
        .iter()
        .filter(|r| r.status == RunStatus::Converged && r.pairs <= 4_000_000 && meets_visibility_targets(r))
        .count();
    let mean_pairs = runs.iter().map(|r| r.pairs as f64).sum::<f64>() / runs.len() as f64;
    verdict(
        ok >= 95 && seconds <= 300.0,
        format!("{ok}/{RUNS} runs aligned within 4e6 pairs (mean {mean_pairs:.3e} pairs), {seconds:.1} s wall"),
    )
}

fn criterion_2(runs: &[CampaignRun]) -> Verdict {
    let mut finals: Vec<f64> = runs
        .iter()
        .filter(|r| r.status == RunStatus::Converged)
        .map(|r| r.v[0].abs().min(r.v[3].abs()))
        .collect();
    finals.sort_by(f64::total_cmp);
    let median = finals[finals.len() / 2];
    let hardware = witness_check(0.957, 0.942, None) == WitnessVerdict::EntangledCertified;
    verdict(
        median >= 0.99 && hardware,
        format!(
            "median min(|V11|,|V22|) = {median:.4} over {} converged runs; hardware pair 0.957/0.942 certifies: {hardware}",
            finals.len()
        ),
    )
}

/// Solved stacks for random channels, source unitaries and signs.
fn solved_stacks() -> Vec<(TwoQubitState, Unitary2, ChannelStack)> {
    let mut r = rng(3);
    (0..THEOREM_DRAWS)
        .map(|k| {
            let (ua, ub, ua1, v) = (
                haar_random_unitary(&mut r),
                haar_random_unitary(&mut r),
                haar_random_unitary(&mut r),
                haar_random_unitary(&mut r),
            );
            let sign = if k % 2 == 0 {
                CorrelationSign::Minus
            } else {
                CorrelationSign::Plus
            };
            let stack = solve_aligned_channels(&ua, &ub, &ua1, &v, sign, &mut r);
            (make_source(&SourceModel::new(SourceKind::General { v })), v, stack)
        })
        .collect()
}

fn criterion_3(solved: &[(TwoQubitState, Unitary2, ChannelStack)]) -> Verdict {
    let worst = solved
        .iter()
        .map(|(psi, _, s)| expectation_zz(&effective_state(psi, s, BasisPair::B21)).abs())
        .fold(0.0, f64::max);
    verdict(
        worst <= 1e-10,
        format!("max |E21| = {worst:.2e} over {THEOREM_DRAWS} solved stacks"),
    )
}

/// The noisy half uses the campaign rule of criterion 1: a visibility
/// tolerance of 0.05 on V21 alone allows overlaps up to about 0.025 from 1/2,
/// so the 0.02 band is required in at least 95 of the 100 runs.
fn criterion_4(solved: &[(TwoQubitState, Unitary2, ChannelStack)], runs: &[CampaignRun]) -> Verdict {
    let exact = solved.iter().map(|(_, _, s)| max_mub_deviation(s)).fold(0.0, f64::max);
    let noisy_ok = runs
        .iter()
        .filter(|r| meets_visibility_targets(r) && r.mub <= 0.02)
        .count();
    let mut devs: Vec<f64> = runs.iter().map(|r| r.mub).collect();
    devs.sort_by(f64::total_cmp);
    verdict(
        exact <= 1e-9 && noisy_ok >= 95,
        format!(
            "exact max |overlap - 1/2| = {exact:.2e}; after noisy alignment {noisy_ok}/{RUNS} within 0.02 (median {:.4}, worst {:.4})",
            devs[devs.len() / 2],
            devs[devs.len() - 1]
        ),
    )
}

fn criterion_5() -> Verdict {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..THEOREM_DRAWS {
        let stack = ChannelStack::haar_random(&mut r);
        let v = haar_random_unitary(&mut r);
        let bp = BasisPair::ALL[r.random_range(0..4)];
        let psi = make_source(&SourceModel::new(SourceKind::General { v }));
        let direct = expectation_zz(&effective_state(&psi, &stack, bp));
        let via_gamma = -gamma_of(&u_delta(&stack, &v, bp)).unwrap().cos();
        worst = worst.max((direct - via_gamma).abs());
    }
    verdict(
        worst <= 1e-10,
        format!("max path difference {worst:.2e} over {THEOREM_DRAWS} configurations"),
    )
}

fn criterion_6() -> Verdict {
    let vs = [0.0, 0.5, 0.95];
    let ns = [100, 1000, 10_000];
    let rows = error_curve(&vs, &ns, 10_000, 6).unwrap();
    let mut worst: f64 = 0.0;
    for row in &rows {
        let closed = ((1.0 - row.v * row.v) / row.n as f64).sqrt();
        assert!((closed - row.sigma_formula).abs() < 1e-15);
        worst = worst.max((row.sigma_mc / closed - 1.0).abs());
    }
    verdict(
        worst <= 0.10,
        format!("worst relative MC deviation {:.2}% over 9 grid points", 100.0 * worst),
    )
}

fn criterion_7() -> Verdict {
    let results: Vec<(bool, f64, f64, bool)> = (0..RUNS)
        .into_par_iter()
        .map(|seed| {
            let mut cfg = ScenarioConfig {
                seed: 10_000 + seed,
                ..Default::default()
            };
            cfg.source.kind = SourceKindSpec::Product;
            let run = run_align(&cfg).unwrap();
            let v = run.aligner.true_visibilities();
            let steps_12 = v[0].abs() >= 0.98 && v[1].abs() <= 0.05;
            let est = run.aligner.estimates();
            let (e11, e22) = (est[0].expect("pooled V11"), est[3].expect("pooled V22"));
            let refused = run.outcome.trace.status == RunStatus::FailedWitness
                && witness_check(e11.value, e22.value, Some((e11.sigma, e22.sigma))) == WitnessVerdict::NotCertified;
            (steps_12, v[3].abs(), e11.value.abs() + e22.value.abs(), refused)
        })
        .collect();
    let steps = results.iter().filter(|r| r.0).count();
    let best_v22 = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let worst_sum = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let refused = results.iter().filter(|r| r.3).count();
    verdict(
        steps == RUNS as usize && best_v22 <= 0.05 && worst_sum <= 1.05 && refused == RUNS as usize,
        format!(
            "steps 1-2 in {steps}/{RUNS}; max final |V22| = {best_v22:.4}; max |V11|+|V22| = {worst_sum:.4}; not certified in {refused}/{RUNS}"
        ),
    )
}

/// Worst deviations of angle(A1, B1) from `expect_11` and of angle(A1, B2)
/// from pi/2 over analytic singlet alignments.
fn singlet_angles(sign: CorrelationSign, expect_11: f64, trials: u64) -> (usize, f64, f64) {
    let targets = AlignmentTargets {
        sign,
        t_corr: 1.0 - 1e-14,
        t_uncorr: 1e-8,
    };
    let psi = TwoQubitState::singlet();
    let (mut converged, mut worst_11, mut worst_12) = (0, 0.0f64, 0.0f64);
    for seed in 0..trials {
        let mut r = rng(800 + seed);
        let stack = ChannelStack::haar_random(&mut r);
        let out = run_alignment(&psi, &stack, &targets, &OptimizerConfig::analytic(), &mut r).unwrap();
        converged += usize::from(out.trace.status == RunStatus::Converged);
        let s = &out.aligned;
        let a1 = bloch_vector_of(&s.alice(Basis::First)).unwrap();
        let b1 = bloch_vector_of(&s.bob(Basis::First)).unwrap();
        let b2 = bloch_vector_of(&s.bob(Basis::Second)).unwrap();
        worst_11 = worst_11.max((sphere_angle(&a1, &b1) - expect_11).abs());
        worst_12 = worst_12.max((sphere_angle(&a1, &b2) - FRAC_PI_2).abs());
    }
    (converged, worst_11, worst_12)
}

/// Identical outcomes (+1) put the singlet's correlated bases antipodal on
/// the sphere; the opposite-outcome target makes them coincide instead.
fn criterion_8() -> Verdict {
    let trials = 20;
    let (conv, w11, w12) = singlet_angles(CorrelationSign::Plus, PI, trials);
    let (conv_m, w11_m, w12_m) = singlet_angles(CorrelationSign::Minus, 0.0, trials);
    let pass = conv == trials as usize && w11 <= 1e-6 && w12 <= 1e-6;
    let mirrored = conv_m == trials as usize && w11_m <= 1e-6 && w12_m <= 1e-6;
    verdict(
        pass && mirrored,
        format!(
            "{conv}/{trials} converged; max |angle(A1,B1) - pi| = {w11:.2e}, max |angle(A1,B2) - pi/2| = {w12:.2e}; \
             opposite-outcome target: max |angle(A1,B1)| = {w11_m:.2e}"
        ),
    )
}

/// Singlet link whose matched basis pairs both sit at visibility `-v`.
fn link_at_visibility(v: f64) -> ChannelStack {
    let theta = v.acos();
    ChannelStack {
        ub1: Unitary2::ry(theta),
        ua2: Unitary2::ry(FRAC_PI_2),
        ub2: Unitary2::ry(FRAC_PI_2 + theta),
        ..ChannelStack::identity()
    }
}

fn criterion_9() -> Verdict {
    let v = 0.957;
    let psi = TwoQubitState::singlet();
    let stack = link_at_visibility(v);
    let pv = predicted_visibilities(&psi, &stack);
    assert!((pv[0] + v).abs() < 1e-12 && (pv[3] + v).abs() < 1e-12, "{pv:?}");

    let mut r = rng(9);
    let table = BornTable::new(&psi, &stack, &DetectionModel::default());
    let mut source = PairSource::new(21_900.0).unwrap();
    let mut events = Vec::new();
    source.generate(&table, 200_000, &mut r, &mut events);
    let key = sift_events(&events, CorrelationSign::Minus);
    let n = key.len() as f64;
    let errors: u64 = key.errors_by_basis().iter().sum();
    let p = 0.5 * (1.0 - v);
    let sigma = (p * (1.0 - p) / n).sqrt();
    let frac = errors as f64 / n;
    let sifting_ok = n >= 1e5 && (frac - p).abs() <= 4.0 * sigma;

    let (report, rest) = disclose_fraction(&key, 0.05, &mut r).unwrap();
    let mut accounting_ok = key.mismatched_discarded + key.len() as u64 == events.len() as u64
        && report.disclosed_count + report.key_bits_remaining == key.len() as u64
        && rest.len() as u64 == report.key_bits_remaining;

    // accounting of a full align-then-stabilize run
    let mut r = rng(90);
    let haar = ChannelStack::haar_random(&mut r);
    let mut aligner = Aligner::new(&psi, &haar, AlignmentTargets::default(), OptimizerConfig::default()).unwrap();
    accounting_ok &= aligner.run(&mut r) == RunStatus::Converged;
    let before = aligner.pairs_used();
    let duration = 30.0;
    let out = aligner.stabilize(&DriftModel::none(), 0.05, duration, &mut r).unwrap();
    let streamed = (duration * 21_900.0_f64).round() as u64;
    let windows = |f: fn(&entalign::control::StabilizeWindow) -> u64| out.windows.iter().map(f).sum::<u64>();
    accounting_ok &= out.accounting.total() == before + streamed
        && out.accounting.alignment + out.accounting.stabilization_sample + out.accounting.key_eligible
            == out.accounting.total()
        && windows(|w| w.sample_pairs) == out.accounting.stabilization_sample
        && windows(|w| w.key_pairs) == out.accounting.key_eligible
        && windows(|w| w.key_bits) == out.report.key_bits_remaining;

    verdict(
        sifting_ok && accounting_ok,
        format!(
            "error fraction {frac:.5} vs {p:.5} ({:.2} sigma) over {n:.0} sifted bits; accounting exact: {accounting_ok}",
            (frac - p) / sigma
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters from the harness are accepted and ignored
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let campaign = sagnac_campaign();
    let campaign_seconds = start.elapsed().as_secs_f64();
    let solved = solved_stacks();

    let results = [
        ("alignment convergence", criterion_1(&campaign, campaign_seconds)),
        ("operating point with an ideal source", criterion_2(&campaign)),
        ("vanishing cross-correlation", criterion_3(&solved)),
        ("mutually unbiased bases", criterion_4(&solved, &campaign)),
        ("expectation equals -cos(gamma)", criterion_5()),
        ("error-propagation curve", criterion_6()),
        ("separable source fails", criterion_7()),
        ("singlet geometry", criterion_8()),
        ("sifting consistency", criterion_9()),
    ];
    let mut failed = 0;
    for (k, (name, v)) in results.iter().enumerate() {
        println!(
            "criterion {} [{}] {name}: {}",
            k + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {}/{} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
