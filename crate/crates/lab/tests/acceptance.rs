//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `EXPECTED_FAILURES` are known not to hold and are
//! reported without failing the run; any other failure exits non-zero.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use moshpit_core::allreduce::{balance_partition, completion_time, BandwidthProfile};
use moshpit_core::dht::SimDht;
use moshpit_core::matchmaking::{form_groups, FaultPlan, MatchConfig, MatchOutcome, MatchPeer, Phase};
use moshpit_core::optimizer::{run_moshpit_sgd, MembershipSchedule, ObjectiveSpec, OptimizerConfig};
use moshpit_core::protocols::{run_moshpit, MoshpitConfig, Placement, ProtocolKind, TrialSettings};
use moshpit_core::rng::seeded_standard_normal;
use moshpit_core::theory::{m1, m2, MomentInputs};
use moshpit_core::{GridConfig, GroupKey, PeerId, Stream, TrialRng};
use moshpit_lab::average::{csv_string, initial_values, run_experiment, ExperimentResult, ResultRow};
use moshpit_lab::config::{ExperimentConfig, Overrides, TheoryConfig};
use moshpit_lab::theory_suite::{
    contraction_deltas, domination_failures, moment_sweep, restart_sweep, split_sweep, variance_sweep,
};
use rand::Rng;

/// The simplified dropout variance bound sits below the general one at
/// `p = 2/3` for the smallest `M` and larger `T`.
const EXPECTED_FAILURES: &[&str] = &["7a"];

struct Verdict {
    id: &'static str,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn load(rel: &str) -> ExperimentConfig {
    ExperimentConfig::load(&repo_path(rel))
        .and_then(|c| c.apply(&Overrides::default()))
        .expect("shipped config loads")
}

fn row<'a>(rows: &'a [ResultRow], kind: ProtocolKind, n: usize, p: f64, threshold: f64) -> &'a ResultRow {
    rows.iter()
        .find(|r| r.protocol == kind && r.n == n && r.p == p && r.threshold == threshold)
        .unwrap_or_else(|| panic!("missing row {kind} N={n} p={p} th={threshold}"))
}

fn full_grid_exactness() -> (bool, String) {
    let start = Instant::now();
    let mut bad = Vec::new();
    for m in 2..=5usize {
        for d in 1..=3usize {
            let n = m.pow(d as u32);
            let grid = GridConfig::new(m, d, d).unwrap();
            for placement in [Placement::Dense, Placement::Random] {
                let peers = initial_values((m * 10 + d) as u64, n, 2);
                let cfg = MoshpitConfig::new(grid).placement(placement.clone());
                let r = run_moshpit(&cfg, &peers, &TrialSettings::default(), &TrialRng::new(7)).unwrap();
                let before = if d == 1 { r.initial_distortion } else { r.distortion[d - 2] };
                if !(r.distortion[d - 1] <= 1e-24 && before > 0.0) {
                    bad.push(format!("M={m} d={d} {placement:?}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (bad.is_empty() && secs < 5.0, format!("{} grids x 2 placements, {secs:.2}s, failing {bad:?}", 12))
}

fn deterministic_cells(table: &ExperimentResult) -> (bool, String) {
    let moshpit: Vec<_> = table
        .trials
        .iter()
        .filter(|t| t.protocol == ProtocolKind::Moshpit && t.n == 1024 && t.p == 0.0)
        .collect();
    let moshpit_ok = !moshpit.is_empty() && moshpit.iter().all(|t| t.rounds_to.iter().all(|r| r.rounds == 2));
    let ar: Vec<_> = table
        .trials
        .iter()
        .filter(|t| t.protocol == ProtocolKind::AllReduceRestart && t.p == 0.0)
        .collect();
    let ar_ok = !ar.is_empty() && ar.iter().all(|t| t.rounds_to.iter().all(|r| r.rounds == 1));
    (
        moshpit_ok && ar_ok,
        format!(
            "moshpit N=1024 p=0: {} seeds all 2 rounds = {moshpit_ok}; all-reduce p=0: {} trials all 1 round = {ar_ok}",
            moshpit.len(),
            ar.len()
        ),
    )
}

fn stochastic_cells(table: &ExperimentResult, secs: f64) -> (bool, String) {
    use ProtocolKind::*;
    // (protocol, N, p, threshold, target, absolute tolerance or None for max(1, 15%))
    let targets: [(ProtocolKind, usize, f64, f64, f64, Option<f64>); 7] = [
        (Moshpit, 512, 0.0, 1e-9, 8.2, None),
        (RandomGroups, 512, 0.0, 1e-9, 6.1, None),
        (RandomGroups, 512, 0.0, 1e-4, 3.0, None),
        (AllReduceRestart, 512, 0.001, 1e-9, 1.6, None),
        (AllReduceRestart, 512, 0.005, 1e-9, 10.9, Some(2.0)),
        (AllReduceRestart, 512, 0.01, 1e-9, 41.7, Some(4.0)),
        (AllReduceRestart, 512, 0.01, 1e-4, 41.7, Some(4.0)),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (kind, n, p, th, target, tol) in targets {
        let r = row(&table.rows, kind, n, p, th);
        let tol = tol.unwrap_or((0.15 * target).max(1.0));
        let hit = (r.mean_rounds - target).abs() <= tol;
        ok &= hit;
        parts.push(format!("{kind} p={p} {th:e}: {:.2} vs {target}±{tol:.2}", r.mean_rounds));
    }
    let gossip_capped = table
        .rows
        .iter()
        .filter(|r| r.protocol == Gossip && r.n == 512)
        .all(|r| r.mean_rounds == 50.0);
    ok &= gossip_capped;
    parts.push(format!("gossip N=512 capped at 50: {gossip_capped}"));
    ok &= secs < 120.0;
    parts.push(format!("matrix {} trials in {secs:.1}s", table.trials.len()));
    (ok, parts.join("; "))
}

fn restart_closed_form() -> (bool, String) {
    let samples = restart_sweep(2_000, 50, 0).unwrap();
    let bad: Vec<_> = samples.iter().filter(|s| !s.within(3.0)).map(|s| (s.n, s.p)).collect();
    (bad.is_empty(), format!("{} (N, p) cells, 2000 trials each, outside 3 SE: {bad:?}", samples.len()))
}

fn contraction() -> (bool, String) {
    let samples = split_sweep(6, 100_000, 0).unwrap();
    let bad: Vec<_> = samples.iter().filter(|s| !s.within(3.0)).map(|s| s.group_sizes.clone()).collect();
    let deltas = contraction_deltas(6).unwrap();
    let worst = deltas.iter().map(|d| d.delta.abs()).fold(0.0, f64::max);
    (
        bad.is_empty(),
        format!(
            "{} partitions, 1e5 draws each, outside 3 SE: {bad:?}; closed form vs enumeration: {} deltas, max |delta| {worst:.4}",
            samples.len(),
            deltas.len()
        ),
    )
}

fn moments() -> (bool, String) {
    let samples = moment_sweep(&TheoryConfig::default(), 0);
    let bad: Vec<_> = samples.iter().filter(|s| !s.within(4.0)).map(|s| (s.m, s.p)).collect();
    let ones = (0..=10).all(|k| m1(MomentInputs { m: 1, p: k as f64 / 10.0 }) == 1.0);
    let half = MomentInputs { m: 2, p: 0.5 };
    let hand = (m1(half) - 0.875).abs() <= 1e-12 && (m2(half) - 0.8125).abs() <= 1e-12;
    (
        bad.is_empty() && ones && hand,
        format!(
            "{} (M, p) points, 1e6 samples, outside 4 SE: {bad:?}; m1(1,.)=1: {ones}; m1(2,.5)={}, m2(2,.5)={}",
            samples.len(),
            m1(half),
            m2(half)
        ),
    )
}

fn domination() -> (bool, String) {
    let failures = domination_failures().unwrap();
    let points: BTreeSet<(usize, usize)> = failures.iter().map(|f| (f.m, f.rounds)).collect();
    let ps: BTreeSet<String> = failures.iter().map(|f| format!("{:.4}", f.p)).collect();
    (
        failures.is_empty(),
        format!("{} failing (M, p, T) points; (M, T) = {points:?}; p in {ps:?}", failures.len()),
    )
}

fn dropout_variance() -> (bool, String) {
    let samples = variance_sweep(10_000, 0).unwrap();
    let worst = samples
        .iter()
        .map(|s| s.variance / s.bound)
        .fold(0.0, f64::max);
    let ok = samples.iter().all(|s| s.within_bound());
    (ok, format!("{} (M, p, T) points, 1e4 seeds, largest variance/bound {worst:.3}", samples.len()))
}

fn check_consensus(out: &MatchOutcome) -> bool {
    let mut seen = BTreeSet::new();
    out.groups.iter().all(|g| {
        !g.members.is_empty()
            && g.members[0] == g.leader
            && g.members.iter().all(|m| {
                let st = &out.states[m];
                seen.insert(*m)
                    && (st.phase == Phase::Failed || (st.members == g.members && st.leader == Some(g.leader)))
            })
    })
}

fn matchmaking() -> (bool, String) {
    let runs = 20_000;
    let (mut g1, mut g2, mut g3) = (0, 0, 0);
    let mut failure_free = 0;
    for seed in 0..runs as u64 {
        let mut rng = TrialRng::new(seed).stream(Stream::Priorities);
        // odd seeds: random latency and fail-stop faults; even seeds: no
        // faults, no latency, and cohorts that fit in one group
        let faulty = seed % 2 == 1;
        let n = rng.random_range(1..14usize);
        let keys = rng.random_range(1..4usize);
        let peers: Vec<MatchPeer> = (0..n)
            .map(|i| MatchPeer {
                start: if faulty { rng.random_range(0..4) } else { 0 },
                clock_skew: rng.random_range(-3..4),
                ..MatchPeer::new(PeerId(i as u32), GroupKey::new(vec![rng.random_range(0..keys)]))
            })
            .collect();
        let largest_cohort = (0..keys)
            .map(|k| peers.iter().filter(|p| p.key.indices() == [k]).count())
            .max()
            .unwrap_or(0);
        let max_group = if faulty {
            rng.random_range(2..8usize)
        } else {
            largest_cohort.max(1) + rng.random_range(0..3usize)
        };
        let mut faults = FaultPlan::none();
        if faulty {
            for p in &peers {
                if rng.random_bool(0.3) {
                    faults = faults.fail(p.id, rng.random_range(0..30));
                }
            }
        }
        let cfg = MatchConfig::new(3, max_group).unwrap();
        let out = form_groups(0, &peers, &mut SimDht::default(), &cfg, &faults).unwrap();
        if !check_consensus(&out) {
            g1 += 1;
        }
        let budget = cfg.tick_budget(peers.len(), faults.len());
        let progress = peers.iter().filter(|p| !faults.fail_at.contains_key(&p.id)).all(|p| {
            out.group_of(p.id).is_some_and(|g| {
                g.sealed_at <= budget
                    && g.members.len() <= max_group
                    && g.members.iter().all(|m| peers[m.index()].key == p.key)
            })
        });
        if !progress {
            g3 += 1;
        }
        if !faulty {
            failure_free += 1;
            let mut cohorts: BTreeMap<&GroupKey, BTreeSet<PeerId>> = BTreeMap::new();
            for p in &peers {
                cohorts.entry(&p.key).or_default().insert(p.id);
            }
            let maximal = out.groups.len() == cohorts.len()
                && out
                    .groups
                    .iter()
                    .all(|g| g.members.iter().copied().collect::<BTreeSet<_>>() == cohorts[&g.key]);
            if !maximal {
                g2 += 1;
            }
        }
    }
    (
        g1 + g2 + g3 == 0,
        format!(
            "{} fail-stop schedules, {failure_free} failure-free: consensus violations {g1}, non-maximal groups {g2}, unsealed or late peers {g3}",
            runs - failure_free
        ),
    )
}

fn gd_equivalence() -> (bool, String) {
    let f = ObjectiveSpec::Quadratic {
        curvatures: vec![0.5, 1.0, 2.0, 4.0],
        theta_star: vec![1.0, -1.0, 0.5, 2.0],
    };
    let mut worst: f64 = 0.0;
    for (m, d) in [(4usize, 2usize), (2, 4), (3, 2)] {
        let grid = GridConfig::new(m, d, 1).unwrap();
        let n = grid.capacity().unwrap();
        let mut cfg = OptimizerConfig::new(0.2, 1, 60, n, grid);
        cfg.theta0 = vec![3.0, 3.0, -3.0, 1.0];
        let run = run_moshpit_sgd(&cfg, &f, &MembershipSchedule::none(), &TrialRng::new(m as u64)).unwrap();
        let mut theta = cfg.theta0.clone();
        for (i, rec) in run.records.iter().enumerate() {
            let gd = f.value(&theta);
            worst = worst.max((rec.loss - gd).abs() / gd.max(1.0));
            if i + 1 < run.records.len() {
                let g = f.gradient(&theta);
                theta.iter_mut().zip(g).for_each(|(t, gj)| *t -= 0.2 * gj);
            }
        }
    }
    (worst <= 1e-12, format!("largest per-step relative loss difference {worst:.2e}"))
}

fn dispersion_bound() -> (bool, String) {
    let f = ObjectiveSpec::isotropic(3, vec![1.0, 2.0, 3.0]).unwrap();
    let (gamma, tau, seeds) = (0.05, 4, 100);
    let mut cfg = OptimizerConfig::new(gamma, tau, 40, 12, GridConfig::new(4, 2, 1).unwrap());
    cfg.sigma = 1.0;
    cfg.inner_rounds = Some(1);
    let mut mean_v = vec![0.0; cfg.steps + 1];
    let (mut delta_aq_sq, mut sigma_sq) = (0.0f64, 0.0);
    for seed in 0..seeds {
        let run = run_moshpit_sgd(&cfg, &f, &MembershipSchedule::none(), &TrialRng::new(seed)).unwrap();
        for (acc, v) in mean_v.iter_mut().zip(run.dispersion()) {
            *acc += v / seeds as f64;
        }
        delta_aq_sq = delta_aq_sq.max(run.diagnostics.delta_aq_sq);
        sigma_sq += run.diagnostics.sigma_sq_hat / seeds as f64;
    }
    let bound = 2.0 * gamma * gamma * (4.0 * delta_aq_sq + (tau as f64 - 1.0) * sigma_sq);
    let peak = mean_v.iter().copied().fold(0.0, f64::max);
    (peak <= 1.5 * bound && peak > 0.0, format!("max mean V_k {peak:.3e} vs 1.5 x bound {:.3e}", 1.5 * bound))
}

fn doubling_peers() -> (bool, String) {
    let f = ObjectiveSpec::Quadratic {
        curvatures: vec![1.0, 0.5],
        theta_star: vec![0.0, 0.0],
    };
    let gap = |n: usize| {
        let mut cfg = OptimizerConfig::new(0.05, 2, 200, n, GridConfig::new(8, 2, 1).unwrap());
        cfg.sigma = 1.0;
        cfg.placement = Placement::Dense;
        (0..50u64)
            .map(|seed| {
                let run = run_moshpit_sgd(&cfg, &f, &MembershipSchedule::none(), &TrialRng::new(seed)).unwrap();
                let tail = &run.records[100..];
                tail.iter().map(|r| r.f_gap.unwrap()).sum::<f64>() / tail.len() as f64
            })
            .sum::<f64>()
            / 50.0
    };
    let (a, b) = (gap(8), gap(16));
    (b < a, format!("steady-state gap N=8 {a:.4e}, N=16 {b:.4e}"))
}

fn gradient_check() -> (bool, String) {
    let mut rng = TrialRng::new(5).stream(Stream::Init);
    let features: Vec<Vec<f64>> = (0..30).map(|_| seeded_standard_normal(&mut rng, 4)).collect();
    let labels: Vec<f64> = (0..30).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let objectives = [
        ObjectiveSpec::Quadratic {
            curvatures: vec![0.5, 1.0, 2.0, 4.0],
            theta_star: vec![1.0, -1.0, 0.5, 2.0],
        },
        ObjectiveSpec::LogisticRegression {
            features,
            labels,
            lambda: 0.05,
        },
        ObjectiveSpec::Rosenbrock { dim: 4, a: 1.0, b: 100.0 },
    ];
    let mut worst: f64 = 0.0;
    for f in &objectives {
        for _ in 0..100 {
            let theta: Vec<f64> = (0..f.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = f.gradient(&theta);
            for j in 0..f.dim() {
                let h = 1e-5 * theta[j].abs().max(1.0);
                let (mut up, mut down) = (theta.clone(), theta.clone());
                up[j] += h;
                down[j] -= h;
                let fd = (f.value(&up) - f.value(&down)) / (2.0 * h);
                worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1.0));
            }
        }
    }
    (worst <= 1e-6, format!("3 objectives x 100 points, largest relative error {worst:.2e}"))
}

fn lattice_optimum(profile: &BandwidthProfile, steps: usize) -> f64 {
    fn rec(i: usize, left: usize, steps: usize, w: &mut Vec<f64>, p: &BandwidthProfile, best: &mut f64) {
        if i + 1 == p.len() {
            w.push(left as f64 / steps as f64);
            *best = best.min(completion_time(w, p));
            w.pop();
            return;
        }
        for k in 0..=left {
            w.push(k as f64 / steps as f64);
            rec(i + 1, left - k, steps, w, p, best);
            w.pop();
        }
    }
    let mut best = f64::INFINITY;
    rec(0, steps, steps, &mut Vec::new(), profile, &mut best);
    best
}

fn balancer() -> (bool, String) {
    let steps = [1, 1, 400, 120, 40, 20, 12];
    let mut rng = TrialRng::new(9).stream(Stream::Splits);
    let mut worse = 0;
    for case in 0..1000 {
        let m = 1 + case % 6;
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..10.0)).collect();
        let profile = BandwidthProfile::new(b).unwrap();
        let lp = balance_partition(&profile).unwrap().objective;
        if lp > lattice_optimum(&profile, steps[m]) + 1e-3 {
            worse += 1;
        }
    }
    let sym = balance_partition(&BandwidthProfile::new(vec![3.0; 5]).unwrap()).unwrap();
    let uniform = sym.weights.as_slice().iter().all(|w| (w - 0.2).abs() < 1e-9);
    let two = balance_partition(&BandwidthProfile::new(vec![1.0, 5.0]).unwrap()).unwrap();
    let two_ok = (two.weights.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9 && two.objective.is_finite();
    let ex = balance_partition(&BandwidthProfile::new(vec![1.0, 1.0, 2.0]).unwrap()).unwrap();
    let ex_ok = ex
        .weights
        .as_slice()
        .iter()
        .zip([0.0, 0.0, 1.0])
        .all(|(a, b)| (a - b).abs() < 1e-9);
    (
        worse == 0 && uniform && two_ok && ex_ok,
        format!(
            "1000 cases worse than grid search + 1e-3: {worse}; symmetric uniform {uniform}; M=2 {two_ok}; (1,1,2) -> {:?}",
            ex.weights.as_slice()
        ),
    )
}

fn determinism() -> (bool, String) {
    let base = load("configs/smoke.toml");
    let run = |jobs: usize| {
        let cfg = base.clone().apply(&Overrides { jobs: Some(jobs), ..Overrides::default() }).unwrap();
        csv_string(&run_experiment(&cfg).unwrap().rows)
    };
    let (a, b, c) = (run(1), run(1), run(3));
    let other_seed = {
        let cfg = base.clone().apply(&Overrides { seed: Some(99), ..Overrides::default() }).unwrap();
        csv_string(&run_experiment(&cfg).unwrap().rows)
    };
    (
        a == b && a == c && a != other_seed,
        format!("rerun identical {}, 1 vs 3 workers identical {}, other seed differs {}", a == b, a == c, a != other_seed),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let table_cfg = load("configs/matrix.toml");
    let t0 = Instant::now();
    let table = run_experiment(&table_cfg).expect("table matrix runs");
    let table_secs = t0.elapsed().as_secs_f64();

    let mut verdicts = Vec::new();
    let mut add = |id, title, (passed, detail): (bool, String)| {
        let v = Verdict { id, title, passed, detail };
        println!("{} [{}] {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.id, v.title, v.detail);
        verdicts.push(v);
    };
    add("1", "full-grid exactness", full_grid_exactness());
    add("2", "deterministic table cells", deterministic_cells(&table));
    add("3", "stochastic table cells", stochastic_cells(&table, table_secs));
    add("4", "restart closed form", restart_closed_form());
    add("5", "contraction oracle", contraction());
    add("6", "inverse binomial moments", moments());
    add("7a", "simplified variance bound dominates", domination());
    add("7b", "dropout variance within bound", dropout_variance());
    add("8", "matchmaking guarantees", matchmaking());
    add("9a", "exact averaging equals gradient descent", gd_equivalence());
    add("9b", "dispersion bound", dispersion_bound());
    add("9c", "more peers lower the noise floor", doubling_peers());
    add("9d", "analytic gradients", gradient_check());
    add("10", "partition balancer", balancer());
    add("11", "determinism", determinism());

    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    let unexpected: Vec<&&str> = failed.iter().filter(|id| !EXPECTED_FAILURES.contains(id)).collect();
    println!(
        "acceptance: {} passed, {} failed {:?} ({} expected), {:.1}s",
        verdicts.len() - failed.len(),
        failed.len(),
        failed,
        failed.len() - unexpected.len(),
        start.elapsed().as_secs_f64()
    );
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
