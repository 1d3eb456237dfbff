//! Closed-form results checked against sampling and enumeration.

use moshpit_core::protocols::{
    moshpit_average, run_allreduce_restart, MoshpitConfig, Placement, TrialSettings,
};
use moshpit_core::rng::{combine_seed, label_hash};
use moshpit_core::theory::{
    ar_restart_expected_rounds, ar_restart_rounds_variance, exhaustive_contraction_oracle, m1, m2,
    closed_form_contraction_factor, sample_split_ratio, variance_bound, MomentInputs, SplitSpec,
};
use moshpit_core::{FailureModel, GridConfig, ParamVector, Stream, TrialRng};
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::average::{initial_values, mean_std};
use crate::config::TheoryConfig;
use crate::LabResult;

/// Outcome of one named check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

/// Informational comparison that never fails.
#[derive(Debug, Clone, Serialize)]
pub struct ContractionDelta {
    pub group_sizes: Vec<usize>,
    pub closed_form: f64,
    pub exhaustive: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<Check>,
    pub contraction_deltas: Vec<ContractionDelta>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }
}

fn check(name: &str, passed: bool, detail: serde_json::Value) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

/// Sample mean and standard error.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let (mean, std) = mean_std(xs);
    (mean, std / (xs.len() as f64).sqrt())
}

/// Tenths from 0 to 1.
pub fn probability_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

/// `2/3` and then the twentieths of the way up to 1.
pub fn high_probability_grid() -> Vec<f64> {
    (0..=20)
        .map(|k| if k == 20 { 1.0 } else { 2.0 / 3.0 + k as f64 / 60.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MomentSample {
    pub m: usize,
    pub p: f64,
    pub m1: f64,
    pub m1_mc: f64,
    pub m1_se: f64,
    pub m2: f64,
    pub m2_mc: f64,
    pub m2_se: f64,
}

impl MomentSample {
    pub fn within(&self, z: f64) -> bool {
        (self.m1_mc - self.m1).abs() <= z * self.m1_se + 1e-12
            && (self.m2_mc - self.m2).abs() <= z * self.m2_se + 1e-12
    }
}

/// Monte-Carlo estimate of `m1`, `m2` at `(m, p)` from `samples` draws.
pub fn sample_moments(m: usize, p: f64, samples: usize, seed: u64) -> MomentSample {
    let mut rng = TrialRng::new(seed).stream(Stream::Splits);
    let binom = Binomial::new(m as u64, p).expect("p in [0, 1]");
    let mut counts = vec![0u64; m + 1];
    for _ in 0..samples {
        counts[binom.sample(&mut rng) as usize] += 1;
    }
    let n = samples as f64;
    // mean and standard error of f(ξ) from the histogram of draws
    let estimate = |f: &dyn Fn(f64) -> f64| {
        let mean = counts
            .iter()
            .enumerate()
            .map(|(k, &c)| c as f64 * f(k.max(1) as f64))
            .sum::<f64>()
            / n;
        let var = counts
            .iter()
            .enumerate()
            .map(|(k, &c)| c as f64 * (f(k.max(1) as f64) - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    let (m1_mc, m1_se) = estimate(&|x| 1.0 / x);
    let (m2_mc, m2_se) = estimate(&|x| 1.0 / (x * x));
    let inp = MomentInputs { m, p };
    MomentSample {
        m,
        p,
        m1: m1(inp),
        m1_mc,
        m1_se,
        m2: m2(inp),
        m2_mc,
        m2_se,
    }
}

pub fn moment_sweep(cfg: &TheoryConfig, seed: u64) -> Vec<MomentSample> {
    let cells: Vec<(usize, f64)> = (1..=cfg.moment_max_m)
        .flat_map(|m| probability_grid().into_iter().map(move |p| (m, p)))
        .collect();
    cells
        .par_iter()
        .map(|&(m, p)| {
            let s = combine_seed(&[seed, label_hash("moments"), m as u64, p.to_bits()]);
            sample_moments(m, p, cfg.moment_samples, s)
        })
        .collect()
}

/// Distinct, non-degenerate inputs for the contraction checks.
pub const SPLIT_VALUES: [f64; 6] = [0.3, -1.2, 2.5, 0.0, 4.1, -0.7];

#[derive(Debug, Clone, Serialize)]
pub struct SplitSample {
    pub group_sizes: Vec<usize>,
    pub exhaustive: f64,
    pub sampled: f64,
    pub se: f64,
}

impl SplitSample {
    pub fn within(&self, z: f64) -> bool {
        (self.sampled - self.exhaustive).abs() <= z * self.se + 1e-12
    }
}

/// One-round ratio by sampling vs enumeration for every partition of
/// every `N` in `2..=max_n`.
pub fn split_sweep(max_n: usize, trials: usize, seed: u64) -> LabResult<Vec<SplitSample>> {
    let specs: Vec<SplitSpec> = (2..=max_n).flat_map(SplitSpec::all_partitions).collect();
    specs
        .par_iter()
        .map(|spec| {
            let values = &SPLIT_VALUES[..spec.n()];
            let exhaustive = exhaustive_contraction_oracle(spec, values)?;
            let mut key = vec![seed, label_hash("splits")];
            key.extend(spec.group_sizes().iter().map(|&s| s as u64));
            let mut rng = TrialRng::new(combine_seed(&key)).stream(Stream::Splits);
            let draws = (0..trials)
                .map(|_| sample_split_ratio(spec, values, &mut rng))
                .collect::<moshpit_core::Result<Vec<f64>>>()?;
            let (sampled, se) = mean_se(&draws);
            Ok(SplitSample {
                group_sizes: spec.group_sizes().to_vec(),
                exhaustive,
                sampled,
                se,
            })
        })
        .collect()
}

pub fn contraction_deltas(max_n: usize) -> LabResult<Vec<ContractionDelta>> {
    (1..=max_n)
        .flat_map(SplitSpec::all_partitions)
        .filter(|s| s.n() >= 2)
        .map(|spec| {
            let exhaustive = exhaustive_contraction_oracle(&spec, &SPLIT_VALUES[..spec.n()])?;
            let closed_form = closed_form_contraction_factor(&spec);
            Ok(ContractionDelta {
                group_sizes: spec.group_sizes().to_vec(),
                closed_form,
                exhaustive,
                delta: closed_form - exhaustive,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundPoint {
    pub m: usize,
    pub p: f64,
    pub rounds: usize,
    pub general: f64,
    pub simplified: f64,
}

/// Points of the `M ∈ 11..=40`, `p ≥ 2/3`, `T ∈ 1..=6` sweep where the
/// general variance bound exceeds the simplified one.
pub fn domination_failures() -> LabResult<Vec<BoundPoint>> {
    let mut out = Vec::new();
    for m in 11..=40 {
        for p in high_probability_grid() {
            for rounds in 1..=6 {
                let b = variance_bound(m, p, rounds, 1.0)?;
                if !b.simplified_dominates() {
                    out.push(BoundPoint {
                        m,
                        p,
                        rounds,
                        general: b.general,
                        simplified: b.simplified.unwrap_or(f64::NAN),
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct VarianceSample {
    pub m: usize,
    pub p: f64,
    pub rounds: usize,
    /// Mean over seeds of the per-peer squared deviation.
    pub variance: f64,
    pub se: f64,
    pub bound: f64,
    /// Seeds with at least one occupied cell.
    pub occupied_seeds: usize,
}

impl VarianceSample {
    pub fn within_bound(&self) -> bool {
        self.variance <= self.bound
    }
}

/// Every cell of an `M×M` grid is occupied independently with probability
/// `p`; occupants hold iid `N(0, 1)` values and run `rounds` Moshpit rounds.
/// The squared output of each peer is its deviation from its expectation.
pub fn dropout_variance(m: usize, p: f64, rounds: usize, seeds: usize, seed: u64) -> LabResult<VarianceSample> {
    let d = 2;
    let cells = m * m;
    let per_seed = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let trial = TrialRng::new(combine_seed(&[seed, label_hash("dropout"), m as u64, p.to_bits(), rounds as u64, s as u64]));
            let mut placement = trial.stream(Stream::Placement);
            let occupied: Vec<usize> = (0..cells).filter(|_| placement.random::<f64>() < p).collect();
            if occupied.is_empty() {
                return Ok(None);
            }
            let mut init = trial.stream(Stream::Init);
            let mut values: Vec<ParamVector> = occupied
                .iter()
                .map(|_| ParamVector::scalar(StandardNormal.sample(&mut init)))
                .collect();
            let cfg = MoshpitConfig::new(GridConfig::new(m, d, rounds)?)
                .placement(Placement::Explicit(occupied));
            moshpit_average(&cfg, &mut values, &FailureModel::none(), &trial.fork(1))?;
            let sq: f64 = values.iter().map(|v| v.as_slice()[0].powi(2)).sum();
            Ok(Some(sq / values.len() as f64))
        })
        .collect::<LabResult<Vec<Option<f64>>>>()?;
    let xs: Vec<f64> = per_seed.into_iter().flatten().collect();
    let (variance, se) = if xs.is_empty() { (0.0, 0.0) } else { mean_se(&xs) };
    Ok(VarianceSample {
        m,
        p,
        rounds,
        variance,
        se,
        bound: variance_bound(m, p, rounds, 1.0)?.general,
        occupied_seeds: xs.len(),
    })
}

pub const VARIANCE_GRID_M: [usize; 2] = [11, 16];
pub const VARIANCE_GRID_P: [f64; 4] = [2.0 / 3.0, 0.8, 0.9, 1.0];

pub fn variance_sweep(seeds: usize, seed: u64) -> LabResult<Vec<VarianceSample>> {
    let mut out = Vec::new();
    for m in VARIANCE_GRID_M {
        for p in VARIANCE_GRID_P {
            for rounds in 1..=2 {
                out.push(dropout_variance(m, p, rounds, seeds, seed)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RestartSample {
    pub n: usize,
    pub p: f64,
    pub expected: f64,
    pub sampled: f64,
    /// Standard error from the exact variance of the capped geometric.
    pub se: f64,
}

impl RestartSample {
    pub fn within(&self, z: f64) -> bool {
        (self.sampled - self.expected).abs() <= z * self.se + 1e-12
    }
}

pub const RESTART_GRID_N: [usize; 4] = [512, 768, 900, 1024];
pub const RESTART_GRID_P: [f64; 4] = [0.0, 0.001, 0.005, 0.01];

/// Mean rounds of restart-until-success all-reduce against the closed form.
pub fn restart_sweep(trials: usize, cap: usize, seed: u64) -> LabResult<Vec<RestartSample>> {
    let cells: Vec<(usize, f64)> = RESTART_GRID_N
        .iter()
        .flat_map(|&n| RESTART_GRID_P.iter().map(move |&p| (n, p)))
        .collect();
    cells
        .par_iter()
        .map(|&(n, p)| {
            let peers = initial_values(combine_seed(&[seed, n as u64]), n, 1);
            let settings = TrialSettings {
                thresholds: vec![1e-9],
                failure: FailureModel::with_rate(p)?,
                stop_early: true,
            };
            let rounds = (0..trials)
                .map(|t| {
                    let rng = TrialRng::new(combine_seed(&[seed, label_hash("restart"), n as u64, p.to_bits(), t as u64]));
                    let r = run_allreduce_restart(&peers, cap, &settings, &rng)?;
                    Ok(r.rounds_to[0].rounds as f64)
                })
                .collect::<LabResult<Vec<f64>>>()?;
            let sampled = rounds.iter().sum::<f64>() / trials as f64;
            Ok(RestartSample {
                n,
                p,
                expected: ar_restart_expected_rounds(n, p, cap),
                sampled,
                se: (ar_restart_rounds_variance(n, p, cap) / trials as f64).sqrt(),
            })
        })
        .collect()
}

/// Runs every check with the given sample sizes.
pub fn run_theory_suite(cfg: &TheoryConfig, seed: u64) -> LabResult<SuiteReport> {
    let mut checks = Vec::new();

    let moments = moment_sweep(cfg, seed);
    let bad: Vec<&MomentSample> = moments.iter().filter(|s| !s.within(4.0)).collect();
    checks.push(check(
        "moments_monte_carlo",
        bad.is_empty(),
        serde_json::json!({ "points": moments.len(), "samples": cfg.moment_samples, "outside_4se": bad }),
    ));

    let half = MomentInputs { m: 2, p: 0.5 };
    let ones = probability_grid().into_iter().all(|p| m1(MomentInputs { m: 1, p }) == 1.0);
    let hand = (m1(half) - 0.875).abs() <= 1e-12 && (m2(half) - 0.8125).abs() <= 1e-12;
    checks.push(check(
        "moments_exact_values",
        ones && hand,
        serde_json::json!({ "m1_M1_is_one": ones, "m1_2_half": m1(half), "m2_2_half": m2(half) }),
    ));

    let splits = split_sweep(6, cfg.split_trials, seed)?;
    let bad: Vec<&SplitSample> = splits.iter().filter(|s| !s.within(3.0)).collect();
    checks.push(check(
        "contraction_monte_carlo",
        bad.is_empty(),
        serde_json::json!({ "partitions": splits.len(), "trials": cfg.split_trials, "outside_3se": bad }),
    ));

    let failures = domination_failures()?;
    checks.push(check(
        "variance_bound_domination",
        failures.is_empty(),
        serde_json::json!({ "failing_points": failures }),
    ));

    let variances = variance_sweep(cfg.variance_seeds, seed)?;
    checks.push(check(
        "dropout_variance_bound",
        variances.iter().all(VarianceSample::within_bound),
        serde_json::json!({ "seeds": cfg.variance_seeds, "samples": variances }),
    ));

    let restarts = restart_sweep(cfg.restart_trials, moshpit_core::protocols::DEFAULT_ROUND_CAP, seed)?;
    checks.push(check(
        "restart_closed_form",
        restarts.iter().all(|r| r.within(3.0)),
        serde_json::json!({ "trials": cfg.restart_trials, "samples": restarts }),
    ));

    Ok(SuiteReport {
        checks,
        contraction_deltas: contraction_deltas(6)?,
    })
}
