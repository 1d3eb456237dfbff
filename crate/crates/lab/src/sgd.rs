//! Moshpit SGD runs over several peer counts and seeds.

use std::io::Write;

use moshpit_core::optimizer::{run_moshpit_sgd, MembershipSchedule, OptimizerConfig, SgdRun};
use moshpit_core::rng::{combine_seed, label_hash};
use moshpit_core::{FailureModel, TrialRng};
use rayon::prelude::*;
use serde::Serialize;

use crate::average::mean_std;
use crate::config::{ExperimentConfig, SgdConfig};
use crate::format::g6;
use crate::{config_err, LabResult};

pub const CSV_HEADER: [&str; 8] = [
    "N",
    "step",
    "active",
    "loss",
    "f_gap",
    "grad_norm_sq",
    "dispersion",
    "trials",
];

/// Per-step means over seeds for one starting peer count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRow {
    pub n: usize,
    pub step: usize,
    pub active: f64,
    pub loss: f64,
    pub f_gap: Option<f64>,
    pub grad_norm_sq: f64,
    pub dispersion: f64,
    pub trials: usize,
}

/// Run-level summary for one peer count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SgdSummary {
    pub n: usize,
    pub final_gap_mean: Option<f64>,
    pub final_gap_std: Option<f64>,
    pub weighted_gap_mean: Option<f64>,
    pub delta_aq_sq_max: f64,
    pub sigma_sq_hat_mean: f64,
    pub n_min: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SgdResult {
    pub rows: Vec<StepRow>,
    pub summaries: Vec<SgdSummary>,
}

pub fn optimizer_config(cfg: &SgdConfig, n: usize) -> LabResult<OptimizerConfig> {
    let mut oc = OptimizerConfig::new(cfg.gamma, cfg.tau, cfg.steps, n, cfg.grid.grid(1)?);
    oc.sigma = cfg.sigma;
    oc.inner_rounds = cfg.inner_rounds;
    oc.failure = FailureModel::with_rate(cfg.p)
        .map_err(|e| config_err(e.to_string()))?
        .mode(cfg.failure_mode);
    oc.placement = cfg.placement.clone();
    oc.theta0 = cfg.theta0.clone();
    oc.validate(&cfg.objective).map_err(|e| config_err(e.to_string()))?;
    Ok(oc)
}

pub fn run_sgd_experiment(config: &ExperimentConfig) -> LabResult<SgdResult> {
    let cfg = config.sgd()?;
    let schedule = MembershipSchedule::from_churn(&cfg.churn, cfg.tau);
    let mut peers = cfg.peers.clone();
    peers.sort_unstable();
    peers.dedup();
    let configs = peers
        .iter()
        .map(|&n| optimizer_config(cfg, n))
        .collect::<LabResult<Vec<_>>>()?;
    for oc in &configs {
        let capacity = oc.grid.capacity().ok_or_else(|| config_err("grid capacity overflows"))?;
        schedule
            .validate(oc.peers, capacity, oc.tau, oc.steps)
            .map_err(|e| config_err(e.to_string()))?;
    }
    let tasks: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|i| (0..config.seeds).map(move |s| (i, s)))
        .collect();
    let pool = config.pool()?;
    let runs = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(i, s)| {
                let seed = combine_seed(&[config.seed, label_hash("sgd"), peers[i] as u64, s as u64]);
                run_moshpit_sgd(&configs[i], &cfg.objective, &schedule, &TrialRng::new(seed))
                    .map_err(Into::into)
            })
            .collect::<LabResult<Vec<SgdRun>>>()
    })?;

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (i, group) in runs.chunks(config.seeds).enumerate() {
        let n = peers[i];
        let trials = group.len();
        let mean = |f: &dyn Fn(&SgdRun) -> f64| group.iter().map(f).sum::<f64>() / trials as f64;
        for k in 0..=cfg.steps {
            let gap = group[0].records[k].f_gap.map(|_| mean(&|r| r.records[k].f_gap.unwrap_or(0.0)));
            rows.push(StepRow {
                n,
                step: k,
                active: mean(&|r| r.records[k].active as f64),
                loss: mean(&|r| r.records[k].loss),
                f_gap: gap,
                grad_norm_sq: mean(&|r| r.records[k].grad_norm_sq),
                dispersion: mean(&|r| r.records[k].dispersion),
                trials,
            });
        }
        let finals: Option<Vec<f64>> = group.iter().map(|r| r.records.last().and_then(|x| x.f_gap)).collect();
        let weighted: Option<Vec<f64>> = group.iter().map(|r| r.weighted_gap).collect();
        summaries.push(SgdSummary {
            n,
            final_gap_mean: finals.as_deref().map(|xs| mean_std(xs).0),
            final_gap_std: finals.as_deref().map(|xs| mean_std(xs).1),
            weighted_gap_mean: weighted.as_deref().map(|xs| mean_std(xs).0),
            delta_aq_sq_max: group.iter().map(|r| r.diagnostics.delta_aq_sq).fold(0.0, f64::max),
            sigma_sq_hat_mean: mean(&|r| r.diagnostics.sigma_sq_hat),
            n_min: group.iter().map(|r| r.diagnostics.n_min).min().unwrap_or(n),
        });
    }
    Ok(SgdResult { rows, summaries })
}

pub fn write_csv<W: Write>(rows: &[StepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.step.to_string(),
            g6(r.active),
            g6(r.loss),
            r.f_gap.map(g6).unwrap_or_default(),
            g6(r.grad_norm_sq),
            g6(r.dispersion),
            r.trials.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
