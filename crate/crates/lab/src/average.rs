//! Averaging trial matrices: every protocol × peer count × failure rate ×
//! seed, aggregated into rounds-to-threshold statistics.

use std::io::Write;
use std::path::Path;

use moshpit_core::protocols::{
    run_protocol, MoshpitConfig, ProtocolConfig, ProtocolKind, RoundsTo, TrialSettings,
};
use moshpit_core::rng::{combine_seed, label_hash, seeded_standard_normal};
use moshpit_core::{FailureModel, ParamVector, Stream, TrialRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AverageConfig, ExperimentConfig};
use crate::format::g6;
use crate::report::create_file;
use crate::LabResult;

pub const CSV_HEADER: [&str; 9] = [
    "protocol",
    "N",
    "M",
    "d",
    "p",
    "threshold",
    "mean_rounds",
    "std_rounds",
    "trials",
];

/// One aggregated cell of the trial matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub protocol: ProtocolKind,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub p: f64,
    pub threshold: f64,
    pub mean_rounds: f64,
    pub std_rounds: f64,
    pub trials: usize,
    pub seed_base: u64,
}

/// Outcome of a single trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub protocol: ProtocolKind,
    pub n: usize,
    pub p: f64,
    pub seed_index: usize,
    pub trial_seed: u64,
    pub rounds_to: Vec<RoundsTo>,
    pub final_distortion: f64,
    pub executed_rounds: usize,
    pub cost_units: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub trials: Vec<TrialRecord>,
}

/// Seed of the initial values shared by every protocol in a cell row.
pub fn init_seed(seed_base: u64, n: usize, seed_index: usize) -> u64 {
    combine_seed(&[seed_base, n as u64, seed_index as u64])
}

/// Seed of one protocol trial.
pub fn trial_seed(seed_base: u64, protocol: ProtocolKind, n: usize, p: f64, seed_index: usize) -> u64 {
    combine_seed(&[
        seed_base,
        label_hash(protocol.name()),
        n as u64,
        p.to_bits(),
        seed_index as u64,
    ])
}

/// Standard-normal initial vectors for `n` peers.
pub fn initial_values(seed: u64, n: usize, dim: usize) -> Vec<ParamVector> {
    let mut rng = TrialRng::new(seed).stream(Stream::Init);
    (0..n)
        .map(|_| {
            ParamVector::new(seeded_standard_normal(&mut rng, dim)).expect("normal samples are finite")
        })
        .collect()
}

pub fn protocol_config(cfg: &AverageConfig, kind: ProtocolKind) -> LabResult<ProtocolConfig> {
    let rounds = cfg.round_cap;
    Ok(match kind {
        ProtocolKind::Moshpit => ProtocolConfig::Moshpit(
            MoshpitConfig::new(cfg.grid.grid(rounds)?)
                .placement(cfg.placement.clone())
                .matchmaker(cfg.matchmaker),
        ),
        ProtocolKind::RandomGroups => ProtocolConfig::RandomGroups {
            group_size: cfg.group_size(),
            rounds,
        },
        ProtocolKind::Gossip => ProtocolConfig::Gossip { rounds },
        ProtocolKind::PushSum => ProtocolConfig::PushSum {
            rounds,
            schedule: cfg.push_sum,
        },
        ProtocolKind::AllReduceRestart => ProtocolConfig::AllReduceRestart { rounds },
    })
}

/// Runs the `[average]` trial matrix of `config` on its worker pool.
pub fn run_experiment(config: &ExperimentConfig) -> LabResult<ExperimentResult> {
    let cfg = config.average()?;
    let seed_base = config.seed;
    let mut protocols = cfg.protocols.clone();
    protocols.sort();
    protocols.dedup();
    let protocol_cfgs = protocols
        .iter()
        .map(|&k| protocol_config(cfg, k))
        .collect::<LabResult<Vec<_>>>()?;

    let mut tasks = Vec::new();
    for (pi, _) in protocols.iter().enumerate() {
        for &n in &cfg.peers {
            for &p in &cfg.p {
                for s in 0..config.seeds {
                    tasks.push((pi, n, p, s));
                }
            }
        }
    }

    let pool = config.pool()?;
    let trials = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(pi, n, p, s)| {
                let kind = protocols[pi];
                let peers = initial_values(init_seed(seed_base, n, s), n, cfg.dim);
                let settings = TrialSettings {
                    thresholds: cfg.thresholds.clone(),
                    failure: FailureModel::with_rate(p)?.mode(cfg.failure_mode),
                    stop_early: true,
                };
                let seed = trial_seed(seed_base, kind, n, p, s);
                let report = run_protocol(&protocol_cfgs[pi], &peers, &settings, &TrialRng::new(seed))?;
                Ok(TrialRecord {
                    protocol: kind,
                    n,
                    p,
                    seed_index: s,
                    trial_seed: seed,
                    final_distortion: report.final_distortion(),
                    executed_rounds: report.executed_rounds(),
                    cost_units: report.cost_units,
                    rounds_to: report.rounds_to,
                })
            })
            .collect::<LabResult<Vec<TrialRecord>>>()
    })?;

    let rows = aggregate(cfg, seed_base, &trials);
    Ok(ExperimentResult { rows, trials })
}

fn aggregate(cfg: &AverageConfig, seed_base: u64, trials: &[TrialRecord]) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for chunk in trials.chunk_by(|a, b| a.protocol == b.protocol && a.n == b.n && a.p.to_bits() == b.p.to_bits()) {
        let first = &chunk[0];
        for (ti, &threshold) in cfg.thresholds.iter().enumerate() {
            let xs: Vec<f64> = chunk.iter().map(|t| t.rounds_to[ti].rounds as f64).collect();
            let (mean_rounds, std_rounds) = mean_std(&xs);
            rows.push(ResultRow {
                protocol: first.protocol,
                n: first.n,
                m: cfg.grid.m,
                d: cfg.grid.d,
                p: first.p,
                threshold,
                mean_rounds,
                std_rounds,
                trials: xs.len(),
                seed_base,
            });
        }
    }
    sort_rows(&mut rows);
    rows
}

/// Sample mean and standard deviation (zero for a single sample).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.protocol
            .cmp(&b.protocol)
            .then(a.n.cmp(&b.n))
            .then(a.p.total_cmp(&b.p))
            .then(a.threshold.total_cmp(&b.threshold))
    });
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.protocol.name().to_string(),
            r.n.to_string(),
            r.m.to_string(),
            r.d.to_string(),
            g6(r.p),
            g6(r.threshold),
            g6(r.mean_rounds),
            g6(r.std_rounds),
            r.trials.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-trial outcomes, one line per trial and threshold.
pub fn write_trials_csv<W: Write>(trials: &[TrialRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "protocol",
        "N",
        "p",
        "seed_index",
        "trial_seed",
        "threshold",
        "rounds",
        "reached",
        "final_distortion",
    ])?;
    for t in trials {
        for r in &t.rounds_to {
            w.write_record([
                t.protocol.name().to_string(),
                t.n.to_string(),
                g6(t.p),
                t.seed_index.to_string(),
                t.trial_seed.to_string(),
                g6(r.threshold),
                r.rounds.to_string(),
                r.reached.to_string(),
                format!("{:e}", t.final_distortion),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[ResultRow]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

/// Writes `rows` to `path` and the raw trials next to it.
pub fn write_outputs(result: &ExperimentResult, path: &Path) -> LabResult<()> {
    let to_err = |e: csv::Error| crate::LabError::Output {
        path: path.to_path_buf(),
        source: e.into(),
    };
    write_csv(&result.rows, create_file(path)?).map_err(to_err)?;
    let trials_path = crate::report::sibling(path, "trials.csv");
    write_trials_csv(&result.trials, create_file(&trials_path)?).map_err(to_err)?;
    Ok(())
}
