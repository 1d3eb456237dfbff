//! Averaging protocols run round by round under a common trial driver.
//!
//! Every protocol starts from the same peer vectors, measures distortion
//! against the frozen initial mean after each round, and reports how many
//! rounds it took to fall below each threshold.

mod baselines;
mod moshpit;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::{distortion, mean_vector};
use crate::rng::{Stream, TrialRng};
use crate::types::{FailureModel, ParamVector};

pub use baselines::{
    run_allreduce_restart, run_gossip, run_pushsum, run_random_groups, PushSumSchedule,
};
pub use moshpit::{moshpit_average, run_moshpit, Matchmaker, MoshpitConfig, Placement};

pub const DEFAULT_ROUND_CAP: usize = 50;
pub const DEFAULT_THRESHOLDS: [f64; 2] = [1e-9, 1e-4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Moshpit,
    RandomGroups,
    Gossip,
    PushSum,
    AllReduceRestart,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 5] = [
        ProtocolKind::Moshpit,
        ProtocolKind::RandomGroups,
        ProtocolKind::Gossip,
        ProtocolKind::PushSum,
        ProtocolKind::AllReduceRestart,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Moshpit => "moshpit",
            ProtocolKind::RandomGroups => "random_groups",
            ProtocolKind::Gossip => "gossip",
            ProtocolKind::PushSum => "push_sum",
            ProtocolKind::AllReduceRestart => "all_reduce_restart",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', ' '], "_");
        ProtocolKind::ALL
            .into_iter()
            .find(|k| k.name() == norm || k.name().replace('_', "") == norm)
            .ok_or_else(|| invalid(format!("unknown protocol {s:?}")))
    }
}

/// Options shared by every protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSettings {
    pub thresholds: Vec<f64>,
    pub failure: FailureModel,
    /// Stop once every threshold has been reached.
    pub stop_early: bool,
}

impl Default for TrialSettings {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            failure: FailureModel::none(),
            stop_early: false,
        }
    }
}

impl TrialSettings {
    pub fn with_failure(failure: FailureModel) -> Self {
        Self {
            failure,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.failure.validate()?;
        if self.thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(invalid("thresholds must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundsTo {
    pub threshold: f64,
    /// First round whose distortion is at most the threshold, or the cap.
    pub rounds: usize,
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub protocol: ProtocolKind,
    pub initial_distortion: f64,
    /// Distortion after each executed round.
    pub distortion: Vec<f64>,
    pub rounds_to: Vec<RoundsTo>,
    pub cap: usize,
    /// Abstract communication cost of the executed rounds.
    pub cost_units: f64,
    /// Peers that took part in each executed round.
    pub active_counts: Vec<usize>,
    /// Per round, largest coordinate change of the conserved global mean
    /// relative to the initial mean's scale.
    pub mean_drift: Vec<f64>,
}

impl TrialReport {
    pub fn rounds_to(&self, threshold: f64) -> Option<usize> {
        self.rounds_to
            .iter()
            .find(|r| r.threshold == threshold)
            .map(|r| r.rounds)
    }

    pub fn final_distortion(&self) -> f64 {
        self.distortion
            .last()
            .copied()
            .unwrap_or(self.initial_distortion)
    }

    pub fn executed_rounds(&self) -> usize {
        self.distortion.len()
    }
}

/// Parameters of one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum ProtocolConfig {
    Moshpit(MoshpitConfig),
    RandomGroups { group_size: usize, rounds: usize },
    Gossip { rounds: usize },
    PushSum { rounds: usize, schedule: PushSumSchedule },
    AllReduceRestart { rounds: usize },
}

impl ProtocolConfig {
    pub fn kind(&self) -> ProtocolKind {
        match self {
            ProtocolConfig::Moshpit(_) => ProtocolKind::Moshpit,
            ProtocolConfig::RandomGroups { .. } => ProtocolKind::RandomGroups,
            ProtocolConfig::Gossip { .. } => ProtocolKind::Gossip,
            ProtocolConfig::PushSum { .. } => ProtocolKind::PushSum,
            ProtocolConfig::AllReduceRestart { .. } => ProtocolKind::AllReduceRestart,
        }
    }
}

pub fn run_protocol(
    config: &ProtocolConfig,
    peers: &[ParamVector],
    settings: &TrialSettings,
    rng: &TrialRng,
) -> Result<TrialReport> {
    match config {
        ProtocolConfig::Moshpit(cfg) => run_moshpit(cfg, peers, settings, rng),
        ProtocolConfig::RandomGroups { group_size, rounds } => {
            run_random_groups(peers, *group_size, *rounds, settings, rng)
        }
        ProtocolConfig::Gossip { rounds } => run_gossip(peers, *rounds, settings, rng),
        ProtocolConfig::PushSum { rounds, schedule } => {
            run_pushsum(peers, *rounds, *schedule, settings, rng)
        }
        ProtocolConfig::AllReduceRestart { rounds } => {
            run_allreduce_restart(peers, *rounds, settings, rng)
        }
    }
}

/// Per-peer fail-stop draws, one per peer per round in id order.
pub(crate) struct FailureDraws {
    rng: rand_chacha::ChaCha8Rng,
    p: f64,
}

impl FailureDraws {
    pub(crate) fn new(rng: &TrialRng, failure: &FailureModel) -> Self {
        Self {
            rng: rng.stream(Stream::Failures),
            p: failure.p_round,
        }
    }

    pub(crate) fn round(&mut self, n: usize) -> Vec<bool> {
        if self.p <= 0.0 {
            return vec![false; n];
        }
        (0..n).map(|_| self.rng.random::<f64>() < self.p).collect()
    }
}

/// Collects per-round distortion and threshold crossings.
pub(crate) struct Tracker {
    reference: ParamVector,
    protocol: ProtocolKind,
    thresholds: Vec<f64>,
    stop_early: bool,
    cap: usize,
    initial: f64,
    distortion: Vec<f64>,
    active_counts: Vec<usize>,
    mean_drift: Vec<f64>,
    cost_units: f64,
}

impl Tracker {
    pub(crate) fn new(
        protocol: ProtocolKind,
        peers: &[ParamVector],
        settings: &TrialSettings,
        cap: usize,
    ) -> Result<Self> {
        settings.validate()?;
        let reference = mean_vector(peers)?;
        let initial = distortion(peers, &reference)?;
        Ok(Self {
            reference,
            protocol,
            thresholds: settings.thresholds.clone(),
            stop_early: settings.stop_early,
            cap,
            initial,
            distortion: Vec::with_capacity(cap),
            active_counts: Vec::with_capacity(cap),
            mean_drift: Vec::with_capacity(cap),
            cost_units: 0.0,
        })
    }

    /// Records one round. Returns true when the run may stop.
    pub(crate) fn record(&mut self, peers: &[ParamVector], active: usize, cost: f64) -> Result<bool> {
        let mean = mean_vector(peers)?;
        self.record_with_mean(peers, &mean, active, cost)
    }

    /// As [`Tracker::record`], for protocols whose conserved mean is not the
    /// plain mean of the reported estimates.
    pub(crate) fn record_with_mean(
        &mut self,
        peers: &[ParamVector],
        mean: &ParamVector,
        active: usize,
        cost: f64,
    ) -> Result<bool> {
        let scale = self
            .reference
            .as_slice()
            .iter()
            .fold(self.initial.sqrt(), |acc, r| acc.max(r.abs()))
            .max(f64::MIN_POSITIVE);
        let drift = mean
            .as_slice()
            .iter()
            .zip(self.reference.as_slice())
            .map(|(a, b)| (a - b).abs() / scale)
            .fold(0.0, f64::max);
        self.mean_drift.push(drift);
        let d = distortion(peers, &self.reference)?;
        self.distortion.push(d);
        self.active_counts.push(active);
        self.cost_units += cost;
        Ok(self.done())
    }

    pub(crate) fn done(&self) -> bool {
        let current = self.distortion.last().copied().unwrap_or(self.initial);
        self.stop_early && self.thresholds.iter().all(|&t| current <= t)
    }

    pub(crate) fn finish(self) -> TrialReport {
        let rounds_to = self
            .thresholds
            .iter()
            .map(|&threshold| {
                let hit = if self.initial <= threshold {
                    Some(0)
                } else {
                    self.distortion
                        .iter()
                        .position(|&d| d <= threshold)
                        .map(|i| i + 1)
                };
                RoundsTo {
                    threshold,
                    rounds: hit.unwrap_or(self.cap),
                    reached: hit.is_some(),
                }
            })
            .collect();
        TrialReport {
            protocol: self.protocol,
            initial_distortion: self.initial,
            distortion: self.distortion,
            rounds_to,
            cap: self.cap,
            cost_units: self.cost_units,
            active_counts: self.active_counts,
            mean_drift: self.mean_drift,
        }
    }
}
