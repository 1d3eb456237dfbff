//! Experiment configuration files.
//!
//! One TOML file holds shared settings at the top level and one optional
//! section per subcommand. Command-line flags override file values, and the
//! `MOSHPIT_SEED` environment variable sits between the two for the seed.

use std::path::{Path, PathBuf};

use moshpit_core::optimizer::ObjectiveSpec;
use moshpit_core::protocols::{Matchmaker, Placement, ProtocolKind, PushSumSchedule, DEFAULT_ROUND_CAP, DEFAULT_THRESHOLDS};
use moshpit_core::{FailureMode, GridConfig};
use serde::{Deserialize, Serialize};

use crate::{config_err, LabResult};

pub const SEED_ENV: &str = "MOSHPIT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed every trial seed is derived from.
    #[serde(default)]
    pub seed: u64,
    /// Independent repetitions per cell.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub average: Option<AverageConfig>,
    #[serde(default)]
    pub sgd: Option<SgdConfig>,
    #[serde(default)]
    pub balance: Option<BalanceConfig>,
    #[serde(default)]
    pub theory: TheoryConfig,
}

fn default_seeds() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub m: usize,
    pub d: usize,
}

impl GridSpec {
    pub fn grid(&self, rounds: usize) -> LabResult<GridConfig> {
        GridConfig::new(self.m, self.d, rounds).map_err(|e| config_err(e.to_string()))
    }

    pub fn capacity(&self) -> Option<usize> {
        u32::try_from(self.d)
            .ok()
            .and_then(|d| self.m.checked_pow(d))
    }
}

/// Table-style averaging runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AverageConfig {
    pub protocols: Vec<ProtocolKind>,
    pub peers: Vec<usize>,
    pub p: Vec<f64>,
    pub grid: GridSpec,
    #[serde(default = "default_cap")]
    pub round_cap: usize,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub failure_mode: FailureMode,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub matchmaker: Matchmaker,
    /// Group size of the random-groups baseline; defaults to `grid.m`.
    #[serde(default)]
    pub group_size: Option<usize>,
    #[serde(default)]
    pub push_sum: PushSumSchedule,
}

fn default_cap() -> usize {
    DEFAULT_ROUND_CAP
}

fn default_thresholds() -> Vec<f64> {
    DEFAULT_THRESHOLDS.to_vec()
}

fn default_dim() -> usize {
    1
}

impl AverageConfig {
    pub fn group_size(&self) -> usize {
        self.group_size.unwrap_or(self.grid.m)
    }

    pub fn validate(&self) -> LabResult<()> {
        if self.protocols.is_empty() {
            return Err(config_err("average.protocols is empty"));
        }
        if self.peers.is_empty() {
            return Err(config_err("average.peers is empty"));
        }
        if self.p.is_empty() {
            return Err(config_err("average.p is empty"));
        }
        if let Some(p) = self.p.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(config_err(format!("failure probability {p} outside [0, 1]")));
        }
        if self.round_cap == 0 {
            return Err(config_err("average.round_cap must be at least 1"));
        }
        if self.thresholds.is_empty() {
            return Err(config_err("average.thresholds is empty"));
        }
        if self.thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(config_err("thresholds must be finite and non-negative"));
        }
        if self.dim == 0 {
            return Err(config_err("average.dim must be at least 1"));
        }
        if matches!(self.placement, Placement::Explicit(_)) {
            return Err(config_err("explicit placement is not available in experiment files"));
        }
        self.grid.grid(self.round_cap)?;
        if self.group_size() == 0 {
            return Err(config_err("average.group_size must be at least 1"));
        }
        for &n in &self.peers {
            if n == 0 {
                return Err(config_err("peer counts must be positive"));
            }
            for &kind in &self.protocols {
                let ok = match kind {
                    ProtocolKind::Moshpit => self.grid.capacity().is_none_or(|c| n <= c),
                    ProtocolKind::Gossip => n >= 3,
                    ProtocolKind::PushSum => n >= 2,
                    ProtocolKind::RandomGroups | ProtocolKind::AllReduceRestart => true,
                };
                if !ok {
                    return Err(config_err(format!("{kind} cannot run with N = {n} on this grid")));
                }
            }
        }
        Ok(())
    }
}

/// Moshpit SGD runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub objective: ObjectiveSpec,
    pub gamma: f64,
    pub tau: usize,
    pub steps: usize,
    pub peers: Vec<usize>,
    pub grid: GridSpec,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub inner_rounds: Option<usize>,
    #[serde(default)]
    pub p: f64,
    #[serde(default)]
    pub failure_mode: FailureMode,
    #[serde(default)]
    pub placement: Placement,
    /// Starting point; zeros when empty.
    #[serde(default)]
    pub theta0: Vec<f64>,
    /// `(synchronisation round, peer-count delta)` pairs.
    #[serde(default)]
    pub churn: Vec<(usize, i64)>,
}

impl SgdConfig {
    pub fn validate(&self) -> LabResult<()> {
        if self.peers.is_empty() {
            return Err(config_err("sgd.peers is empty"));
        }
        self.objective.validate().map_err(|e| config_err(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceConfig {
    pub bandwidths: Vec<f64>,
}

/// Sample sizes of the theory suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub moment_samples: usize,
    pub moment_max_m: usize,
    pub split_trials: usize,
    pub restart_trials: usize,
    pub variance_seeds: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            moment_samples: 1_000_000,
            moment_max_m: 20,
            split_trials: 100_000,
            restart_trials: 2_000,
            variance_seeds: 10_000,
        }
    }
}

/// Values given on the command line or in the environment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Raw value of [`SEED_ENV`], if set.
    pub env_seed: Option<String>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl Overrides {
    /// Reads [`SEED_ENV`] from the process environment.
    pub fn with_env(mut self) -> Self {
        self.env_seed = std::env::var(SEED_ENV).ok();
        self
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> LabResult<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    /// Applies overrides; the seed comes from the flag, then the
    /// environment, then the file.
    pub fn apply(mut self, o: &Overrides) -> LabResult<Self> {
        if let Some(raw) = &o.env_seed {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| config_err(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(jobs) = o.jobs {
            self.jobs = jobs;
        }
        if self.seeds == 0 {
            return Err(config_err("seeds must be at least 1"));
        }
        Ok(self)
    }

    pub fn average(&self) -> LabResult<&AverageConfig> {
        let a = self
            .average
            .as_ref()
            .ok_or_else(|| config_err("missing [average] section"))?;
        a.validate()?;
        Ok(a)
    }

    pub fn sgd(&self) -> LabResult<&SgdConfig> {
        let s = self
            .sgd
            .as_ref()
            .ok_or_else(|| config_err("missing [sgd] section"))?;
        s.validate()?;
        Ok(s)
    }

    pub fn balance(&self) -> LabResult<&BalanceConfig> {
        self.balance
            .as_ref()
            .ok_or_else(|| config_err("missing [balance] section"))
    }

    /// A worker pool of the configured size.
    pub fn pool(&self) -> LabResult<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| config_err(format!("cannot start {} workers: {e}", self.jobs)))
    }
}
