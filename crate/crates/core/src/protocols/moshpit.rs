//! Averaging in groups keyed by the chunk indices of previous rounds.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FailureDraws, ProtocolKind, TrialReport, TrialSettings, Tracker};
use crate::allreduce::{butterfly_allreduce, PartitionWeights};
use crate::dht::{SimDht, Tick};
use crate::error::{invalid, Result};
use crate::matchmaking::{
    form_groups, initial_index, next_group_key, FaultPlan, MatchConfig, MatchPeer,
};
use crate::rng::{Stream, TrialRng};
use crate::theory::complexity_estimate;
use crate::types::{FailureMode, FailureModel, GridConfig, GroupKey, ParamVector, PeerId};

/// How peers are assigned to grid cells.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// `N` distinct cells drawn uniformly from the grid.
    #[default]
    Random,
    /// Peer `i` sits at cell `i`.
    Dense,
    /// Peer `i` sits at `cells[i]`.
    Explicit(Vec<usize>),
}

/// How groups are formed each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matchmaker {
    /// Peers sharing a key are grouped directly, in priority order, at most
    /// `M` per group. This is what the full protocol yields when nobody
    /// fails during matchmaking and no cohort exceeds `M`.
    #[default]
    Direct,
    /// Run the message-level matchmaking protocol over a simulated DHT.
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoshpitConfig {
    pub grid: GridConfig,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub matchmaker: Matchmaker,
    #[serde(default = "default_timeout")]
    pub match_timeout: Tick,
}

fn default_timeout() -> Tick {
    MatchConfig::default().timeout
}

impl MoshpitConfig {
    pub fn new(grid: GridConfig) -> Self {
        Self {
            grid,
            placement: Placement::default(),
            matchmaker: Matchmaker::default(),
            match_timeout: default_timeout(),
        }
    }

    pub fn placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    pub fn matchmaker(mut self, matchmaker: Matchmaker) -> Self {
        self.matchmaker = matchmaker;
        self
    }
}

fn place(cfg: &MoshpitConfig, n: usize, rng: &TrialRng) -> Result<Vec<usize>> {
    cfg.grid.check_fits(n)?;
    let cap = cfg
        .grid
        .capacity()
        .ok_or_else(|| invalid("grid capacity overflows"))?;
    match &cfg.placement {
        Placement::Dense => Ok((0..n).collect()),
        Placement::Random => {
            let mut cells = index::sample(&mut rng.stream(Stream::Placement), cap, n).into_vec();
            cells.sort_unstable();
            Ok(cells)
        }
        Placement::Explicit(cells) => {
            if cells.len() != n {
                return Err(invalid(format!(
                    "explicit placement lists {} cells for {n} peers",
                    cells.len()
                )));
            }
            let mut seen = cells.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != n {
                return Err(invalid("explicit placement repeats a cell"));
            }
            if let Some(&bad) = cells.iter().find(|&&c| c >= cap) {
                return Err(invalid(format!("cell {bad} outside a grid of {cap}")));
            }
            Ok(cells.clone())
        }
    }
}

/// Groups for one round as lists of peer indices in chunk order.
fn direct_groups(
    participants: &[usize],
    keys: &[GroupKey],
    jitter: &[i64],
    max_group: usize,
) -> Vec<Vec<usize>> {
    let mut cohorts: BTreeMap<&GroupKey, Vec<usize>> = BTreeMap::new();
    for &i in participants {
        cohorts.entry(&keys[i]).or_default().push(i);
    }
    let mut groups = Vec::new();
    for (_, mut members) in cohorts {
        members.sort_by_key(|&i| (jitter[i], i));
        groups.extend(members.chunks(max_group).map(<[usize]>::to_vec));
    }
    groups
}

fn simulated_groups(
    round: u64,
    participants: &[usize],
    keys: &[GroupKey],
    jitter: &[i64],
    cfg: &MatchConfig,
    dht: &mut SimDht,
) -> Result<Vec<Vec<usize>>> {
    let peers: Vec<MatchPeer> = participants
        .iter()
        .map(|&i| MatchPeer {
            clock_skew: jitter[i],
            ..MatchPeer::new(PeerId::from(i), keys[i].clone())
        })
        .collect();
    let outcome = form_groups(round, &peers, dht, cfg, &FaultPlan::none())?;
    Ok(outcome
        .groups
        .into_iter()
        .map(|g| g.members.into_iter().map(PeerId::index).collect())
        .collect())
}

/// Runs `grid.rounds` rounds of grouped averaging.
///
/// Each round every participating peer is matched with the peers sharing
/// its key, the group runs a butterfly all-reduce, and each member appends
/// its chunk index to its key. Failed peers keep their vector; with
/// [`FailureMode::GroupAbort`] they void their group's round, with
/// [`FailureMode::Absent`] they sit the round out.
pub fn run_moshpit(
    cfg: &MoshpitConfig,
    peers: &[ParamVector],
    settings: &TrialSettings,
    rng: &TrialRng,
) -> Result<TrialReport> {
    cfg.grid.validate()?;
    let mut tracker = Tracker::new(ProtocolKind::Moshpit, peers, settings, cfg.grid.rounds)?;
    if !tracker.done() {
        let mut values = peers.to_vec();
        drive(cfg, &mut values, &settings.failure, rng, |values, active, cost| {
            tracker.record(values, active, cost)
        })?;
    }
    Ok(tracker.finish())
}

/// Averages `values` in place over `grid.rounds` rounds and returns the
/// number of peers whose group completed the last round.
pub fn moshpit_average(
    cfg: &MoshpitConfig,
    values: &mut [ParamVector],
    failure: &FailureModel,
    rng: &TrialRng,
) -> Result<usize> {
    cfg.grid.validate()?;
    failure.validate()?;
    let mut last_active = values.len();
    drive(cfg, values, failure, rng, |_, active, _| {
        last_active = active;
        Ok(false)
    })?;
    Ok(last_active)
}

fn drive<F>(
    cfg: &MoshpitConfig,
    values: &mut [ParamVector],
    failure: &FailureModel,
    rng: &TrialRng,
    mut after_round: F,
) -> Result<()>
where
    F: FnMut(&[ParamVector], usize, f64) -> Result<bool>,
{
    let n = values.len();
    let m = cfg.grid.m;
    let cells = place(cfg, n, rng)?;
    let mut keys = cells
        .iter()
        .map(|&c| initial_index(c, &cfg.grid))
        .collect::<Result<Vec<GroupKey>>>()?;
    let match_cfg = MatchConfig::new(cfg.match_timeout, m)?;
    let mut dht = SimDht::default();
    let mut failures = FailureDraws::new(rng, failure);
    let mut priorities = rng.stream(Stream::Priorities);
    let dim = values.first().map_or(1, ParamVector::dim);

    for t in 0..cfg.grid.rounds {
        let failed = failures.round(n);
        let jitter: Vec<i64> = (0..n).map(|_| priorities.random::<u32>() as i64).collect();
        let participants: Vec<usize> = match failure.mode {
            FailureMode::Absent => (0..n).filter(|&i| !failed[i]).collect(),
            FailureMode::GroupAbort => (0..n).collect(),
        };
        let groups = match cfg.matchmaker {
            Matchmaker::Direct => direct_groups(&participants, &keys, &jitter, m),
            Matchmaker::Simulated => {
                dht.prune(t as Tick);
                simulated_groups(t as u64, &participants, &keys, &jitter, &match_cfg, &mut dht)?
            }
        };

        let mut active = 0;
        for group in &groups {
            let vectors: Vec<ParamVector> = group.iter().map(|&i| values[i].clone()).collect();
            let flags: Vec<bool> = group.iter().map(|&i| failed[i]).collect();
            let out = butterfly_allreduce(&vectors, &PartitionWeights::uniform(group.len()), &flags)?;
            if out.completed {
                active += group.len();
            }
            for ((&i, v), chunk) in group.iter().zip(out.outputs).zip(out.chunk_index) {
                values[i] = v;
                keys[i] = next_group_key(&keys[i], chunk, m)?;
            }
        }
        if after_round(values, active, complexity_estimate(1, n, m, dim))? {
            break;
        }
    }
    Ok(())
}
