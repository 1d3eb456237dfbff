//! Reference averaging protocols: random groups, ring gossip, push-sum and
//! restart-until-success all-reduce.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FailureDraws, ProtocolKind, TrialReport, TrialSettings, Tracker};
use crate::error::{invalid, Result};
use crate::metrics::{mean_vector, pairwise_sum};
use crate::rng::{Stream, TrialRng};
use crate::theory::{balanced_sizes, complexity_estimate};
use crate::types::ParamVector;

fn replace_with_mean(values: &mut [ParamVector], members: &[usize]) -> Result<()> {
    let mean = mean_vector(members.iter().map(|&i| &values[i]))?;
    for &i in members {
        values[i] = mean.clone();
    }
    Ok(())
}

/// Each round the live peers are shuffled into `⌈n/M⌉` groups of nearly
/// equal size and every group is averaged exactly.
pub fn run_random_groups(
    peers: &[ParamVector],
    group_size: usize,
    rounds: usize,
    settings: &TrialSettings,
    rng: &TrialRng,
) -> Result<TrialReport> {
    if group_size == 0 {
        return Err(invalid("group size must be >= 1"));
    }
    let n = peers.len();
    let mut tracker = Tracker::new(ProtocolKind::RandomGroups, peers, settings, rounds)?;
    let mut failures = FailureDraws::new(rng, &settings.failure);
    let mut splits = rng.stream(Stream::Splits);
    let mut values = peers.to_vec();
    let dim = peers[0].dim();
    for _ in 0..rounds {
        if tracker.done() {
            break;
        }
        let failed = failures.round(n);
        let mut alive: Vec<usize> = (0..n).filter(|&i| !failed[i]).collect();
        alive.shuffle(&mut splits);
        let live = alive.len();
        if live > 0 {
            let mut start = 0;
            for size in balanced_sizes(live, live.div_ceil(group_size)) {
                replace_with_mean(&mut values, &alive[start..start + size])?;
                start += size;
            }
        }
        let cost = complexity_estimate(1, n, group_size, dim);
        tracker.record(&values, live, cost)?;
    }
    Ok(tracker.finish())
}

/// Synchronous averaging on a ring with weight 1/3 per neighbour. A failed
/// peer drops both its edges for the round.
pub fn run_gossip(
    peers: &[ParamVector],
    rounds: usize,
    settings: &TrialSettings,
    rng: &TrialRng,
) -> Result<TrialReport> {
    let n = peers.len();
    if n < 3 {
        return Err(invalid("gossip on a ring needs at least 3 peers"));
    }
    let mut tracker = Tracker::new(ProtocolKind::Gossip, peers, settings, rounds)?;
    let mut failures = FailureDraws::new(rng, &settings.failure);
    let mut values = peers.to_vec();
    let dim = peers[0].dim();
    let third = 1.0 / 3.0;
    for _ in 0..rounds {
        if tracker.done() {
            break;
        }
        let failed = failures.round(n);
        let mut next = values.clone();
        for i in 0..n {
            if failed[i] {
                continue;
            }
            let left = (i + n - 1) % n;
            let right = (i + 1) % n;
            let links: Vec<usize> = [left, right].into_iter().filter(|&j| !failed[j]).collect();
            let own = 1.0 - third * links.len() as f64;
            let out = next[i].as_mut_slice();
            for (k, x) in out.iter_mut().enumerate() {
                *x = own * values[i].as_slice()[k]
                    + links.iter().map(|&j| third * values[j].as_slice()[k]).sum::<f64>();
            }
        }
        values = next;
        let live = failed.iter().filter(|f| !**f).count();
        tracker.record(&values, live, 2.0 * dim as f64)?;
    }
    Ok(tracker.finish())
}

/// Neighbour choice for push-sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PushSumSchedule {
    /// Round `t` pushes to `i + 2^(t mod ⌈log2 N⌉)`.
    #[default]
    PowersOfTwo,
    /// Every peer pushes to a uniformly random other peer.
    RandomPeer,
}

/// Push-sum over `(value, weight)` pairs: each live peer keeps half of its
/// mass and pushes the other half to one neighbour. A push is skipped when
/// either end has failed.
pub fn run_pushsum(
    peers: &[ParamVector],
    rounds: usize,
    schedule: PushSumSchedule,
    settings: &TrialSettings,
    rng: &TrialRng,
) -> Result<TrialReport> {
    let n = peers.len();
    if n < 2 {
        return Err(invalid("push-sum needs at least 2 peers"));
    }
    let mut tracker = Tracker::new(ProtocolKind::PushSum, peers, settings, rounds)?;
    let mut failures = FailureDraws::new(rng, &settings.failure);
    let mut splits = rng.stream(Stream::Splits);
    let dim = peers[0].dim();
    let period = (usize::BITS - (n - 1).leading_zeros()) as usize;
    let mut mass: Vec<Vec<f64>> = peers.iter().map(|p| p.as_slice().to_vec()).collect();
    let mut weight = vec![1.0; n];
    for t in 0..rounds {
        if tracker.done() {
            break;
        }
        let failed = failures.round(n);
        let targets: Vec<usize> = match schedule {
            PushSumSchedule::PowersOfTwo => {
                let offset = 1usize << (t % period);
                (0..n).map(|i| (i + offset) % n).collect()
            }
            PushSumSchedule::RandomPeer => (0..n)
                .map(|i| (i + splits.random_range(1..n)) % n)
                .collect(),
        };
        let mut next_mass = mass.clone();
        let mut next_weight = weight.clone();
        for i in 0..n {
            let j = targets[i];
            if failed[i] || failed[j] {
                continue;
            }
            next_weight[i] -= 0.5 * weight[i];
            next_weight[j] += 0.5 * weight[i];
            for k in 0..dim {
                let half = 0.5 * mass[i][k];
                next_mass[i][k] -= half;
                next_mass[j][k] += half;
            }
        }
        mass = next_mass;
        weight = next_weight;
        let estimates = mass
            .iter()
            .zip(&weight)
            .map(|(x, w)| ParamVector::new(x.iter().map(|v| v / w).collect()))
            .collect::<Result<Vec<_>>>()?;
        let total_weight = pairwise_sum(&weight);
        let conserved = ParamVector::new(
            (0..dim)
                .map(|k| pairwise_sum(&mass.iter().map(|x| x[k]).collect::<Vec<_>>()) / total_weight)
                .collect(),
        )?;
        let live = failed.iter().filter(|f| !**f).count();
        tracker.record_with_mean(&estimates, &conserved, live, dim as f64)?;
    }
    Ok(tracker.finish())
}

/// Global all-reduce that succeeds only in rounds where no peer fails, and
/// is retried otherwise.
pub fn run_allreduce_restart(
    peers: &[ParamVector],
    rounds: usize,
    settings: &TrialSettings,
    rng: &TrialRng,
) -> Result<TrialReport> {
    let n = peers.len();
    let mut tracker = Tracker::new(ProtocolKind::AllReduceRestart, peers, settings, rounds)?;
    let mut failures = FailureDraws::new(rng, &settings.failure);
    let mut values = peers.to_vec();
    let dim = peers[0].dim();
    let everyone: Vec<usize> = (0..n).collect();
    let mut finished = false;
    for _ in 0..rounds {
        if tracker.done() || finished {
            break;
        }
        let failed = failures.round(n);
        let live = failed.iter().filter(|f| !**f).count();
        if live == n {
            replace_with_mean(&mut values, &everyone)?;
            finished = true;
        }
        tracker.record(&values, live, complexity_estimate(1, n, n, dim))?;
    }
    Ok(tracker.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::FailureModel;

    fn scalars(xs: &[f64]) -> Vec<ParamVector> {
        xs.iter().map(|&x| ParamVector::scalar(x)).collect()
    }

    fn ramp(n: usize) -> Vec<ParamVector> {
        (0..n).map(|i| ParamVector::scalar(i as f64)).collect()
    }

    #[test]
    fn gossip_on_three_is_exact() {
        let r = run_gossip(&scalars(&[0.0, 3.0, 9.0]), 1, &TrialSettings::default(), &TrialRng::new(0)).unwrap();
        assert!(r.distortion[0] < 1e-28);
    }

    #[test]
    fn gossip_rejects_small_rings() {
        assert!(run_gossip(&ramp(2), 1, &TrialSettings::default(), &TrialRng::new(0)).is_err());
    }

    #[test]
    fn pushsum_two_peers_exact() {
        let r = run_pushsum(&scalars(&[1.0, 5.0]), 1, PushSumSchedule::PowersOfTwo, &TrialSettings::default(), &TrialRng::new(0)).unwrap();
        assert_eq!(r.distortion[0], 0.0);
    }

    #[test]
    fn pushsum_power_of_two_exact_after_log_rounds() {
        for k in 1..=9u32 {
            let n = 1usize << k;
            let r = run_pushsum(&ramp(n), k as usize, PushSumSchedule::PowersOfTwo, &TrialSettings::default(), &TrialRng::new(0)).unwrap();
            let scale = r.initial_distortion;
            assert!(r.final_distortion() <= 1e-24 * scale, "n={n}");
            if k > 1 {
                assert!(r.distortion[k as usize - 2] > 1e-6 * scale);
            }
        }
    }

    #[test]
    fn random_groups_single_group() {
        let r = run_random_groups(&ramp(10), 16, 3, &TrialSettings::default(), &TrialRng::new(0)).unwrap();
        assert!(r.distortion[0] < 1e-28);
        assert_eq!(r.rounds_to(1e-9), Some(1));
    }

    #[test]
    fn allreduce_restart_without_failures() {
        let r = run_allreduce_restart(&ramp(64), 50, &TrialSettings::default(), &TrialRng::new(0)).unwrap();
        assert_eq!(r.rounds_to(1e-9), Some(1));
        assert_eq!(r.executed_rounds(), 1);
    }

    #[test]
    fn allreduce_restart_always_failing_hits_cap() {
        let settings = TrialSettings::with_failure(FailureModel::with_rate(1.0).unwrap());
        let r = run_allreduce_restart(&ramp(4), 7, &settings, &TrialRng::new(0)).unwrap();
        assert_eq!(r.rounds_to(1e-9), Some(7));
        assert_eq!(r.executed_rounds(), 7);
    }
}
