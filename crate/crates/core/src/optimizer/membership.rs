//! Scheduled departures and arrivals of peers during training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Net change of the active set applied at the start of step `step`.
/// Leavers are drawn at random from the active peers; joiners copy the
/// state of a random active peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipChange {
    pub step: usize,
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MembershipSchedule {
    changes: BTreeMap<usize, i64>,
}

impl MembershipSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(changes: &[MembershipChange]) -> Self {
        let mut merged = BTreeMap::new();
        for c in changes {
            *merged.entry(c.step).or_insert(0) += c.delta;
        }
        merged.retain(|_, d| *d != 0);
        Self { changes: merged }
    }

    /// Churn given per synchronisation round, applied at step `round * tau`.
    pub fn from_churn(churn: &[(usize, i64)], tau: usize) -> Self {
        let changes: Vec<MembershipChange> = churn
            .iter()
            .map(|&(round, delta)| MembershipChange {
                step: round * tau,
                delta,
            })
            .collect();
        Self::new(&changes)
    }

    pub fn delta_at(&self, step: usize) -> i64 {
        self.changes.get(&step).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.changes.is_empty()
    }

    /// Active-set size at every step `0..=steps`, after that step's change.
    pub fn counts(&self, n0: usize, steps: usize) -> Vec<i64> {
        let mut n = n0 as i64;
        (0..=steps)
            .map(|k| {
                n += self.delta_at(k);
                n
            })
            .collect()
    }

    /// Rejects schedules that empty the run, overflow the grid, or shrink
    /// the active set by more than half between synchronisations.
    pub fn validate(&self, n0: usize, capacity: usize, tau: usize, steps: usize) -> Result<()> {
        if tau == 0 {
            return Err(invalid("communication period must be >= 1"));
        }
        if let Some((&step, _)) = self.changes.iter().next_back().filter(|(s, _)| **s > steps) {
            return Err(invalid(format!("membership change at step {step} after the last step {steps}")));
        }
        let counts = self.counts(n0, steps);
        for (k, &n) in counts.iter().enumerate() {
            if n < 1 {
                return Err(invalid(format!("no active peers left at step {k}")));
            }
            if n as u128 > capacity as u128 {
                return Err(invalid(format!(
                    "{n} active peers at step {k} exceed the grid capacity {capacity}"
                )));
            }
        }
        for a in 0.. {
            let (now, next) = (a * tau, (a + 1) * tau);
            if next > steps {
                break;
            }
            if counts[now] > 2 * counts[next] {
                return Err(invalid(format!(
                    "active set shrinks from {} at step {now} to {} at step {next}, more than half",
                    counts[now], counts[next]
                )));
            }
        }
        Ok(())
    }
}
