//! Bandwidth-aware partitioning of the vector among group members.
//!
//! Member `i` uploads `1 - w_i` of the vector and downloads `(M-1) w_i`,
//! so its communication time is `(1 + (M-2) w_i) / b_i`. We minimise the
//! slowest member's time over the simplex by bisection on the objective:
//! for a candidate time `ξ`, each weight is capped at `(ξ b_i - 1)/(M-2)`
//! and `ξ` is feasible iff every cap is non-negative and the caps sum to
//! at least one.

use serde::{Deserialize, Serialize};

use super::PartitionWeights;
use crate::error::{invalid, Result};

/// Per-member bandwidth, the minimum of upload and download.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthProfile(Vec<f64>);

impl BandwidthProfile {
    pub fn new(b: Vec<f64>) -> Result<Self> {
        if b.is_empty() {
            return Err(invalid("bandwidth profile is empty"));
        }
        if let Some(bad) = b.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(invalid(format!("bandwidth must be positive, got {bad}")));
        }
        Ok(Self(b))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Balanced {
    pub weights: PartitionWeights,
    /// Communication time of the slowest member.
    pub objective: f64,
}

/// `max_i (1 - w_i + (M-1) w_i) / b_i`.
pub fn completion_time(weights: &[f64], profile: &BandwidthProfile) -> f64 {
    let m = profile.len() as f64;
    weights
        .iter()
        .zip(profile.as_slice())
        .map(|(w, b)| (1.0 - w + (m - 1.0) * w) / b)
        .fold(0.0, f64::max)
}

pub fn balance_partition(profile: &BandwidthProfile) -> Result<Balanced> {
    let b = profile.as_slice();
    let m = b.len();
    if m <= 2 {
        // objective does not depend on w here
        let weights = PartitionWeights::uniform(m);
        let objective = completion_time(weights.as_slice(), profile);
        return Ok(Balanced { weights, objective });
    }
    let slack = (m - 2) as f64;
    let caps = |xi: f64| b.iter().map(move |bi| (xi * bi - 1.0) / slack);
    let floor = b.iter().map(|bi| 1.0 / bi).fold(0.0, f64::max);
    let feasible = |xi: f64| xi >= floor && caps(xi).map(|c| c.max(0.0)).sum::<f64>() >= 1.0;

    let mut lo = floor;
    let mut hi = b.iter().map(|bi| (m - 1) as f64 / bi).fold(0.0, f64::max);
    if feasible(lo) {
        hi = lo;
    }
    for _ in 0..200 {
        if hi - lo <= 1e-15 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let capped: Vec<f64> = caps(hi).map(|c| c.max(0.0)).collect();
    let total: f64 = capped.iter().sum();
    let weights = PartitionWeights::new(capped.iter().map(|c| c / total).collect())?;
    let objective = completion_time(weights.as_slice(), profile);
    Ok(Balanced { weights, objective })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_is_uniform() {
        let p = BandwidthProfile::new(vec![3.0; 4]).unwrap();
        let r = balance_partition(&p).unwrap();
        for w in r.weights.as_slice() {
            assert!((w - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn two_members_objective_is_constant() {
        let p = BandwidthProfile::new(vec![1.0, 4.0]).unwrap();
        let r = balance_partition(&p).unwrap();
        assert_eq!(r.weights.as_slice(), &[0.5, 0.5]);
        assert_eq!(r.objective, 1.0);
        for w in [0.0, 0.3, 1.0] {
            assert_eq!(completion_time(&[w, 1.0 - w], &p), 1.0);
        }
    }

    #[test]
    fn worked_example() {
        let p = BandwidthProfile::new(vec![1.0, 1.0, 2.0]).unwrap();
        let r = balance_partition(&p).unwrap();
        let w = r.weights.as_slice();
        assert!(w[0].abs() < 1e-9 && w[1].abs() < 1e-9 && (w[2] - 1.0).abs() < 1e-9);
        assert!((r.objective - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_member() {
        let p = BandwidthProfile::new(vec![5.0]).unwrap();
        let r = balance_partition(&p).unwrap();
        assert_eq!(r.weights.as_slice(), &[1.0]);
    }

    #[test]
    fn rejects_bad_bandwidth() {
        assert!(BandwidthProfile::new(vec![1.0, 0.0]).is_err());
        assert!(BandwidthProfile::new(vec![-1.0]).is_err());
        assert!(BandwidthProfile::new(vec![]).is_err());
    }
}
