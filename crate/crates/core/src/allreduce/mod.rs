//! Butterfly all-reduce inside one sealed group.

pub mod balance;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::column_mean;
use crate::types::{check_dim, ParamVector};

pub use balance::{balance_partition, completion_time, Balanced, BandwidthProfile};

/// Fraction of the vector each member aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartitionWeights(Vec<f64>);

impl PartitionWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(invalid("partition weights are empty"));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(invalid("partition weights must be finite and non-negative"));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("partition weights sum to {total}, not 1")));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        let n = n.max(1);
        Self(vec![1.0 / n as f64; n])
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

    /// Chunk lengths for a vector of `s` entries, by largest remainder.
    /// Ties go to the lower index.
    pub fn chunk_sizes(&self, s: usize) -> Vec<usize> {
        let quotas: Vec<f64> = self.0.iter().map(|w| w * s as f64).collect();
        let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = sizes.iter().sum();
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().take(s.saturating_sub(assigned)) {
            sizes[i] += 1;
        }
        sizes
    }

    pub fn chunk_ranges(&self, s: usize) -> Vec<Range<usize>> {
        let mut start = 0;
        self.chunk_sizes(s)
            .into_iter()
            .map(|len| {
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllReduceOutcome {
    pub outputs: Vec<ParamVector>,
    /// Chunk index of every member (its rank in the group).
    pub chunk_index: Vec<usize>,
    pub chunk_ranges: Vec<Range<usize>>,
    /// False when a member failed and the whole round was voided.
    pub completed: bool,
}

/// Member `k` averages chunk `k` across the group and sends it back to
/// everyone. Any failed member voids the round: outputs equal inputs.
pub fn butterfly_allreduce(
    vectors: &[ParamVector],
    weights: &PartitionWeights,
    failed: &[bool],
) -> Result<AllReduceOutcome> {
    let n = vectors.len();
    if n == 0 {
        return Err(invalid("all-reduce over an empty group"));
    }
    check_dim(n, weights.len())?;
    check_dim(n, failed.len())?;
    let s = vectors[0].dim();
    for v in vectors {
        check_dim(s, v.dim())?;
    }
    let chunk_ranges = weights.chunk_ranges(s);
    let chunk_index = (0..n).collect();

    if failed.iter().any(|&f| f) {
        return Ok(AllReduceOutcome {
            outputs: vectors.to_vec(),
            chunk_index,
            chunk_ranges,
            completed: false,
        });
    }

    let mut reduced = vec![0.0; s];
    let mut column = Vec::with_capacity(n);
    for range in &chunk_ranges {
        // scatter-reduce: the chunk owner sums every member's slice
        for j in range.clone() {
            column.clear();
            column.extend(vectors.iter().map(|v| v.as_slice()[j]));
            reduced[j] = column_mean(&column);
        }
    }
    let reduced = ParamVector::new(reduced)?;
    Ok(AllReduceOutcome {
        outputs: vec![reduced; n],
        chunk_index,
        chunk_ranges,
        completed: true,
    })
}
