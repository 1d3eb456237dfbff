//! Bandwidth-aware partition weights for one group.

use std::io::Write;

use moshpit_core::allreduce::{balance_partition, completion_time, BandwidthProfile, Balanced};
use serde::Serialize;

use crate::format::g6;
use crate::{config_err, LabResult};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceResult {
    pub bandwidths: Vec<f64>,
    pub weights: Vec<f64>,
    /// Completion time of the balanced split.
    pub objective: f64,
    /// Completion time of the uniform split, for comparison.
    pub uniform_objective: f64,
}

pub fn balance(bandwidths: &[f64]) -> LabResult<BalanceResult> {
    let profile = BandwidthProfile::new(bandwidths.to_vec()).map_err(|e| config_err(e.to_string()))?;
    let Balanced { weights, objective } = balance_partition(&profile)?;
    let m = bandwidths.len();
    let uniform = vec![1.0 / m as f64; m];
    Ok(BalanceResult {
        bandwidths: bandwidths.to_vec(),
        uniform_objective: completion_time(&uniform, &profile),
        weights: weights.as_slice().to_vec(),
        objective,
    })
}

pub fn write_csv<W: Write>(res: &BalanceResult, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["peer", "bandwidth", "weight"])?;
    for (i, (b, x)) in res.bandwidths.iter().zip(&res.weights).enumerate() {
        w.write_record([i.to_string(), g6(*b), g6(*x)])?;
    }
    w.flush()?;
    Ok(())
}
