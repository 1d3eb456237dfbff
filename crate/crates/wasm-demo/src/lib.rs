//! Browser bindings: per-round distortion curves for each averaging
//! protocol and balanced partition weights for a bandwidth list.

use moshpit_core::allreduce::{balance_partition, completion_time, BandwidthProfile};
use moshpit_core::protocols::{
    run_protocol, MoshpitConfig, ProtocolConfig, ProtocolKind, PushSumSchedule, TrialSettings,
};
use moshpit_core::rng::seeded_standard_normal;
use moshpit_core::{FailureModel, GridConfig, ParamVector, Stream, TrialRng};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Serialize)]
pub struct Curve {
    pub protocol: &'static str,
    /// Distortion before the first round, then after each round.
    pub distortion: Vec<f64>,
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Weights {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub uniform_objective: f64,
}

fn config_for(kind: ProtocolKind, m: usize, d: usize, rounds: usize) -> moshpit_core::Result<ProtocolConfig> {
    Ok(match kind {
        ProtocolKind::Moshpit => ProtocolConfig::Moshpit(MoshpitConfig::new(GridConfig::new(m, d, rounds)?)),
        ProtocolKind::RandomGroups => ProtocolConfig::RandomGroups { group_size: m, rounds },
        ProtocolKind::Gossip => ProtocolConfig::Gossip { rounds },
        ProtocolKind::PushSum => ProtocolConfig::PushSum {
            rounds,
            schedule: PushSumSchedule::PowersOfTwo,
        },
        ProtocolKind::AllReduceRestart => ProtocolConfig::AllReduceRestart { rounds },
    })
}

/// Runs every protocol that accepts `n` peers on the same initial values.
pub fn curves(n: usize, m: usize, d: usize, p: f64, rounds: usize, seed: u64) -> moshpit_core::Result<Vec<Curve>> {
    let mut rng = TrialRng::new(seed).stream(Stream::Init);
    let peers = (0..n)
        .map(|_| ParamVector::new(seeded_standard_normal(&mut rng, 1)))
        .collect::<moshpit_core::Result<Vec<_>>>()?;
    let settings = TrialSettings {
        thresholds: vec![],
        failure: FailureModel::with_rate(p)?,
        stop_early: false,
    };
    let mut out = Vec::new();
    for (i, kind) in ProtocolKind::ALL.into_iter().enumerate() {
        let cfg = config_for(kind, m, d, rounds)?;
        let trial = TrialRng::new(seed ^ ((i as u64 + 1) << 32));
        let Ok(report) = run_protocol(&cfg, &peers, &settings, &trial) else {
            continue;
        };
        let mut distortion = vec![report.initial_distortion];
        distortion.extend(&report.distortion);
        out.push(Curve {
            protocol: kind.name(),
            distortion,
            active: report.active_counts,
        });
    }
    Ok(out)
}

pub fn weights(bandwidths: &[f64]) -> moshpit_core::Result<Weights> {
    let profile = BandwidthProfile::new(bandwidths.to_vec())?;
    let balanced = balance_partition(&profile)?;
    let uniform = vec![1.0 / bandwidths.len() as f64; bandwidths.len()];
    Ok(Weights {
        weights: balanced.weights.as_slice().to_vec(),
        objective: balanced.objective,
        uniform_objective: completion_time(&uniform, &profile),
    })
}

fn to_js<T: Serialize>(r: moshpit_core::Result<T>) -> Result<String, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

/// JSON array of `{protocol, distortion, active}` curves.
#[wasm_bindgen(js_name = convergenceCurves)]
pub fn convergence_curves(n: usize, m: usize, d: usize, p: f64, rounds: usize, seed: u32) -> Result<String, JsValue> {
    to_js(curves(n, m, d, p, rounds, seed as u64))
}

/// JSON `{weights, objective, uniform_objective}` for the given bandwidths.
#[wasm_bindgen(js_name = balanceWeights)]
pub fn balance_weights(bandwidths: Vec<f64>) -> Result<String, JsValue> {
    to_js(weights(&bandwidths))
}
