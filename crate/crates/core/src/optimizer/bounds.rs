//! Iteration-count estimates for local SGD with inexact averaging, up to
//! hidden constants. For annotation only.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundKind {
    StronglyConvex,
    /// `μ = 0`; `r0_sq = ‖θ⁰ − θ*‖²`.
    Convex { r0_sq: f64 },
    /// `delta0 = f(θ⁰) − f_*`.
    NonConvex { delta0: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub l: f64,
    pub mu: f64,
    pub sigma_sq: f64,
    pub tau: usize,
    pub n_min: usize,
    pub delta_aq_sq: f64,
    pub delta_pv1: f64,
    pub delta_pv2_sq: f64,
}

impl BoundInputs {
    /// Noise-free, exact averaging, no departures.
    pub fn ideal(l: f64, mu: f64, n: usize) -> Self {
        Self {
            l,
            mu,
            sigma_sq: 0.0,
            tau: 1,
            n_min: n,
            delta_aq_sq: 0.0,
            delta_pv1: 0.0,
            delta_pv2_sq: 0.0,
        }
    }
}

/// Iteration count in "order units" needed to reach accuracy `epsilon`.
/// Returns infinity when the departure constant `δ_pv,1` is out of range.
pub fn theoretical_iteration_bound(kind: BoundKind, inp: &BoundInputs, epsilon: f64) -> Result<f64> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(invalid("epsilon must be positive"));
    }
    if !(inp.l.is_finite() && inp.l > 0.0) || inp.mu < 0.0 || inp.n_min == 0 || inp.tau == 0 {
        return Err(invalid("bound needs L > 0, μ >= 0, N_min >= 1 and τ >= 1"));
    }
    let tau = inp.tau as f64;
    let noise = inp.delta_pv2_sq + inp.sigma_sq / inp.n_min as f64;
    let drift = (tau - 1.0) * inp.sigma_sq + inp.delta_aq_sq;
    match kind {
        BoundKind::StronglyConvex => {
            if inp.mu <= 0.0 {
                return Err(invalid("strongly convex bound requested with μ = 0"));
            }
            let keep = 1.0 - inp.delta_pv1;
            if keep <= 0.0 {
                return Ok(f64::INFINITY);
            }
            let mu = inp.mu;
            Ok(inp.l / (keep * mu)
                + noise / (keep * mu * epsilon)
                + (inp.l * drift / (keep * keep * mu * mu * epsilon)).sqrt())
        }
        BoundKind::Convex { r0_sq } => {
            if inp.delta_pv1 >= 1.0 {
                return Ok(f64::INFINITY);
            }
            Ok(inp.l * r0_sq / epsilon
                + r0_sq * noise / (epsilon * epsilon)
                + r0_sq * (inp.l * drift).sqrt() / epsilon.powf(1.5))
        }
        BoundKind::NonConvex { delta0 } => {
            let keep = 1.0 - 2.0 * inp.delta_pv1;
            if keep <= 0.0 {
                return Ok(f64::INFINITY);
            }
            let eps2 = epsilon * epsilon;
            Ok(inp.l * delta0 / (keep * keep * eps2)
                * (1.0 + tau * keep.sqrt() + noise / eps2 + (keep * drift).sqrt() / epsilon))
        }
    }
}
