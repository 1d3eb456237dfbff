//! Local SGD with periodic grouped averaging and a changing set of peers.

mod bounds;
mod membership;
mod objective;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::{column_mean, pairwise_sum};
use crate::protocols::{moshpit_average, Matchmaker, MoshpitConfig, Placement};
use crate::rng::{Stream, TrialRng};
use crate::types::{FailureModel, GridConfig, ParamVector, PeerId};

pub use bounds::{theoretical_iteration_bound, BoundInputs, BoundKind};
pub use membership::{MembershipChange, MembershipSchedule};
pub use objective::ObjectiveSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub gamma: f64,
    /// Local steps between synchronisations.
    pub tau: usize,
    pub steps: usize,
    /// Initial number of peers.
    pub peers: usize,
    /// Averaging grid; `rounds` is ignored in favour of `inner_rounds`.
    pub grid: GridConfig,
    /// Standard deviation of the gradient noise (total over all coordinates).
    pub sigma: f64,
    /// Averaging rounds per synchronisation; defaults to `grid.d`.
    #[serde(default)]
    pub inner_rounds: Option<usize>,
    #[serde(default)]
    pub failure: FailureModel,
    #[serde(default)]
    pub placement: Placement,
    /// Common starting point; zeros when empty.
    #[serde(default)]
    pub theta0: Vec<f64>,
}

impl OptimizerConfig {
    pub fn new(gamma: f64, tau: usize, steps: usize, peers: usize, grid: GridConfig) -> Self {
        Self {
            gamma,
            tau,
            steps,
            peers,
            grid,
            sigma: 0.0,
            inner_rounds: None,
            failure: FailureModel::none(),
            placement: Placement::default(),
            theta0: Vec::new(),
        }
    }

    pub fn inner_rounds(&self) -> usize {
        self.inner_rounds.unwrap_or(self.grid.d)
    }

    pub fn validate(&self, objective: &ObjectiveSpec) -> Result<()> {
        objective.validate()?;
        self.grid.validate()?;
        self.failure.validate()?;
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.tau == 0 {
            return Err(invalid("communication period must be >= 1"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(invalid("noise level must be non-negative"));
        }
        if self.peers == 0 {
            return Err(invalid("need at least one peer"));
        }
        if self.inner_rounds() == 0 {
            return Err(invalid("need at least one averaging round per synchronisation"));
        }
        if matches!(self.placement, Placement::Explicit(_)) {
            return Err(invalid("training uses random or dense placement"));
        }
        if !self.theta0.is_empty() && self.theta0.len() != objective.dim() {
            return Err(Error::DimensionMismatch {
                expected: objective.dim(),
                actual: self.theta0.len(),
            });
        }
        self.grid.check_fits(self.peers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerState {
    pub id: PeerId,
    pub theta: Vec<f64>,
    pub step: u64,
}

/// One noisy gradient step. Noise is isotropic Gaussian with variance
/// `σ²/s` per coordinate. Returns the squared norm of the noise drawn.
pub fn local_step<R: Rng + ?Sized>(
    state: &mut PeerState,
    objective: &ObjectiveSpec,
    gamma: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<f64> {
    let grad = objective.gradient(&state.theta);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {} at step {}",
            state.id, state.step
        )));
    }
    let mut noise_sq = 0.0;
    let per_coord = sigma / (state.theta.len() as f64).sqrt();
    let normal = Normal::new(0.0, per_coord).map_err(|e| invalid(e.to_string()))?;
    for (t, g) in state.theta.iter_mut().zip(grad) {
        let xi = if sigma > 0.0 { normal.sample(rng) } else { 0.0 };
        noise_sq += xi * xi;
        *t -= gamma * (g + xi);
    }
    if state.theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("parameters of {} diverged", state.id)));
    }
    state.step += 1;
    Ok(noise_sq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub active: usize,
    /// `f` at the mean of the active peers.
    pub loss: f64,
    pub f_gap: Option<f64>,
    pub grad_norm_sq: f64,
    /// `V_k`, mean squared distance of active peers from their mean.
    pub dispersion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionDiagnostics {
    /// `max_a V_{aτ} / γ²` over synchronisation points.
    pub delta_aq_sq: f64,
    /// Mean squared norm of the injected gradient noise.
    pub sigma_sq_hat: f64,
    /// Smallest active-set size.
    pub n_min: usize,
    /// Per-step departure excess (left-hand side of the departure condition).
    pub pv_excess: Vec<f64>,
    /// Smallest `δ_pv,1` explaining every excess when `δ_pv,2 = 0`.
    pub delta_pv1: Option<f64>,
    /// Smallest `δ_pv,2²` explaining every excess when `δ_pv,1 = 0`.
    pub delta_pv2_sq: Option<f64>,
}

impl AssumptionDiagnostics {
    /// `2γ²(4 δ_aq² + (τ−1) σ²)` with the measured constants.
    pub fn dispersion_bound(&self, gamma: f64, tau: usize) -> f64 {
        2.0 * gamma * gamma * (4.0 * self.delta_aq_sq + (tau as f64 - 1.0) * self.sigma_sq_hat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdRun {
    /// Records for steps `0..=K`.
    pub records: Vec<StepRecord>,
    pub final_mean: Vec<f64>,
    /// `Σ w_k θ^k / Σ w_k` with `w_k = (1−γμ)^{−(k+1)}`.
    pub weighted_mean: Vec<f64>,
    pub weighted_gap: Option<f64>,
    pub diagnostics: AssumptionDiagnostics,
    pub synchronisations: usize,
}

impl SgdRun {
    pub fn dispersion(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.dispersion).collect()
    }
}

fn mean_of(peers: &[PeerState]) -> Vec<f64> {
    let dim = peers[0].theta.len();
    let mut column = Vec::with_capacity(peers.len());
    (0..dim)
        .map(|j| {
            column.clear();
            column.extend(peers.iter().map(|p| p.theta[j]));
            column_mean(&column)
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dispersion(peers: &[PeerState], mean: &[f64]) -> f64 {
    let terms: Vec<f64> = peers.iter().map(|p| sq_dist(&p.theta, mean)).collect();
    pairwise_sum(&terms) / peers.len() as f64
}

/// Runs `steps` iterations: every active peer takes a noisy gradient step,
/// and after every `tau`-th step the active peers average their parameters
/// with [`moshpit_average`]. Membership changes are applied at the start of
/// their step.
pub fn run_moshpit_sgd(
    config: &OptimizerConfig,
    objective: &ObjectiveSpec,
    schedule: &MembershipSchedule,
    rng: &TrialRng,
) -> Result<SgdRun> {
    config.validate(objective)?;
    let capacity = config
        .grid
        .capacity()
        .ok_or_else(|| invalid("grid capacity overflows"))?;
    schedule.validate(config.peers, capacity, config.tau, config.steps)?;

    let dim = objective.dim();
    let theta0 = if config.theta0.is_empty() {
        vec![0.0; dim]
    } else {
        config.theta0.clone()
    };
    let minimizer = objective.minimizer();
    let f_star = minimizer.as_ref().map(|m| objective.value(m));
    let mu = objective.strong_convexity();
    let gamma = config.gamma;
    let averaging = MoshpitConfig {
        grid: GridConfig {
            rounds: config.inner_rounds(),
            ..config.grid
        },
        placement: config.placement.clone(),
        matchmaker: Matchmaker::Direct,
        ..MoshpitConfig::new(config.grid)
    };

    let mut peers: Vec<PeerState> = (0..config.peers)
        .map(|i| PeerState {
            id: PeerId::from(i),
            theta: theta0.clone(),
            step: 0,
        })
        .collect();
    let mut next_id = config.peers;
    let mut noise_rng = rng.stream(Stream::Noise);
    let mut membership_rng = rng.stream(Stream::Membership);

    let mut records = Vec::with_capacity(config.steps + 1);
    let mut noise_total = 0.0;
    let mut noise_draws = 0usize;
    let mut delta_aq_sq: f64 = 0.0;
    let mut n_min = usize::MAX;
    let mut pv_excess = Vec::new();
    let mut pv1: Option<f64> = None;
    let mut pv2_sq: Option<f64> = None;
    let mut synchronisations = 0;

    let decay = (1.0 - gamma * mu).max(0.0);
    let mut weight_ratio = 0.0;
    let mut weighted_mean = vec![0.0; dim];
    // θ̂ and θ of the previous step, for the departure diagnostics
    let mut pending: Option<(Vec<f64>, Vec<f64>)> = None;

    for k in 0..=config.steps {
        let delta = schedule.delta_at(k);
        if delta < 0 {
            for _ in 0..delta.unsigned_abs() {
                let victim = membership_rng.random_range(0..peers.len());
                peers.remove(victim);
            }
        } else {
            for _ in 0..delta {
                let donor = &peers[membership_rng.random_range(0..peers.len())];
                let joiner = PeerState {
                    id: PeerId::from(next_id),
                    theta: donor.theta.clone(),
                    step: donor.step,
                };
                next_id += 1;
                peers.push(joiner);
            }
        }
        if peers.is_empty() {
            return Err(Error::NoActivePeers(k));
        }
        n_min = n_min.min(peers.len());

        let mean = mean_of(&peers);
        let grad = objective.gradient(&mean);
        let loss = objective.value(&mean);
        let v = dispersion(&peers, &mean);

        if let Some((hat, prev)) = pending.take() {
            let diff: Vec<f64> = mean.iter().zip(&hat).map(|(a, b)| a - b).collect();
            match (&minimizer, objective) {
                (Some(star), ObjectiveSpec::Quadratic { .. } | ObjectiveSpec::LogisticRegression { .. }) => {
                    let sum: Vec<f64> = mean
                        .iter()
                        .zip(&hat)
                        .zip(star)
                        .map(|((a, b), s)| a + b - 2.0 * s)
                        .collect();
                    let excess = dot(&diff, &sum);
                    pv_excess.push(excess);
                    let pos = excess.max(0.0);
                    let scale = gamma * mu * sq_dist(&prev, star);
                    pv2_sq = Some(pv2_sq.unwrap_or(0.0).max(pos / (gamma * gamma)));
                    pv1 = Some(match (pv1.unwrap_or(0.0), pos > 0.0) {
                        (cur, false) => cur,
                        (_, true) if scale <= 0.0 => f64::INFINITY,
                        (cur, true) => cur.max(pos / scale),
                    });
                }
                _ => {
                    if let Some(l) = objective.smoothness() {
                        let prev_grad = objective.gradient(&prev);
                        let excess = -dot(&prev_grad, &diff) + l * dot(&diff, &diff);
                        pv_excess.push(excess);
                        let pos = excess.max(0.0);
                        let scale = gamma * dot(&prev_grad, &prev_grad);
                        pv2_sq = Some(pv2_sq.unwrap_or(0.0).max(pos / (l * gamma * gamma)));
                        pv1 = Some(match (pv1.unwrap_or(0.0), pos > 0.0) {
                            (cur, false) => cur,
                            (_, true) if scale <= 0.0 => f64::INFINITY,
                            (cur, true) => cur.max(pos / scale),
                        });
                    }
                }
            }
        }

        if k % config.tau == 0 {
            delta_aq_sq = delta_aq_sq.max(v / (gamma * gamma));
        }
        weight_ratio = 1.0 + decay * weight_ratio;
        for (w, m) in weighted_mean.iter_mut().zip(&mean) {
            *w += (m - *w) / weight_ratio;
        }
        records.push(StepRecord {
            step: k,
            active: peers.len(),
            loss,
            f_gap: f_star.map(|s| loss - s),
            grad_norm_sq: dot(&grad, &grad),
            dispersion: v,
        });
        if k == config.steps {
            break;
        }

        for p in &mut peers {
            noise_total += local_step(p, objective, gamma, config.sigma, &mut noise_rng)?;
            noise_draws += 1;
        }
        if (k + 1) % config.tau == 0 {
            let mut vectors = peers
                .iter()
                .map(|p| ParamVector::new(p.theta.clone()))
                .collect::<Result<Vec<_>>>()?;
            moshpit_average(
                &averaging,
                &mut vectors,
                &config.failure,
                &rng.fork(synchronisations as u64),
            )?;
            for (p, v) in peers.iter_mut().zip(vectors) {
                p.theta = v.into_inner();
            }
            synchronisations += 1;
        }
        pending = Some((mean_of(&peers), mean));
    }

    let final_mean = mean_of(&peers);
    let weighted_gap = f_star.map(|s| objective.value(&weighted_mean) - s);
    Ok(SgdRun {
        records,
        final_mean,
        weighted_mean,
        weighted_gap,
        diagnostics: AssumptionDiagnostics {
            delta_aq_sq,
            sigma_sq_hat: if noise_draws > 0 {
                noise_total / noise_draws as f64
            } else {
                0.0
            },
            n_min,
            pv_excess,
            delta_pv1: pv1,
            delta_pv2_sq: pv2_sq,
        },
        synchronisations,
    })
}
