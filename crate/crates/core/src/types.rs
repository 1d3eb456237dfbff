//! Shared domain types.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A peer's local parameter state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("parameter vector must have dimension >= 1"));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter entry {bad}")));
        }
        Ok(Self(values))
    }

    pub fn scalar(value: f64) -> Self {
        Self(vec![value])
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn squared_distance(&self, other: &ParamVector) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

impl From<f64> for ParamVector {
    fn from(v: f64) -> Self {
        Self::scalar(v)
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// The virtual `M^d` grid that peers are arranged on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Peers per grid axis.
    pub m: usize,
    /// Number of grid dimensions.
    pub d: usize,
    /// Averaging rounds.
    pub rounds: usize,
}

impl GridConfig {
    pub fn new(m: usize, d: usize, rounds: usize) -> Result<Self> {
        let grid = Self { m, d, rounds };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d == 0 || self.rounds == 0 {
            return Err(invalid(format!(
                "grid requires M, d, T >= 1 (got M={}, d={}, T={})",
                self.m, self.d, self.rounds
            )));
        }
        if self.capacity().is_none() {
            return Err(invalid(format!("grid {}^{} overflows", self.m, self.d)));
        }
        Ok(())
    }

    /// `M^d`, or `None` on overflow.
    pub fn capacity(&self) -> Option<usize> {
        u32::try_from(self.d)
            .ok()
            .and_then(|d| self.m.checked_pow(d))
    }

    pub fn check_fits(&self, n: usize) -> Result<()> {
        self.validate()?;
        match self.capacity() {
            Some(cap) if cap >= n => Ok(()),
            _ => Err(invalid(format!(
                "{n} peers do not fit a {}^{} grid",
                self.m, self.d
            ))),
        }
    }
}

/// Chained chunk indices of the last `d - 1` rounds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupKey(Vec<usize>);

impl GroupKey {
    pub fn new(indices: Vec<usize>) -> Self {
        Self(indices)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct PeerId(pub u32);

impl PeerId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for PeerId {
    fn from(i: usize) -> Self {
        PeerId(i as u32)
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "peer#{}", self.0)
    }
}

/// When a per-round failure strikes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// The peer fails mid all-reduce, so its whole group skips the round.
    #[default]
    GroupAbort,
    /// The peer is offline for the round and does not take part in matchmaking.
    Absent,
}

/// Per-peer, per-round fail-stop model. Failed peers come back next round
/// with their pre-failure state.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FailureModel {
    pub p_round: f64,
    #[serde(default)]
    pub mode: FailureMode,
    /// `(round, peer-count delta)` pairs.
    #[serde(default)]
    pub churn: Vec<(usize, i64)>,
}

impl FailureModel {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_rate(p_round: f64) -> Result<Self> {
        let model = Self {
            p_round,
            ..Self::default()
        };
        model.validate()?;
        Ok(model)
    }

    pub fn mode(mut self, mode: FailureMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_round) {
            return Err(invalid(format!(
                "failure probability {} outside [0, 1]",
                self.p_round
            )));
        }
        Ok(())
    }
}
