//! Summation helpers and the distortion metric.

use crate::error::{Error, Result};
use crate::types::{check_dim, ParamVector};

const PAIRWISE_LEAF: usize = 8;

/// Pairwise (tree) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean of a slice, exact when all entries are equal.
pub fn column_mean(xs: &[f64]) -> f64 {
    match xs.split_first() {
        None => 0.0,
        Some((first, rest)) if rest.iter().all(|x| x == first) => *first,
        Some(_) => pairwise_sum(xs) / xs.len() as f64,
    }
}

/// Coordinate-wise mean of a set of vectors, summed pairwise per coordinate.
pub fn mean_vector<'a, I>(vectors: I) -> Result<ParamVector>
where
    I: IntoIterator<Item = &'a ParamVector>,
{
    let vectors: Vec<&ParamVector> = vectors.into_iter().collect();
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidConfig("mean of an empty set".into()))?;
    let dim = first.dim();
    for v in &vectors {
        check_dim(dim, v.dim())?;
    }
    let mut column = Vec::with_capacity(vectors.len());
    let values = (0..dim)
        .map(|j| {
            column.clear();
            column.extend(vectors.iter().map(|v| v.as_slice()[j]));
            column_mean(&column)
        })
        .collect();
    Ok(ParamVector::new(values).expect("mean of finite vectors is finite"))
}

/// Mean squared distance of `peers` from `reference_mean`:
/// `(1/N) Σ ||θ_i - ref||²`.
pub fn distortion(peers: &[ParamVector], reference_mean: &ParamVector) -> Result<f64> {
    if peers.is_empty() {
        return Ok(0.0);
    }
    let terms = peers
        .iter()
        .map(|p| p.squared_distance(reference_mean))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&terms) / peers.len() as f64)
}

/// Scalar fast path of [`distortion`].
pub fn scalar_distortion(values: &[f64], reference: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let terms: Vec<f64> = values.iter().map(|v| (v - reference).powi(2)).collect();
    pairwise_sum(&terms) / values.len() as f64
}
