//! Closed-form quantities from the averaging analysis, each with an
//! independent enumeration or simulation counterpart in the tests.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::scalar_distortion;

/// Sizes of the disjoint groups a population of `n` peers is split into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    n: usize,
    group_sizes: Vec<usize>,
}

impl SplitSpec {
    pub fn new(group_sizes: Vec<usize>) -> Result<Self> {
        if group_sizes.is_empty() {
            return Err(invalid("a split needs at least one group"));
        }
        if group_sizes.contains(&0) {
            return Err(invalid("group sizes must be >= 1"));
        }
        let n = group_sizes.iter().sum();
        Ok(Self { n, group_sizes })
    }

    /// `n` peers split into groups of at most `max_size`, sizes differing by at most one.
    pub fn balanced(n: usize, max_size: usize) -> Result<Self> {
        if n == 0 || max_size == 0 {
            return Err(invalid("balanced split needs n >= 1 and size >= 1"));
        }
        Self::new(balanced_sizes(n, n.div_ceil(max_size)))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    /// All integer partitions of `n`, largest part first.
    pub fn all_partitions(n: usize) -> Vec<SplitSpec> {
        fn rec(rest: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if rest == 0 {
                out.push(cur.clone());
                return;
            }
            for part in (1..=rest.min(max)).rev() {
                cur.push(part);
                rec(rest - part, part, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(n, n, &mut Vec::new(), &mut out);
        out.into_iter()
            .map(|sizes| SplitSpec::new(sizes).expect("partition parts are positive"))
            .collect()
    }
}

/// `r` group sizes summing to `n`, differing by at most one (larger first).
pub fn balanced_sizes(n: usize, r: usize) -> Vec<usize> {
    let r = r.clamp(1, n.max(1));
    (0..r).map(|i| n / r + usize::from(i < n % r)).collect()
}

/// Per-round factor `(r-1)/N + r/N²` stated for random group averaging.
pub fn closed_form_contraction_factor(spec: &SplitSpec) -> f64 {
    let n = spec.n() as f64;
    let r = spec.groups() as f64;
    (r - 1.0) / n + r / (n * n)
}

/// Exact expected one-round distortion ratio when a uniformly random
/// permutation is cut into contiguous blocks: `(r-1)/(N-1)`.
///
/// Follows from the pair co-membership probability `M_i(M_i-1)/(N(N-1))`.
/// Independent of the input vectors.
pub fn permutation_contraction_factor(spec: &SplitSpec) -> f64 {
    if spec.n() <= 1 {
        return 0.0;
    }
    (spec.groups() as f64 - 1.0) / (spec.n() as f64 - 1.0)
}

pub const MAX_ENUMERATION_PEERS: usize = 8;

/// `E[distortion_after] / distortion_before` for one round of group averaging,
/// computed by enumerating every assignment of peers to the labelled groups.
///
/// Each assignment corresponds to the same number of permutations
/// (`Π M_i!`), so a plain average over assignments equals the average over
/// all `N!` permutations.
pub fn exhaustive_contraction_oracle(spec: &SplitSpec, values: &[f64]) -> Result<f64> {
    let n = spec.n();
    if n > MAX_ENUMERATION_PEERS {
        return Err(Error::TooLarge(n));
    }
    if values.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: values.len(),
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let before = scalar_distortion(values, mean);
    if before == 0.0 {
        return Err(invalid("degenerate input: all values equal"));
    }

    let mut assignment = vec![usize::MAX; n];
    let mut total = 0.0;
    let mut count = 0u64;
    enumerate_assignments(
        spec.group_sizes(),
        0,
        &mut assignment,
        &mut |assign: &[usize]| {
            let mut sums = vec![0.0; spec.groups()];
            for (i, &g) in assign.iter().enumerate() {
                sums[g] += values[i];
            }
            let after: f64 = assign
                .iter()
                .map(|&g| {
                    let group_mean = sums[g] / spec.group_sizes()[g] as f64;
                    (group_mean - mean).powi(2)
                })
                .sum::<f64>()
                / n as f64;
            total += after;
            count += 1;
        },
    );
    Ok(total / count as f64 / before)
}

/// One Monte-Carlo draw of the ratio estimated by
/// [`exhaustive_contraction_oracle`]: peers are shuffled uniformly and cut
/// into consecutive groups of the given sizes.
pub fn sample_split_ratio<R: rand::Rng + ?Sized>(
    spec: &SplitSpec,
    values: &[f64],
    rng: &mut R,
) -> Result<f64> {
    use rand::seq::SliceRandom;

    let n = spec.n();
    if values.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: values.len(),
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let before = scalar_distortion(values, mean);
    if before == 0.0 {
        return Err(invalid("degenerate input: all values equal"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut after = 0.0;
    let mut start = 0;
    for &size in spec.group_sizes() {
        let group = &order[start..start + size];
        let group_mean = group.iter().map(|&i| values[i]).sum::<f64>() / size as f64;
        after += size as f64 * (group_mean - mean).powi(2);
        start += size;
    }
    Ok(after / n as f64 / before)
}

fn enumerate_assignments(
    sizes: &[usize],
    group: usize,
    assignment: &mut [usize],
    visit: &mut impl FnMut(&[usize]),
) {
    if group == sizes.len() {
        visit(assignment);
        return;
    }
    let free: Vec<usize> = (0..assignment.len())
        .filter(|&i| assignment[i] == usize::MAX)
        .collect();
    choose(&free, sizes[group], 0, &mut Vec::new(), &mut |picked: &[usize]| {
        for &i in picked {
            assignment[i] = group;
        }
        enumerate_assignments(sizes, group + 1, assignment, visit);
        for &i in picked {
            assignment[i] = usize::MAX;
        }
    });
}

fn choose(
    pool: &[usize],
    k: usize,
    start: usize,
    cur: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    if cur.len() == k {
        visit(cur);
        return;
    }
    for i in start..pool.len() {
        if pool.len() - i < k - cur.len() {
            break;
        }
        cur.push(pool[i]);
        choose(pool, k, i + 1, cur, visit);
        cur.pop();
    }
}

/// Parameters of `ξ ~ Binom(M, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentInputs {
    pub m: usize,
    pub p: f64,
}

impl MomentInputs {
    pub fn new(m: usize, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self { m, p })
    }
}

/// `E[min{1/ξ, 1}]` in closed form.
pub fn m1(inp: MomentInputs) -> f64 {
    let q = 1.0 - inp.p;
    let q_m = q.powi(inp.m as i32);
    let tail: f64 = (1..=inp.m)
        .map(|i| (q.powi((inp.m - i) as i32) - q_m) / i as f64)
        .sum();
    q_m + tail
}

/// `E[min{1/ξ², 1}]` in closed form.
pub fn m2(inp: MomentInputs) -> f64 {
    let q = 1.0 - inp.p;
    let q_m = q.powi(inp.m as i32);
    // suffix[i] = Σ_{j=i}^{M} 1/j
    let mut suffix = vec![0.0; inp.m + 2];
    for j in (1..=inp.m).rev() {
        suffix[j] = suffix[j + 1] + 1.0 / j as f64;
    }
    let tail: f64 = (1..=inp.m)
        .map(|i| (q.powi((inp.m - i) as i32) - q_m) / i as f64 * suffix[i])
        .sum();
    q_m + tail
}

/// Per-peer variance bound after `T` rounds when every grid cell is
/// occupied independently with probability `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceBound {
    /// `M^{T-1} σ² m1(M-1,p) m2(M-1,p)^{T-1}`.
    pub general: f64,
    /// `2σ² / (M (M/3)^{T-1})`, stated for `p >= 2/3` and `M >= 11`.
    pub simplified: Option<f64>,
}

impl VarianceBound {
    /// Whether the general bound sits below the simplified one (vacuously
    /// true outside the simplified regime).
    pub fn simplified_dominates(&self) -> bool {
        self.simplified.is_none_or(|s| self.general <= s)
    }
}

pub fn variance_bound(m: usize, p: f64, rounds: usize, sigma2: f64) -> Result<VarianceBound> {
    if m < 2 {
        return Err(invalid("variance bound needs M >= 2"));
    }
    if rounds == 0 {
        return Err(invalid("variance bound needs T >= 1"));
    }
    if sigma2 < 0.0 {
        return Err(invalid("variance must be non-negative"));
    }
    let inp = MomentInputs::new(m - 1, p)?;
    let t = rounds as i32;
    let mf = m as f64;
    let general = mf.powi(t - 1) * sigma2 * m1(inp) * m2(inp).powi(t - 1);
    let simplified = (p >= 2.0 / 3.0 && m >= 11)
        .then(|| 2.0 * sigma2 / (mf * (mf / 3.0).powi(t - 1)));
    Ok(VarianceBound {
        general,
        simplified,
    })
}

/// Abstract cost units `T (log2 N + M + max(s, M)(M-1)/M)`.
pub fn complexity_estimate(rounds: usize, n: usize, m: usize, s: usize) -> f64 {
    if rounds == 0 || n == 0 || m == 0 {
        return 0.0;
    }
    let mf = m as f64;
    rounds as f64
        * ((n as f64).log2() + mf + (s.max(m) as f64) * (mf - 1.0) / mf)
}

/// `E[min(G, cap)]` for restart-until-success all-reduce, where `G` is the
/// geometric number of attempts with per-attempt success `(1-p)^N`.
pub fn ar_restart_expected_rounds(n: usize, p: f64, cap: usize) -> f64 {
    let q = (1.0 - p).powi(n as i32);
    (0..cap).map(|k| (1.0 - q).powi(k as i32)).sum()
}

/// `Var[min(G, cap)]` for the same model as [`ar_restart_expected_rounds`].
pub fn ar_restart_rounds_variance(n: usize, p: f64, cap: usize) -> f64 {
    let q = (1.0 - p).powi(n as i32);
    let second: f64 = (0..cap)
        .map(|k| (2 * k + 1) as f64 * (1.0 - q).powi(k as i32))
        .sum();
    let mean = ar_restart_expected_rounds(n, p, cap);
    (second - mean * mean).max(0.0)
}
