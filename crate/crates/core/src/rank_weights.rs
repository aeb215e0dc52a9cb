//! Rank sets, scaling modes and the diagonal weight vector `P`.
//!
//! Training with every rank `r ∈ S` at once, `W₀ + Σ_r s_r·A_r·B_r`, collapses
//! to `W₀ + A·diag(P)·B` where `p_j = Σ_{r ∈ S, r ≥ j} s_r`. Column `j` of `A`
//! (and row `j` of `B`) takes part in every rank term that is at least `j`
//! wide, so `p_j` counts those terms weighted by their scale.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Per-rank adapter scale `s_z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingMode {
    /// `s_z = 1`
    Unit,
    /// `s_z = 1/z`
    Inverse,
    /// `s_z = 1/√z`
    InverseSqrt,
}

impl ScalingMode {
    pub const ALL: [ScalingMode; 3] = [ScalingMode::Unit, ScalingMode::Inverse, ScalingMode::InverseSqrt];

    pub fn factor(self, rank: usize) -> f64 {
        debug_assert!(rank >= 1);
        let z = rank as f64;
        match self {
            ScalingMode::Unit => 1.0,
            ScalingMode::Inverse => 1.0 / z,
            ScalingMode::InverseSqrt => 1.0 / z.sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalingMode::Unit => "unit",
            ScalingMode::Inverse => "inverse",
            ScalingMode::InverseSqrt => "inverse-sqrt",
        }
    }
}

impl fmt::Display for ScalingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScalingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(ScalingMode::Unit),
            "inverse" => Ok(ScalingMode::Inverse),
            "inverse-sqrt" => Ok(ScalingMode::InverseSqrt),
            other => Err(Error::InvalidArgument(format!(
                "unknown scaling mode '{other}' (expected unit, inverse or inverse-sqrt)"
            ))),
        }
    }
}

/// Strictly ascending set of ranks, all within `1..=max_rank`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankSet {
    ranks: Vec<usize>,
    max_rank: usize,
}

impl RankSet {
    pub fn new(ranks: Vec<usize>, max_rank: usize) -> Result<Self> {
        if max_rank == 0 {
            return Err(Error::InvalidRankSet("max rank must be at least 1".into()));
        }
        if ranks.is_empty() {
            return Err(Error::InvalidRankSet("rank set is empty".into()));
        }
        for &r in &ranks {
            if r == 0 || r > max_rank {
                return Err(Error::InvalidRankSet(format!("rank {r} is outside 1..={max_rank}")));
            }
        }
        if let Some(w) = ranks.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidRankSet(format!(
                "ranks must be strictly ascending, found {} before {}",
                w[0], w[1]
            )));
        }
        Ok(Self { ranks, max_rank })
    }

    /// `{1, 2, 4, …}` up to and including `max_rank` when it is a power of two.
    pub fn powers_of_two(max_rank: usize) -> Result<Self> {
        let ranks = std::iter::successors(Some(1usize), |r| r.checked_mul(2))
            .take_while(|&r| r <= max_rank)
            .collect();
        Self::new(ranks, max_rank)
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn max_rank(&self) -> usize {
        self.max_rank
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn largest(&self) -> usize {
        *self.ranks.last().expect("rank set is non-empty")
    }

    pub fn contains(&self, rank: usize) -> bool {
        self.ranks.binary_search(&rank).is_ok()
    }
}

/// The diagonal of `P`, one non-negative weight per adapter column/row.
#[derive(Debug, Clone, PartialEq)]
pub struct RankWeights(Vector);

impl RankWeights {
    /// Wraps arbitrary weights. Negative entries are allowed here; the
    /// operations that need a square root reject them.
    pub fn new(p: Vec<f64>) -> Self {
        Self(Vector::new(p))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_vector(&self) -> &Vector {
        &self.0
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self(self.0.scale(alpha))
    }
}

impl std::ops::Index<usize> for RankWeights {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `p_r = Σ_{r′ ∈ S, r′ ≥ r} s_{r′}` for `r = 1..=R`.
///
/// Walks `r` from `R` down to 1, accumulating `s_r` whenever `r ∈ S`; entries
/// past `max(S)` stay zero.
pub fn compute_p(set: &RankSet, mode: ScalingMode) -> RankWeights {
    let big_r = set.max_rank();
    let mut p = vec![0.0; big_r];
    let mut acc = 0.0;
    let mut next = set.len();
    for r in (1..=big_r).rev() {
        if next > 0 && set.ranks()[next - 1] == r {
            acc += mode.factor(r);
            next -= 1;
        }
        p[r - 1] = acc;
    }
    RankWeights::new(p)
}

/// Weights that turn the diagonal form back into plain LoRA: every entry is `s_R`.
pub fn lora_weights(max_rank: usize, mode: ScalingMode) -> Result<RankWeights> {
    if max_rank == 0 {
        return Err(Error::RankOutOfRange { rank: 0, max: 0 });
    }
    Ok(RankWeights::new(vec![mode.factor(max_rank); max_rank]))
}

/// Weights that select the rank-`k` slice: `s_k` on the first `k` entries, zero after.
pub fn dylora_weights(k: usize, max_rank: usize, mode: ScalingMode) -> Result<RankWeights> {
    if k == 0 || k > max_rank {
        return Err(Error::RankOutOfRange { rank: k, max: max_rank });
    }
    let s = mode.factor(k);
    Ok(RankWeights::new(
        (0..max_rank).map(|j| if j < k { s } else { 0.0 }).collect(),
    ))
}

/// Binary masks `M_r^A` (`m×R`, first `r` columns set) and `M_r^B` (`R×n`,
/// first `r` rows set).
pub fn build_masks(r: usize, m: usize, n: usize, max_rank: usize) -> Result<(Matrix, Matrix)> {
    if r == 0 || r > max_rank {
        return Err(Error::RankOutOfRange { rank: r, max: max_rank });
    }
    let mut mask_a = Matrix::zeros(m, max_rank);
    for i in 0..m {
        for j in 0..r {
            mask_a.set(i, j, 1.0);
        }
    }
    let mut mask_b = Matrix::zeros(max_rank, n);
    for i in 0..r {
        for j in 0..n {
            mask_b.set(i, j, 1.0);
        }
    }
    Ok((mask_a, mask_b))
}

/// Dense coefficient matrices with `C_A[i][j] = √p_j` and `C_B[j][i] = √p_j`,
/// so that `(A ⊙ C_A)(B ⊙ C_B) = A·diag(p)·B`.
pub fn build_c_matrices(p: &RankWeights, m: usize, n: usize) -> Result<(Matrix, Matrix)> {
    if let Some((index, &value)) = p.as_slice().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::NegativeWeight { index, value });
    }
    let roots: Vec<f64> = p.as_slice().iter().map(|v| v.sqrt()).collect();
    let big_r = roots.len();
    let mut c_a = Matrix::zeros(m, big_r);
    for i in 0..m {
        for (j, &s) in roots.iter().enumerate() {
            c_a.set(i, j, s);
        }
    }
    let mut c_b = Matrix::zeros(big_r, n);
    for (j, &s) in roots.iter().enumerate() {
        for i in 0..n {
            c_b.set(j, i, s);
        }
    }
    Ok((c_a, c_b))
}
