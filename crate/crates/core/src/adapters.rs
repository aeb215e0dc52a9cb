//! Low-rank adapter layer: every forward formulation, weight merging for
//! rank-`k` deployment and the analytic gradients.
//!
//! All forward passes compute `Y = x·(W₀ + ΔW)` with `x` of shape `d×m`,
//! `W₀` of shape `m×n` and adapters `A` (`m×R`), `B` (`R×n`). They differ only
//! in how `ΔW` is formed:
//!
//! | function                 | `ΔW`                                   |
//! |--------------------------|----------------------------------------|
//! | [`forward_lora`]         | `s_R·A·B`                              |
//! | [`forward_dylora`]       | `s_k·A_k·B_k`                          |
//! | [`forward_matryoshka_sum`] | `Σ_{r∈S} s_r·A_r·B_r`                |
//! | [`forward_masked`]       | `Σ_{r∈S} s_r·(A⊙M_r^A)(B⊙M_r^B)`       |
//! | [`forward_cweighted`]    | `(A⊙C_A)(B⊙C_B)`                       |
//! | [`forward_diag`]         | `(A·diag(P))·B`                        |

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};
use crate::rank_weights::{build_c_matrices, build_masks, RankSet, RankWeights, ScalingMode};

/// Trainable factors `A` (`m×R`) and `B` (`R×n`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    a: Matrix,
    b: Matrix,
}

impl AdapterPair {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::shapes("adapter pair", a.shape(), b.shape()));
        }
        Ok(Self { a, b })
    }

    /// Standard initialization: `A ~ N(0, 1/m)`, `B = 0`, so `A·B = 0`.
    pub fn init(rng: &mut SeededRng, m: usize, n: usize, max_rank: usize) -> Self {
        let a = rng.gaussian_matrix(m, max_rank, 1.0 / (m as f64).sqrt());
        Self {
            a,
            b: Matrix::zeros(max_rank, n),
        }
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn max_rank(&self) -> usize {
        self.a.cols()
    }

    pub fn in_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.cols()
    }

    /// Entry slices of `A` and `B`, for optimizers and finite differences.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.a.as_mut_slice(), self.b.as_mut_slice())
    }

    pub fn into_parts(self) -> (Matrix, Matrix) {
        (self.a, self.b)
    }

    /// `A_k·B_k`.
    pub fn slice_product(&self, k: usize) -> Result<Matrix> {
        self.a.slice_cols(k)?.matmul(&self.b.slice_rows(k)?)
    }
}

/// Frozen pretrained weight `W₀` (`m×n`).
#[derive(Debug, Clone, PartialEq)]
pub struct BaseLayer {
    w0: Matrix,
}

impl BaseLayer {
    pub fn new(w0: Matrix) -> Self {
        Self { w0 }
    }

    pub fn weight(&self) -> &Matrix {
        &self.w0
    }
}

/// Gradients with the same shapes as the adapter factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

impl AdapterGradients {
    pub fn zeros_like(ad: &AdapterPair) -> Self {
        Self {
            grad_a: Matrix::zeros(ad.a.rows(), ad.a.cols()),
            grad_b: Matrix::zeros(ad.b.rows(), ad.b.cols()),
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled_assign(&mut self, alpha: f64, other: &AdapterGradients) -> Result<()> {
        self.grad_a.add_scaled_assign(alpha, &other.grad_a)?;
        self.grad_b.add_scaled_assign(alpha, &other.grad_b)
    }

    pub fn frob_norm(&self) -> f64 {
        (self.grad_a.frob_norm_sq() + self.grad_b.frob_norm_sq()).sqrt()
    }

    /// Relative Frobenius error over both factors jointly.
    pub fn rel_err(&self, reference: &AdapterGradients) -> Result<f64> {
        let diff =
            self.grad_a.sub(&reference.grad_a)?.frob_norm_sq() + self.grad_b.sub(&reference.grad_b)?.frob_norm_sq();
        let denom = reference.frob_norm();
        Ok(if denom > 0.0 { diff.sqrt() / denom } else { diff.sqrt() })
    }
}

fn check_layer(layer: &BaseLayer, ad: &AdapterPair) -> Result<()> {
    let w = layer.weight();
    if w.rows() != ad.in_dim() || w.cols() != ad.out_dim() {
        return Err(Error::shapes(
            "base layer vs adapters",
            w.shape(),
            (ad.in_dim(), ad.out_dim()),
        ));
    }
    Ok(())
}

fn check_rank_set(set: &RankSet, ad: &AdapterPair) -> Result<()> {
    if set.largest() > ad.max_rank() {
        return Err(Error::RankOutOfRange {
            rank: set.largest(),
            max: ad.max_rank(),
        });
    }
    Ok(())
}

fn apply(x: &Matrix, layer: &BaseLayer, delta_w: &Matrix) -> Result<Matrix> {
    x.matmul(&layer.weight().add(delta_w)?)
}

/// `Y = x(W₀ + s_R·A·B)`.
pub fn forward_lora(x: &Matrix, layer: &BaseLayer, ad: &AdapterPair, mode: ScalingMode) -> Result<Matrix> {
    check_layer(layer, ad)?;
    let delta = ad.a.matmul(&ad.b)?.scale(mode.factor(ad.max_rank()));
    apply(x, layer, &delta)
}

/// `Y = x(W₀ + s_k·A_k·B_k)`.
pub fn forward_dylora(x: &Matrix, layer: &BaseLayer, ad: &AdapterPair, k: usize, mode: ScalingMode) -> Result<Matrix> {
    check_layer(layer, ad)?;
    let delta = ad.slice_product(k)?.scale(mode.factor(k));
    apply(x, layer, &delta)
}

/// Reference form: literal loop over `r ∈ S` accumulating `s_r·A_r·B_r`.
pub fn forward_matryoshka_sum(
    x: &Matrix,
    layer: &BaseLayer,
    ad: &AdapterPair,
    set: &RankSet,
    mode: ScalingMode,
) -> Result<Matrix> {
    check_layer(layer, ad)?;
    check_rank_set(set, ad)?;
    let mut delta = Matrix::zeros(ad.in_dim(), ad.out_dim());
    for &r in set.ranks() {
        delta.add_scaled_assign(mode.factor(r), &ad.slice_product(r)?)?;
    }
    apply(x, layer, &delta)
}

/// Full-size factors under binary masks: `Σ_r s_r·(A⊙M_r^A)(B⊙M_r^B)`.
pub fn forward_masked(
    x: &Matrix,
    layer: &BaseLayer,
    ad: &AdapterPair,
    set: &RankSet,
    mode: ScalingMode,
) -> Result<Matrix> {
    check_layer(layer, ad)?;
    check_rank_set(set, ad)?;
    let (m, n, big_r) = (ad.in_dim(), ad.out_dim(), ad.max_rank());
    let mut delta = Matrix::zeros(m, n);
    for &r in set.ranks() {
        let (mask_a, mask_b) = build_masks(r, m, n, big_r)?;
        let term = ad.a.hadamard(&mask_a)?.matmul(&ad.b.hadamard(&mask_b)?)?;
        delta.add_scaled_assign(mode.factor(r), &term)?;
    }
    apply(x, layer, &delta)
}

/// `(A⊙C_A)(B⊙C_B)` with `C` built from `√p`.
pub fn forward_cweighted(x: &Matrix, layer: &BaseLayer, ad: &AdapterPair, p: &RankWeights) -> Result<Matrix> {
    check_layer(layer, ad)?;
    if p.len() != ad.max_rank() {
        return Err(Error::shapes("forward_cweighted", (p.len(), 1), ad.a.shape()));
    }
    let (c_a, c_b) = build_c_matrices(p, ad.in_dim(), ad.out_dim())?;
    let delta = ad.a.hadamard(&c_a)?.matmul(&ad.b.hadamard(&c_b)?)?;
    apply(x, layer, &delta)
}

/// Production forward pass `Y = x(W₀ + (A*P)·B)`.
pub fn forward_diag(x: &Matrix, layer: &BaseLayer, ad: &AdapterPair, p: &RankWeights) -> Result<Matrix> {
    check_layer(layer, ad)?;
    let delta = ad.a.scale_cols(p.as_vector())?.matmul(&ad.b)?;
    apply(x, layer, &delta)
}

/// Dense deployment weight at rank `k`: `W₀ + s_k·A_k·B_k`.
pub fn merge_weights(layer: &BaseLayer, ad: &AdapterPair, k: usize, mode: ScalingMode) -> Result<Matrix> {
    check_layer(layer, ad)?;
    layer.weight().add(&ad.slice_product(k)?.scale(mode.factor(k)))
}

/// Analytic gradients given the upstream gradient `Δ = ∂loss/∂W` (`m×n`):
/// `∇_A = Δ·Bᵀ·diag(P)` and `∇_B = diag(P)·Aᵀ·Δ`.
pub fn grad_adapters(delta: &Matrix, ad: &AdapterPair, p: &RankWeights) -> Result<AdapterGradients> {
    if delta.shape() != (ad.in_dim(), ad.out_dim()) {
        return Err(Error::shapes(
            "grad_adapters",
            delta.shape(),
            (ad.in_dim(), ad.out_dim()),
        ));
    }
    if p.len() != ad.max_rank() {
        return Err(Error::shapes("grad_adapters", (p.len(), 1), ad.a.shape()));
    }
    let grad_a = delta.matmul(&ad.b.transpose())?.scale_cols(p.as_vector())?;
    let grad_b = ad.a.transpose().matmul(delta)?.scale_rows(p.as_vector())?;
    Ok(AdapterGradients { grad_a, grad_b })
}

/// Central-difference gradient of `loss` at `ad`, one coordinate at a time.
pub fn finite_diff_grad<F>(loss: F, ad: &AdapterPair, epsilon: f64) -> AdapterGradients
where
    F: Fn(&AdapterPair) -> f64,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut probe = ad.clone();
    let mut grads = AdapterGradients::zeros_like(ad);

    let n_a = ad.a.as_slice().len();
    for idx in 0..n_a {
        let orig = ad.a.as_slice()[idx];
        probe.params_mut().0[idx] = orig + epsilon;
        let up = loss(&probe);
        probe.params_mut().0[idx] = orig - epsilon;
        let down = loss(&probe);
        probe.params_mut().0[idx] = orig;
        grads.grad_a.as_mut_slice()[idx] = (up - down) / (2.0 * epsilon);
    }
    let n_b = ad.b.as_slice().len();
    for idx in 0..n_b {
        let orig = ad.b.as_slice()[idx];
        probe.params_mut().1[idx] = orig + epsilon;
        let up = loss(&probe);
        probe.params_mut().1[idx] = orig - epsilon;
        let down = loss(&probe);
        probe.params_mut().1[idx] = orig;
        grads.grad_b.as_mut_slice()[idx] = (up - down) / (2.0 * epsilon);
    }
    grads
}

/// `½‖Y − T‖²_F` and its upstream weight gradient `Δ = xᵀ(Y − T)` for a
/// forward output `Y = x·W`.
pub fn squared_error_with_delta(x: &Matrix, y: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let resid = y.sub(target)?;
    let loss = 0.5 * resid.frob_norm_sq();
    let delta = x.transpose().matmul(&resid)?;
    Ok((loss, delta))
}
