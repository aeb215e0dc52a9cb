//! Multi-rank objective and its relation to both training schemes.
//!
//! With `f(Δ) = ℓ(W₀ + Δ)` and per-rank perturbations `Δ_r = s_r·A_r·B_r`,
//! the multi-rank objective is `Σ_r λ_r f(Δ_r)`. Sampling one rank per step
//! from `λ` (the DyLoRA scheme) gives an unbiased estimate of its gradient.
//! Replacing it by `f(Σ_r λ_r Δ_r)` gives the diagonal-weighted form with
//! `P = Σ_r λ_r s_r P_r`; for an `L`-smooth `f` the two differ by at most
//! `L·Σ_r λ_r ‖Δ_r‖²_F`.

use crate::adapters::{grad_adapters, AdapterGradients, AdapterPair};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};
use crate::rank_weights::{dylora_weights, RankSet, RankWeights, ScalingMode};

/// Mixture weights `λ_r` over a set of ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct RankMixture {
    weights: Vec<(usize, f64)>,
}

impl RankMixture {
    /// Ranks must be strictly ascending and at least 1; weights non-negative
    /// and summing to 1 within `1e-12`.
    pub fn new(weights: Vec<(usize, f64)>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("mixture is empty".into()));
        }
        if weights.iter().any(|&(r, _)| r == 0) {
            return Err(Error::InvalidArgument("mixture ranks must be at least 1".into()));
        }
        if weights.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidArgument(
                "mixture ranks must be strictly ascending".into(),
            ));
        }
        if let Some(&(r, l)) = weights.iter().find(|(_, l)| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "weight {l} for rank {r} is not a non-negative number"
            )));
        }
        let total: f64 = weights.iter().map(|w| w.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { weights })
    }

    /// `λ_r = 1/|S|` for every `r ∈ S`.
    pub fn uniform(set: &RankSet) -> Self {
        let l = 1.0 / set.len() as f64;
        Self {
            weights: set.ranks().iter().map(|&r| (r, l)).collect(),
        }
    }

    /// All mass on one rank.
    pub fn single(rank: usize) -> Result<Self> {
        Self::new(vec![(rank, 1.0)])
    }

    pub fn weights(&self) -> &[(usize, f64)] {
        &self.weights
    }

    pub fn largest_rank(&self) -> usize {
        self.weights.last().map_or(0, |w| w.0)
    }

    /// Draws a rank with probability `λ_r`.
    pub fn sample(&self, rng: &mut SeededRng) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for &(r, l) in &self.weights {
            acc += l;
            if u < acc {
                return r;
            }
        }
        // rounding left u at or past the accumulated total; fall back to the
        // last rank carrying mass
        self.weights
            .iter()
            .rev()
            .find(|w| w.1 > 0.0)
            .map_or(self.largest_rank(), |w| w.0)
    }
}

/// A loss on the weight perturbation `Δ`.
pub trait PerturbationLoss {
    /// Shape `(m, n)` of the perturbations this loss accepts.
    fn shape(&self) -> (usize, usize);

    fn value(&self, delta: &Matrix) -> f64;

    fn gradient(&self, delta: &Matrix) -> Matrix;

    /// Lipschitz constant of the gradient, when known.
    fn smoothness(&self) -> Option<f64>;
}

/// `f(Δ) = ½‖Δ − T‖²_F`, which is 1-smooth.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    pub target: Matrix,
}

impl PerturbationLoss for QuadraticLoss {
    fn shape(&self) -> (usize, usize) {
        self.target.shape()
    }

    fn value(&self, delta: &Matrix) -> f64 {
        0.5 * delta.sub(&self.target).expect("shape checked by caller").frob_norm_sq()
    }

    fn gradient(&self, delta: &Matrix) -> Matrix {
        delta.sub(&self.target).expect("shape checked by caller")
    }

    fn smoothness(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// `f(Δ) = ⟨G, Δ⟩ + c`, whose gradient is constant (smoothness 0).
#[derive(Debug, Clone)]
pub struct LinearLoss {
    pub slope: Matrix,
    pub offset: f64,
}

impl PerturbationLoss for LinearLoss {
    fn shape(&self) -> (usize, usize) {
        self.slope.shape()
    }

    fn value(&self, delta: &Matrix) -> f64 {
        self.slope.dot(delta).expect("shape checked by caller") + self.offset
    }

    fn gradient(&self, _delta: &Matrix) -> Matrix {
        self.slope.clone()
    }

    fn smoothness(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Data loss of one linear layer, `f(Δ) = ½‖x(W₀ + Δ) − T‖²_F`.
///
/// Its gradient `xᵀ(x(W₀ + Δ) − T)` is Lipschitz with constant
/// `‖xᵀx‖₂ ≤ ‖x‖²_F`; the latter is reported as the smoothness.
#[derive(Debug, Clone)]
pub struct RegressionLoss {
    pub x: Matrix,
    pub w0: Matrix,
    pub target: Matrix,
}

impl RegressionLoss {
    fn residual(&self, delta: &Matrix) -> Matrix {
        let w = self.w0.add(delta).expect("shape checked by caller");
        self.x
            .matmul(&w)
            .expect("shape checked by caller")
            .sub(&self.target)
            .expect("shape checked by caller")
    }
}

impl PerturbationLoss for RegressionLoss {
    fn shape(&self) -> (usize, usize) {
        self.w0.shape()
    }

    fn value(&self, delta: &Matrix) -> f64 {
        0.5 * self.residual(delta).frob_norm_sq()
    }

    fn gradient(&self, delta: &Matrix) -> Matrix {
        self.x
            .transpose()
            .matmul(&self.residual(delta))
            .expect("shape checked by caller")
    }

    fn smoothness(&self) -> Option<f64> {
        Some(self.x.frob_norm_sq())
    }
}

/// Loss with no declared smoothness constant, e.g. `Σ cosh(Δ_ij − T_ij)`.
#[derive(Debug, Clone)]
pub struct CoshLoss {
    pub target: Matrix,
}

impl PerturbationLoss for CoshLoss {
    fn shape(&self) -> (usize, usize) {
        self.target.shape()
    }

    fn value(&self, delta: &Matrix) -> f64 {
        delta
            .sub(&self.target)
            .expect("shape checked by caller")
            .as_slice()
            .iter()
            .map(|v| v.cosh())
            .sum()
    }

    fn gradient(&self, delta: &Matrix) -> Matrix {
        delta.sub(&self.target).expect("shape checked by caller").map(f64::sinh)
    }

    fn smoothness(&self) -> Option<f64> {
        None
    }
}

fn check_mixture(ad: &AdapterPair, mix: &RankMixture, loss: &dyn PerturbationLoss) -> Result<()> {
    if loss.shape() != (ad.in_dim(), ad.out_dim()) {
        return Err(Error::shapes(
            "perturbation loss",
            loss.shape(),
            (ad.in_dim(), ad.out_dim()),
        ));
    }
    if mix.largest_rank() > ad.max_rank() {
        return Err(Error::RankOutOfRange {
            rank: mix.largest_rank(),
            max: ad.max_rank(),
        });
    }
    Ok(())
}

/// `Δ_r = s_r·A_r·B_r`.
pub fn rank_perturbation(ad: &AdapterPair, rank: usize, mode: ScalingMode) -> Result<Matrix> {
    Ok(ad.slice_product(rank)?.scale(mode.factor(rank)))
}

/// `Σ_r λ_r f(s_r·A_r·B_r)`.
pub fn multi_rank_loss(
    ad: &AdapterPair,
    mix: &RankMixture,
    mode: ScalingMode,
    loss: &dyn PerturbationLoss,
) -> Result<f64> {
    check_mixture(ad, mix, loss)?;
    let mut total = 0.0;
    for &(r, l) in mix.weights() {
        let delta = rank_perturbation(ad, r, mode)?;
        total += l * loss.value(&delta);
    }
    Ok(total)
}

/// Gradient of the single-rank loss `f(s_r·A_r·B_r)`.
pub fn single_rank_gradient(
    ad: &AdapterPair,
    rank: usize,
    mode: ScalingMode,
    loss: &dyn PerturbationLoss,
) -> Result<AdapterGradients> {
    if loss.shape() != (ad.in_dim(), ad.out_dim()) {
        return Err(Error::shapes(
            "perturbation loss",
            loss.shape(),
            (ad.in_dim(), ad.out_dim()),
        ));
    }
    let delta = rank_perturbation(ad, rank, mode)?;
    let upstream = loss.gradient(&delta);
    grad_adapters(&upstream, ad, &dylora_weights(rank, ad.max_rank(), mode)?)
}

/// Expected single-rank gradient under `λ`, by enumeration over the mixture.
/// Equals the gradient of [`multi_rank_loss`].
pub fn dylora_expected_gradient(
    ad: &AdapterPair,
    mix: &RankMixture,
    mode: ScalingMode,
    loss: &dyn PerturbationLoss,
) -> Result<AdapterGradients> {
    check_mixture(ad, mix, loss)?;
    let mut acc = AdapterGradients::zeros_like(ad);
    for &(r, l) in mix.weights() {
        acc.add_scaled_assign(l, &single_rank_gradient(ad, r, mode, loss)?)?;
    }
    Ok(acc)
}

/// Average of `samples` single-rank gradients with ranks drawn from `λ`.
pub fn monte_carlo_gradient(
    ad: &AdapterPair,
    mix: &RankMixture,
    mode: ScalingMode,
    loss: &dyn PerturbationLoss,
    samples: usize,
    seed: u64,
) -> Result<AdapterGradients> {
    check_mixture(ad, mix, loss)?;
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut acc = AdapterGradients::zeros_like(ad);
    for _ in 0..samples {
        let r = mix.sample(&mut rng);
        acc.add_scaled_assign(1.0, &single_rank_gradient(ad, r, mode, loss)?)?;
    }
    let inv = 1.0 / samples as f64;
    Ok(AdapterGradients {
        grad_a: acc.grad_a.scale(inv),
        grad_b: acc.grad_b.scale(inv),
    })
}

/// Gap between the multi-rank objective and its first-order surrogate, with
/// the smoothness bound on it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateGap {
    pub gap: f64,
    pub bound: f64,
}

impl SurrogateGap {
    pub fn holds(&self) -> bool {
        self.gap <= self.bound
    }
}

/// `gap = |Σ λ_r f(Δ_r) − f(Σ λ_r Δ_r)|`, `bound = L·Σ λ_r ‖Δ_r‖²_F`.
pub fn surrogate_gap(
    ad: &AdapterPair,
    mix: &RankMixture,
    mode: ScalingMode,
    loss: &dyn PerturbationLoss,
) -> Result<SurrogateGap> {
    let smoothness = loss
        .smoothness()
        .ok_or_else(|| Error::InvalidArgument("loss declares no smoothness constant; bound undefined".into()))?;
    check_mixture(ad, mix, loss)?;
    let mut mixed = Matrix::zeros(ad.in_dim(), ad.out_dim());
    let mut separate = 0.0;
    let mut norm_sq = 0.0;
    for &(r, l) in mix.weights() {
        let delta = rank_perturbation(ad, r, mode)?;
        separate += l * loss.value(&delta);
        norm_sq += l * delta.frob_norm_sq();
        mixed.add_scaled_assign(l, &delta)?;
    }
    let gap = (separate - loss.value(&mixed)).abs();
    Ok(SurrogateGap {
        gap,
        bound: smoothness * norm_sq,
    })
}

/// Diagonal weights of the surrogate: `p_j = Σ_{r ≥ j} λ_r s_r`.
pub fn matryoshka_surrogate_p(mix: &RankMixture, mode: ScalingMode, max_rank: usize) -> Result<RankWeights> {
    if mix.largest_rank() > max_rank {
        return Err(Error::RankOutOfRange {
            rank: mix.largest_rank(),
            max: max_rank,
        });
    }
    let mut p = vec![0.0; max_rank];
    for &(r, l) in mix.weights().iter().rev() {
        let w = l * mode.factor(r);
        for pj in &mut p[..r] {
            *pj += w;
        }
    }
    Ok(RankWeights::new(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::finite_diff_grad;
    use crate::linalg::rand_matrix;
    use crate::rank_weights::{compute_p, lora_weights};

    fn small_pair(seed: u64, m: usize, n: usize, big_r: usize) -> AdapterPair {
        AdapterPair::new(rand_matrix(seed, m, big_r, 1.0), rand_matrix(seed + 1, big_r, n, 1.0)).unwrap()
    }

    #[test]
    fn mixture_validation() {
        assert!(RankMixture::new(vec![(1, 0.5), (2, 0.4)]).is_err());
        assert!(RankMixture::new(vec![(1, 1.5), (2, -0.5)]).is_err());
        assert!(RankMixture::new(vec![(2, 0.5), (1, 0.5)]).is_err());
        assert!(RankMixture::new(vec![]).is_err());
        let set = RankSet::new(vec![1, 2, 4], 4).unwrap();
        let u = RankMixture::uniform(&set);
        let total: f64 = u.weights().iter().map(|w| w.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multi_rank_loss_examples() {
        let ad = small_pair(3, 2, 2, 2);
        let target = rand_matrix(9, 2, 2, 1.0);
        let q = QuadraticLoss { target: target.clone() };
        let full = multi_rank_loss(&ad, &RankMixture::single(2).unwrap(), ScalingMode::Inverse, &q).unwrap();
        let direct = q.value(&ad.a().matmul(ad.b()).unwrap().scale(0.5));
        assert_eq!(full, direct);

        let zero = LinearLoss {
            slope: Matrix::zeros(2, 2),
            offset: 0.0,
        };
        let mix = RankMixture::uniform(&RankSet::new(vec![1, 2], 2).unwrap());
        assert_eq!(multi_rank_loss(&ad, &mix, ScalingMode::Unit, &zero).unwrap(), 0.0);

        // hand expansion with A = [[1,2],[3,4]], B = [[1,0],[0,1]], T = 0:
        // Δ₁ = (1,3)ᵀ(1,0) = [[1,0],[3,0]] → ‖Δ₁‖² = 10
        // Δ₂ = A → ‖Δ₂‖² = 30; loss = ½·½·10 + ½·½·30 = 10
        let ad = AdapterPair::new(
            Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap(),
            Matrix::identity(2),
        )
        .unwrap();
        let q = QuadraticLoss {
            target: Matrix::zeros(2, 2),
        };
        assert_eq!(multi_rank_loss(&ad, &mix, ScalingMode::Unit, &q).unwrap(), 10.0);
        assert!(multi_rank_loss(&ad, &RankMixture::single(3).unwrap(), ScalingMode::Unit, &q).is_err());
    }

    #[test]
    fn expected_gradient_examples() {
        let ad = small_pair(21, 3, 4, 4);
        let q = QuadraticLoss {
            target: rand_matrix(5, 3, 4, 1.0),
        };
        let single = dylora_expected_gradient(&ad, &RankMixture::single(2).unwrap(), ScalingMode::Unit, &q).unwrap();
        assert_eq!(single, single_rank_gradient(&ad, 2, ScalingMode::Unit, &q).unwrap());

        let zero = LinearLoss {
            slope: Matrix::zeros(3, 4),
            offset: 1.0,
        };
        let mix = RankMixture::uniform(&RankSet::new(vec![1, 2, 4], 4).unwrap());
        assert_eq!(
            dylora_expected_gradient(&ad, &mix, ScalingMode::Unit, &zero).unwrap(),
            AdapterGradients::zeros_like(&ad)
        );

        for mode in ScalingMode::ALL {
            let g = dylora_expected_gradient(&ad, &mix, mode, &q).unwrap();
            let fd = finite_diff_grad(|a| multi_rank_loss(a, &mix, mode, &q).unwrap(), &ad, 1e-6);
            assert!(g.rel_err(&fd).unwrap() <= 1e-4);
        }
    }

    #[test]
    fn monte_carlo_converges() {
        let ad = small_pair(2, 2, 3, 3);
        let q = QuadraticLoss {
            target: rand_matrix(8, 2, 3, 1.0),
        };
        let mix = RankMixture::uniform(&RankSet::new(vec![1, 2, 3], 3).unwrap());
        let exact = dylora_expected_gradient(&ad, &mix, ScalingMode::Unit, &q).unwrap();
        let mc = monte_carlo_gradient(&ad, &mix, ScalingMode::Unit, &q, 20_000, 11).unwrap();
        assert!(mc.rel_err(&exact).unwrap() <= 0.05);
    }

    #[test]
    fn surrogate_examples() {
        let ad = small_pair(4, 2, 2, 2);
        let mix = RankMixture::uniform(&RankSet::new(vec![1, 2], 2).unwrap());
        let lin = LinearLoss {
            slope: rand_matrix(1, 2, 2, 1.0),
            offset: 0.3,
        };
        let g = surrogate_gap(&ad, &mix, ScalingMode::Unit, &lin).unwrap();
        // zero up to rounding; with L = 0 the bound itself is exactly zero
        assert!(g.gap < 1e-12 && g.bound == 0.0, "{g:?}");

        let q = QuadraticLoss {
            target: rand_matrix(6, 2, 2, 1.0),
        };
        let g = surrogate_gap(&ad, &mix, ScalingMode::Unit, &q).unwrap();
        assert!(g.holds(), "{g:?}");

        // zero second row of B makes Δ₁ = Δ₂
        let b = Matrix::from_rows(&[[0.7, -1.1], [0.0, 0.0]]).unwrap();
        let ad_eq = AdapterPair::new(ad.a().clone(), b).unwrap();
        let g = surrogate_gap(
            &ad_eq,
            &mix,
            ScalingMode::Unit,
            &CoshLoss {
                target: Matrix::zeros(2, 2),
            },
        );
        assert!(g.is_err());
        let g = surrogate_gap(&ad_eq, &mix, ScalingMode::Unit, &q).unwrap();
        assert_eq!(g.gap, 0.0);
    }

    #[test]
    fn surrogate_p_examples() {
        let set = RankSet::new(vec![1, 2, 4, 8], 8).unwrap();
        let p = matryoshka_surrogate_p(&RankMixture::uniform(&set), ScalingMode::Unit, 8).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 0.75, 0.5, 0.5, 0.25, 0.25, 0.25, 0.25]);
        assert_eq!(p, compute_p(&set, ScalingMode::Unit).scale(0.25));

        let p = matryoshka_surrogate_p(&RankMixture::single(8).unwrap(), ScalingMode::Inverse, 8).unwrap();
        assert_eq!(p, lora_weights(8, ScalingMode::Inverse).unwrap());
        let mix = RankMixture::new(vec![(3, 1.0), (5, 0.0)]).unwrap();
        let p = matryoshka_surrogate_p(&mix, ScalingMode::Inverse, 6).unwrap();
        assert_eq!(p, dylora_weights(3, 6, ScalingMode::Inverse).unwrap());
    }

    #[test]
    fn regression_loss_agrees_with_forward_diag() {
        use crate::adapters::{forward_diag, BaseLayer};
        let ad = small_pair(80, 4, 3, 4);
        let x = rand_matrix(81, 6, 4, 1.0);
        let w0 = rand_matrix(82, 4, 3, 1.0);
        let target = rand_matrix(83, 6, 3, 1.0);
        let f = RegressionLoss {
            x: x.clone(),
            w0: w0.clone(),
            target: target.clone(),
        };
        let mix = RankMixture::uniform(&RankSet::new(vec![1, 3, 4], 4).unwrap());
        let p = matryoshka_surrogate_p(&mix, ScalingMode::InverseSqrt, 4).unwrap();
        let surrogate = f.value(&ad.a().scale_cols(p.as_vector()).unwrap().matmul(ad.b()).unwrap());
        let y = forward_diag(&x, &BaseLayer::new(w0), &ad, &p).unwrap();
        let direct = 0.5 * y.sub(&target).unwrap().frob_norm_sq();
        assert!((surrogate - direct).abs() <= 1e-12 * direct.max(1.0));
        let g = surrogate_gap(&ad, &mix, ScalingMode::InverseSqrt, &f).unwrap();
        assert!(g.holds(), "{g:?}");
    }

    #[test]
    fn surrogate_loss_matches_diag_forward_loss() {
        let ad = small_pair(70, 4, 3, 4);
        let set = RankSet::new(vec![1, 2, 4], 4).unwrap();
        let mix = RankMixture::uniform(&set);
        let q = QuadraticLoss {
            target: rand_matrix(71, 4, 3, 1.0),
        };
        for mode in ScalingMode::ALL {
            let p = matryoshka_surrogate_p(&mix, mode, 4).unwrap();
            let via_p = q.value(&ad.a().scale_cols(p.as_vector()).unwrap().matmul(ad.b()).unwrap());
            let mut mixed = Matrix::zeros(4, 3);
            for &(r, l) in mix.weights() {
                mixed
                    .add_scaled_assign(l, &rank_perturbation(&ad, r, mode).unwrap())
                    .unwrap();
            }
            assert!((via_p - q.value(&mixed)).abs() <= 1e-12 * q.value(&mixed).max(1.0));
        }
    }
}
