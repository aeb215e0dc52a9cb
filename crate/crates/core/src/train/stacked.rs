use crate::adapters::{grad_adapters, AdapterGradients, AdapterPair, BaseLayer};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::rank_weights::RankWeights;

/// Two adapted layers with a `tanh` between them:
/// `Y = tanh(x·W₁)·W₂` where `Wᵢ = W₀ᵢ + Aᵢ·diag(P)·Bᵢ`.
///
/// Exists to check that the upstream gradients `Δᵢ` handed to
/// [`grad_adapters`] are assembled correctly by the chain rule.
#[derive(Debug, Clone)]
pub struct StackedModel {
    pub first: (BaseLayer, AdapterPair),
    pub second: (BaseLayer, AdapterPair),
    pub p: RankWeights,
}

fn effective(layer: &BaseLayer, ad: &AdapterPair, p: &RankWeights) -> Result<Matrix> {
    layer.weight().add(&ad.a().scale_cols(p.as_vector())?.matmul(ad.b())?)
}

impl StackedModel {
    /// `½‖Y − T‖²_F` with the given adapters substituted for the model's own.
    pub fn loss_with(&self, x: &Matrix, target: &Matrix, first: &AdapterPair, second: &AdapterPair) -> Result<f64> {
        let hidden = x.matmul(&effective(&self.first.0, first, &self.p)?)?.map(f64::tanh);
        let y = hidden.matmul(&effective(&self.second.0, second, &self.p)?)?;
        Ok(0.5 * y.sub(target)?.frob_norm_sq())
    }

    pub fn loss(&self, x: &Matrix, target: &Matrix) -> Result<f64> {
        self.loss_with(x, target, &self.first.1, &self.second.1)
    }

    /// Loss and analytic adapter gradients for both layers.
    pub fn loss_and_grads(&self, x: &Matrix, target: &Matrix) -> Result<(f64, AdapterGradients, AdapterGradients)> {
        let w1 = effective(&self.first.0, &self.first.1, &self.p)?;
        let w2 = effective(&self.second.0, &self.second.1, &self.p)?;
        let hidden = x.matmul(&w1)?.map(f64::tanh);
        let resid = hidden.matmul(&w2)?.sub(target)?;
        let loss = 0.5 * resid.frob_norm_sq();

        let delta2 = hidden.transpose().matmul(&resid)?;
        let d_hidden = resid.matmul(&w2.transpose())?;
        let d_pre = d_hidden.hadamard(&hidden.map(|h| 1.0 - h * h))?;
        let delta1 = x.transpose().matmul(&d_pre)?;

        let g1 = grad_adapters(&delta1, &self.first.1, &self.p)?;
        let g2 = grad_adapters(&delta2, &self.second.1, &self.p)?;
        Ok((loss, g1, g2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::finite_diff_grad;
    use crate::linalg::rand_matrix;
    use crate::rank_weights::{compute_p, RankSet, ScalingMode};

    #[test]
    fn chain_rule_matches_finite_differences() {
        let (d, m, h, n, r) = (5, 4, 6, 3, 4);
        let p = compute_p(&RankSet::new(vec![1, 2, 4], r).unwrap(), ScalingMode::InverseSqrt);
        let model = StackedModel {
            first: (
                BaseLayer::new(rand_matrix(1, m, h, 0.5)),
                AdapterPair::new(rand_matrix(2, m, r, 0.3), rand_matrix(3, r, h, 0.3)).unwrap(),
            ),
            second: (
                BaseLayer::new(rand_matrix(4, h, n, 0.5)),
                AdapterPair::new(rand_matrix(5, h, r, 0.3), rand_matrix(6, r, n, 0.3)).unwrap(),
            ),
            p,
        };
        let x = rand_matrix(7, d, m, 1.0);
        let t = rand_matrix(8, d, n, 1.0);
        let (loss, g1, g2) = model.loss_and_grads(&x, &t).unwrap();
        assert_eq!(loss, model.loss(&x, &t).unwrap());

        let fd1 = finite_diff_grad(
            |ad| model.loss_with(&x, &t, ad, &model.second.1).unwrap(),
            &model.first.1,
            1e-6,
        );
        let fd2 = finite_diff_grad(
            |ad| model.loss_with(&x, &t, &model.first.1, ad).unwrap(),
            &model.second.1,
            1e-6,
        );
        assert!(g1.rel_err(&fd1).unwrap() < 1e-6, "{}", g1.rel_err(&fd1).unwrap());
        assert!(g2.rel_err(&fd2).unwrap() < 1e-6, "{}", g2.rel_err(&fd2).unwrap());
    }
}
