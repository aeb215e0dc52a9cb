use crate::adapters::{AdapterGradients, AdapterPair};
use crate::train::TrainConfig;

/// AdamW hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// First and second moment estimates for both adapter factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    m_a: Vec<f64>,
    v_a: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
}

impl AdamWState {
    pub fn new(params: &AdapterPair) -> Self {
        let na = params.a().as_slice().len();
        let nb = params.b().as_slice().len();
        Self {
            m_a: vec![0.0; na],
            v_a: vec![0.0; na],
            m_b: vec![0.0; nb],
            v_b: vec![0.0; nb],
        }
    }
}

fn update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    h: &AdamW,
    step: usize,
    active: impl Fn(usize) -> bool,
) {
    let bc1 = 1.0 - h.beta1.powi(step as i32);
    let bc2 = 1.0 - h.beta2.powi(step as i32);
    for i in 0..theta.len() {
        if !active(i) {
            continue;
        }
        let g = grad[i];
        theta[i] -= h.learning_rate * h.weight_decay * theta[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.eps);
    }
}

/// One decoupled-weight-decay Adam update. `step` counts from 1 and drives
/// the bias correction.
pub fn adamw_step(
    params: &mut AdapterPair,
    grads: &AdapterGradients,
    state: &mut AdamWState,
    hyper: &AdamW,
    step: usize,
) {
    let big_r = params.max_rank();
    adamw_step_prefix(params, grads, state, hyper, step, big_r);
}

/// AdamW restricted to the rank-`active` slice: the first `active` columns
/// of `A` and rows of `B`. Everything past the slice (values, moments and
/// weight decay) is left exactly as it was, so stale momentum from earlier
/// steps cannot move a slice that is not being trained.
pub fn adamw_step_prefix(
    params: &mut AdapterPair,
    grads: &AdapterGradients,
    state: &mut AdamWState,
    hyper: &AdamW,
    step: usize,
    active: usize,
) {
    assert!(step >= 1, "adam steps count from 1");
    let (big_r, n) = (params.max_rank(), params.out_dim());
    assert!(active <= big_r, "active rank {active} exceeds {big_r}");
    let (a, b) = params.params_mut();
    assert_eq!(a.len(), state.m_a.len(), "optimizer state does not match parameters");
    assert_eq!(b.len(), state.m_b.len(), "optimizer state does not match parameters");
    update(
        a,
        grads.grad_a.as_slice(),
        &mut state.m_a,
        &mut state.v_a,
        hyper,
        step,
        |i| i % big_r < active,
    );
    update(
        b,
        grads.grad_b.as_slice(),
        &mut state.m_b,
        &mut state.v_b,
        hyper,
        step,
        |i| i / n < active,
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{rand_matrix, Matrix};

    fn hyper(lr: f64, wd: f64) -> AdamW {
        AdamW {
            learning_rate: lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = AdapterPair::new(rand_matrix(1, 3, 2, 1.0), rand_matrix(2, 2, 4, 1.0)).unwrap();
        let before = p.clone();
        let mut st = AdamWState::new(&p);
        let g = AdapterGradients::zeros_like(&p);
        for step in 1..=5 {
            adamw_step(&mut p, &g, &mut st, &hyper(0.1, 0.0), step);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        let mut p = AdapterPair::new(Matrix::zeros(2, 2), Matrix::zeros(2, 3)).unwrap();
        let mut st = AdamWState::new(&p);
        let g = AdapterGradients {
            grad_a: Matrix::from_rows(&[[0.5, -2.0], [3.0, -0.01]]).unwrap(),
            grad_b: Matrix::filled(2, 3, 7.0),
        };
        let lr = 0.01;
        adamw_step(&mut p, &g, &mut st, &hyper(lr, 0.0), 1);
        for (theta, grad) in p.a().as_slice().iter().zip(g.grad_a.as_slice()) {
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
            let expected = -lr * grad / (grad.abs() + 1e-8);
            assert!((theta - expected).abs() < 1e-15);
            assert!((theta.abs() - lr).abs() < 1e-7);
            assert_eq!(theta.signum(), -grad.signum());
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = AdapterPair::new(Matrix::filled(1, 1, 2.0), Matrix::filled(1, 1, -4.0)).unwrap();
        let mut st = AdamWState::new(&p);
        let zero = AdapterGradients::zeros_like(&p);
        adamw_step(&mut p, &zero, &mut st, &hyper(0.1, 0.5), 1);
        assert!((p.a().get(0, 0) - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert!((p.b().get(0, 0) + 4.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn prefix_step_freezes_the_rest() {
        let mut p = AdapterPair::new(rand_matrix(1, 3, 4, 1.0), rand_matrix(2, 4, 2, 1.0)).unwrap();
        let mut st = AdamWState::new(&p);
        let g = AdapterGradients {
            grad_a: rand_matrix(3, 3, 4, 1.0),
            grad_b: rand_matrix(4, 4, 2, 1.0),
        };
        adamw_step(&mut p, &g, &mut st, &hyper(0.1, 0.01), 1);
        let before = p.clone();
        let zero = AdapterGradients::zeros_like(&p);
        adamw_step_prefix(&mut p, &zero, &mut st, &hyper(0.1, 0.01), 2, 1);
        for j in 0..4 {
            assert_eq!(p.a().col(j) != before.a().col(j), j < 1, "column {j}");
            assert_eq!(p.b().row(j) != before.b().row(j), j < 1, "row {j}");
        }
        // full step with the same zero gradient still moves everything through momentum
        let mut q = before.clone();
        adamw_step(&mut q, &zero, &mut st.clone(), &hyper(0.1, 0.01), 2);
        assert!((0..4).all(|j| q.a().col(j) != before.a().col(j)));
    }
}
