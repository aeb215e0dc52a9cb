//! Self-check suites run by `mlora verify`.
//!
//! Each suite draws seeded random instances, measures the largest deviation
//! from an identity that must hold, and compares it with a tolerance.

use std::fmt;

use crate::adapters::{
    finite_diff_grad, forward_cweighted, forward_diag, forward_dylora, forward_lora, forward_masked,
    forward_matryoshka_sum, grad_adapters, squared_error_with_delta, AdapterPair, BaseLayer,
};
use crate::error::Result;
use crate::linalg::{Matrix, SeededRng};
use crate::metrics::{aurac, interval_weight, log_aurac, RankAccuracyCurve};
use crate::rank_weights::{build_masks, compute_p, dylora_weights, lora_weights, RankSet, RankWeights, ScalingMode};
use crate::theory::{
    dylora_expected_gradient, monte_carlo_gradient, multi_rank_loss, surrogate_gap, QuadraticLoss, RankMixture,
};
use crate::train::StackedModel;

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} cases={:<5} max_error={:.3e} tolerance={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_error,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    /// Replaces every suite's default tolerance.
    pub tolerance: Option<f64>,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            tolerance: None,
            seed: 2024,
        }
    }
}

/// A random layer, adapter, input and rank set.
#[derive(Debug, Clone)]
pub struct Instance {
    pub x: Matrix,
    pub target: Matrix,
    pub layer: BaseLayer,
    pub adapters: AdapterPair,
    pub set: RankSet,
    pub mode: ScalingMode,
}

fn between(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + rng.index(hi - lo + 1)
}

/// Draws dimensions up to `max_dim`, bottleneck up to `max_rank` and a rank
/// set of at most `max_set` ranks. When `include_max` is set, `R ∈ S`.
pub fn random_instance(
    rng: &mut SeededRng,
    max_dim: usize,
    max_rank: usize,
    max_set: usize,
    include_max: bool,
) -> Instance {
    let (d, m, n) = (
        between(rng, 1, max_dim),
        between(rng, 1, max_dim),
        between(rng, 1, max_dim),
    );
    let big_r = between(rng, 1, max_rank);
    let size = between(rng, 1, max_set.min(big_r));
    let mut ranks: Vec<usize> = rng.permutation(big_r).into_iter().take(size).map(|r| r + 1).collect();
    if include_max && !ranks.contains(&big_r) {
        ranks[0] = big_r;
    }
    ranks.sort_unstable();
    let mode = ScalingMode::ALL[rng.index(3)];
    Instance {
        x: rng.gaussian_matrix(d, m, 1.0),
        target: rng.gaussian_matrix(d, n, 1.0),
        layer: BaseLayer::new(rng.gaussian_matrix(m, n, 1.0)),
        adapters: AdapterPair::new(rng.gaussian_matrix(m, big_r, 1.0), rng.gaussian_matrix(big_r, n, 1.0))
            .expect("shapes agree"),
        set: RankSet::new(ranks, big_r).expect("valid rank set"),
        mode,
    }
}

/// `P` accumulated from the mask definition, largest rank first.
fn p_from_masks(set: &RankSet, mode: ScalingMode) -> Vec<f64> {
    let mut p = vec![0.0; set.max_rank()];
    for &r in set.ranks().iter().rev() {
        let (mask_a, _) = build_masks(r, 1, 1, set.max_rank()).expect("rank in range");
        for (pj, &on) in p.iter_mut().zip(mask_a.row(0)) {
            *pj += on * mode.factor(r);
        }
    }
    p
}

struct Tracker {
    max_error: f64,
    cases: usize,
}

impl Tracker {
    fn new() -> Self {
        Self {
            max_error: 0.0,
            cases: 0,
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        // NaN must surface as a failure
        if err.is_nan() || err > self.max_error {
            self.max_error = if err.is_nan() { f64::INFINITY } else { err };
        }
    }

    fn finish(self, name: &'static str, default_tol: f64, opts: &VerifyOptions) -> SuiteReport {
        let tolerance = opts.tolerance.unwrap_or(default_tol);
        SuiteReport {
            name,
            passed: self.max_error <= tolerance,
            max_error: self.max_error,
            tolerance,
            cases: self.cases,
        }
    }
}

fn suite_p_vector(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = SeededRng::with_stream(opts.seed, 1);
    let mut t = Tracker::new();
    let known = [
        (
            RankSet::new(vec![1, 2, 4, 8], 8)?,
            vec![4.0, 3.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0],
        ),
        (RankSet::new(vec![1, 2, 3], 3)?, vec![3.0, 2.0, 1.0]),
    ];
    for (set, want) in &known {
        let got = compute_p(set, ScalingMode::Unit);
        t.record(
            got.as_slice()
                .iter()
                .zip(want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    for _ in 0..500 {
        let inst = random_instance(&mut rng, 1, 32, 8, false);
        let got = compute_p(&inst.set, inst.mode);
        let want = p_from_masks(&inst.set, inst.mode);
        t.record(
            got.as_slice()
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    Ok(t.finish("p-vector", 0.0, opts))
}

fn suite_forward_equivalence(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = SeededRng::with_stream(opts.seed, 2);
    let mut t = Tracker::new();
    for _ in 0..200 {
        let i = random_instance(&mut rng, 32, 16, 5, false);
        let p = compute_p(&i.set, i.mode);
        let outs = [
            forward_matryoshka_sum(&i.x, &i.layer, &i.adapters, &i.set, i.mode)?,
            forward_masked(&i.x, &i.layer, &i.adapters, &i.set, i.mode)?,
            forward_cweighted(&i.x, &i.layer, &i.adapters, &p)?,
            forward_diag(&i.x, &i.layer, &i.adapters, &p)?,
        ];
        let mut worst: f64 = 0.0;
        for a in 0..4 {
            for b in a + 1..4 {
                worst = worst.max(outs[a].rel_frob_err(&outs[b])?);
            }
        }
        t.record(worst);
    }
    Ok(t.finish("forward-equivalence", 1e-10, opts))
}

fn suite_recovery(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = SeededRng::with_stream(opts.seed, 3);
    let mut t = Tracker::new();
    for _ in 0..100 {
        let i = random_instance(&mut rng, 32, 16, 5, false);
        let big_r = i.adapters.max_rank();
        let lora = forward_lora(&i.x, &i.layer, &i.adapters, i.mode)?;
        let diag = forward_diag(&i.x, &i.layer, &i.adapters, &lora_weights(big_r, i.mode)?)?;
        t.record(diag.rel_frob_err(&lora)?);
        let k = between(&mut rng, 1, big_r);
        let dy = forward_dylora(&i.x, &i.layer, &i.adapters, k, i.mode)?;
        let diag = forward_diag(&i.x, &i.layer, &i.adapters, &dylora_weights(k, big_r, i.mode)?)?;
        t.record(diag.rel_frob_err(&dy)?);
    }
    Ok(t.finish("framework-recovery", 1e-12, opts))
}

fn diag_loss(i: &Instance, ad: &AdapterPair, p: &RankWeights) -> f64 {
    let y = forward_diag(&i.x, &i.layer, ad, p).expect("shapes agree");
    0.5 * y.sub(&i.target).expect("shapes agree").frob_norm_sq()
}

fn suite_gradients(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = SeededRng::with_stream(opts.seed, 4);
    let mut t = Tracker::new();
    for _ in 0..40 {
        let i = random_instance(&mut rng, 8, 6, 4, false);
        let p = compute_p(&i.set, i.mode);
        let y = forward_diag(&i.x, &i.layer, &i.adapters, &p)?;
        let (_, delta) = squared_error_with_delta(&i.x, &y, &i.target)?;
        let analytic = grad_adapters(&delta, &i.adapters, &p)?;
        let numeric = finite_diff_grad(|ad| diag_loss(&i, ad, &p), &i.adapters, 1e-6);
        t.record(analytic.rel_err(&numeric)?);
    }
    for _ in 0..10 {
        let first = random_instance(&mut rng, 6, 5, 3, false);
        let big_r = first.adapters.max_rank();
        let (m, h) = first.layer.weight().shape();
        let n = between(&mut rng, 1, 6);
        let model = StackedModel {
            first: (first.layer.clone(), first.adapters.clone()),
            second: (
                BaseLayer::new(rng.gaussian_matrix(h, n, 0.5)),
                AdapterPair::new(rng.gaussian_matrix(h, big_r, 0.5), rng.gaussian_matrix(big_r, n, 0.5))?,
            ),
            p: compute_p(&first.set, first.mode),
        };
        let x = rng.gaussian_matrix(first.x.rows(), m, 0.5);
        let target = rng.gaussian_matrix(first.x.rows(), n, 1.0);
        let (_, g1, g2) = model.loss_and_grads(&x, &target)?;
        let fd1 = finite_diff_grad(
            |ad| model.loss_with(&x, &target, ad, &model.second.1).expect("shapes agree"),
            &model.first.1,
            1e-6,
        );
        let fd2 = finite_diff_grad(
            |ad| model.loss_with(&x, &target, &model.first.1, ad).expect("shapes agree"),
            &model.second.1,
            1e-6,
        );
        t.record(g1.rel_err(&fd1)?.max(g2.rel_err(&fd2)?));
    }
    Ok(t.finish("gradients", 1e-4, opts))
}

/// Error is the number of zero/nonzero pattern violations; zero when sparse
/// rows/columns are exactly zero and dense ones are all nonzero.
fn suite_sparsity(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = SeededRng::with_stream(opts.seed, 5);
    let mut t = Tracker::new();
    let nonzero_col = |g: &Matrix, j: usize| g.col(j).iter().any(|v| *v != 0.0);
    let nonzero_row = |g: &Matrix, j: usize| g.row(j).iter().any(|v| *v != 0.0);
    for _ in 0..100 {
        let i = random_instance(&mut rng, 16, 12, 4, true);
        let big_r = i.adapters.max_rank();
        let delta = rng.gaussian_matrix(i.adapters.in_dim(), i.adapters.out_dim(), 1.0);
        let k = between(&mut rng, 1, big_r);
        let g = grad_adapters(&delta, &i.adapters, &dylora_weights(k, big_r, i.mode)?)?;
        let mut violations = 0;
        for j in k..big_r {
            violations += usize::from(g.grad_a.col(j).iter().any(|v| *v != 0.0));
            violations += usize::from(g.grad_b.row(j).iter().any(|v| *v != 0.0));
        }
        let g = grad_adapters(&delta, &i.adapters, &compute_p(&i.set, i.mode))?;
        for j in 0..big_r {
            violations += usize::from(!nonzero_col(&g.grad_a, j));
            violations += usize::from(!nonzero_row(&g.grad_b, j));
        }
        t.record(violations as f64);
    }
    Ok(t.finish("gradient-sparsity", 0.0, opts))
}

/// Error is the largest amount by which a norm exceeds the one that should
/// dominate it.
fn suite_scaling_order(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = SeededRng::with_stream(opts.seed, 6);
    let mut t = Tracker::new();
    for _ in 0..100 {
        let i = random_instance(&mut rng, 16, 16, 5, false);
        let delta = rng.gaussian_matrix(i.adapters.in_dim(), i.adapters.out_dim(), 1.0);
        let norm = |mode| -> Result<f64> {
            Ok(grad_adapters(&delta, &i.adapters, &compute_p(&i.set, mode))?
                .grad_a
                .frob_norm())
        };
        let (unit, sqrt, inv) = (
            norm(ScalingMode::Unit)?,
            norm(ScalingMode::InverseSqrt)?,
            norm(ScalingMode::Inverse)?,
        );
        t.record((sqrt - unit).max(inv - sqrt).max(0.0));
    }
    Ok(t.finish("scaling-order", 0.0, opts))
}

fn suite_metrics(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = SeededRng::with_stream(opts.seed, 7);
    let mut t = Tracker::new();
    let table = [
        (vec![(1, 32.4), (2, 33.6)], 33.0),
        (vec![(1, 33.5), (2, 34.8), (4, 34.3)], 34.4),
        (vec![(1, 32.4)], 32.4),
    ];
    for (pts, want) in table {
        // published values carry one decimal
        t.record(((aurac(&RankAccuracyCurve::new(pts)?) - want).abs() - 0.05).max(0.0));
    }
    let wide = RankAccuracyCurve::new((1..=16).map(|r| (r, 0.0)).collect())?;
    t.record((interval_weight(&wide, 7)? - 1.0 / 15.0).abs());
    let pow2 = RankAccuracyCurve::new(vec![(1, 0.0), (8, 0.0), (16, 0.0)])?;
    t.record((interval_weight(&pow2, 1)? - 8.0 / 15.0).abs());
    for _ in 0..200 {
        let len = between(&mut rng, 1, 8);
        let mut ranks: Vec<usize> = rng.permutation(32).into_iter().take(len).map(|r| r + 1).collect();
        ranks.sort_unstable();
        let scores: Vec<f64> = (0..len).map(|_| 100.0 * rng.uniform()).collect();
        let curve = RankAccuracyCurve::new(ranks.iter().copied().zip(scores.iter().copied()).collect())?;
        let (alpha, beta) = (rng.gaussian(), rng.gaussian());
        let shifted = RankAccuracyCurve::new(
            ranks
                .iter()
                .copied()
                .zip(scores.iter().map(|s| alpha * s + beta))
                .collect(),
        )?;
        for metric in [aurac, log_aurac] {
            let base = metric(&curve);
            let affine = (metric(&shifted) - (alpha * base + beta)).abs() / (1.0 + base.abs());
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let outside = (lo - base).max(base - hi).max(0.0);
            t.record(affine.max(outside));
        }
    }
    Ok(t.finish("aurac", 1e-12, opts))
}

fn quadratic_case(rng: &mut SeededRng) -> (Instance, RankMixture, QuadraticLoss) {
    let i = random_instance(rng, 6, 6, 4, false);
    let raw: Vec<f64> = i.set.ranks().iter().map(|_| 0.1 + rng.uniform()).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<(usize, f64)> = i
        .set
        .ranks()
        .iter()
        .copied()
        .zip(raw.iter().map(|w| w / total))
        .collect();
    // force an exact sum of one
    let rest: f64 = weights[..weights.len() - 1].iter().map(|w| w.1).sum();
    weights.last_mut().expect("non-empty").1 = 1.0 - rest;
    let mix = RankMixture::new(weights).expect("normalized weights");
    let loss = QuadraticLoss {
        target: rng.gaussian_matrix(i.adapters.in_dim(), i.adapters.out_dim(), 1.0),
    };
    (i, mix, loss)
}

fn suite_theory_enumeration(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = SeededRng::with_stream(opts.seed, 8);
    let mut t = Tracker::new();
    for _ in 0..30 {
        let (i, mix, loss) = quadratic_case(&mut rng);
        let exact = dylora_expected_gradient(&i.adapters, &mix, i.mode, &loss)?;
        let numeric = finite_diff_grad(
            |ad| multi_rank_loss(ad, &mix, i.mode, &loss).expect("shapes agree"),
            &i.adapters,
            1e-6,
        );
        t.record(exact.rel_err(&numeric)?);
    }
    Ok(t.finish("theory-enumeration", 1e-4, opts))
}

fn suite_theory_monte_carlo(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut t = Tracker::new();
    let mut rng = SeededRng::with_stream(opts.seed, 9);
    let ad = AdapterPair::new(rng.gaussian_matrix(4, 4, 1.0), rng.gaussian_matrix(4, 3, 1.0))?;
    let loss = QuadraticLoss {
        target: rng.gaussian_matrix(4, 3, 1.0),
    };
    let mix = RankMixture::uniform(&RankSet::new(vec![1, 2, 4], 4)?);
    for mode in ScalingMode::ALL {
        let exact = dylora_expected_gradient(&ad, &mix, mode, &loss)?;
        let sampled = monte_carlo_gradient(&ad, &mix, mode, &loss, 100_000, opts.seed)?;
        t.record(sampled.rel_err(&exact)?);
    }
    Ok(t.finish("theory-monte-carlo", 0.02, opts))
}

/// Error is the largest `gap − bound`, floored at zero.
fn suite_surrogate(opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = SeededRng::with_stream(opts.seed, 10);
    let mut t = Tracker::new();
    for _ in 0..1000 {
        let (i, mix, loss) = quadratic_case(&mut rng);
        let g = surrogate_gap(&i.adapters, &mix, i.mode, &loss)?;
        t.record(if g.holds() { 0.0 } else { g.gap - g.bound });
    }
    Ok(t.finish("surrogate-bound", 0.0, opts))
}

/// Run every suite in a fixed order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    let suites: [fn(&VerifyOptions) -> Result<SuiteReport>; 10] = [
        suite_p_vector,
        suite_forward_equivalence,
        suite_recovery,
        suite_gradients,
        suite_sparsity,
        suite_scaling_order,
        suite_metrics,
        suite_theory_enumeration,
        suite_theory_monte_carlo,
        suite_surrogate,
    ];
    suites.iter().map(|s| s(opts)).collect()
}
