use crate::adapters::{grad_adapters, merge_weights, AdapterPair, BaseLayer};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};
use crate::metrics::RankAccuracyCurve;
use crate::rank_weights::{compute_p, dylora_weights, lora_weights, RankSet, RankWeights};
use crate::train::optim::{adamw_step_prefix, AdamW, AdamWState};
use crate::train::{Method, ToyTask, TrainConfig};

/// Result of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub base: BaseLayer,
    pub adapters: AdapterPair,
    /// Mean training loss of each epoch. Not part of the binary file; it is
    /// written separately as `epoch,train_loss` CSV.
    pub log: Vec<f64>,
}

impl Checkpoint {
    /// Diagonal weights used by this checkpoint's training method, recomputed
    /// from the configuration. DyLoRA has no single vector, so the
    /// full-rank one is returned for it.
    pub fn training_weights(&self) -> Result<RankWeights> {
        let cfg = &self.config;
        match cfg.method {
            Method::Matryoshka => Ok(compute_p(&cfg.rank_set()?, cfg.scaling)),
            Method::Lora | Method::Dylora => lora_weights(cfg.max_rank, cfg.scaling),
        }
    }

    /// Dense weight for deployment at rank `k`.
    pub fn merged(&self, k: usize) -> Result<Matrix> {
        merge_weights(&self.base, &self.adapters, k, self.config.scaling)
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss\n");
        for (epoch, loss) in self.log.iter().enumerate() {
            out.push_str(&format!("{},{}\n", epoch + 1, loss));
        }
        out
    }
}

/// What happened in one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based optimizer step.
    pub step: usize,
    /// 0-based epoch.
    pub epoch: usize,
    /// Rank drawn for this step (DyLoRA only).
    pub sampled_rank: Option<usize>,
    /// Mean `½‖Y − T‖²` over the batch, before the update.
    pub loss: f64,
}

/// Train one adapter on `task` according to `cfg`.
pub fn train_run(cfg: &TrainConfig, task: &ToyTask) -> Result<Checkpoint> {
    train_run_observed(cfg, task, |_, _, _| {})
}

/// Like [`train_run`], calling `observer(record, before, after)` after
/// every optimizer step.
///
/// Randomness comes from three streams of `cfg.seed`: 0 initializes the
/// adapter, 1 shuffles the data each epoch and 2 draws DyLoRA ranks.
pub fn train_run_observed<F>(cfg: &TrainConfig, task: &ToyTask, mut observer: F) -> Result<Checkpoint>
where
    F: FnMut(&StepRecord, &AdapterPair, &AdapterPair),
{
    cfg.validate()?;
    if cfg.task != task.spec {
        return Err(Error::InvalidArgument(
            "task does not match the configuration's task spec".into(),
        ));
    }
    let set = cfg.rank_set()?;
    let (m, n) = (task.spec.in_dim, task.spec.out_dim);
    let base = BaseLayer::new(task.w0.clone());

    let mut adapters = AdapterPair::init(&mut SeededRng::with_stream(cfg.seed, 0), m, n, cfg.max_rank);
    let mut shuffle_rng = SeededRng::with_stream(cfg.seed, 1);
    let mut rank_rng = SeededRng::with_stream(cfg.seed, 2);

    let fixed_p = match cfg.method {
        Method::Lora => Some(lora_weights(cfg.max_rank, cfg.scaling)?),
        Method::Matryoshka => Some(compute_p(&set, cfg.scaling)),
        Method::Dylora => None,
    };
    let hyper = AdamW::from_config(cfg);
    let mut state = AdamWState::new(&adapters);
    let n_train = task.x_train.rows();
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = shuffle_rng.permutation(n_train);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let (p, sampled_rank) = match &fixed_p {
                Some(p) => (p.clone(), None),
                None => {
                    let k = set.ranks()[rank_rng.index(set.len())];
                    (dylora_weights(k, cfg.max_rank, cfg.scaling)?, Some(k))
                }
            };
            let x = task.x_train.select_rows(idx);
            let target = task.y_train.select_rows(idx);
            let w = base
                .weight()
                .add(&adapters.a().scale_cols(p.as_vector())?.matmul(adapters.b())?)?;
            let resid = x.matmul(&w)?.sub(&target)?;
            let scale = 1.0 / idx.len() as f64;
            let loss = 0.5 * resid.frob_norm_sq() * scale;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    learning_rate: cfg.learning_rate,
                });
            }
            let delta = x.transpose().matmul(&resid)?.scale(scale);
            let grads = grad_adapters(&delta, &adapters, &p)?;
            let before = adapters.clone();
            let active = sampled_rank.unwrap_or(cfg.max_rank);
            adamw_step_prefix(&mut adapters, &grads, &mut state, &hyper, step, active);
            if !(adapters.a().is_finite() && adapters.b().is_finite()) {
                return Err(Error::Divergence {
                    step,
                    learning_rate: cfg.learning_rate,
                });
            }
            observer(
                &StepRecord {
                    step,
                    epoch,
                    sampled_rank,
                    loss,
                },
                &before,
                &adapters,
            );
            epoch_loss += loss;
            batches += 1;
        }
        log.push(epoch_loss / batches as f64);
    }
    Ok(Checkpoint {
        config: cfg.clone(),
        base,
        adapters,
        log,
    })
}

/// Score the checkpoint at each evaluation rank using the rank-`k` merged
/// weight `W₀ + s_k·A_k·B_k`.
pub fn eval_sweep(ckpt: &Checkpoint, eval_ranks: &RankSet, task: &ToyTask) -> Result<RankAccuracyCurve> {
    let big_r = ckpt.adapters.max_rank();
    if eval_ranks.largest() > big_r {
        return Err(Error::RankOutOfRange {
            rank: eval_ranks.largest(),
            max: big_r,
        });
    }
    let points = eval_ranks
        .ranks()
        .iter()
        .map(|&k| Ok((k, task.score(&ckpt.merged(k)?)?)))
        .collect::<Result<Vec<_>>>()?;
    RankAccuracyCurve::new(points)
}

/// Pointwise mean of curves sharing one rank list.
pub fn seed_average(curves: &[RankAccuracyCurve]) -> Result<RankAccuracyCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot average zero curves".into()))?;
    let ranks = first.ranks();
    let mut sums = vec![0.0; ranks.len()];
    for curve in curves {
        if curve.ranks() != ranks {
            return Err(Error::InvalidArgument(format!(
                "rank lists differ: {:?} vs {:?}",
                ranks,
                curve.ranks()
            )));
        }
        for (s, v) in sums.iter_mut().zip(curve.scores()) {
            *s += v;
        }
    }
    let count = curves.len() as f64;
    RankAccuracyCurve::new(ranks.into_iter().zip(sums.into_iter().map(|s| s / count)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rank_weights::ScalingMode;
    use crate::train::TaskSpec;

    fn tiny_config(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            max_rank: 4,
            ranks: vec![1, 2, 4],
            epochs: 1,
            batch_size: 8,
            learning_rate: 1e-2,
            task: TaskSpec {
                in_dim: 6,
                out_dim: 5,
                spectrum: vec![4.0, 2.0],
                train_size: 48,
                test_size: 32,
                seed: 1,
            },
            ..TrainConfig::default()
        }
    }

    fn columns_changed(before: &Matrix, after: &Matrix) -> Vec<bool> {
        (0..before.cols()).map(|j| before.col(j) != after.col(j)).collect()
    }

    fn rows_changed(before: &Matrix, after: &Matrix) -> Vec<bool> {
        (0..before.rows()).map(|i| before.row(i) != after.row(i)).collect()
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let mut cfg = tiny_config(Method::Matryoshka);
        cfg.epochs = 0;
        let task = ToyTask::generate(&cfg.task).unwrap();
        let ckpt = train_run(&cfg, &task).unwrap();
        assert!(ckpt.log.is_empty());
        for k in 1..=4 {
            assert_eq!(ckpt.merged(k).unwrap(), task.w0);
        }
        let curve = eval_sweep(&ckpt, &RankSet::new(vec![1, 2, 4], 4).unwrap(), &task).unwrap();
        assert_eq!(curve.scores(), vec![0.0; 3]);
    }

    #[test]
    fn deterministic() {
        for method in Method::ALL {
            let cfg = tiny_config(method);
            let task = ToyTask::generate(&cfg.task).unwrap();
            assert_eq!(train_run(&cfg, &task).unwrap(), train_run(&cfg, &task).unwrap());
        }
    }

    #[test]
    fn matryoshka_touches_every_column_and_row() {
        let cfg = tiny_config(Method::Matryoshka);
        let task = ToyTask::generate(&cfg.task).unwrap();
        train_run_observed(&cfg, &task, |rec, before, after| {
            // B starts at zero so A gets no gradient on the very first step.
            if rec.step > 1 {
                assert!(
                    columns_changed(before.a(), after.a()).iter().all(|&c| c),
                    "step {}",
                    rec.step
                );
            }
            assert!(
                rows_changed(before.b(), after.b()).iter().all(|&c| c),
                "step {}",
                rec.step
            );
        })
        .unwrap();
    }

    #[test]
    fn dylora_leaves_suffix_untouched() {
        let cfg = TrainConfig {
            epochs: 4,
            ..tiny_config(Method::Dylora)
        };
        let task = ToyTask::generate(&cfg.task).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        train_run_observed(&cfg, &task, |rec, before, after| {
            let k = rec.sampled_rank.expect("dylora samples a rank");
            seen.insert(k);
            let cols = columns_changed(before.a(), after.a());
            let rows = rows_changed(before.b(), after.b());
            for j in k..4 {
                assert!(!cols[j] && !rows[j], "step {} k={k} touched index {j}", rec.step);
            }
            assert!(rows[..k].iter().all(|&r| r));
        })
        .unwrap();
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![1, 2, 4]);
    }

    #[test]
    fn single_rank_set_recovers_lora() {
        let mut lora = tiny_config(Method::Lora);
        lora.ranks = vec![4];
        lora.epochs = 2;
        let task = ToyTask::generate(&lora.task).unwrap();
        let mut mat = lora.clone();
        mat.method = Method::Matryoshka;
        let mut dy = lora.clone();
        dy.method = Method::Dylora;
        let a = train_run(&lora, &task).unwrap();
        let b = train_run(&mat, &task).unwrap();
        let c = train_run(&dy, &task).unwrap();
        assert_eq!(a.adapters, b.adapters);
        assert_eq!(a.adapters, c.adapters);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn training_reduces_loss_and_fits_full_rank() {
        let mut cfg = tiny_config(Method::Lora);
        cfg.epochs = 60;
        cfg.learning_rate = 3e-2;
        let task = ToyTask::generate(&cfg.task).unwrap();
        let ckpt = train_run(&cfg, &task).unwrap();
        assert!(ckpt.log.last().unwrap() < &(ckpt.log[0] * 0.05), "{:?}", ckpt.log);
        let score = task.score(&ckpt.merged(4).unwrap()).unwrap();
        assert!(score > 95.0, "{score}");
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = tiny_config(Method::Lora);
        cfg.task.spectrum = vec![1e200, 1e200];
        cfg.learning_rate = 1e3;
        cfg.epochs = 5;
        let task = ToyTask::generate(&cfg.task).unwrap();
        match train_run(&cfg, &task) {
            Err(Error::Divergence { learning_rate, .. }) => assert_eq!(learning_rate, 1e3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_task_rejected() {
        let cfg = tiny_config(Method::Lora);
        let mut other = cfg.task.clone();
        other.seed += 1;
        let task = ToyTask::generate(&other).unwrap();
        assert!(train_run(&cfg, &task).is_err());
    }

    #[test]
    fn training_weights_follow_method() {
        let mut cfg = TrainConfig::default();
        let task_free = |cfg: &TrainConfig| Checkpoint {
            config: cfg.clone(),
            base: BaseLayer::new(Matrix::zeros(2, 2)),
            adapters: AdapterPair::new(Matrix::zeros(2, 8), Matrix::zeros(8, 2)).unwrap(),
            log: vec![],
        };
        assert_eq!(
            task_free(&cfg).training_weights().unwrap().as_slice(),
            &[4.0, 3.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0]
        );
        cfg.method = Method::Lora;
        cfg.scaling = ScalingMode::Inverse;
        assert_eq!(task_free(&cfg).training_weights().unwrap().as_slice(), &[0.125; 8]);
    }

    #[test]
    fn seed_average_examples() {
        let c = |pts: Vec<(usize, f64)>| RankAccuracyCurve::new(pts).unwrap();
        let one = c(vec![(1, 3.0), (2, 5.0)]);
        assert_eq!(seed_average(std::slice::from_ref(&one)).unwrap(), one);
        let avg = seed_average(&[c(vec![(1, 2.0), (4, 2.0)]), c(vec![(1, 6.0), (4, 6.0)])]).unwrap();
        assert_eq!(avg.scores(), vec![4.0, 4.0]);
        let avg = seed_average(&[
            c(vec![(1, 30.0), (2, 33.0), (4, 36.0)]),
            c(vec![(1, 31.0), (2, 36.0), (4, 33.0)]),
            c(vec![(1, 35.0), (2, 30.0), (4, 30.0)]),
        ])
        .unwrap();
        assert_eq!(avg.scores(), vec![32.0, 33.0, 33.0]);
        assert!(seed_average(&[one, c(vec![(1, 1.0), (3, 1.0)])]).is_err());
        assert!(seed_average(&[]).is_err());
    }
}
