use std::thread;

use crate::error::{Error, Result};
use crate::metrics::{aurac, RankAccuracyCurve};
use crate::rank_weights::RankSet;
use crate::train::run::{eval_sweep, seed_average, train_run};
use crate::train::{Method, ToyTask, TrainConfig};

/// A learning-rate × seed grid for several methods on one task.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    /// Template for every run; `method`, `learning_rate` and `seed` are overridden.
    pub base: TrainConfig,
    pub methods: Vec<Method>,
    pub learning_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub eval_ranks: RankSet,
}

/// Outcome for one method: every learning rate's seed-averaged curve, and
/// the best of them by AURAC.
#[derive(Debug, Clone)]
pub struct MethodSummary {
    pub method: Method,
    /// `(learning_rate, seed-averaged curve)`; `None` if any seed diverged.
    pub per_lr: Vec<(f64, Option<RankAccuracyCurve>)>,
    pub best_lr: f64,
    pub best_curve: RankAccuracyCurve,
    pub best_aurac: f64,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub summaries: Vec<MethodSummary>,
}

impl StudyReport {
    pub fn get(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

/// Run every `(method, lr, seed)` combination, independent runs on
/// separate threads, and pick each method's best learning rate.
pub fn compare_methods(study: &StudyConfig) -> Result<StudyReport> {
    let task = ToyTask::generate(&study.base.task)?;
    let mut jobs = Vec::new();
    for &method in &study.methods {
        for &lr in &study.learning_rates {
            for &seed in &study.seeds {
                jobs.push(TrainConfig {
                    method,
                    learning_rate: lr,
                    seed,
                    ..study.base.clone()
                });
            }
        }
    }

    let workers = thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(jobs.len().max(1));
    let outcomes: Vec<Result<Option<RankAccuracyCurve>>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (jobs, task) = (&jobs, &task);
                scope.spawn(move || {
                    jobs.iter()
                        .enumerate()
                        .filter(|(i, _)| i % workers == w)
                        .map(|(i, cfg)| {
                            let out = match train_run(cfg, task) {
                                Ok(ckpt) => eval_sweep(&ckpt, &study.eval_ranks, task).map(Some),
                                Err(Error::Divergence { .. }) => Ok(None),
                                Err(e) => Err(e),
                            };
                            (i, out)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<_> = handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect();
        all.sort_by_key(|(i, _)| *i);
        all.into_iter().map(|(_, r)| r).collect()
    });

    let mut outcomes = outcomes.into_iter();
    let mut summaries = Vec::new();
    for &method in &study.methods {
        let mut per_lr = Vec::new();
        for &lr in &study.learning_rates {
            let curves = (0..study.seeds.len())
                .map(|_| outcomes.next().expect("one outcome per job"))
                .collect::<Result<Vec<_>>>()?;
            let averaged = match curves.into_iter().collect::<Option<Vec<_>>>() {
                Some(c) => Some(seed_average(&c)?),
                None => None,
            };
            per_lr.push((lr, averaged));
        }
        let (best_lr, best_curve) = per_lr
            .iter()
            .filter_map(|(lr, c)| c.as_ref().map(|c| (*lr, c)))
            .max_by(|x, y| aurac(x.1).total_cmp(&aurac(y.1)))
            .map(|(lr, c)| (lr, c.clone()))
            .ok_or_else(|| Error::InvalidArgument(format!("every {method} run diverged")))?;
        let best_aurac = aurac(&best_curve);
        summaries.push(MethodSummary {
            method,
            per_lr,
            best_lr,
            best_curve,
            best_aurac,
        });
    }
    Ok(StudyReport { summaries })
}
