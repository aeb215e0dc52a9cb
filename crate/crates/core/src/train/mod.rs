//! Desk-scale fine-tuning harness.
//!
//! A synthetic teacher-student regression stands in for language-model
//! fine-tuning: the student is `W₀ + adapter`, the teacher is `W₀` plus a
//! planted low-rank perturbation with a chosen spectrum. Three training
//! schemes share one loop and differ only in the diagonal weights used at
//! each step.

mod optim;
mod run;
mod stacked;
mod study;
mod task;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rank_weights::{RankSet, ScalingMode};

pub use optim::{adamw_step, adamw_step_prefix, AdamW, AdamWState};
pub use run::{eval_sweep, seed_average, train_run, train_run_observed, Checkpoint, StepRecord};
pub use stacked::StackedModel;
pub use study::{compare_methods, MethodSummary, StudyConfig, StudyReport};
pub use task::{TaskSpec, ToyTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Full rank `R` every step.
    Lora,
    /// One rank drawn uniformly from `S` per step; only its slice is trained.
    Dylora,
    /// All ranks of `S` at once through the diagonal weights `P`.
    Matryoshka,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Lora, Method::Dylora, Method::Matryoshka];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Dylora => "dylora",
            Method::Matryoshka => "matryoshka",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Method::Lora),
            "dylora" => Ok(Method::Dylora),
            "matryoshka" => Ok(Method::Matryoshka),
            other => Err(Error::InvalidArgument(format!(
                "unknown method '{other}' (expected lora, dylora or matryoshka)"
            ))),
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub max_rank: usize,
    pub ranks: Vec<usize>,
    pub scaling: ScalingMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub task: TaskSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Matryoshka,
            max_rank: 8,
            ranks: vec![1, 2, 4, 8],
            scaling: ScalingMode::Unit,
            learning_rate: 1e-2,
            epochs: 3,
            batch_size: 16,
            seed: 42,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            task: TaskSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn rank_set(&self) -> Result<RankSet> {
        RankSet::new(self.ranks.clone(), self.max_rank)
    }

    pub fn validate(&self) -> Result<()> {
        self.rank_set()?;
        self.task.validate()?;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, beta) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return bad(format!("{name} must lie in [0, 1), got {beta}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad(format!("adam eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }
}
