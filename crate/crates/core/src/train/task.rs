use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};

/// Parameters of a teacher-student task. Everything about the task is a
/// deterministic function of these fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Input dimension (rows of `W₀`).
    pub in_dim: usize,
    /// Output dimension (columns of `W₀`).
    pub out_dim: usize,
    /// Singular values of the planted perturbation `W* − W₀`.
    pub spectrum: Vec<f64>,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            in_dim: 16,
            out_dim: 16,
            spectrum: vec![10.0, 5.0, 2.0, 1.0],
            train_size: 768,
            test_size: 512,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.in_dim == 0 || self.out_dim == 0 {
            return bad("task dimensions must be positive".into());
        }
        if self.spectrum.is_empty() {
            return bad("spectrum must have at least one component".into());
        }
        if self.spectrum.len() > self.in_dim.min(self.out_dim) {
            return bad(format!(
                "spectrum has {} components but a {}x{} perturbation has rank at most {}",
                self.spectrum.len(),
                self.in_dim,
                self.out_dim,
                self.in_dim.min(self.out_dim)
            ));
        }
        if let Some(s) = self.spectrum.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return bad(format!("spectrum entries must be positive, got {s}"));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return bad("train and test sizes must be positive".into());
        }
        Ok(())
    }
}

/// `key=value` pairs separated by commas, e.g.
/// `in=16,out=16,spectrum=10:5:2:1,train=768,test=512,seed=0`.
/// Omitted keys keep their defaults.
impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = TaskSpec::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("task spec entry '{part}' is not key=value")))?;
            let int = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("task spec: invalid integer '{v}' for {key}")))
            };
            match key {
                "in" | "m" => spec.in_dim = int(value)?,
                "out" | "n" => spec.out_dim = int(value)?,
                "train" => spec.train_size = int(value)?,
                "test" => spec.test_size = int(value)?,
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("task spec: invalid seed '{value}'")))?
                }
                "spectrum" => {
                    spec.spectrum = value
                        .split(':')
                        .map(|v| {
                            v.parse::<f64>()
                                .map_err(|_| Error::InvalidArgument(format!("task spec: invalid spectrum value '{v}'")))
                        })
                        .collect::<Result<_>>()?
                }
                other => return Err(Error::InvalidArgument(format!("task spec: unknown key '{other}'"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Materialized task: base weight, teacher weight and both input splits.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub spec: TaskSpec,
    pub w0: Matrix,
    pub teacher: Matrix,
    pub x_train: Matrix,
    pub y_train: Matrix,
    pub x_test: Matrix,
    test_target_delta: Matrix,
    test_energy: f64,
}

/// Gram-Schmidt on the columns of a Gaussian matrix.
fn orthonormal_columns(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    loop {
        let g = rng.gaussian_matrix(rows, cols, 1.0);
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
        let mut ok = true;
        for j in 0..cols {
            let mut v = g.col(j);
            for u in &q {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= proj * ui;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
        if ok {
            let mut out = Matrix::zeros(rows, cols);
            for (j, col) in q.iter().enumerate() {
                for (i, &x) in col.iter().enumerate() {
                    out.set(i, j, x);
                }
            }
            return out;
        }
    }
}

impl ToyTask {
    /// Streams of the task seed: 0 → `W₀`, 1 → `U`, 2 → `V`, 3 → train
    /// inputs, 4 → test inputs.
    pub fn generate(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let (m, n, c) = (spec.in_dim, spec.out_dim, spec.spectrum.len());
        let w0 = SeededRng::with_stream(spec.seed, 0).gaussian_matrix(m, n, 1.0 / (m as f64).sqrt());
        let u = orthonormal_columns(&mut SeededRng::with_stream(spec.seed, 1), m, c);
        let v = orthonormal_columns(&mut SeededRng::with_stream(spec.seed, 2), n, c);
        let mut delta = Matrix::zeros(m, n);
        for (k, &sigma) in spec.spectrum.iter().enumerate() {
            for i in 0..m {
                for j in 0..n {
                    let cur = delta.get(i, j);
                    delta.set(i, j, cur + sigma * u.get(i, k) * v.get(j, k));
                }
            }
        }
        let teacher = w0.add(&delta)?;
        let x_train = SeededRng::with_stream(spec.seed, 3).gaussian_matrix(spec.train_size, m, 1.0);
        let x_test = SeededRng::with_stream(spec.seed, 4).gaussian_matrix(spec.test_size, m, 1.0);
        let y_train = x_train.matmul(&teacher)?;
        let test_target_delta = x_test.matmul(&delta)?;
        let test_energy = test_target_delta.frob_norm_sq();
        Ok(Self {
            spec: spec.clone(),
            w0,
            teacher,
            x_train,
            y_train,
            x_test,
            test_target_delta,
            test_energy,
        })
    }

    /// Planted perturbation `W* − W₀`.
    pub fn perturbation(&self) -> Matrix {
        self.teacher.sub(&self.w0).expect("same shape")
    }

    /// Explained variance of the fine-tuning signal on the test split, in
    /// percent: `100·(1 − ‖x(W − W*)‖² / ‖x(W* − W₀)‖²)`, clamped to `[0, 100]`.
    /// `W₀` itself scores 0 and the teacher scores 100.
    pub fn score(&self, w: &Matrix) -> Result<f64> {
        let pred_delta = self.x_test.matmul(&w.sub(&self.w0)?)?;
        let err = pred_delta.sub(&self.test_target_delta)?.frob_norm_sq();
        Ok((100.0 * (1.0 - err / self.test_energy)).clamp(0.0, 100.0))
    }

    /// Best achievable score at rank `k` (truncated planted spectrum).
    pub fn oracle_score(&self, k: usize) -> f64 {
        let total: f64 = self.spec.spectrum.iter().map(|s| s * s).sum();
        let kept: f64 = self.spec.spectrum.iter().take(k).map(|s| s * s).sum();
        100.0 * kept / total
    }
}
