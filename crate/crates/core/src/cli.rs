//! The `mlora` command line.

use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{self, write_atomic};
use crate::error::{Error, Result};
use crate::metrics::{aurac, log_aurac, RankAccuracyCurve};
use crate::rank_weights::{compute_p, dylora_weights, lora_weights, RankSet, ScalingMode};
use crate::train::{eval_sweep, train_run, Method, TaskSpec, ToyTask, TrainConfig};
use crate::verify::{run_all, VerifyOptions};

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    VerificationFailed = 1,
    Usage = 2,
    Diverged = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Parser)]
#[command(name = "mlora", version, about = "Nested rank-weighted low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the numerical self-check suites.
    Verify {
        /// Use this tolerance for every suite instead of the defaults.
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Train an adapter on a synthetic teacher-student task.
    Train {
        #[arg(long, default_value = "matryoshka")]
        method: Method,
        #[arg(long, default_value_t = 8)]
        max_rank: usize,
        /// Comma-separated training ranks; defaults to the powers of two up to --max-rank.
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
        #[arg(long, default_value = "unit")]
        scaling: ScalingMode,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0.0)]
        weight_decay: f64,
        /// Task as key=value pairs, e.g. `in=16,out=16,spectrum=10:5:2:1,train=768,test=512,seed=0`.
        #[arg(long, default_value = "")]
        task_spec: TaskSpec,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Training-log CSV path; defaults to `<out>.log.csv`.
        #[arg(long)]
        log_csv: Option<PathBuf>,
    },
    /// Evaluate a checkpoint at several ranks.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated evaluation ranks; defaults to the training ranks.
        #[arg(long, value_delimiter = ',')]
        eval_ranks: Option<Vec<usize>>,
        /// Write the curve here instead of standard output.
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Area under a rank-accuracy curve given as `rank,score` CSV.
    Aurac {
        /// CSV path, or `-` for standard input.
        #[arg(long)]
        csv: PathBuf,
        /// Also print the log₂-spaced variant.
        #[arg(long)]
        log: bool,
    },
    /// Print the diagonal rank-weight vector.
    ExportP {
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
        #[arg(long, default_value_t = 8)]
        max_rank: usize,
        #[arg(long, default_value = "unit")]
        scaling: ScalingMode,
        /// `lora` or `dylora:K`: print the vector reproducing that method instead.
        #[arg(long)]
        recover: Option<String>,
    },
}

fn rank_set(ranks: Option<Vec<usize>>, max_rank: usize) -> Result<RankSet> {
    match ranks {
        Some(r) => RankSet::new(r, max_rank),
        None => RankSet::powers_of_two(max_rank),
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".log.csv");
    PathBuf::from(name)
}

fn execute(command: Command, stdin: &mut dyn Read, out: &mut dyn Write) -> Result<ExitStatus> {
    match command {
        Command::Verify { tolerance, seed } => {
            let reports = run_all(&VerifyOptions { tolerance, seed })?;
            for r in &reports {
                writeln!(out, "{r}")?;
            }
            let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            if failed.is_empty() {
                writeln!(out, "all {} suites passed", reports.len())?;
                Ok(ExitStatus::Success)
            } else {
                writeln!(out, "failed suites: {}", failed.join(", "))?;
                Ok(ExitStatus::VerificationFailed)
            }
        }
        Command::Train {
            method,
            max_rank,
            ranks,
            scaling,
            lr,
            epochs,
            seed,
            batch,
            weight_decay,
            task_spec,
            out: path,
            log_csv,
        } => {
            let set = rank_set(ranks, max_rank)?;
            let cfg = TrainConfig {
                method,
                max_rank,
                ranks: set.ranks().to_vec(),
                scaling,
                learning_rate: lr,
                epochs,
                batch_size: batch,
                seed,
                weight_decay,
                task: task_spec,
                ..TrainConfig::default()
            };
            cfg.validate()?;
            let task = ToyTask::generate(&cfg.task)?;
            let ckpt = train_run(&cfg, &task)?;
            checkpoint::save(&ckpt, &path)?;
            let log_path = log_csv.unwrap_or_else(|| default_log_path(&path));
            write_atomic(&log_path, ckpt.log_csv().as_bytes())?;
            writeln!(out, "wrote {} and {}", path.display(), log_path.display())?;
            if let Some(last) = ckpt.log.last() {
                writeln!(out, "final epoch train loss {last:.6}")?;
            }
            Ok(ExitStatus::Success)
        }
        Command::Sweep {
            ckpt,
            eval_ranks,
            out_csv,
        } => {
            let ckpt = checkpoint::load(&ckpt)?;
            let big_r = ckpt.adapters.max_rank();
            let set = match eval_ranks {
                Some(r) => RankSet::new(r, big_r)?,
                None => ckpt.config.rank_set()?,
            };
            let task = ToyTask::generate(&ckpt.config.task)?;
            let curve = eval_sweep(&ckpt, &set, &task)?;
            match out_csv {
                Some(p) => write_atomic(&p, curve.to_csv().as_bytes())?,
                None => write!(out, "{}", curve.to_csv())?,
            }
            writeln!(out, "aurac {:.4}", aurac(&curve))?;
            writeln!(out, "log_aurac {:.4}", log_aurac(&curve))?;
            Ok(ExitStatus::Success)
        }
        Command::Aurac { csv, log } => {
            let curve = if csv.as_os_str() == "-" {
                let mut text = String::new();
                stdin.read_to_string(&mut text)?;
                RankAccuracyCurve::from_csv(&text)?
            } else {
                RankAccuracyCurve::read(&csv)?
            };
            writeln!(out, "{:.4}", aurac(&curve))?;
            if log {
                writeln!(out, "{:.4}", log_aurac(&curve))?;
            }
            Ok(ExitStatus::Success)
        }
        Command::ExportP {
            ranks,
            max_rank,
            scaling,
            recover,
        } => {
            let p = match recover.as_deref() {
                None => compute_p(&rank_set(ranks, max_rank)?, scaling),
                Some("lora") => lora_weights(max_rank, scaling)?,
                Some(other) => {
                    let k = other
                        .strip_prefix("dylora:")
                        .and_then(|k| k.parse::<usize>().ok())
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!("--recover expects 'lora' or 'dylora:K', got '{other}'"))
                        })?;
                    dylora_weights(k, max_rank, scaling)?
                }
            };
            writeln!(out, "{}", join(p.as_slice()))?;
            Ok(ExitStatus::Success)
        }
    }
}

/// Parse `args` (including the program name) and run the command, writing
/// results to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, stdin: &mut dyn Read, out: &mut dyn Write, err: &mut dyn Write) -> ExitStatus
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                ExitStatus::Usage
            } else {
                ExitStatus::Success
            };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(rendered.as_bytes())
            } else {
                out.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, stdin, out) {
        Ok(status) => status,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Divergence { .. } => ExitStatus::Diverged,
                _ => ExitStatus::Usage,
            }
        }
    }
}
