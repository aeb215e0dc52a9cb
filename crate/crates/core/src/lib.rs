//! Nested rank-weighted low-rank adapters.
//!
//! A low-rank adapter adds `A·B` to a frozen weight `W₀`. Training it so that
//! every prefix slice `A_k·B_k` is a good rank-`k` adapter on its own amounts
//! to optimizing the sum of the per-rank losses for all ranks in a set `S`;
//! for the squared loss of a linear layer that sum collapses to a single
//! diagonal weighting, `W₀ + A·diag(P)·B`, with `p_r = Σ_{r′ ∈ S, r′ ≥ r} s_{r′}`.
//!
//! Modules, bottom-up:
//!
//! * [`linalg`] — dense matrices and seeded random generation.
//! * [`rank_weights`] — rank sets, the weight vector `P`, masks.
//! * [`adapters`] — forward passes, weight merging, gradients.
//! * [`metrics`] — area under rank-accuracy curves.
//! * [`theory`] — the multi-rank objective and its estimators.
//! * [`train`] — a synthetic fine-tuning harness.
//! * [`checkpoint`], [`verify`], [`cli`] — persistence and the `mlora` tool.
//!
//! ```
//! use mlora::rank_weights::{compute_p, RankSet, ScalingMode};
//!
//! let set = RankSet::new(vec![1, 2, 4, 8], 8).unwrap();
//! let p = compute_p(&set, ScalingMode::Unit);
//! assert_eq!(p.as_slice(), &[4.0, 3.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0]);
//! ```

pub mod adapters;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod rank_weights;
pub mod theory;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
