//! Desk-scale laboratory for weight-averaged rewarded policies.
//!
//! The crate wires three model-merging stages — an exponential moving-average
//! anchor, spherical interpolation of task vectors, and linear interpolation
//! towards initialization — around a KL-regularized REINFORCE trainer on a
//! tiny autoregressive policy. Everything is CPU-only, deterministic under a
//! master seed, and small enough to sweep on one desktop core.
//!
//! Layout:
//! - [`tensor`]: named parameter groups and whole-model weight sets (f32
//!   storage, f64 arithmetic).
//! - [`checkpoint`]: versioned binary serialization of weight sets.
//! - [`merge`]: task vectors, LERP/SLERP/EMA/LITI operators and their
//!   extrapolating variants.
//! - [`policy`]: a two-block decoder-only transformer with hand-rolled
//!   forward, sampling, and exact log-prob gradients.
//! - [`reward`]: the synthetic programmatic reward with an explicit
//!   hackable component.
//! - [`prompts`]: prompt sets and the synthetic SFT corpus.
//! - [`trainer`]: KL-regularized policy-gradient training loop with EMA
//!   anchoring and run logging.
//! - [`orchestrator`]: the full iterative train/merge/interpolate procedure
//!   and Pareto-front sweeps.
//! - [`diagnostics`]: merge geometry probes, diversity and length-bias
//!   reports.

pub mod checkpoint;
pub mod diagnostics;
pub mod merge;
pub mod orchestrator;
pub mod policy;
pub mod prompts;
pub mod reward;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use merge::{ema_update, lerp, liti, slerp, slerpm, task_vector, TaskVector};
pub use orchestrator::{corpus_ce, make_sft, pareto_sweep, warp, SweepPoint, WarpConfig};
pub use policy::{ArchConfig, PolicyNet};
pub use reward::{RewardModel, RewardSpec};
pub use tensor::{TensorGroup, WeightSet};
pub use trainer::{evaluate_policy, kl_estimate, train_run, AnchorMode, RunLog, TrainConfig};
