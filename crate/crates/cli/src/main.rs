//! `warplab`: config-driven experiments and direct operator invocation for
//! the weight-averaged rewarded-policies laboratory.
//!
//! Every subcommand is deterministic given its inputs and seeds, writes
//! outputs atomically, and echoes the fully resolved configuration next to
//! them. The output root comes from `--out`, else the `WARPLAB_OUT`
//! environment variable, else `output_dir` in the config — the environment
//! variable overrides nothing but the root.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "warplab",
    version,
    about = "Desk-scale weight-merging RL laboratory"
)]
pub struct Cli {
    /// TOML experiment config; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed override (run-to-run stochasticity; the task is pinned
    /// by data.data_seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; beats WARPLAB_OUT and the config's output_dir.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Config override `section.key=value`; the value is a TOML literal,
    /// so strings need quotes. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Supervised bootstrap: train the starting policy on the synthetic corpus.
    Sft,
    /// One KL-regularized REINFORCE run (from --init, else a fresh SFT).
    Train {
        /// Starting checkpoint; omitted means run SFT first and start there.
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
    },
    /// Full iterative procedure: parallel runs, merge, interpolate, sweep.
    Warp {
        /// SFT checkpoint to start from; omitted means run SFT first.
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
        /// Worker threads for the parallel runs (default: one per run).
        /// Never affects numerics.
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Merge checkpoints into a new checkpoint.
    Merge {
        #[arg(long, value_enum)]
        method: MergeMethod,
        /// Interpolation coefficient for two-model methods (default 0.5).
        /// slerpm fixes its coefficients at 1/m and rejects this flag.
        #[arg(long)]
        lambda: Option<f64>,
        /// Shared initialization checkpoint; required by the task-vector
        /// methods (slerp, slerpm).
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
        /// Output checkpoint path, relative to the output root.
        #[arg(long, default_value = "merged.ckpt", value_name = "PATH")]
        output: PathBuf,
        /// Checkpoints to merge, in merge order.
        #[arg(required = true, num_args = 2.., value_name = "CKPT")]
        checkpoints: Vec<PathBuf>,
    },
    /// Interpolate from an initialization towards a target: (1-eta)*init + eta*target.
    Liti {
        #[arg(long, value_name = "CKPT")]
        init: PathBuf,
        #[arg(long, value_name = "CKPT")]
        target: PathBuf,
        /// Coefficient in [0, 2]; values above 1 extrapolate past the target.
        #[arg(long)]
        eta: f64,
        #[arg(long, default_value = "liti.ckpt", value_name = "PATH")]
        output: PathBuf,
    },
    /// Reward/KL front of the family liti(init, merged, eta) over an eta grid.
    Sweep {
        #[arg(long, value_name = "CKPT")]
        init: PathBuf,
        #[arg(long, value_name = "CKPT")]
        merged: PathBuf,
        /// Comma-separated etas; defaults to the config's warp.eta_grid.
        #[arg(long, value_delimiter = ',', value_name = "ETAS")]
        eta_grid: Option<Vec<f64>>,
    },
    /// Reward, KL, length, and held-out cross-entropy of one policy.
    Eval {
        #[arg(long, value_name = "CKPT")]
        policy: PathBuf,
        /// KL reference; defaults to the policy itself (KL exactly 0).
        #[arg(long, value_name = "CKPT")]
        reference: Option<PathBuf>,
    },
    /// Diagnostic tables: merge geometry, merge quality, diversity, length bias.
    Diag {
        #[command(subcommand)]
        what: DiagCmd,
    },
}

#[derive(Subcommand)]
pub enum DiagCmd {
    /// Norms, angles, and inter-method distances across a lambda grid.
    Geometry {
        #[arg(long, value_name = "CKPT")]
        init: PathBuf,
        #[arg(long, value_name = "CKPT")]
        a: PathBuf,
        #[arg(long, value_name = "CKPT")]
        b: PathBuf,
        #[arg(long, value_delimiter = ',', value_name = "LAMBDAS")]
        lambda_grid: Option<Vec<f64>>,
    },
    /// Reward/KL of slerp vs lerp vs raw-weight slerp across a lambda grid.
    Compare {
        #[arg(long, value_name = "CKPT")]
        init: PathBuf,
        #[arg(long, value_name = "CKPT")]
        a: PathBuf,
        #[arg(long, value_name = "CKPT")]
        b: PathBuf,
        #[arg(long, value_delimiter = ',', value_name = "LAMBDAS")]
        lambda_grid: Option<Vec<f64>>,
    },
    /// Within-policy sample similarity and KL for a set of policies.
    Diversity {
        /// KL reference (normally the SFT checkpoint).
        #[arg(long, value_name = "CKPT")]
        reference: PathBuf,
        #[arg(long, required = true, num_args = 1.., value_name = "CKPT")]
        policies: Vec<PathBuf>,
    },
    /// Length vs KL across run logs and standalone policies.
    Length {
        /// Evaluation logs (JSONL, one record per evaluation) as series.
        #[arg(long, num_args = 1.., value_name = "JSONL")]
        logs: Vec<PathBuf>,
        /// Standalone policies to place on the same table.
        #[arg(long, num_args = 1.., value_name = "CKPT")]
        policies: Vec<PathBuf>,
        /// KL reference for --policies rows.
        #[arg(long, value_name = "CKPT")]
        reference: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MergeMethod {
    /// Spherical interpolation of task vectors around --init.
    Slerp,
    /// Linear interpolation of weights.
    Lerp,
    /// Iterated slerp of M models around --init with coefficient 1/m.
    Slerpm,
    /// Spherical interpolation of raw weights (no task vectors).
    SlerpFull,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli) {
        // Single machine-parsable line, whatever the failure.
        let msg = e.to_string().replace('\n', "; ");
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
