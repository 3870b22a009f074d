//! The full iterative procedure: SFT bootstrap, parallel anchored RL runs,
//! spherical merging, interpolation towards init, and the final
//! reward/KL trade-off family.
//!
//! One iteration trains `runs_per_iteration` policies from the shared init
//! (same data, hyperparameters, and sampling noise — only the prompt visit
//! order differs), merges their task vectors with
//! [`slerpm`](crate::merge::slerpm), and moves the next
//! init part-way to the merge: `init <- liti(init, merged, eta)`. After the
//! last iteration the final family interpolates between the original SFT
//! weights and the last merge across an eta grid — that family is the
//! published Pareto front.

use crate::merge::{liti, liti_extrapolate, slerpm};
use crate::policy::GradSet;
use crate::policy::{init_policy, ArchConfig, PolicyNet};
use crate::prompts::{PromptSet, SftExample};
use crate::reward::RewardModel;
use crate::rng::derive_seed;
use crate::tensor::WeightSet;
use crate::trainer::{evaluate_policy, train_run, TrainConfig, TrainError, TrainOutput};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    #[serde(default = "default_sft_steps")]
    pub steps: usize,
    #[serde(default = "default_sft_batch")]
    pub batch_size: usize,
    #[serde(default = "default_sft_lr")]
    pub lr: f64,
    #[serde(default = "default_sft_warmup")]
    pub warmup_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_sft_steps() -> usize {
    400
}
fn default_sft_batch() -> usize {
    32
}
fn default_sft_lr() -> f64 {
    3e-3
}
fn default_sft_warmup() -> usize {
    20
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            steps: default_sft_steps(),
            batch_size: default_sft_batch(),
            lr: default_sft_lr(),
            warmup_steps: default_sft_warmup(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftStat {
    pub step: usize,
    /// Cross-entropy per completion token, in nats.
    pub ce_per_token: f64,
}

pub struct SftOutput {
    pub weights: WeightSet,
    pub log: Vec<SftStat>,
}

/// Supervised training on the synthetic corpus, from fresh random weights.
/// Maximizes mean completion log-likelihood with Adam under linear warmup.
pub fn make_sft(
    arch: &ArchConfig,
    corpus: &[SftExample],
    cfg: &SftConfig,
) -> Result<SftOutput, TrainError> {
    arch.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::BadConfig("empty SFT corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::BadConfig(
            "sft batch_size must be positive".into(),
        ));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(TrainError::BadConfig("sft lr must be positive".into()));
    }

    let mut ws = init_policy(arch, derive_seed(cfg.seed, "sft-init", 0))?;
    // Adam state lives in f64 across the loop, mirroring the RL trainer.
    let adam_cfg = TrainConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        warmup_steps: cfg.warmup_steps,
        ..TrainConfig::default()
    };
    let mut m = GradSet::zeros_like(&ws);
    let mut v = GradSet::zeros_like(&ws);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let net = PolicyNet::from_weights(arch, &ws)?;
        let mut grad = GradSet::zeros_like(&ws);
        let mut total_lp = 0.0;
        let mut total_tokens = 0usize;
        for b in 0..cfg.batch_size {
            let ex = &corpus[(step * cfg.batch_size + b) % corpus.len()];
            let (lp, g) = net.grad_logprob(&ex.prompt, &ex.completion)?;
            grad.add_scaled(&g, 1.0 / cfg.batch_size as f64);
            total_lp += lp;
            total_tokens += ex.completion.len();
        }
        let warm = if cfg.warmup_steps > 0 {
            ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let lr = cfg.lr * warm;
        let t = step as i32 + 1;
        let bc1 = 1.0 - adam_cfg.adam_beta1.powi(t);
        let bc2 = 1.0 - adam_cfg.adam_beta2.powi(t);
        let mut groups = Vec::with_capacity(ws.groups().len());
        for (gi, group) in ws.groups().iter().enumerate() {
            let g = &grad.groups[gi];
            let mg = &mut m.groups[gi];
            let vg = &mut v.groups[gi];
            let mut data = Vec::with_capacity(group.data.len());
            for (j, &w) in group.data.iter().enumerate() {
                mg[j] = adam_cfg.adam_beta1 * mg[j] + (1.0 - adam_cfg.adam_beta1) * g[j];
                vg[j] = adam_cfg.adam_beta2 * vg[j] + (1.0 - adam_cfg.adam_beta2) * g[j] * g[j];
                let mhat = mg[j] / bc1;
                let vhat = vg[j] / bc2;
                data.push((f64::from(w) + lr * mhat / (vhat.sqrt() + adam_cfg.adam_eps)) as f32);
            }
            groups.push(crate::tensor::TensorGroup::new(
                group.name.clone(),
                group.shape.clone(),
                data,
            ));
        }
        ws = WeightSet::new(groups)?;
        log.push(SftStat {
            step,
            ce_per_token: -total_lp / total_tokens as f64,
        });
    }
    Ok(SftOutput { weights: ws, log })
}

/// Mean next-token cross-entropy of a policy over `examples`, in nats per
/// completion token. The capability-retention probe for trained policies:
/// rising held-out cross-entropy means the policy is forgetting the
/// supervised distribution.
pub fn corpus_ce(
    arch: &ArchConfig,
    ws: &WeightSet,
    examples: &[SftExample],
) -> Result<f64, TrainError> {
    let net = PolicyNet::from_weights(arch, ws)?;
    let mut total_lp = 0.0;
    let mut total_tokens = 0usize;
    for ex in examples {
        let (lp, _) = net.logprob(&ex.prompt, &ex.completion)?;
        total_lp += lp;
        total_tokens += ex.completion.len();
    }
    if total_tokens == 0 {
        return Err(TrainError::BadConfig(
            "corpus has no completion tokens".into(),
        ));
    }
    Ok(-total_lp / total_tokens as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LitiTarget {
    /// Interpolate each iteration's handoff towards that iteration's init.
    IterationInit,
    /// Interpolate every handoff towards the original SFT weights.
    Sft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeTarget {
    /// Merge the runs' final policies (the default).
    Finals,
    /// Merge the runs' final EMA anchors instead.
    Anchors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarpConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_runs")]
    pub runs_per_iteration: usize,
    /// Training steps for iteration i; when shorter than `iterations` the
    /// last entry repeats (so `[2000]` means 2000 steps every iteration).
    #[serde(default = "default_steps_per_iteration")]
    pub steps_per_iteration: Vec<usize>,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_eta_grid")]
    pub eta_grid: Vec<f64>,
    #[serde(default = "default_sweep_samples")]
    pub sweep_samples_per_prompt: usize,
    #[serde(default = "default_liti_target")]
    pub liti_target: LitiTarget,
    #[serde(default = "default_merge_target")]
    pub merge_target: MergeTarget,
    /// Worker threads for the parallel runs; 0 means one per run. Thread
    /// count never affects results — each run's randomness is fixed by its
    /// own derived seed.
    #[serde(default)]
    pub parallel: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_iterations() -> usize {
    2
}
fn default_runs() -> usize {
    2
}
fn default_eta() -> f64 {
    0.3
}
fn default_eta_grid() -> Vec<f64> {
    vec![0.0, 0.1, 0.3, 0.5, 0.8, 1.0]
}
fn default_liti_target() -> LitiTarget {
    LitiTarget::IterationInit
}
fn default_merge_target() -> MergeTarget {
    MergeTarget::Finals
}
fn default_sweep_samples() -> usize {
    16
}
fn default_steps_per_iteration() -> Vec<usize> {
    vec![2000]
}

impl Default for WarpConfig {
    fn default() -> Self {
        WarpConfig {
            iterations: default_iterations(),
            runs_per_iteration: default_runs(),
            steps_per_iteration: default_steps_per_iteration(),
            eta: default_eta(),
            eta_grid: default_eta_grid(),
            sweep_samples_per_prompt: default_sweep_samples(),
            liti_target: default_liti_target(),
            merge_target: default_merge_target(),
            parallel: 0,
            seed: 0,
        }
    }
}

impl WarpConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.to_string()));
        if self.iterations == 0 || self.runs_per_iteration == 0 {
            return bad("iterations and runs_per_iteration must be positive");
        }
        if self.steps_per_iteration.is_empty() || self.steps_per_iteration.contains(&0) {
            return bad("steps_per_iteration must be a nonempty list of positive counts");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta must be in [0, 1]");
        }
        if self.eta_grid.is_empty() {
            return bad("eta_grid must not be empty");
        }
        if self.eta_grid.iter().any(|&e| !(0.0..=2.0).contains(&e)) {
            return bad("eta_grid values must be in [0, 2]");
        }
        if self.sweep_samples_per_prompt == 0 {
            return bad("sweep_samples_per_prompt must be positive");
        }
        Ok(())
    }

    /// Step budget for iteration `iter` (last entry repeats).
    pub fn steps_for(&self, iter: usize) -> usize {
        *self
            .steps_per_iteration
            .get(iter)
            .unwrap_or_else(|| self.steps_per_iteration.last().expect("validated nonempty"))
    }
}

pub struct RunArtifacts {
    pub seed: u64,
    pub prompt_order_seed: u64,
    pub final_weights: WeightSet,
    pub final_anchor: WeightSet,
    pub log: crate::trainer::RunLog,
}

pub struct IterationArtifacts {
    pub index: usize,
    pub init: WeightSet,
    pub runs: Vec<RunArtifacts>,
    pub merged: WeightSet,
    pub next_init: WeightSet,
    /// Reward/KL family of this iteration's merge, interpolated from the
    /// original SFT weights: `liti(sft, merged, eta)` over the eta grid.
    /// Sharing the SFT endpoint makes fronts comparable across iterations.
    pub sweep: Vec<SweepPoint>,
}

pub struct WarpOutput {
    pub iterations: Vec<IterationArtifacts>,
    /// The last iteration's merged model.
    pub final_merged: WeightSet,
    /// `liti(sft, final_merged, eta)` across the eta grid, in grid order.
    pub family: Vec<(f64, WeightSet)>,
}

/// Run the full procedure from SFT weights.
///
/// `base` supplies the per-run training hyperparameters; each run gets its
/// iteration's step budget, the iteration's shared sampling seed, and a
/// distinct prompt-order seed — within an iteration the parallel runs
/// differ *only* in the order prompts are visited. When a held-out corpus
/// is supplied, every sweep row also reports the policy's cross-entropy on
/// it.
#[allow(clippy::too_many_arguments)]
pub fn warp(
    arch: &ArchConfig,
    sft: &WeightSet,
    reward: &RewardModel,
    train_prompts: &PromptSet,
    eval_prompts: &PromptSet,
    heldout: Option<&[SftExample]>,
    base: &TrainConfig,
    wcfg: &WarpConfig,
) -> Result<WarpOutput, TrainError> {
    wcfg.validate()?;
    base.validate()?;
    let m = wcfg.runs_per_iteration;
    let workers = if wcfg.parallel == 0 { m } else { wcfg.parallel };

    let mut iterations = Vec::with_capacity(wcfg.iterations);
    let mut init = sft.clone();
    for iter in 0..wcfg.iterations {
        let mut cfgs = Vec::with_capacity(m);
        for run in 0..m {
            let mut cfg = base.clone();
            cfg.steps = wcfg.steps_for(iter);
            cfg.seed = derive_seed(wcfg.seed, "warp-iter", iter as u64);
            cfg.prompt_order_seed =
                derive_seed(wcfg.seed, "warp-run-order", (iter * m + run) as u64);
            cfgs.push(cfg);
        }

        let mut outputs: Vec<Option<Result<TrainOutput, TrainError>>> =
            (0..m).map(|_| None).collect();
        for chunk_start in (0..m).step_by(workers.max(1)) {
            let chunk_end = (chunk_start + workers.max(1)).min(m);
            let chunk_results: Vec<(usize, Result<TrainOutput, TrainError>)> =
                std::thread::scope(|scope| {
                    let handles: Vec<_> = (chunk_start..chunk_end)
                        .map(|ri| {
                            let cfg = &cfgs[ri];
                            let init_ref = &init;
                            scope.spawn(move || {
                                (
                                    ri,
                                    train_run(
                                        arch,
                                        init_ref,
                                        reward,
                                        train_prompts,
                                        eval_prompts,
                                        cfg,
                                    ),
                                )
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("run thread"))
                        .collect()
                });
            for (ri, res) in chunk_results {
                outputs[ri] = Some(res);
            }
        }

        let mut runs = Vec::with_capacity(m);
        for (run, out) in outputs.into_iter().enumerate() {
            let out = out
                .expect("all runs executed")
                .map_err(|e| TrainError::RunFailed {
                    iteration: iter,
                    run,
                    source: Box::new(e),
                })?;
            runs.push(RunArtifacts {
                seed: cfgs[run].seed,
                prompt_order_seed: cfgs[run].prompt_order_seed,
                final_weights: out.final_weights,
                final_anchor: out.final_anchor,
                log: out.log,
            });
        }

        let to_merge: Vec<WeightSet> = match wcfg.merge_target {
            MergeTarget::Finals => runs.iter().map(|r| r.final_weights.clone()).collect(),
            MergeTarget::Anchors => runs.iter().map(|r| r.final_anchor.clone()).collect(),
        };
        let merged = slerpm(&init, &to_merge)?;
        let liti_base = match wcfg.liti_target {
            LitiTarget::IterationInit => &init,
            LitiTarget::Sft => sft,
        };
        let next_init = liti(liti_base, &merged, wcfg.eta)?;
        let sweep = pareto_sweep(
            arch,
            sft,
            &merged,
            &wcfg.eta_grid,
            reward,
            eval_prompts,
            wcfg.sweep_samples_per_prompt,
            heldout,
        )?;
        iterations.push(IterationArtifacts {
            index: iter,
            init: init.clone(),
            runs,
            merged: merged.clone(),
            next_init: next_init.clone(),
            sweep,
        });
        init = next_init;
    }

    let final_merged = iterations
        .last()
        .expect("at least one iteration")
        .merged
        .clone();
    let mut family = Vec::with_capacity(wcfg.eta_grid.len());
    for &eta in &wcfg.eta_grid {
        family.push((eta, liti_extrapolate(sft, &final_merged, eta)?));
    }
    Ok(WarpOutput {
        iterations,
        final_merged,
        family,
    })
}

/// One evaluated point of a reward/KL front.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub eta: f64,
    pub mean_reward: f64,
    pub reward_se: f64,
    pub kl_to_sft: f64,
    pub kl_to_sft_se: f64,
    pub mean_length: f64,
    /// Held-out corpus cross-entropy (nats/token) when a corpus was supplied;
    /// its rise along the front is the capability-loss counterpart to KL.
    pub heldout_ce: Option<f64>,
}

/// Evaluate the LITI family `liti(sft, merged, eta)` over a grid. Etas in
/// `[0, 2]` are accepted; values above 1 extrapolate past the merge. Rows
/// come back in grid order.
#[allow(clippy::too_many_arguments)]
pub fn pareto_sweep(
    arch: &ArchConfig,
    sft: &WeightSet,
    merged: &WeightSet,
    eta_grid: &[f64],
    reward: &RewardModel,
    prompts: &PromptSet,
    samples_per_prompt: usize,
    heldout: Option<&[SftExample]>,
) -> Result<Vec<SweepPoint>, TrainError> {
    if eta_grid.is_empty() {
        return Err(TrainError::BadConfig("eta grid must not be empty".into()));
    }
    let mut out = Vec::with_capacity(eta_grid.len());
    for &eta in eta_grid {
        let ws = liti_extrapolate(sft, merged, eta)?;
        let s = evaluate_policy(arch, &ws, sft, None, reward, prompts, samples_per_prompt)?;
        out.push(SweepPoint {
            eta,
            mean_reward: s.mean_reward,
            reward_se: s.reward_se,
            kl_to_sft: s.kl_to_ref,
            kl_to_sft_se: s.kl_to_ref_se,
            mean_length: s.mean_length,
            heldout_ce: heldout.map(|h| corpus_ce(arch, &ws, h)).transpose()?,
        });
    }
    Ok(out)
}
