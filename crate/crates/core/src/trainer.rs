//! KL-regularized REINFORCE with a movable anchor.
//!
//! Each step samples a batch of completions from the current policy, scores
//! them with the reward model, subtracts the KL surrogate
//! `beta * (log pi(y|x) - log rho(y|x))` against the anchor `rho`, centers
//! with a batch-mean baseline, and ascends the resulting policy gradient
//! with Adam under linear warmup. In EMA mode the anchor trails the policy
//! (`anchor <- (1-mu)*anchor + mu*policy` after every update), which
//! progressively licenses movement away from the starting point; in `Fixed`
//! mode it stays at the initialization, and `None` disables regularization
//! entirely.
//!
//! Everything is deterministic under `(seed, prompt_order_seed)`: per-item
//! sampling streams are derived from `seed` and the item index, the prompt
//! visit order is an epoch-wise shuffle derived from `prompt_order_seed`,
//! reductions run in fixed order, and evaluations draw from a constant
//! stream shared by every run so that (KL, reward) points are paired across
//! configurations.

use crate::merge::{ema_update, MergeError};
use crate::policy::GradSet;
use crate::policy::{ArchConfig, PolicyError, PolicyNet};
use crate::prompts::PromptSet;
use crate::reward::{RewardError, RewardModel};
use crate::rng::derive_rng;
use crate::stats::{categorical_kl_from_logs, mean, std_err};
use crate::tensor::{TensorError, TensorGroup, WeightSet};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Master seed of the shared evaluation streams. A constant, not a config
/// knob: common random numbers only pair comparisons if every run uses the
/// same draws.
pub const CRN_EVAL_SEED: u64 = 0x9d1c_ca11;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    BadConfig(String),
    #[error("prompt set is empty")]
    EmptyPromptSet,
    #[error("non-finite {quantity} at step {step}")]
    NonFinite { step: usize, quantity: &'static str },
    #[error("iteration {iteration} run {run}: {source}")]
    RunFailed {
        iteration: usize,
        run: usize,
        source: Box<TrainError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Anchor trails the policy as an exponential moving average.
    Ema,
    /// Anchor stays at the run's initialization.
    Fixed,
    /// No KL regularization; the anchor is reported as the initialization.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    BatchMean,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_anchor_mode")]
    pub anchor_mode: AnchorMode,
    #[serde(default = "default_baseline")]
    pub baseline: BaselineMode,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples_per_prompt: usize,
    #[serde(default = "default_kl_ceiling")]
    pub kl_ceiling: f64,
    #[serde(default = "default_adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Seed of the epoch-wise prompt shuffle. Runs that differ only here
    /// draw identical sampling noise but visit prompts in different orders —
    /// the sole source of diversity between the outer procedure's parallel
    /// runs.
    #[serde(default)]
    pub prompt_order_seed: u64,
}

fn default_steps() -> usize {
    2000
}
fn default_batch_size() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_warmup() -> usize {
    100
}
fn default_beta() -> f64 {
    0.1
}
fn default_mu() -> f64 {
    0.01
}
fn default_temperature() -> f64 {
    0.9
}
fn default_anchor_mode() -> AnchorMode {
    AnchorMode::Ema
}
fn default_baseline() -> BaselineMode {
    BaselineMode::BatchMean
}
fn default_eval_interval() -> usize {
    100
}
fn default_eval_samples() -> usize {
    16
}
fn default_kl_ceiling() -> f64 {
    50.0
}
fn default_adam_beta1() -> f64 {
    0.9
}
fn default_adam_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: default_steps(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            warmup_steps: default_warmup(),
            beta: default_beta(),
            mu: default_mu(),
            temperature: default_temperature(),
            anchor_mode: default_anchor_mode(),
            baseline: default_baseline(),
            eval_interval: default_eval_interval(),
            eval_samples_per_prompt: default_eval_samples(),
            kl_ceiling: default_kl_ceiling(),
            adam_beta1: default_adam_beta1(),
            adam_beta2: default_adam_beta2(),
            adam_eps: default_adam_eps(),
            seed: 0,
            prompt_order_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad("mu must be in [0, 1]");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive");
        }
        if self.eval_samples_per_prompt == 0 {
            return bad("eval_samples_per_prompt must be positive");
        }
        if !(self.kl_ceiling.is_finite() && self.kl_ceiling > 0.0) {
            return bad("kl_ceiling must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must be in [0, 1)");
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }
}

/// Per-step training telemetry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStat {
    pub step: usize,
    pub mean_raw_reward: f64,
    pub mean_reg_reward: f64,
    pub mean_length: f64,
    /// Batch mean of `log pi(y|x) - log rho(y|x)` against the anchor.
    pub mean_anchor_gap: f64,
    pub grad_norm: f64,
}

/// Periodic held-out evaluation, all at temperature 1 on shared draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub mean_reward: f64,
    pub reward_se: f64,
    /// Sequence KL to the run's initialization (the SFT policy in the usual
    /// setup). This is the Pareto-front x-axis and is always reported.
    pub kl_to_sft: f64,
    pub kl_to_sft_se: f64,
    /// Sequence KL to the current anchor; equals `kl_to_sft` when the anchor
    /// is the initialization.
    pub kl_to_anchor: f64,
    pub kl_to_anchor_se: f64,
    pub mean_length: f64,
    /// Global gradient norm of the most recent update (0 before the first).
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub config: TrainConfig,
    pub steps: Vec<StepStat>,
    pub evals: Vec<EvalPoint>,
    /// Step at which the KL ceiling stopped the run, if it did.
    pub stopped_early: Option<usize>,
}

pub struct TrainOutput {
    pub final_weights: WeightSet,
    pub final_anchor: WeightSet,
    pub log: RunLog,
}

/// The per-sample regularized reward
/// `r - beta * (log pi(y|x) - log rho(y|x))`.
pub fn regularized_reward(raw: f64, logprob_policy: f64, logprob_anchor: f64, beta: f64) -> f64 {
    raw - beta * (logprob_policy - logprob_anchor)
}

/// Summary of one policy evaluated against a reference (and optionally an
/// anchor) on shared draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_reward: f64,
    pub reward_se: f64,
    pub kl_to_ref: f64,
    pub kl_to_ref_se: f64,
    pub kl_to_anchor: Option<f64>,
    pub kl_to_anchor_se: Option<f64>,
    pub mean_length: f64,
}

/// Evaluate `policy` on `prompts`: mean reward, mean completion length, and
/// Rao-Blackwellized sequence KL to `reference` (and `anchor` when given).
///
/// Sampling is at temperature 1 from streams derived from [`CRN_EVAL_SEED`]
/// and the (prompt, sample) index only, so any two policies evaluated with
/// the same arguments see identical random draws.
pub fn evaluate_policy(
    arch: &ArchConfig,
    policy_ws: &WeightSet,
    reference_ws: &WeightSet,
    anchor_ws: Option<&WeightSet>,
    reward: &RewardModel,
    prompts: &PromptSet,
    samples_per_prompt: usize,
) -> Result<EvalSummary, TrainError> {
    if prompts.is_empty() {
        return Err(TrainError::EmptyPromptSet);
    }
    let policy = PolicyNet::from_weights(arch, policy_ws)?;
    let reference = PolicyNet::from_weights(arch, reference_ws)?;
    let anchor = anchor_ws
        .map(|ws| PolicyNet::from_weights(arch, ws))
        .transpose()?;

    let n = prompts.len() * samples_per_prompt;
    let mut rewards = Vec::with_capacity(n);
    let mut lengths = Vec::with_capacity(n);
    let mut kl_ref = Vec::with_capacity(n);
    let mut kl_anchor = Vec::with_capacity(n);
    for (pi, prompt) in prompts.prompts().iter().enumerate() {
        for s in 0..samples_per_prompt {
            let mut rng = derive_rng(CRN_EVAL_SEED, "eval-sample", ((pi as u64) << 32) | s as u64);
            let completion = policy.sample(prompt, 1.0, &mut rng)?;
            rewards.push(reward.score(prompt, &completion.tokens)?);
            lengths.push(completion.tokens.len() as f64);

            let p_dists = policy.step_logdists(prompt, &completion.tokens)?;
            let r_dists = reference.step_logdists(prompt, &completion.tokens)?;
            let mut kl = 0.0;
            for (lp, lq) in p_dists.iter().zip(&r_dists) {
                kl += categorical_kl_from_logs(lp, lq);
            }
            kl_ref.push(kl);
            if let Some(anchor) = &anchor {
                let a_dists = anchor.step_logdists(prompt, &completion.tokens)?;
                let mut kla = 0.0;
                for (lp, lq) in p_dists.iter().zip(&a_dists) {
                    kla += categorical_kl_from_logs(lp, lq);
                }
                kl_anchor.push(kla);
            }
        }
    }
    Ok(EvalSummary {
        mean_reward: mean(&rewards),
        reward_se: std_err(&rewards),
        kl_to_ref: mean(&kl_ref),
        kl_to_ref_se: std_err(&kl_ref),
        kl_to_anchor: anchor.is_some().then(|| mean(&kl_anchor)),
        kl_to_anchor_se: anchor.is_some().then(|| std_err(&kl_anchor)),
        mean_length: mean(&lengths),
    })
}

/// Rao-Blackwellized estimate of the sequence KL between two policies:
/// completions are sampled from `policy_ws` at temperature 1 and each
/// contributes the sum of exact per-step categorical KLs along its prefix
/// path. Unbiased for the sequence-level KL, every sample nonnegative.
/// Returns `(mean, standard error)`.
pub fn kl_estimate(
    arch: &ArchConfig,
    policy_ws: &WeightSet,
    reference_ws: &WeightSet,
    prompts: &PromptSet,
    samples_per_prompt: usize,
    seed: u64,
) -> Result<(f64, f64), TrainError> {
    if prompts.is_empty() {
        return Err(TrainError::EmptyPromptSet);
    }
    let policy = PolicyNet::from_weights(arch, policy_ws)?;
    let reference = PolicyNet::from_weights(arch, reference_ws)?;
    let mut samples = Vec::with_capacity(prompts.len() * samples_per_prompt);
    for (pi, prompt) in prompts.prompts().iter().enumerate() {
        for s in 0..samples_per_prompt {
            let mut rng = derive_rng(seed, "kl-sample", ((pi as u64) << 32) | s as u64);
            let completion = policy.sample(prompt, 1.0, &mut rng)?;
            let p_dists = policy.step_logdists(prompt, &completion.tokens)?;
            let r_dists = reference.step_logdists(prompt, &completion.tokens)?;
            let mut kl = 0.0;
            for (lp, lq) in p_dists.iter().zip(&r_dists) {
                kl += categorical_kl_from_logs(lp, lq);
            }
            samples.push(kl);
        }
    }
    Ok((mean(&samples), std_err(&samples)))
}

/// Epoch-wise shuffled walk over a prompt set: item `k` lands in epoch
/// `k / n` at offset `k % n`, and each epoch applies a fresh permutation
/// derived from the order seed.
struct PromptOrder {
    seed: u64,
    n: usize,
    epoch: u64,
    perm: Vec<usize>,
}

impl PromptOrder {
    fn new(seed: u64, n: usize) -> Self {
        PromptOrder {
            seed,
            n,
            epoch: 0,
            perm: Vec::new(),
        }
    }

    fn index(&mut self, item: usize) -> usize {
        let epoch = (item / self.n) as u64;
        if self.perm.is_empty() || epoch != self.epoch {
            let mut rng = derive_rng(self.seed, "prompt-order", epoch);
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut rng);
            self.perm = perm;
            self.epoch = epoch;
        }
        self.perm[item % self.n]
    }
}

struct Adam {
    m: GradSet,
    v: GradSet,
    t: u64,
}

impl Adam {
    fn new(ws: &WeightSet) -> Self {
        Adam {
            m: GradSet::zeros_like(ws),
            v: GradSet::zeros_like(ws),
            t: 0,
        }
    }

    /// Ascend `ws` along `grad` and return the updated weights.
    fn step(&mut self, ws: &WeightSet, grad: &GradSet, lr: f64, cfg: &TrainConfig) -> WeightSet {
        self.t += 1;
        let b1 = cfg.adam_beta1;
        let b2 = cfg.adam_beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let mut groups = Vec::with_capacity(ws.groups().len());
        for (gi, group) in ws.groups().iter().enumerate() {
            let g = &grad.groups[gi];
            let m = &mut self.m.groups[gi];
            let v = &mut self.v.groups[gi];
            let mut data = Vec::with_capacity(group.data.len());
            for (j, &w) in group.data.iter().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data.push((f64::from(w) + lr * mhat / (vhat.sqrt() + cfg.adam_eps)) as f32);
            }
            groups.push(TensorGroup::new(
                group.name.clone(),
                group.shape.clone(),
                data,
            ));
        }
        WeightSet::new(groups).expect("finite update")
    }
}

/// Run KL-regularized REINFORCE from `init`.
///
/// Evaluations happen at step 0, every `eval_interval` steps before the
/// update, and once more after the final step. If the estimated KL to the
/// initialization exceeds `kl_ceiling` at an evaluation, the run stops there
/// and the log records the stopping step.
pub fn train_run(
    arch: &ArchConfig,
    init: &WeightSet,
    reward: &RewardModel,
    train_prompts: &PromptSet,
    eval_prompts: &PromptSet,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    arch.validate()?;
    if train_prompts.is_empty() || eval_prompts.is_empty() {
        return Err(TrainError::EmptyPromptSet);
    }

    let mut policy_ws = init.clone();
    let mut anchor_ws = init.clone();
    let mut adam = Adam::new(init);
    let mut order = PromptOrder::new(cfg.prompt_order_seed, train_prompts.len());
    let mut log = RunLog {
        config: cfg.clone(),
        steps: Vec::with_capacity(cfg.steps),
        evals: Vec::new(),
        stopped_early: None,
    };

    let run_eval = |policy_ws: &WeightSet,
                    anchor_ws: &WeightSet,
                    step: usize,
                    log: &mut RunLog|
     -> Result<bool, TrainError> {
        let anchored = !matches!(cfg.anchor_mode, AnchorMode::None);
        let summary = evaluate_policy(
            arch,
            policy_ws,
            init,
            anchored.then_some(anchor_ws),
            reward,
            eval_prompts,
            cfg.eval_samples_per_prompt,
        )?;
        let point = EvalPoint {
            step,
            mean_reward: summary.mean_reward,
            reward_se: summary.reward_se,
            kl_to_sft: summary.kl_to_ref,
            kl_to_sft_se: summary.kl_to_ref_se,
            kl_to_anchor: summary.kl_to_anchor.unwrap_or(summary.kl_to_ref),
            kl_to_anchor_se: summary.kl_to_anchor_se.unwrap_or(summary.kl_to_ref_se),
            mean_length: summary.mean_length,
            grad_norm: log.steps.last().map_or(0.0, |s| s.grad_norm),
        };
        let ceiling_hit = point.kl_to_sft > cfg.kl_ceiling;
        log.evals.push(point);
        Ok(ceiling_hit)
    };

    let mut stopped = false;
    for step in 0..cfg.steps {
        if step % cfg.eval_interval == 0 && run_eval(&policy_ws, &anchor_ws, step, &mut log)? {
            log.stopped_early = Some(step);
            stopped = true;
            break;
        }

        let policy = PolicyNet::from_weights(arch, &policy_ws)?;
        let use_anchor_term = cfg.beta > 0.0 && !matches!(cfg.anchor_mode, AnchorMode::None);
        let anchor_net = if use_anchor_term {
            Some(PolicyNet::from_weights(arch, &anchor_ws)?)
        } else {
            None
        };

        // Sample the batch and score it.
        let bs = cfg.batch_size;
        let mut completions = Vec::with_capacity(bs);
        let mut raw_rewards = Vec::with_capacity(bs);
        let mut reg_rewards = Vec::with_capacity(bs);
        let mut anchor_gaps = Vec::with_capacity(bs);
        let mut prompt_ids = Vec::with_capacity(bs);
        for b in 0..bs {
            let item = step * bs + b;
            let prompt_id = order.index(item);
            let prompt = train_prompts.get(prompt_id);
            let mut rng = derive_rng(cfg.seed, "train-sample", item as u64);
            let completion = policy.sample(prompt, cfg.temperature, &mut rng)?;
            let raw = reward.score(prompt, &completion.tokens)?;
            let (gap, reg) = match &anchor_net {
                Some(anchor) => {
                    let (anchor_lp, _) = anchor.logprob(prompt, &completion.tokens)?;
                    let gap = completion.logprob - anchor_lp;
                    (
                        gap,
                        regularized_reward(raw, completion.logprob, anchor_lp, cfg.beta),
                    )
                }
                None => (0.0, raw),
            };
            prompt_ids.push(prompt_id);
            completions.push(completion);
            raw_rewards.push(raw);
            reg_rewards.push(reg);
            anchor_gaps.push(gap);
        }

        let baseline = match cfg.baseline {
            BaselineMode::BatchMean => mean(&reg_rewards),
            BaselineMode::None => 0.0,
        };

        // Policy gradient: mean over the batch of advantage * grad logprob.
        let mut grad = GradSet::zeros_like(&policy_ws);
        for b in 0..bs {
            let advantage = reg_rewards[b] - baseline;
            if advantage == 0.0 {
                continue;
            }
            let prompt = train_prompts.get(prompt_ids[b]);
            let (_, g) = policy.grad_logprob(prompt, &completions[b].tokens)?;
            grad.add_scaled(&g, advantage / bs as f64);
        }

        let grad_norm = grad.global_norm();
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                quantity: "gradient norm",
            });
        }
        if reg_rewards.iter().any(|r| !r.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                quantity: "regularized reward",
            });
        }

        let warm = if cfg.warmup_steps > 0 {
            ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        policy_ws = adam.step(&policy_ws, &grad, cfg.lr * warm, cfg);

        if matches!(cfg.anchor_mode, AnchorMode::Ema) {
            anchor_ws = ema_update(&anchor_ws, &policy_ws, cfg.mu)?;
        }

        log.steps.push(StepStat {
            step,
            mean_raw_reward: mean(&raw_rewards),
            mean_reg_reward: mean(&reg_rewards),
            mean_length: mean(
                &completions
                    .iter()
                    .map(|c| c.tokens.len() as f64)
                    .collect::<Vec<_>>(),
            ),
            mean_anchor_gap: mean(&anchor_gaps),
            grad_norm,
        });
    }

    // A zero-step run is the identity and leaves the log empty.
    if !stopped && cfg.steps > 0 {
        let _ = run_eval(&policy_ws, &anchor_ws, cfg.steps, &mut log)?;
    }

    Ok(TrainOutput {
        final_weights: policy_ws,
        final_anchor: anchor_ws,
        log,
    })
}
