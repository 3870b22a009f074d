//! Probes for merge geometry, behavioral diversity, and length bias.
//!
//! Everything here evaluates immutable inputs on seeded draws, so every
//! table reproduces bit-identically. The sampling streams are keyed by
//! (prompt, sample) only — policies under comparison always see the same
//! random numbers.

use crate::merge::{lerp, slerp, slerp_full_weights, task_vector, MergeError};
use crate::policy::{ArchConfig, PolicyNet};
use crate::prompts::PromptSet;
use crate::reward::RewardModel;
use crate::rng::derive_rng;
use crate::stats::{bigram_set, jaccard, mean, spearman};
use crate::tensor::WeightSet;
use crate::trainer::{evaluate_policy, kl_estimate, EvalPoint, TrainError};
use serde::{Deserialize, Serialize};

/// Whole-model geometry of the two merge operators at one lambda.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeGeometryRow {
    pub lambda: f64,
    /// Task-vector norm of the linear merge.
    pub lerp_norm: f64,
    /// Task-vector norm of the spherical merge.
    pub slerp_norm: f64,
    /// Closed-form LERP norm for equal-norm task vectors at the observed
    /// angle, using the mean endpoint norm.
    pub predicted_lerp_norm: f64,
    /// L2 distance between the two merged models.
    pub slerp_lerp_distance: f64,
    /// Distance between slerp on task vectors and slerp on raw weights.
    pub full_weight_slerp_distance: f64,
}

/// Compare LERP and SLERP across a lambda grid, at whole-model granularity.
pub fn merge_geometry(
    init: &WeightSet,
    a: &WeightSet,
    b: &WeightSet,
    grid: &[f64],
) -> Result<Vec<MergeGeometryRow>, MergeError> {
    let ta = task_vector(init, a)?;
    let tb = task_vector(init, b)?;
    let na = ta.l2_norm();
    let nb = tb.l2_norm();
    let dot: f64 = ta
        .groups
        .iter()
        .zip(&tb.groups)
        .map(|(x, y)| crate::tensor::dot_f64(&x.data, &y.data))
        .sum();
    let cos = if na > 0.0 && nb > 0.0 {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    } else {
        1.0
    };
    let l_bar = 0.5 * (na + nb);

    let mut rows = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let le = lerp(a, b, lambda)?;
        let sl = slerp(init, a, b, lambda)?;
        let fw = slerp_full_weights(a, b, lambda)?;
        rows.push(MergeGeometryRow {
            lambda,
            lerp_norm: task_vector(init, &le)?.l2_norm(),
            slerp_norm: task_vector(init, &sl)?.l2_norm(),
            predicted_lerp_norm: l_bar
                * (1.0 - 2.0 * (1.0 - cos) * (lambda - lambda * lambda)).sqrt(),
            slerp_lerp_distance: sl.l2_distance(&le)?,
            full_weight_slerp_distance: sl.l2_distance(&fw)?,
        });
    }
    Ok(rows)
}

/// One evaluated (reward, KL) point of a merge method at one lambda.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeComparisonRow {
    pub lambda: f64,
    /// One of "slerp", "lerp", "slerp_full_weights".
    pub method: &'static str,
    pub mean_reward: f64,
    pub reward_se: f64,
    pub kl_to_init: f64,
    pub kl_to_init_se: f64,
}

/// Evaluate all three merge methods across a lambda grid: reward and KL to
/// `init` on shared draws. Rows come back grouped by lambda in grid order,
/// methods in the fixed order slerp, lerp, slerp-on-raw-weights.
#[allow(clippy::too_many_arguments)]
pub fn merge_comparison(
    arch: &ArchConfig,
    init: &WeightSet,
    a: &WeightSet,
    b: &WeightSet,
    lambda_grid: &[f64],
    reward: &RewardModel,
    prompts: &PromptSet,
    samples_per_prompt: usize,
) -> Result<Vec<MergeComparisonRow>, TrainError> {
    let mut rows = Vec::with_capacity(lambda_grid.len() * 3);
    for &lambda in lambda_grid {
        let merges: [(&'static str, WeightSet); 3] = [
            ("slerp", slerp(init, a, b, lambda)?),
            ("lerp", lerp(a, b, lambda)?),
            ("slerp_full_weights", slerp_full_weights(a, b, lambda)?),
        ];
        for (method, ws) in merges {
            let s = evaluate_policy(arch, &ws, init, None, reward, prompts, samples_per_prompt)?;
            rows.push(MergeComparisonRow {
                lambda,
                method,
                mean_reward: s.mean_reward,
                reward_se: s.reward_se,
                kl_to_init: s.kl_to_ref,
                kl_to_init_se: s.kl_to_ref_se,
            });
        }
    }
    Ok(rows)
}

/// One policy's behavioral self-similarity alongside its divergence from
/// the reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversityRow {
    pub label: String,
    /// Mean pairwise bigram-Jaccard among the policy's own samples, in
    /// [0, 1]; 1 means every sample of a prompt is token-identical.
    pub self_similarity: f64,
    pub kl_to_sft: f64,
    pub kl_to_sft_se: f64,
}

/// Self-similarity vs KL across a set of policies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversityReport {
    pub rows: Vec<DiversityRow>,
    /// Rank correlation between KL and self-similarity across the rows;
    /// positive means policies further from the reference repeat themselves
    /// more.
    pub spearman_kl_similarity: f64,
}

/// For each policy: draw `samples_per_prompt` completions per prompt at
/// `temperature` (0 = greedy) and average the pairwise bigram-Jaccard over
/// all sample pairs of a prompt, then over prompts. KL-to-reference comes
/// from the usual sequence estimator. Draws are keyed by (prompt, sample)
/// only, so every policy in the table sees the same randomness.
#[allow(clippy::too_many_arguments)]
pub fn diversity_probe(
    arch: &ArchConfig,
    policies: &[(String, &WeightSet)],
    reference: &WeightSet,
    prompts: &PromptSet,
    samples_per_prompt: usize,
    temperature: f64,
    seed: u64,
) -> Result<DiversityReport, TrainError> {
    if policies.is_empty() {
        return Err(TrainError::BadConfig(
            "diversity probe needs at least one policy".into(),
        ));
    }
    if samples_per_prompt < 2 {
        return Err(TrainError::BadConfig(
            "diversity probe needs at least two samples per prompt".into(),
        ));
    }
    if prompts.is_empty() {
        return Err(TrainError::EmptyPromptSet);
    }
    let mut rows = Vec::with_capacity(policies.len());
    for (label, ws) in policies {
        let net = PolicyNet::from_weights(arch, ws)?;
        let mut prompt_sims = Vec::with_capacity(prompts.len());
        for (pi, prompt) in prompts.prompts().iter().enumerate() {
            let mut grams: Vec<Vec<(u32, u32)>> = Vec::with_capacity(samples_per_prompt);
            for s in 0..samples_per_prompt {
                let mut rng = derive_rng(seed, "diversity-sample", ((pi as u64) << 32) | s as u64);
                let completion = net.sample(prompt, temperature, &mut rng)?;
                grams.push(bigram_set(&completion.tokens));
            }
            let mut sims = Vec::new();
            for i in 0..grams.len() {
                for j in i + 1..grams.len() {
                    sims.push(jaccard(&grams[i], &grams[j]));
                }
            }
            prompt_sims.push(mean(&sims));
        }
        let (kl, kl_se) = kl_estimate(arch, ws, reference, prompts, samples_per_prompt, seed)?;
        rows.push(DiversityRow {
            label: label.clone(),
            self_similarity: mean(&prompt_sims),
            kl_to_sft: kl,
            kl_to_sft_se: kl_se,
        });
    }
    let kls: Vec<f64> = rows.iter().map(|r| r.kl_to_sft).collect();
    let sims: Vec<f64> = rows.iter().map(|r| r.self_similarity).collect();
    Ok(DiversityReport {
        spearman_kl_similarity: spearman(&kls, &sims),
        rows,
    })
}

/// One (KL, mean length) observation: either an evaluation point of a run
/// (with its step) or a directly evaluated policy (step absent).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthRow {
    pub label: String,
    pub step: Option<usize>,
    pub kl_to_sft: f64,
    pub mean_length: f64,
}

/// Length-vs-KL table with per-series rank correlations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthBiasReport {
    pub rows: Vec<LengthRow>,
    /// `(label, spearman(KL, length))` for every series with at least three
    /// points.
    pub spearman_by_label: Vec<(String, f64)>,
}

/// Flatten evaluation series into (KL, length) rows; one series per label.
/// Accepts the `evals` of any run log.
pub fn length_report(series: &[(String, &[EvalPoint])]) -> LengthBiasReport {
    let mut rows = Vec::new();
    let mut spearman_by_label = Vec::new();
    for (label, evals) in series {
        let mut kls = Vec::with_capacity(evals.len());
        let mut lens = Vec::with_capacity(evals.len());
        for e in *evals {
            rows.push(LengthRow {
                label: label.clone(),
                step: Some(e.step),
                kl_to_sft: e.kl_to_sft,
                mean_length: e.mean_length,
            });
            kls.push(e.kl_to_sft);
            lens.push(e.mean_length);
        }
        if kls.len() >= 3 {
            spearman_by_label.push((label.clone(), spearman(&kls, &lens)));
        }
    }
    LengthBiasReport {
        rows,
        spearman_by_label,
    }
}

/// Evaluate a single policy into one length row (step absent) — for
/// baseline and merged-policy entries alongside run series.
pub fn length_row_for_policy(
    label: &str,
    arch: &ArchConfig,
    ws: &WeightSet,
    reference: &WeightSet,
    reward: &RewardModel,
    prompts: &PromptSet,
    samples_per_prompt: usize,
) -> Result<LengthRow, TrainError> {
    let s = evaluate_policy(
        arch,
        ws,
        reference,
        None,
        reward,
        prompts,
        samples_per_prompt,
    )?;
    Ok(LengthRow {
        label: label.to_string(),
        step: None,
        kl_to_sft: s.kl_to_ref,
        mean_length: s.mean_length,
    })
}
