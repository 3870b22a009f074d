//! The synthetic programmatic reward.
//!
//! A completion is scored as
//!
//! ```text
//! r(x, y) = unigram_coeff * mean(table[y_t])
//!         + pattern_bonus * count(target_pattern in y)
//!         + hack_coeff * len(y)
//!         - length_penalty_per_token * len(y)
//! ```
//!
//! The unigram table is a seeded standard Gaussian per token (0 for EOS so
//! terminating is reward-neutral), the pattern term pays for every
//! overlapping occurrence of a short target sequence, and the two linear
//! length terms are deliberate misspecifications: `hack_coeff` rewards sheer
//! length — the exploitable flaw — while the per-token penalty is the
//! mitigation countermeasure. The reward is a pure function of its inputs;
//! prompts are accepted for interface uniformity but do not affect the score.

use crate::policy::EOS_TOKEN;
use crate::rng::derive_rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("vocab must have at least 2 tokens, got {0}")]
    VocabTooSmall(usize),
    #[error("pattern token {token} out of range for vocab {vocab}")]
    PatternToken { token: u32, vocab: usize },
    #[error("target pattern must not contain EOS")]
    PatternContainsEos,
    #[error("target pattern must not be empty")]
    PatternEmpty,
    #[error("scored token {token} out of range for vocab {vocab}")]
    BadToken { token: u32, vocab: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    /// Seeds the unigram table (and the derived pattern when none is given).
    #[serde(default = "default_reward_seed")]
    pub seed: u64,
    #[serde(default = "default_unigram_coeff")]
    pub unigram_coeff: f64,
    #[serde(default = "default_pattern_bonus")]
    pub pattern_bonus: f64,
    /// Explicit target pattern; `None` derives the two highest-value
    /// non-EOS tokens from the table.
    #[serde(default)]
    pub target_pattern: Option<Vec<u32>>,
    /// Reward per emitted token — the hackable component.
    #[serde(default = "default_hack_coeff")]
    pub hack_coeff: f64,
    /// Penalty per emitted token — the countermeasure. Disabled at 0.
    #[serde(default)]
    pub length_penalty_per_token: f64,
}

// The default coefficients are calibrated jointly with the trainer defaults
// (beta 0.1, mu 0.01, lr 1e-3, T 2000, ceiling 50) so the default task is
// informative out of the box: the EMA-anchored run traverses to KL ~30 over
// the full 2000 steps, the fixed-anchor run saturates near KL 5, and beta=0
// blows through the ceiling within a few hundred steps. Since the optimizer
// is scale-invariant, what these values really set is the reward:beta ratio.
fn default_reward_seed() -> u64 {
    7
}
fn default_unigram_coeff() -> f64 {
    0.35
}
fn default_pattern_bonus() -> f64 {
    0.12
}
fn default_hack_coeff() -> f64 {
    0.015
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            seed: default_reward_seed(),
            unigram_coeff: default_unigram_coeff(),
            pattern_bonus: default_pattern_bonus(),
            target_pattern: None,
            hack_coeff: default_hack_coeff(),
            length_penalty_per_token: 0.0,
        }
    }
}

/// The realized reward function for one vocabulary size.
#[derive(Debug, Clone)]
pub struct RewardModel {
    spec: RewardSpec,
    vocab: usize,
    table: Vec<f64>,
    pattern: Vec<u32>,
}

fn gaussian(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl RewardModel {
    pub fn new(spec: &RewardSpec, vocab: usize) -> Result<Self, RewardError> {
        if vocab < 2 {
            return Err(RewardError::VocabTooSmall(vocab));
        }
        let mut rng = derive_rng(spec.seed, "reward-table", 0);
        let mut table: Vec<f64> = (0..vocab).map(|_| gaussian(&mut rng)).collect();
        table[EOS_TOKEN as usize] = 0.0;

        let pattern = match &spec.target_pattern {
            Some(p) => {
                if p.is_empty() {
                    return Err(RewardError::PatternEmpty);
                }
                for &t in p {
                    if t as usize >= vocab {
                        return Err(RewardError::PatternToken { token: t, vocab });
                    }
                    if t == EOS_TOKEN {
                        return Err(RewardError::PatternContainsEos);
                    }
                }
                p.clone()
            }
            None => {
                // The two best non-EOS tokens, best first. Ties cannot occur
                // with a continuous table.
                let mut idx: Vec<u32> = (0..vocab as u32).filter(|&t| t != EOS_TOKEN).collect();
                idx.sort_by(|&a, &b| {
                    table[b as usize]
                        .partial_cmp(&table[a as usize])
                        .expect("finite table")
                });
                idx.truncate(2);
                idx
            }
        };
        Ok(RewardModel {
            spec: spec.clone(),
            vocab,
            table,
            pattern,
        })
    }

    pub fn spec(&self) -> &RewardSpec {
        &self.spec
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn pattern(&self) -> &[u32] {
        &self.pattern
    }

    /// Overlapping occurrences of the target pattern.
    fn pattern_count(&self, tokens: &[u32]) -> usize {
        if tokens.len() < self.pattern.len() {
            return 0;
        }
        tokens
            .windows(self.pattern.len())
            .filter(|w| *w == self.pattern.as_slice())
            .count()
    }

    /// Score one completion. Deterministic; unaffected by the prompt.
    pub fn score(&self, _prompt: &[u32], completion: &[u32]) -> Result<f64, RewardError> {
        for &t in completion {
            if t as usize >= self.vocab {
                return Err(RewardError::BadToken {
                    token: t,
                    vocab: self.vocab,
                });
            }
        }
        let len = completion.len() as f64;
        let unigram = if completion.is_empty() {
            0.0
        } else {
            completion
                .iter()
                .map(|&t| self.table[t as usize])
                .sum::<f64>()
                / len
        };
        Ok(self.spec.unigram_coeff * unigram
            + self.spec.pattern_bonus * self.pattern_count(completion) as f64
            + self.spec.hack_coeff * len
            - self.spec.length_penalty_per_token * len)
    }
}
