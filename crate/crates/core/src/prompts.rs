//! Prompt sets and the synthetic supervised corpus.
//!
//! Prompts are fixed-length strings of non-EOS tokens. The SFT corpus pairs
//! random prompts with completions drawn from class-conditional token
//! distributions (the class is `prompt[0] mod n_classes`), geometric lengths
//! from a per-step stop probability, and an occasional injected 3-token
//! motif. Supervised training on this corpus gives the policy conditional
//! structure worth preserving — and a length distribution short enough that
//! reward-driven lengthening is visible.

use crate::policy::{ArchConfig, PolicyError, EOS_TOKEN};
use crate::rng::derive_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const N_CLASSES: usize = 4;
/// Per-step probability that a corpus completion stops (emits EOS).
pub const STOP_PROB: f64 = 0.15;
/// Probability that an example carries the injected motif.
pub const MOTIF_PROB: f64 = 0.3;

/// A validated, ordered collection of equal-length prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    prompts: Vec<Vec<u32>>,
}

impl PromptSet {
    pub fn new(arch: &ArchConfig, prompts: Vec<Vec<u32>>) -> Result<Self, PolicyError> {
        for p in &prompts {
            if p.is_empty() || p.len() > arch.max_prompt_len {
                return Err(PolicyError::BadPromptLen {
                    got: p.len(),
                    max: arch.max_prompt_len,
                });
            }
            for &t in p {
                if t as usize >= arch.vocab_size {
                    return Err(PolicyError::BadToken {
                        token: t,
                        vocab: arch.vocab_size,
                    });
                }
            }
        }
        Ok(PromptSet { prompts })
    }

    /// `n` random prompts of maximal length over non-EOS tokens. The label
    /// keeps train and eval sets on disjoint streams of the same seed.
    pub fn generate(arch: &ArchConfig, n: usize, seed: u64, label: &str) -> Self {
        let mut rng = derive_rng(seed, label, 0);
        let prompts = (0..n)
            .map(|_| {
                (0..arch.max_prompt_len)
                    .map(|_| 1 + rng.gen_range(0..arch.vocab_size as u32 - 1))
                    .collect()
            })
            .collect();
        PromptSet { prompts }
    }

    pub fn prompts(&self) -> &[Vec<u32>] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn get(&self, i: usize) -> &[u32] {
        &self.prompts[i % self.prompts.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt: Vec<u32>,
    pub completion: Vec<u32>,
}

/// The 3-token motif injected into corpus completions, derived from the
/// corpus seed over non-EOS tokens.
pub fn corpus_motif(arch: &ArchConfig, seed: u64) -> Vec<u32> {
    let mut rng = derive_rng(seed, "corpus-motif", 0);
    (0..3)
        .map(|_| 1 + rng.gen_range(0..arch.vocab_size as u32 - 1))
        .collect()
}

/// Synthesize `n` supervised examples.
pub fn synth_corpus(arch: &ArchConfig, n: usize, seed: u64) -> Vec<SftExample> {
    let vocab = arch.vocab_size;
    let motif = corpus_motif(arch, seed);
    // One token-preference permutation per class: class c draws token
    // perm[c][j] with probability proportional to 1/(j+1) (Zipf-ish).
    let mut class_perms: Vec<Vec<u32>> = Vec::with_capacity(N_CLASSES);
    for c in 0..N_CLASSES {
        let mut perm: Vec<u32> = (1..vocab as u32).collect();
        let mut rng = derive_rng(seed, "corpus-class-perm", c as u64);
        // Fisher-Yates.
        for i in (1..perm.len()).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        class_perms.push(perm);
    }
    let zipf_cdf: Vec<f64> = {
        let weights: Vec<f64> = (0..vocab - 1).map(|j| 1.0 / (j as f64 + 1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect()
    };
    let draw_class_token = |class: usize, u: f64| -> u32 {
        let j = zipf_cdf.partition_point(|&c| c <= u);
        class_perms[class][j.min(vocab - 2)]
    };

    let mut rng = derive_rng(seed, "corpus", 0);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let prompt: Vec<u32> = (0..arch.max_prompt_len)
            .map(|_| 1 + rng.gen_range(0..vocab as u32 - 1))
            .collect();
        let class = prompt[0] as usize % N_CLASSES;
        let mut completion = Vec::new();
        for _ in 0..arch.max_completion_len {
            if rng.gen::<f64>() < STOP_PROB {
                completion.push(EOS_TOKEN);
                break;
            }
            let u: f64 = rng.gen();
            completion.push(draw_class_token(class, u));
        }
        if completion.is_empty() {
            completion.push(EOS_TOKEN);
        }
        // Motif injection over non-EOS positions only.
        let body_len = if completion.last() == Some(&EOS_TOKEN) {
            completion.len() - 1
        } else {
            completion.len()
        };
        if body_len >= motif.len() && rng.gen::<f64>() < MOTIF_PROB {
            let start = rng.gen_range(0..=body_len - motif.len());
            completion[start..start + motif.len()].copy_from_slice(&motif);
        }
        out.push(SftExample { prompt, completion });
    }
    out
}
