//! Acceptance checklist: ten criteria, one test each, ordered `c01`..`c10`.
//!
//! Each test prints a single `[CN] PASS <evidence>` line on success (visible
//! with `--nocapture`) and panics with a `[CN] FAIL <evidence>` message
//! otherwise, so the libtest result list doubles as the pass/fail report.
//!
//! Heavy artifacts — the SFT policy, the T=2000 training runs, the merge
//! pools and orchestrated runs — are built once in process-wide fixtures and
//! shared across criteria. The full suite is CPU-bound and takes tens of
//! minutes on one desktop core; the exact-math criteria (c01, c02, c10)
//! finish in seconds:
//!
//! ```text
//! cargo test -p warplab-cli --test acceptance -- --test-threads=1 --nocapture
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use rand::Rng;
use warplab_core::checkpoint;
use warplab_core::merge::{lerp, slerp, slerpm, task_vector};
use warplab_core::orchestrator::{
    make_sft, pareto_sweep, warp, SftConfig, SweepPoint, WarpConfig, WarpOutput,
};
use warplab_core::policy::{init_policy, ArchConfig, PolicyNet, EOS_TOKEN};
use warplab_core::prompts::{synth_corpus, PromptSet};
use warplab_core::reward::{RewardModel, RewardSpec};
use warplab_core::rng::{derive_rng, derive_seed};
use warplab_core::stats::{categorical_kl_from_logs, spearman};
use warplab_core::tensor::{TensorGroup, WeightSet};
use warplab_core::trainer::{
    evaluate_policy, kl_estimate, train_run, AnchorMode, EvalSummary, TrainConfig, TrainOutput,
    CRN_EVAL_SEED,
};

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

/// Seed resolution used by the command-line front end: derived streams are
/// masked to 63 bits so they survive a TOML round-trip. Reproducing it here
/// keeps the suite's runs identical to what `warplab train --seed N` does.
const MASK: u64 = i64::MAX as u64;
const DATA_SEED: u64 = 101;

fn masked(master: u64, label: &str) -> u64 {
    derive_seed(master, label, 0) & MASK
}

struct Lab {
    arch: ArchConfig,
    reward: RewardModel,
    sft: WeightSet,
    train_prompts: PromptSet,
    eval_prompts: PromptSet,
}

static LAB: OnceLock<Lab> = OnceLock::new();

fn lab() -> &'static Lab {
    LAB.get_or_init(|| {
        let arch = ArchConfig::default();
        let reward = RewardModel::new(&RewardSpec::default(), arch.vocab_size).expect("reward");
        let corpus = synth_corpus(&arch, 256 + 64, DATA_SEED);
        let sft_cfg = SftConfig {
            seed: masked(DATA_SEED, "sft"),
            ..SftConfig::default()
        };
        let sft = make_sft(&arch, &corpus[..256], &sft_cfg)
            .expect("sft")
            .weights;
        Lab {
            train_prompts: PromptSet::generate(&arch, 16, DATA_SEED, "train-prompts"),
            eval_prompts: PromptSet::generate(&arch, 8, DATA_SEED, "eval-prompts"),
            arch,
            reward,
            sft,
        }
    })
}

/// The default task's training configuration for CLI master seed `master`.
fn train_cfg(master: u64) -> TrainConfig {
    TrainConfig {
        seed: masked(master, "train"),
        prompt_order_seed: masked(master, "train-order"),
        ..TrainConfig::default()
    }
}

struct AblationTriple {
    ema: TrainOutput,
    fixed: TrainOutput,
    free: TrainOutput,
}

/// One EMA / fixed-anchor / unregularized triple per master seed 1..=3,
/// each a full T=2000 run on the default task.
static ABLATIONS: OnceLock<Vec<AblationTriple>> = OnceLock::new();

fn ablations() -> &'static [AblationTriple] {
    ABLATIONS.get_or_init(|| {
        let lab = lab();
        (1u64..=3)
            .map(|master| {
                let base = train_cfg(master);
                let run = |cfg: &TrainConfig| {
                    train_run(
                        &lab.arch,
                        &lab.sft,
                        &lab.reward,
                        &lab.train_prompts,
                        &lab.eval_prompts,
                        cfg,
                    )
                    .expect("training run")
                };
                let fixed = TrainConfig {
                    anchor_mode: AnchorMode::Fixed,
                    ..base.clone()
                };
                let free = TrainConfig {
                    beta: 0.0,
                    anchor_mode: AnchorMode::None,
                    ..base.clone()
                };
                AblationTriple {
                    ema: run(&base),
                    fixed: run(&fixed),
                    free: run(&free),
                }
            })
            .collect()
    })
}

/// Run pairs for the merge-convexity criterion: per master seed 21..=23, one
/// orchestrated iteration of two runs that share a sampling seed and differ
/// only in prompt order — the same diversity mechanism the merge stage is
/// built for. beta = 0.3 holds each run near its regularized optimum, where
/// the reward landscape is saturated rather than still climbing in KL, which
/// is the regime the merge claims are about. The iteration's merged model is
/// exactly slerp at lambda = 1/2 of the two finals.
static MERGE_PAIRS: OnceLock<Vec<WarpOutput>> = OnceLock::new();

fn merge_pairs() -> &'static [WarpOutput] {
    MERGE_PAIRS.get_or_init(|| {
        let lab = lab();
        (21u64..=23)
            .map(|master| {
                let base = TrainConfig {
                    beta: 0.3,
                    ..train_cfg(master)
                };
                let wcfg = WarpConfig {
                    iterations: 1,
                    runs_per_iteration: 2,
                    steps_per_iteration: vec![800],
                    sweep_samples_per_prompt: EVAL_SAMPLES,
                    seed: masked(master, "warp"),
                    ..WarpConfig::default()
                };
                warp(
                    &lab.arch,
                    &lab.sft,
                    &lab.reward,
                    &lab.train_prompts,
                    &lab.eval_prompts,
                    None,
                    &base,
                    &wcfg,
                )
                .expect("merge pair")
            })
            .collect()
    })
}

const EVAL_SAMPLES: usize = 64;

fn eval_vs_sft(ws: &WeightSet) -> EvalSummary {
    let lab = lab();
    evaluate_policy(
        &lab.arch,
        ws,
        &lab.sft,
        None,
        &lab.reward,
        &lab.eval_prompts,
        EVAL_SAMPLES,
    )
    .expect("evaluation")
}

fn default_eta_grid() -> Vec<f64> {
    vec![0.0, 0.1, 0.3, 0.5, 0.8, 1.0]
}

fn sweep_front(merged: &WeightSet) -> Vec<SweepPoint> {
    let lab = lab();
    pareto_sweep(
        &lab.arch,
        &lab.sft,
        merged,
        &default_eta_grid(),
        &lab.reward,
        &lab.eval_prompts,
        EVAL_SAMPLES,
        None,
    )
    .expect("sweep")
}

/// Orchestrated runs for the iteration criterion: two iterations of two runs
/// each with a decreasing step schedule (800 then 400), per master seed 1..=3.
/// The first iteration gets the larger budget so its merge carries most of the
/// reward signal; the short second iteration then climbs from the interpolated
/// handoff instead of re-deriving (and overshooting past) the same ascent,
/// which keeps both fronts inside the reward landscape where matched-KL
/// comparisons are meaningful.
static WARPS: OnceLock<Vec<WarpOutput>> = OnceLock::new();

const WARP_STEPS: [usize; 2] = [800, 400];

fn warps() -> &'static [WarpOutput] {
    WARPS.get_or_init(|| {
        let lab = lab();
        (1u64..=3)
            .map(|master| {
                let wcfg = WarpConfig {
                    iterations: 2,
                    runs_per_iteration: 2,
                    steps_per_iteration: WARP_STEPS.to_vec(),
                    sweep_samples_per_prompt: EVAL_SAMPLES,
                    seed: masked(master, "warp"),
                    ..WarpConfig::default()
                };
                warp(
                    &lab.arch,
                    &lab.sft,
                    &lab.reward,
                    &lab.train_prompts,
                    &lab.eval_prompts,
                    None,
                    &train_cfg(master),
                    &wcfg,
                )
                .expect("orchestrated run")
            })
            .collect()
    })
}

// ---------------------------------------------------------------------------
// Front helpers
// ---------------------------------------------------------------------------

/// Running-max staircase front over (KL, reward) points, queried as a step
/// function: the best reward seen at or below `kl`. Returns None below the
/// first point (no extrapolation).
fn staircase_at(points: &[(f64, f64)], kl: f64) -> Option<f64> {
    let mut sorted: Vec<(f64, f64)> = points.to_vec();
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut best: Option<f64> = None;
    for (k, r) in sorted {
        if k <= kl {
            best = Some(best.map_or(r, |b: f64| b.max(r)));
        } else {
            break;
        }
    }
    best
}

/// Piecewise-linear interpolation along the running-max staircase of a sweep,
/// clamped at both ends; used for matched-KL front comparisons.
fn front_at(points: &[(f64, f64)], kl: f64) -> f64 {
    let mut sorted: Vec<(f64, f64)> = points.to_vec();
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut best = f64::NEG_INFINITY;
    let stair: Vec<(f64, f64)> = sorted
        .into_iter()
        .map(|(k, r)| {
            best = best.max(r);
            (k, best)
        })
        .collect();
    if kl <= stair[0].0 {
        return stair[0].1;
    }
    for w in stair.windows(2) {
        let ((k0, r0), (k1, r1)) = (w[0], w[1]);
        if k0 <= kl && kl <= k1 {
            if k1 > k0 {
                return r0 + (r1 - r0) * (kl - k0) / (k1 - k0);
            }
            return r0.max(r1);
        }
    }
    stair.last().expect("nonempty front").1
}

fn kl_reward(points: &[SweepPoint]) -> Vec<(f64, f64)> {
    points
        .iter()
        .map(|p| (p.kl_to_sft, p.mean_reward))
        .collect()
}

/// Fraction of a 20-point matched-KL grid (spanning the overlap of the two
/// fronts) where `upper` weakly dominates `lower`, i.e. reaches at least the
/// same reward at that KL. Ties count: both fronts are anchored at the same
/// eta = 0 point (the reference policy itself, KL = 0), where the families
/// are definitionally the same policy.
fn dominance(upper: &[(f64, f64)], lower: &[(f64, f64)]) -> (usize, usize) {
    let span = |pts: &[(f64, f64)]| {
        let lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (lo_u, hi_u) = span(upper);
    let (lo_l, hi_l) = span(lower);
    let (lo, hi) = (lo_u.max(lo_l), hi_u.min(hi_l));
    assert!(hi > lo, "fronts share no KL overlap: [{lo}, {hi}]");
    let n = 20usize;
    let wins = (0..n)
        .filter(|i| {
            let kl = lo + (hi - lo) * *i as f64 / (n - 1) as f64;
            front_at(upper, kl) >= front_at(lower, kl)
        })
        .count();
    (wins, n)
}

// ---------------------------------------------------------------------------
// c01: merging lemma suite
// ---------------------------------------------------------------------------

/// Small fixed schema for the lemma trials.
fn lemma_schema() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("w_a", vec![6, 5]),
        ("w_b", vec![17]),
        ("w_c", vec![2, 3, 4]),
    ]
}

fn random_lemma_ws(trial: u64, stream: &str) -> WeightSet {
    let mut rng = derive_rng(0xAC_CE_97, stream, trial);
    let groups = lemma_schema()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            TensorGroup::new(name, shape, data)
        })
        .collect();
    WeightSet::new(groups).expect("valid weight set")
}

/// `init + scale-matched task vector`: rescales `raw`'s per-group task
/// vectors to the norms of `reference`'s, so SLERP's equal-norm hypothesis
/// holds exactly (up to the final f32 cast).
fn equalize_norms(init: &WeightSet, reference: &WeightSet, raw: &WeightSet) -> WeightSet {
    let tv_ref = task_vector(init, reference).expect("task vector");
    let tv_raw = task_vector(init, raw).expect("task vector");
    let groups = init
        .groups()
        .iter()
        .zip(&tv_ref.groups)
        .zip(&tv_raw.groups)
        .map(|((gi, gr), gw)| {
            let nr = gr.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nw = gw.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = nr / nw;
            let data = gi
                .data
                .iter()
                .zip(&gw.data)
                .map(|(&i, &d)| (f64::from(i) + scale * d) as f32)
                .collect();
            TensorGroup::new(gi.name.clone(), gi.shape.clone(), data)
        })
        .collect();
    WeightSet::new(groups).expect("valid weight set")
}

fn group_norms(init: &WeightSet, ws: &WeightSet) -> Vec<f64> {
    task_vector(init, ws)
        .expect("task vector")
        .groups
        .iter()
        .map(|g| g.data.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

#[test]
fn c01_lemma_suite() {
    const TAG: &str = "C1";
    let lambda_grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let trials = 128u64;

    // SLERP norm preservation on random equal-norm task vectors.
    let mut worst_slerp = 0.0f64;
    for t in 0..trials {
        let init = random_lemma_ws(t, "init");
        let a = random_lemma_ws(t, "a");
        let b = equalize_norms(&init, &a, &random_lemma_ws(t, "b"));
        let rho = group_norms(&init, &a);
        for &l in &lambda_grid {
            let merged = slerp(&init, &a, &b, l).expect("slerp");
            for (norm, r) in group_norms(&init, &merged).iter().zip(&rho) {
                let rel = (norm - r).abs() / r;
                worst_slerp = worst_slerp.max(rel);
                assert!(
                    rel <= 1e-5,
                    "[{TAG}] FAIL slerp norm drift {rel:.2e} at lambda {l} (trial {t})"
                );
            }
        }
    }

    // LERP norm closed form.
    let mut worst_lerp = 0.0f64;
    for t in 0..trials {
        let init = random_lemma_ws(t, "init");
        let a = random_lemma_ws(t, "a");
        let b = random_lemma_ws(t, "b");
        let tv_a = task_vector(&init, &a).expect("task vector");
        let tv_b = task_vector(&init, &b).expect("task vector");
        for &l in &lambda_grid {
            let merged = lerp(&a, &b, l).expect("lerp");
            let norms = group_norms(&init, &merged);
            for ((ga, gb), norm) in tv_a.groups.iter().zip(&tv_b.groups).zip(norms) {
                let na2 = ga.data.iter().map(|v| v * v).sum::<f64>();
                let nb2 = gb.data.iter().map(|v| v * v).sum::<f64>();
                let dot = ga
                    .data
                    .iter()
                    .zip(&gb.data)
                    .map(|(x, y)| x * y)
                    .sum::<f64>();
                let closed =
                    ((1.0 - l).powi(2) * na2 + l.powi(2) * nb2 + 2.0 * l * (1.0 - l) * dot).sqrt();
                let rel = (norm - closed).abs() / closed.max(1e-12);
                worst_lerp = worst_lerp.max(rel);
                assert!(
                    rel <= 1e-5,
                    "[{TAG}] FAIL lerp norm {norm} vs closed form {closed} (trial {t}, lambda {l})"
                );
            }
        }
    }

    // Endpoint identities and slerpm(M=2) == slerp(1/2), both bit-exact.
    let empty = BTreeMap::new();
    for t in 0..8u64 {
        let init = random_lemma_ws(t, "init");
        let a = random_lemma_ws(t, "a");
        let b = random_lemma_ws(t, "b");
        let bytes = |ws: &WeightSet| checkpoint::to_bytes(ws, None, &empty);
        assert!(
            bytes(&slerp(&init, &a, &b, 0.0).unwrap()) == bytes(&a),
            "[{TAG}] FAIL slerp lambda=0 is not the first endpoint (trial {t})"
        );
        assert!(
            bytes(&slerp(&init, &a, &b, 1.0).unwrap()) == bytes(&b),
            "[{TAG}] FAIL slerp lambda=1 is not the second endpoint (trial {t})"
        );
        let two = slerpm(&init, &[a.clone(), b.clone()]).unwrap();
        let half = slerp(&init, &a, &b, 0.5).unwrap();
        assert!(
            bytes(&two) == bytes(&half),
            "[{TAG}] FAIL slerpm over two models differs from slerp at 1/2 (trial {t})"
        );
    }

    // Mixture-KL convexity on explicit categoricals:
    // KL((1-l)p0 + l*p1 || q) <= (1-l)KL(p0||q) + l*KL(p1||q) + 1e-9.
    let mut worst_gap = f64::NEG_INFINITY;
    for t in 0..trials {
        let mut rng = derive_rng(0xAC_CE_97, "categorical", t);
        let mut simplex = || {
            let raw: Vec<f64> = (0..8)
                .map(|_| -(rng.gen_range(1e-9f64..1.0)).ln())
                .collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / z).collect::<Vec<f64>>()
        };
        let (p0, p1, q) = (simplex(), simplex(), simplex());
        let logs = |p: &[f64]| p.iter().map(|v| v.ln()).collect::<Vec<f64>>();
        let (lq,) = (logs(&q),);
        let kl0 = categorical_kl_from_logs(&logs(&p0), &lq);
        let kl1 = categorical_kl_from_logs(&logs(&p1), &lq);
        for &l in &lambda_grid {
            let mix: Vec<f64> = p0
                .iter()
                .zip(&p1)
                .map(|(x, y)| (1.0 - l) * x + l * y)
                .collect();
            let lhs = categorical_kl_from_logs(&logs(&mix), &lq);
            let rhs = (1.0 - l) * kl0 + l * kl1;
            worst_gap = worst_gap.max(lhs - rhs);
            assert!(
                lhs <= rhs + 1e-9,
                "[{TAG}] FAIL mixture KL {lhs} exceeds convex bound {rhs} (trial {t}, lambda {l})"
            );
        }
    }

    println!(
        "[{TAG}] PASS lemma suite: {trials} trials x 11 lambdas; worst slerp norm drift \
         {worst_slerp:.2e} (<=1e-5), worst lerp closed-form error {worst_lerp:.2e} (<=1e-5), \
         endpoint + slerpm(M=2) identities bit-exact, worst mixture-KL convexity gap \
         {worst_gap:.2e} (<=1e-9)"
    );
}

// ---------------------------------------------------------------------------
// c02: numerical-kernel oracles
// ---------------------------------------------------------------------------

fn logprob_of(arch: &ArchConfig, ws: &WeightSet, prompt: &[u32], completion: &[u32]) -> f64 {
    let net = PolicyNet::from_weights(arch, ws).expect("valid weights");
    net.logprob(prompt, completion).expect("valid sequence").0
}

#[test]
fn c02_kernel_oracles() {
    const TAG: &str = "C2";

    // Analytic gradient vs central finite differences, every parameter of
    // every group, on a two-block two-head model.
    let arch = ArchConfig {
        vocab_size: 6,
        embed_dim: 8,
        n_blocks: 2,
        n_heads: 2,
        mlp_hidden: 16,
        max_prompt_len: 2,
        max_completion_len: 4,
        ln_eps: 1e-5,
    };
    let ws = init_policy(&arch, 20).expect("init");
    let prompt = vec![3u32, 4];
    let completions = [vec![1u32, 5, 2, 1], vec![2u32, 1, EOS_TOKEN]];
    let step = 1e-4;
    let mut n_params = 0usize;
    let mut worst_rel = 0.0f64;
    for completion in &completions {
        let net = PolicyNet::from_weights(&arch, &ws).expect("net");
        let (_, grad) = net.grad_logprob(&prompt, completion).expect("grad");
        for (gi, group) in ws.groups().iter().enumerate() {
            for j in 0..group.data.len() {
                n_params += 1;
                let w = f64::from(group.data[j]);
                let up = (w + step) as f32;
                let dn = (w - step) as f32;
                let h = f64::from(up) - f64::from(dn);
                let perturbed = |v: f32| {
                    let mut groups: Vec<TensorGroup> = ws.groups().to_vec();
                    groups[gi].data[j] = v;
                    WeightSet::new(groups).expect("valid weights")
                };
                let fd = (logprob_of(&arch, &perturbed(up), &prompt, completion)
                    - logprob_of(&arch, &perturbed(dn), &prompt, completion))
                    / h;
                let analytic = grad.groups[gi][j];
                let err = (fd - analytic).abs();
                let scale = analytic.abs().max(fd.abs());
                worst_rel = worst_rel.max(err / scale.max(1e-5 / 1e-3));
                assert!(
                    err <= (1e-3 * scale).max(1e-5),
                    "[{TAG}] FAIL gradient mismatch in {}[{j}]: analytic {analytic:.8}, \
                     central difference {fd:.8}",
                    group.name
                );
            }
        }
    }

    // Per-step softmax normalization.
    let net = PolicyNet::from_weights(&arch, &ws).expect("net");
    let mut worst_norm = 0.0f64;
    for (p, c) in [
        (vec![1u32], vec![2u32, 3, 4, 5]),
        (vec![5u32, 2], vec![1u32, EOS_TOKEN]),
    ] {
        for dist in net.step_logdists(&p, &c).expect("dists") {
            let total: f64 = dist.iter().map(|lp| lp.exp()).sum();
            worst_norm = worst_norm.max((total - 1.0).abs());
            assert!(
                (total - 1.0).abs() <= 1e-6,
                "[{TAG}] FAIL softmax row sums to {total}"
            );
        }
    }

    // Exhaustive vocab=3 / len<=2 checks: EOS-terminated sequences form an
    // exact distribution, and the Monte Carlo KL estimator agrees with full
    // enumeration within 3 standard errors.
    let tiny = ArchConfig {
        vocab_size: 3,
        embed_dim: 4,
        n_blocks: 1,
        n_heads: 2,
        mlp_hidden: 8,
        max_prompt_len: 1,
        max_completion_len: 2,
        ln_eps: 1e-5,
    };
    let mut space = vec![vec![EOS_TOKEN]];
    for t1 in 1..3u32 {
        for t2 in 0..3u32 {
            space.push(vec![t1, t2]);
        }
    }
    let p_ws = init_policy(&tiny, 40).expect("init");
    let q_ws = init_policy(&tiny, 41).expect("init");
    let prompt = vec![1u32];
    let total: f64 = space
        .iter()
        .map(|c| logprob_of(&tiny, &p_ws, &prompt, c).exp())
        .sum();
    assert!(
        (total - 1.0).abs() <= 1e-9,
        "[{TAG}] FAIL enumerated sequence probabilities sum to {total}"
    );
    let exact: f64 = space
        .iter()
        .map(|c| {
            let lp = logprob_of(&tiny, &p_ws, &prompt, c);
            let lq = logprob_of(&tiny, &q_ws, &prompt, c);
            lp.exp() * (lp - lq)
        })
        .sum();
    let prompts = PromptSet::new(&tiny, vec![prompt]).expect("prompts");
    let (mc, se) = kl_estimate(&tiny, &p_ws, &q_ws, &prompts, 4000, 7).expect("kl");
    assert!(
        (mc - exact).abs() <= 3.0 * se,
        "[{TAG}] FAIL KL oracle: exact {exact:.6}, Monte Carlo {mc:.6} +- {se:.6}"
    );

    println!(
        "[{TAG}] PASS kernel oracles: {n_params} finite-difference comparisons (worst rel \
         {worst_rel:.2e} <= 1e-3), softmax normalization error {worst_norm:.2e} <= 1e-6, \
         sequence probabilities sum to 1 +- 1e-9, KL oracle exact {exact:.4} vs MC {mc:.4} \
         +- {se:.4} (within 3 se)"
    );
}

// ---------------------------------------------------------------------------
// c03: anchor ablation
// ---------------------------------------------------------------------------

#[test]
fn c03_anchor_ablation() {
    const TAG: &str = "C3";
    const KL_GATE: f64 = 5.0;
    let runs = ablations();

    let mut seeds_ok = 0usize;
    let mut detail = String::new();
    for (i, abl) in runs.iter().enumerate() {
        let fixed_pts: Vec<(f64, f64)> = abl
            .fixed
            .log
            .evals
            .iter()
            .map(|e| (e.kl_to_sft, e.mean_reward))
            .collect();
        let checked = abl
            .log_points_beyond(KL_GATE)
            .expect("EMA run reaches the KL gate");
        let violations: Vec<&(f64, f64)> = checked
            .iter()
            .filter(|(kl, r)| staircase_at(&fixed_pts, *kl).is_some_and(|f| *r < f))
            .collect();
        if violations.is_empty() {
            seeds_ok += 1;
        }
        let _ = write!(
            detail,
            " seed{}: {} checkpoints beyond KL {KL_GATE}, {} below the fixed-anchor front;",
            i + 1,
            checked.len(),
            violations.len()
        );
    }
    assert!(
        seeds_ok >= 2,
        "[{TAG}] FAIL EMA run beats the fixed-anchor front in only {seeds_ok}/3 seeds:{detail}"
    );

    // The unregularized run must trip the KL ceiling before matching the EMA
    // run's final reward anywhere at or below the EMA run's final KL.
    for (i, abl) in runs.iter().enumerate() {
        let last = abl.ema.log.evals.last().expect("eval points");
        assert!(
            abl.free.log.stopped_early.is_some(),
            "[{TAG}] FAIL beta=0 run (seed {}) never exceeded the KL ceiling",
            i + 1
        );
        let premature: Vec<&warplab_core::trainer::EvalPoint> = abl
            .free
            .log
            .evals
            .iter()
            .filter(|e| e.kl_to_sft <= last.kl_to_sft && e.mean_reward >= last.mean_reward)
            .collect();
        assert!(
            premature.is_empty(),
            "[{TAG}] FAIL beta=0 run (seed {}) reached reward {:.3} at KL {:.2} before \
             the ceiling, matching the EMA run's final ({:.3} at {:.2})",
            i + 1,
            premature[0].mean_reward,
            premature[0].kl_to_sft,
            last.mean_reward,
            last.kl_to_sft
        );
    }
    let stops: Vec<usize> = runs
        .iter()
        .map(|a| a.free.log.stopped_early.expect("checked above"))
        .collect();

    println!(
        "[{TAG}] PASS anchor ablation (T=2000, 3 seeds): EMA matches or beats the fixed-anchor \
         front at every checkpoint beyond KL {KL_GATE} in {seeds_ok}/3 seeds (need >=2);{detail} \
         beta=0 runs tripped the KL ceiling at steps {stops:?} without reaching the EMA final \
         reward at matched KL"
    );
}

impl AblationTriple {
    /// The EMA run's eval checkpoints beyond the KL gate, or None when the
    /// run never got there (which would make the comparison vacuous).
    fn log_points_beyond(&self, gate: f64) -> Option<Vec<(f64, f64)>> {
        let pts: Vec<(f64, f64)> = self
            .ema
            .log
            .evals
            .iter()
            .filter(|e| e.kl_to_sft > gate)
            .map(|e| (e.kl_to_sft, e.mean_reward))
            .collect();
        (!pts.is_empty()).then_some(pts)
    }
}

// ---------------------------------------------------------------------------
// c04: merge convexity
// ---------------------------------------------------------------------------

#[test]
fn c04_merge_convexity() {
    const TAG: &str = "C4";
    let lab = lab();
    let mut detail = String::new();
    for (i, out) in merge_pairs().iter().enumerate() {
        let iter = &out.iterations[0];
        let (a, b) = (&iter.runs[0].final_weights, &iter.runs[1].final_weights);
        let slerp_mid = slerp(&lab.sft, a, b, 0.5).expect("slerp");
        let lerp_mid = lerp(a, b, 0.5).expect("lerp");
        let empty = BTreeMap::new();
        assert!(
            checkpoint::to_bytes(&slerp_mid, None, &empty)
                == checkpoint::to_bytes(&iter.merged, None, &empty),
            "[{TAG}] FAIL pair {}: the iteration's merge is not slerp at 1/2",
            i + 1
        );
        let (ea, eb) = (eval_vs_sft(a), eval_vs_sft(b));
        let es = eval_vs_sft(&slerp_mid);
        let el = eval_vs_sft(&lerp_mid);

        let endpoint_mean = 0.5 * (ea.mean_reward + eb.mean_reward);
        let se_mean =
            (es.reward_se.powi(2) + 0.25 * ea.reward_se.powi(2) + 0.25 * eb.reward_se.powi(2))
                .sqrt();
        assert!(
            es.mean_reward >= endpoint_mean - 2.0 * se_mean,
            "[{TAG}] FAIL pair {}: slerp midpoint reward {:.4} below endpoint mean {:.4} - 2se \
             ({:.4})",
            i + 1,
            es.mean_reward,
            endpoint_mean,
            2.0 * se_mean
        );
        let se_lerp = (es.reward_se.powi(2) + el.reward_se.powi(2)).sqrt();
        assert!(
            es.mean_reward >= el.mean_reward - 2.0 * se_lerp,
            "[{TAG}] FAIL pair {}: slerp midpoint reward {:.4} below lerp midpoint {:.4} - 2se \
             ({:.4})",
            i + 1,
            es.mean_reward,
            el.mean_reward,
            2.0 * se_lerp
        );
        let _ = write!(
            detail,
            " pair{}: slerp {:.3} vs endpoints mean {:.3} / lerp {:.3};",
            i + 1,
            es.mean_reward,
            endpoint_mean,
            el.mean_reward
        );
    }
    println!(
        "[{TAG}] PASS merge convexity over 3 seed pairs: slerp(1/2) reward >= endpoint mean - 2se \
         and >= lerp(1/2) - 2se;{detail}"
    );
}

// ---------------------------------------------------------------------------
// c05: interpolation-to-init front
// ---------------------------------------------------------------------------

#[test]
fn c05_liti_front() {
    const TAG: &str = "C5";
    let mut detail = String::new();
    for (i, out) in warps().iter().enumerate() {
        let front = &out.iterations[0].sweep;
        let at = |eta: f64| {
            front
                .iter()
                .find(|p| (p.eta - eta).abs() < 1e-12)
                .unwrap_or_else(|| panic!("[{TAG}] missing eta {eta} in sweep"))
        };
        let (p0, p1) = (at(0.0), at(1.0));
        for eta in [0.1, 0.3, 0.5, 0.8] {
            let p = at(eta);
            let linear = p0.mean_reward + eta * (p1.mean_reward - p0.mean_reward);
            let se_r = (p.reward_se.powi(2)
                + ((1.0 - eta) * p0.reward_se).powi(2)
                + (eta * p1.reward_se).powi(2))
            .sqrt();
            assert!(
                p.mean_reward >= linear - 2.0 * se_r,
                "[{TAG}] FAIL seed {} eta {eta}: reward {:.4} below linear interpolation {:.4} \
                 - 2se ({:.4})",
                i + 1,
                p.mean_reward,
                linear,
                2.0 * se_r
            );
            let bound = eta * p1.kl_to_sft;
            let se_k = (p.kl_to_sft_se.powi(2) + (eta * p1.kl_to_sft_se).powi(2)).sqrt();
            assert!(
                p.kl_to_sft <= bound + 2.0 * se_k,
                "[{TAG}] FAIL seed {} eta {eta}: KL {:.3} above eta*KL(1) = {:.3} + 2se ({:.3})",
                i + 1,
                p.kl_to_sft,
                bound,
                2.0 * se_k
            );
        }
        let _ = write!(
            detail,
            " seed{}: KL(1) {:.1}, rewards {:.3}->{:.3};",
            i + 1,
            p1.kl_to_sft,
            p0.mean_reward,
            p1.mean_reward
        );
    }
    println!(
        "[{TAG}] PASS interpolation front over 3 seeds: every interior eta in {{0.1, 0.3, 0.5, \
         0.8}} has reward >= linear interpolation - 2se and KL <= eta*KL(1) + 2se;{detail}"
    );
}

// ---------------------------------------------------------------------------
// c06: scaling the number of merged runs
// ---------------------------------------------------------------------------

#[test]
fn c06_scaling_m() {
    const TAG: &str = "C6";
    let lab = lab();
    let wcfg = WarpConfig {
        iterations: 1,
        runs_per_iteration: 4,
        steps_per_iteration: vec![2000],
        sweep_samples_per_prompt: EVAL_SAMPLES,
        seed: masked(6, "warp"),
        ..WarpConfig::default()
    };
    let out = warp(
        &lab.arch,
        &lab.sft,
        &lab.reward,
        &lab.train_prompts,
        &lab.eval_prompts,
        None,
        &train_cfg(6),
        &wcfg,
    )
    .expect("M=4 orchestrated iteration");
    let iter = &out.iterations[0];
    let front4 = kl_reward(&iter.sweep);

    let finals: Vec<WeightSet> = iter
        .runs
        .iter()
        .take(2)
        .map(|r| r.final_weights.clone())
        .collect();
    let merged2 = slerpm(&lab.sft, &finals).expect("M=2 merge");
    let front2 = kl_reward(&sweep_front(&merged2));

    let (wins, n) = dominance(&front4, &front2);
    assert!(
        wins * 100 >= 60 * n,
        "[{TAG}] FAIL M=4 front reaches M=2's reward at only {wins}/{n} matched-KL grid points \
         (need 60%)"
    );
    println!(
        "[{TAG}] PASS scaling M: the M=4 merge front dominates the M=2 front (same run pool) at \
         {wins}/{n} matched-KL grid points (>=60%); M=4 endpoint ({:.1}, {:.3}), M=2 endpoint \
         ({:.1}, {:.3})",
        front4.last().expect("front").0,
        front4.last().expect("front").1,
        front2.last().expect("front").0,
        front2.last().expect("front").1,
    );
}

// ---------------------------------------------------------------------------
// c07: iterated runs
// ---------------------------------------------------------------------------

#[test]
fn c07_iterations() {
    const TAG: &str = "C7";
    let mut pooled_wins = 0usize;
    let mut pooled_total = 0usize;
    let mut detail = String::new();
    for (i, out) in warps().iter().enumerate() {
        let f1 = kl_reward(&out.iterations[0].sweep);
        let f2 = kl_reward(&out.iterations[1].sweep);
        let (wins, n) = dominance(&f2, &f1);
        pooled_wins += wins;
        pooled_total += n;
        let _ = write!(detail, " seed{}: {wins}/{n};", i + 1);
    }
    assert!(
        pooled_wins * 100 >= 70 * pooled_total,
        "[{TAG}] FAIL iteration-2 fronts reach iteration-1's reward at only \
         {pooled_wins}/{pooled_total} matched-KL grid points pooled over 3 orchestrator seeds \
         (need 70%):{detail}"
    );
    println!(
        "[{TAG}] PASS iterations ({}+{} step schedule, 3 orchestrator seeds): iteration-2 \
         sweeps dominate iteration-1 at {pooled_wins}/{pooled_total} pooled matched-KL grid \
         points (>=70%);{detail}",
        WARP_STEPS[0], WARP_STEPS[1]
    );
}

// ---------------------------------------------------------------------------
// c08: length bias and its countermeasure
// ---------------------------------------------------------------------------

#[test]
fn c08_length_bias() {
    const TAG: &str = "C8";
    let lab = lab();

    // A reward whose only exploitable signal is completion length. The whole
    // task is scaled down around the pinned -0.0005/token countermeasure so
    // that the penalty flips the net length pressure: +0.0004/token without
    // it, -0.0001/token with it. Adam's per-parameter normalization makes
    // training respond to the sign and shape, not the absolute scale.
    let hackable = RewardSpec {
        unigram_coeff: 0.0,
        pattern_bonus: 0.0,
        hack_coeff: 4e-4,
        length_penalty_per_token: 0.0,
        ..RewardSpec::default()
    };
    let penalized = RewardSpec {
        length_penalty_per_token: 5e-4,
        ..hackable.clone()
    };
    let cfg = TrainConfig {
        steps: 800,
        beta: 2e-4,
        eval_interval: 50,
        kl_ceiling: 1e6,
        ..train_cfg(1)
    };
    let run = |spec: &RewardSpec| {
        let reward = RewardModel::new(spec, lab.arch.vocab_size).expect("reward");
        train_run(
            &lab.arch,
            &lab.sft,
            &reward,
            &lab.train_prompts,
            &lab.eval_prompts,
            &cfg,
        )
        .expect("length-game run")
    };
    let no_pen = run(&hackable);
    let with_pen = run(&penalized);

    let series = |out: &TrainOutput| -> (Vec<f64>, Vec<f64>) {
        out.log
            .evals
            .iter()
            .map(|e| (e.kl_to_sft, e.mean_length))
            .unzip()
    };
    let (kls, lens) = series(&no_pen);
    let rho = spearman(&kls, &lens);
    let grew = lens.last().expect("evals") - lens.first().expect("evals");
    assert!(
        rho > 0.0 && grew > 0.5,
        "[{TAG}] FAIL unpenalized hackable run: Spearman(KL, length) = {rho:.3}, length change \
         {grew:+.2} tokens (need positive correlation and growth)"
    );

    let (_, pen_lens) = series(&with_pen);
    let shrank = pen_lens.first().expect("evals") - pen_lens.last().expect("evals");
    assert!(
        shrank > 0.5,
        "[{TAG}] FAIL penalized run: length change {:+.2} tokens over training (need to shorten)",
        -shrank
    );

    let merged = slerp(
        &lab.sft,
        &no_pen.final_weights,
        &with_pen.final_weights,
        0.5,
    )
    .expect("merge");
    let m_len = eval_vs_sft(&merged).mean_length;
    let (lo, hi) = (
        lens.last()
            .expect("evals")
            .min(*pen_lens.last().expect("evals")),
        lens.last()
            .expect("evals")
            .max(*pen_lens.last().expect("evals")),
    );
    let slack = 0.5;
    assert!(
        m_len >= lo - slack && m_len <= hi + slack,
        "[{TAG}] FAIL merged policy length {m_len:.2} outside its parents' range [{lo:.2}, \
         {hi:.2}] (+- {slack})"
    );
    println!(
        "[{TAG}] PASS length bias: unpenalized run grows {:.2} -> {:.2} tokens with \
         Spearman(KL, length) = {rho:.3}; the -0.0005/token penalty shortens {:.2} -> {:.2}; \
         merged policy sits between parents at {m_len:.2}",
        lens.first().expect("evals"),
        lens.last().expect("evals"),
        pen_lens.first().expect("evals"),
        pen_lens.last().expect("evals"),
    );
}

// ---------------------------------------------------------------------------
// c09: drift vs diversity collapse
// ---------------------------------------------------------------------------

#[test]
fn c09_diversity_similarity() {
    const TAG: &str = "C9";
    let lab = lab();
    let family = &warps()[0].family;
    let labeled: Vec<(String, &WeightSet)> = family
        .iter()
        .map(|(eta, ws)| (format!("eta_{eta:.2}"), ws))
        .collect();
    let report = warplab_core::diagnostics::diversity_probe(
        &lab.arch,
        &labeled,
        &lab.sft,
        &lab.eval_prompts,
        6,
        0.9,
        CRN_EVAL_SEED,
    )
    .expect("diversity probe");
    let rho = report.spearman_kl_similarity;
    assert!(
        rho > 0.0,
        "[{TAG}] FAIL Spearman(KL, self-similarity) = {rho:.3} across the eta family (need > 0)"
    );
    let ends = (
        report.rows.first().expect("rows"),
        report.rows.last().expect("rows"),
    );
    println!(
        "[{TAG}] PASS diversity: Spearman(KL, bigram-Jaccard self-similarity) = {rho:.3} > 0 \
         across the {}-member eta family; {} (KL {:.2}) self-similarity {:.3} vs {} (KL {:.2}) \
         {:.3}",
        report.rows.len(),
        ends.0.label,
        ends.0.kl_to_sft,
        ends.0.self_similarity,
        ends.1.label,
        ends.1.kl_to_sft,
        ends.1.self_similarity,
    );
}

// ---------------------------------------------------------------------------
// c10: infrastructure
// ---------------------------------------------------------------------------

fn fuzzed_weight_set(trial: u64) -> WeightSet {
    let mut rng = derive_rng(0xF0_22, "fuzz", trial);
    let n_groups = 1 + rng.gen_range(0..4usize);
    let groups = (0..n_groups)
        .map(|g| {
            let dims = 1 + rng.gen_range(0..3usize);
            let shape: Vec<usize> = (0..dims).map(|_| 1 + rng.gen_range(0..8usize)).collect();
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    // Raw bit patterns cover the full finite range including
                    // subnormals and signed zeros; non-finite exponents are
                    // masked down (the format stores finite values only).
                    let mut v = f32::from_bits(rng.gen::<u32>());
                    if !v.is_finite() {
                        v = f32::from_bits(v.to_bits() & 0x7EFF_FFFF | (v.to_bits() & 0x8000_0000));
                    }
                    v
                })
                .collect();
            TensorGroup::new(format!("group_{g}"), shape, data)
        })
        .collect();
    WeightSet::new(groups).expect("finite fuzzed weights")
}

fn walk_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in std::fs::read_dir(dir).expect("readable dir") {
        let path = entry.expect("dir entry").path();
        if path.is_dir() {
            walk_files(root, &path, out);
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
}

#[test]
fn c10_infrastructure() {
    const TAG: &str = "C10";
    let tmp = tempfile::tempdir().expect("tempdir");

    // Checkpoint round-trip bit-exactness over fuzzed weight sets.
    let trials = 100u64;
    let mut extra = BTreeMap::new();
    extra.insert("note".to_string(), "fuzz".to_string());
    for t in 0..trials {
        let ws = fuzzed_weight_set(t);
        let path = tmp.path().join(format!("fuzz_{t}.ckpt"));
        checkpoint::save(&ws, None, &extra, &path).expect("save");
        let loaded = checkpoint::load(&path).expect("load");
        assert!(
            loaded.extra == extra && loaded.arch.is_none(),
            "[{TAG}] FAIL manifest round-trip changed metadata (trial {t})"
        );
        assert_eq!(
            ws.groups().len(),
            loaded.weights.groups().len(),
            "[{TAG}] FAIL group count changed in round-trip (trial {t})"
        );
        for (a, b) in ws.groups().iter().zip(loaded.weights.groups()) {
            assert!(
                a.name == b.name && a.shape == b.shape,
                "[{TAG}] FAIL schema changed in round-trip (trial {t})"
            );
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!(
                    x.to_bits() == y.to_bits(),
                    "[{TAG}] FAIL value bits changed in round-trip (trial {t}): {x:?} vs {y:?}"
                );
            }
        }
    }

    // Full determinism of the orchestrating subcommand: two identical
    // invocations must produce byte-identical output trees.
    let config = r#"
seed = 5

[data]
corpus_size = 64
heldout_size = 16
n_train_prompts = 8
n_eval_prompts = 4

[sft]
steps = 40

[train]
steps = 20
eval_interval = 10
eval_samples_per_prompt = 4

[warp]
iterations = 2
runs_per_iteration = 2
steps_per_iteration = [20]
sweep_samples_per_prompt = 4
eta_grid = [0.0, 0.5, 1.0]
"#;
    let cfg_path = tmp.path().join("repro.toml");
    std::fs::write(&cfg_path, config).expect("write config");
    for out in ["a", "b"] {
        let status = Command::new(env!("CARGO_BIN_EXE_warplab"))
            .args(["--config"])
            .arg(&cfg_path)
            .args(["--out"])
            .arg(tmp.path().join(out))
            .arg("warp")
            .status()
            .expect("run binary");
        assert!(
            status.success(),
            "[{TAG}] FAIL orchestrating subcommand exited with {status}"
        );
    }
    let (dir_a, dir_b) = (tmp.path().join("a"), tmp.path().join("b"));
    let mut files_a = Vec::new();
    let mut files_b = Vec::new();
    walk_files(&dir_a, &dir_a, &mut files_a);
    walk_files(&dir_b, &dir_b, &mut files_b);
    files_a.sort();
    files_b.sort();
    assert!(
        files_a == files_b && !files_a.is_empty(),
        "[{TAG}] FAIL output trees differ in file inventory: {} vs {} files",
        files_a.len(),
        files_b.len()
    );
    for rel in &files_a {
        let a = std::fs::read(dir_a.join(rel)).expect("read");
        let b = std::fs::read(dir_b.join(rel)).expect("read");
        assert!(
            a == b,
            "[{TAG}] FAIL {} differs between identical invocations",
            rel.display()
        );
    }
    println!(
        "[{TAG}] PASS infrastructure: {trials} fuzzed weight sets round-tripped bit-exactly; \
         two identical orchestrated invocations produced byte-identical trees ({} files each)",
        files_a.len()
    );
}
