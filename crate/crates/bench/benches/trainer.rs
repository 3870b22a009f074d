//! Training-loop benchmarks: KL estimation, policy evaluation, and a short
//! REINFORCE run at the default architecture.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use warplab_core::policy::init_policy;
use warplab_core::prompts::PromptSet;
use warplab_core::trainer::{evaluate_policy, kl_estimate, train_run, TrainConfig};
use warplab_core::{ArchConfig, RewardModel, RewardSpec};

fn bench_trainer(c: &mut Criterion) {
    let arch = ArchConfig::default();
    let init = init_policy(&arch, 1).expect("init");
    let other = init_policy(&arch, 2).expect("init");
    let reward = RewardModel::new(&RewardSpec::default(), arch.vocab_size).expect("reward");
    let train_prompts = PromptSet::generate(&arch, 8, 101, "bench-train");
    let eval_prompts = PromptSet::generate(&arch, 4, 101, "bench-eval");

    let mut g = c.benchmark_group("trainer");
    g.sample_size(20);
    g.bench_function("kl_estimate_16", |b| {
        b.iter(|| {
            kl_estimate(
                black_box(&arch),
                black_box(&init),
                black_box(&other),
                &eval_prompts,
                4,
                7,
            )
            .unwrap()
        })
    });
    g.bench_function("evaluate_policy_16", |b| {
        b.iter(|| {
            evaluate_policy(
                black_box(&arch),
                black_box(&init),
                black_box(&other),
                None,
                &reward,
                &eval_prompts,
                4,
            )
            .unwrap()
        })
    });
    g.sample_size(10);
    g.bench_function("train_run_4_steps", |b| {
        let cfg = TrainConfig {
            steps: 4,
            batch_size: 8,
            eval_interval: 100,
            eval_samples_per_prompt: 2,
            ..TrainConfig::default()
        };
        b.iter(|| {
            train_run(
                black_box(&arch),
                black_box(&init),
                &reward,
                &train_prompts,
                &eval_prompts,
                &cfg,
            )
            .unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, bench_trainer);
criterion_main!(benches);
