//! Subcommand implementations. Each one resolves the config, derives the
//! output root, echoes the resolved config next to its outputs, and writes
//! every artifact atomically.

use std::path::{Path, PathBuf};

use serde::Serialize;
use warplab_core::diagnostics::{
    diversity_probe, length_report, length_row_for_policy, merge_comparison, merge_geometry,
};
use warplab_core::merge::{angle_report, liti_extrapolate, slerp_full_weights};
use warplab_core::orchestrator::{make_sft, pareto_sweep, warp, SftOutput, SweepPoint, WarpOutput};
use warplab_core::stats::histogram;
use warplab_core::trainer::{evaluate_policy, EvalPoint, TrainConfig, CRN_EVAL_SEED};
use warplab_core::{corpus_ce, lerp, slerp, slerpm, ArchConfig, WeightSet};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::io;
use crate::{Cli, Cmd, DiagCmd, MergeMethod};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let text = match &cli.config {
        Some(p) => io::read_to_string(p)?,
        None => String::new(),
    };
    let cfg = ExperimentConfig::from_toml(&text, &cli.sets)?.resolve(cli.seed)?;
    let root = output_root(&cli, &cfg);
    io::ensure_dir(&root)?;
    io::write_atomic(&root.join("resolved.toml"), cfg.to_toml().as_bytes())?;

    match cli.cmd {
        Cmd::Sft => cmd_sft(&cfg, &root),
        Cmd::Train { init } => cmd_train(&cfg, &root, init.as_deref()),
        Cmd::Warp { init, parallel } => cmd_warp(&cfg, &root, init.as_deref(), parallel),
        Cmd::Merge {
            method,
            lambda,
            init,
            output,
            checkpoints,
        } => cmd_merge(
            &root,
            method,
            lambda,
            init.as_deref(),
            &output,
            &checkpoints,
        ),
        Cmd::Liti {
            init,
            target,
            eta,
            output,
        } => cmd_liti(&root, &init, &target, eta, &output),
        Cmd::Sweep {
            init,
            merged,
            eta_grid,
        } => cmd_sweep(&cfg, &root, &init, &merged, eta_grid.as_deref()),
        Cmd::Eval { policy, reference } => cmd_eval(&cfg, &root, &policy, reference.as_deref()),
        Cmd::Diag { what } => match what {
            DiagCmd::Geometry {
                init,
                a,
                b,
                lambda_grid,
            } => diag_geometry(&root, &init, &a, &b, lambda_grid.as_deref()),
            DiagCmd::Compare {
                init,
                a,
                b,
                lambda_grid,
            } => diag_compare(&cfg, &root, &init, &a, &b, lambda_grid.as_deref()),
            DiagCmd::Diversity {
                reference,
                policies,
            } => diag_diversity(&cfg, &root, &reference, &policies),
            DiagCmd::Length {
                logs,
                policies,
                reference,
            } => diag_length(&cfg, &root, &logs, &policies, reference.as_deref()),
        },
    }
}

/// `--out`, else `WARPLAB_OUT`, else the config's `output_dir`. The
/// environment variable can override nothing else.
fn output_root(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    if let Some(env) = std::env::var_os("WARPLAB_OUT") {
        return PathBuf::from(env);
    }
    PathBuf::from(&cfg.output_dir)
}

fn require_arch(path: &Path, got: &ArchConfig, want: &ArchConfig) -> Result<(), CliError> {
    if got != want {
        return Err(CliError::Usage(format!(
            "checkpoint {} was built for a different architecture than the config",
            path.display()
        )));
    }
    Ok(())
}

fn require_same_arch(
    base: (&Path, &ArchConfig),
    other: (&Path, &ArchConfig),
) -> Result<(), CliError> {
    if base.1 != other.1 {
        return Err(CliError::Usage(format!(
            "incompatible checkpoints: {} and {} carry different architectures",
            base.0.display(),
            other.0.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sft / train / warp
// ---------------------------------------------------------------------------

fn run_sft(cfg: &ExperimentConfig, root: &Path) -> Result<SftOutput, CliError> {
    let (corpus, _) = cfg.corpus_split();
    let out = make_sft(&cfg.arch, &corpus, &cfg.sft)?;
    io::save_ckpt(&root.join("sft.ckpt"), &out.weights, &cfg.arch)?;
    let rows: Vec<Vec<String>> = out
        .log
        .iter()
        .map(|s| vec![s.step.to_string(), io::num(s.ce_per_token)])
        .collect();
    io::write_csv(&root.join("sft_log.csv"), &["step", "ce_per_token"], &rows)?;
    Ok(out)
}

/// Starting weights for a training command: a checkpoint when given
/// (validated against the config's architecture), else a fresh SFT run
/// whose artifacts land in the output root.
fn starting_weights(
    cfg: &ExperimentConfig,
    root: &Path,
    init: Option<&Path>,
) -> Result<WeightSet, CliError> {
    match init {
        Some(p) => {
            let (ws, arch) = io::load_ckpt(p)?;
            require_arch(p, &arch, &cfg.arch)?;
            Ok(ws)
        }
        None => Ok(run_sft(cfg, root)?.weights),
    }
}

fn cmd_sft(cfg: &ExperimentConfig, root: &Path) -> Result<(), CliError> {
    let out = run_sft(cfg, root)?;
    let final_ce = out.log.last().map_or(f64::NAN, |s| s.ce_per_token);
    println!(
        "sft: {} steps, final ce {} nats/token -> {}",
        out.log.len(),
        io::num(final_ce),
        root.join("sft.ckpt").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunMeta<'a> {
    config: &'a TrainConfig,
    stopped_early: Option<usize>,
}

fn step_rows(log: &warplab_core::RunLog) -> Vec<Vec<String>> {
    log.steps
        .iter()
        .map(|s| {
            vec![
                s.step.to_string(),
                io::num(s.mean_raw_reward),
                io::num(s.mean_reg_reward),
                io::num(s.mean_length),
                io::num(s.mean_anchor_gap),
                io::num(s.grad_norm),
            ]
        })
        .collect()
}

const STEP_HEADER: [&str; 6] = [
    "step",
    "mean_raw_reward",
    "mean_reg_reward",
    "mean_length",
    "mean_anchor_gap",
    "grad_norm",
];

fn cmd_train(cfg: &ExperimentConfig, root: &Path, init: Option<&Path>) -> Result<(), CliError> {
    let init_ws = starting_weights(cfg, root, init)?;
    let reward = cfg.reward_model()?;
    let out = warplab_core::train_run(
        &cfg.arch,
        &init_ws,
        &reward,
        &cfg.train_prompts(),
        &cfg.eval_prompts(),
        &cfg.train,
    )?;
    io::save_ckpt(&root.join("final.ckpt"), &out.final_weights, &cfg.arch)?;
    io::save_ckpt(&root.join("anchor.ckpt"), &out.final_anchor, &cfg.arch)?;
    io::write_jsonl(&root.join("run_log.jsonl"), &out.log.evals)?;
    io::write_csv(&root.join("steps.csv"), &STEP_HEADER, &step_rows(&out.log))?;
    io::write_json(
        &root.join("run_meta.json"),
        &RunMeta {
            config: &out.log.config,
            stopped_early: out.log.stopped_early,
        },
    )?;
    let last = out.log.evals.last();
    println!(
        "train: {} steps, reward {}, kl {}{} -> {}",
        out.log.steps.len(),
        io::num(last.map_or(f64::NAN, |e| e.mean_reward)),
        io::num(last.map_or(f64::NAN, |e| e.kl_to_sft)),
        match out.log.stopped_early {
            Some(s) => format!(", stopped at step {s} by the KL ceiling"),
            None => String::new(),
        },
        root.join("final.ckpt").display()
    );
    Ok(())
}

const SWEEP_HEADER: [&str; 7] = [
    "eta",
    "mean_reward",
    "reward_se",
    "kl_to_sft",
    "kl_to_sft_se",
    "mean_length",
    "heldout_ce",
];

fn sweep_rows(points: &[SweepPoint]) -> Vec<Vec<String>> {
    points
        .iter()
        .map(|p| {
            vec![
                io::num(p.eta),
                io::num(p.mean_reward),
                io::num(p.reward_se),
                io::num(p.kl_to_sft),
                io::num(p.kl_to_sft_se),
                io::num(p.mean_length),
                p.heldout_ce.map(io::num).unwrap_or_default(),
            ]
        })
        .collect()
}

#[derive(Serialize)]
struct RunSummary {
    index: usize,
    seed: u64,
    prompt_order_seed: u64,
    stopped_early: Option<usize>,
    final_reward: Option<f64>,
    final_kl_to_sft: Option<f64>,
    checkpoint: String,
    anchor: String,
    log: String,
}

#[derive(Serialize)]
struct IterationSummary {
    index: usize,
    dir: String,
    steps: usize,
    runs: Vec<RunSummary>,
    merged: String,
    next_init: String,
    sweep: String,
}

#[derive(Serialize)]
struct FamilyEntry {
    eta: f64,
    checkpoint: String,
}

#[derive(Serialize)]
struct WarpManifest {
    master_seed: u64,
    warp_seed: u64,
    sft: String,
    config: String,
    iterations: Vec<IterationSummary>,
    final_merged: String,
    family: Vec<FamilyEntry>,
}

fn cmd_warp(
    cfg: &ExperimentConfig,
    root: &Path,
    init: Option<&Path>,
    parallel: Option<usize>,
) -> Result<(), CliError> {
    let sft_ws = starting_weights(cfg, root, init)?;
    // Manifest paths are root-relative so two runs into different roots
    // produce byte-identical manifests; an external --init is the one
    // input that genuinely lives outside the tree, recorded as given.
    let sft_path = match init {
        Some(p) => p.display().to_string(),
        None => "sft.ckpt".to_string(),
    };
    let reward = cfg.reward_model()?;
    let mut wcfg = cfg.warp.clone();
    if let Some(p) = parallel {
        wcfg.parallel = p;
    }
    let heldout = cfg.heldout();
    let out: WarpOutput = warp(
        &cfg.arch,
        &sft_ws,
        &reward,
        &cfg.train_prompts(),
        &cfg.eval_prompts(),
        heldout.as_deref(),
        &cfg.train,
        &wcfg,
    )?;

    let mut iteration_summaries = Vec::with_capacity(out.iterations.len());
    for it in &out.iterations {
        let dir_name = format!("iter_{:02}", it.index + 1);
        let dir = root.join(&dir_name);
        io::ensure_dir(&dir)?;
        let mut run_summaries = Vec::with_capacity(it.runs.len());
        for (ri, run) in it.runs.iter().enumerate() {
            let ckpt = format!("run_{ri:02}.ckpt");
            let anchor = format!("run_{ri:02}_anchor.ckpt");
            let log = format!("run_{ri:02}_log.jsonl");
            io::save_ckpt(&dir.join(&ckpt), &run.final_weights, &cfg.arch)?;
            io::save_ckpt(&dir.join(&anchor), &run.final_anchor, &cfg.arch)?;
            io::write_jsonl(&dir.join(&log), &run.log.evals)?;
            let last = run.log.evals.last();
            run_summaries.push(RunSummary {
                index: ri,
                seed: run.seed,
                prompt_order_seed: run.prompt_order_seed,
                stopped_early: run.log.stopped_early,
                final_reward: last.map(|e| e.mean_reward),
                final_kl_to_sft: last.map(|e| e.kl_to_sft),
                checkpoint: format!("{dir_name}/{ckpt}"),
                anchor: format!("{dir_name}/{anchor}"),
                log: format!("{dir_name}/{log}"),
            });
        }
        io::save_ckpt(&dir.join("merged.ckpt"), &it.merged, &cfg.arch)?;
        io::save_ckpt(&dir.join("next_init.ckpt"), &it.next_init, &cfg.arch)?;
        io::write_csv(
            &dir.join("sweep.csv"),
            &SWEEP_HEADER,
            &sweep_rows(&it.sweep),
        )?;
        iteration_summaries.push(IterationSummary {
            index: it.index,
            dir: dir_name.clone(),
            steps: wcfg.steps_for(it.index),
            runs: run_summaries,
            merged: format!("{dir_name}/merged.ckpt"),
            next_init: format!("{dir_name}/next_init.ckpt"),
            sweep: format!("{dir_name}/sweep.csv"),
        });
    }

    let final_dir = root.join("final");
    io::ensure_dir(&final_dir)?;
    io::save_ckpt(&final_dir.join("merged.ckpt"), &out.final_merged, &cfg.arch)?;
    let mut family = Vec::with_capacity(out.family.len());
    for (eta, ws) in &out.family {
        let name = format!("family_eta_{eta:.2}.ckpt");
        io::save_ckpt(&final_dir.join(&name), ws, &cfg.arch)?;
        family.push(FamilyEntry {
            eta: *eta,
            checkpoint: format!("final/{name}"),
        });
    }
    // The last iteration's sweep evaluates liti(sft, final_merged, eta) —
    // exactly the final family — so its table is the final front.
    let last_sweep = &out.iterations.last().expect("at least one iteration").sweep;
    io::write_csv(
        &final_dir.join("sweep.csv"),
        &SWEEP_HEADER,
        &sweep_rows(last_sweep),
    )?;

    io::write_json(
        &root.join("manifest.json"),
        &WarpManifest {
            master_seed: cfg.seed,
            warp_seed: wcfg.seed,
            sft: sft_path,
            config: "resolved.toml".to_string(),
            iterations: iteration_summaries,
            final_merged: "final/merged.ckpt".to_string(),
            family,
        },
    )?;

    for it in &out.iterations {
        let best = it
            .sweep
            .iter()
            .max_by(|x, y| x.mean_reward.total_cmp(&y.mean_reward))
            .expect("nonempty sweep");
        println!(
            "warp iter {}: {} runs, best front point reward {} at kl {} (eta {})",
            it.index + 1,
            it.runs.len(),
            io::num(best.mean_reward),
            io::num(best.kl_to_sft),
            io::num(best.eta)
        );
    }
    println!(
        "warp: {} iterations -> {}",
        out.iterations.len(),
        root.join("manifest.json").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// merge / liti / sweep / eval
// ---------------------------------------------------------------------------

fn load_all(paths: &[PathBuf]) -> Result<Vec<(WeightSet, ArchConfig)>, CliError> {
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        out.push(io::load_ckpt(p)?);
    }
    for (p, (_, arch)) in paths.iter().zip(&out).skip(1) {
        require_same_arch((&paths[0], &out[0].1), (p, arch))?;
    }
    Ok(out)
}

fn cmd_merge(
    root: &Path,
    method: MergeMethod,
    lambda: Option<f64>,
    init: Option<&Path>,
    output: &Path,
    checkpoints: &[PathBuf],
) -> Result<(), CliError> {
    let needs_init = matches!(method, MergeMethod::Slerp | MergeMethod::Slerpm);
    if needs_init && init.is_none() {
        return Err(CliError::Usage(
            "this method interpolates task vectors; pass the shared initialization via --init"
                .into(),
        ));
    }
    if !needs_init && init.is_some() {
        return Err(CliError::Usage(
            "--init is only used by the task-vector methods (slerp, slerpm)".into(),
        ));
    }
    if matches!(method, MergeMethod::Slerpm) {
        if lambda.is_some() {
            return Err(CliError::Usage(
                "slerpm fixes its coefficients at 1/m; --lambda does not apply".into(),
            ));
        }
    } else if checkpoints.len() != 2 {
        return Err(CliError::Usage(format!(
            "this method merges exactly 2 checkpoints, got {}",
            checkpoints.len()
        )));
    }

    let loaded = load_all(checkpoints)?;
    let arch = loaded[0].1.clone();
    let init_ws = match init {
        Some(p) => {
            let (ws, init_arch) = io::load_ckpt(p)?;
            require_same_arch((&checkpoints[0], &arch), (p, &init_arch))?;
            Some(ws)
        }
        None => None,
    };

    let lambda_val = lambda.unwrap_or(0.5);
    let merged = match method {
        MergeMethod::Slerp => slerp(
            init_ws.as_ref().expect("checked"),
            &loaded[0].0,
            &loaded[1].0,
            lambda_val,
        )?,
        MergeMethod::Lerp => lerp(&loaded[0].0, &loaded[1].0, lambda_val)?,
        MergeMethod::SlerpFull => slerp_full_weights(&loaded[0].0, &loaded[1].0, lambda_val)?,
        MergeMethod::Slerpm => {
            let models: Vec<WeightSet> = loaded.iter().map(|(ws, _)| ws.clone()).collect();
            slerpm(init_ws.as_ref().expect("checked"), &models)?
        }
    };

    let out_path = root.join(output);
    if let Some(parent) = out_path.parent() {
        io::ensure_dir(parent)?;
    }
    io::save_ckpt(&out_path, &merged, &arch)?;
    println!(
        "merge: {} of {} checkpoints -> {}",
        match method {
            MergeMethod::Slerp => "slerp",
            MergeMethod::Lerp => "lerp",
            MergeMethod::Slerpm => "slerpm",
            MergeMethod::SlerpFull => "slerp-full",
        },
        checkpoints.len(),
        out_path.display()
    );
    Ok(())
}

fn cmd_liti(
    root: &Path,
    init: &Path,
    target: &Path,
    eta: f64,
    output: &Path,
) -> Result<(), CliError> {
    let (init_ws, arch) = io::load_ckpt(init)?;
    let (target_ws, target_arch) = io::load_ckpt(target)?;
    require_same_arch((init, &arch), (target, &target_arch))?;
    let ws = liti_extrapolate(&init_ws, &target_ws, eta)?;
    let out_path = root.join(output);
    if let Some(parent) = out_path.parent() {
        io::ensure_dir(parent)?;
    }
    io::save_ckpt(&out_path, &ws, &arch)?;
    println!("liti: eta {} -> {}", io::num(eta), out_path.display());
    Ok(())
}

fn cmd_sweep(
    cfg: &ExperimentConfig,
    root: &Path,
    init: &Path,
    merged: &Path,
    eta_grid: Option<&[f64]>,
) -> Result<(), CliError> {
    let (init_ws, arch) = io::load_ckpt(init)?;
    let (merged_ws, merged_arch) = io::load_ckpt(merged)?;
    require_same_arch((init, &arch), (merged, &merged_arch))?;
    require_arch(init, &arch, &cfg.arch)?;
    let grid: Vec<f64> = eta_grid
        .map(|g| g.to_vec())
        .unwrap_or_else(|| cfg.warp.eta_grid.clone());
    let reward = cfg.reward_model()?;
    let heldout = cfg.heldout();
    let points = pareto_sweep(
        &cfg.arch,
        &init_ws,
        &merged_ws,
        &grid,
        &reward,
        &cfg.eval_prompts(),
        cfg.warp.sweep_samples_per_prompt,
        heldout.as_deref(),
    )?;
    io::write_csv(&root.join("sweep.csv"), &SWEEP_HEADER, &sweep_rows(&points))?;
    println!(
        "sweep: {} etas -> {}",
        points.len(),
        root.join("sweep.csv").display()
    );
    Ok(())
}

fn cmd_eval(
    cfg: &ExperimentConfig,
    root: &Path,
    policy: &Path,
    reference: Option<&Path>,
) -> Result<(), CliError> {
    let (policy_ws, arch) = io::load_ckpt(policy)?;
    require_arch(policy, &arch, &cfg.arch)?;
    let reference_ws = match reference {
        Some(p) => {
            let (ws, ref_arch) = io::load_ckpt(p)?;
            require_same_arch((policy, &arch), (p, &ref_arch))?;
            ws
        }
        None => policy_ws.clone(),
    };
    let reward = cfg.reward_model()?;
    let s = evaluate_policy(
        &cfg.arch,
        &policy_ws,
        &reference_ws,
        None,
        &reward,
        &cfg.eval_prompts(),
        cfg.train.eval_samples_per_prompt,
    )?;
    let heldout_ce = match cfg.heldout() {
        Some(h) => Some(corpus_ce(&cfg.arch, &policy_ws, &h)?),
        None => None,
    };
    let header = [
        "mean_reward",
        "reward_se",
        "kl_to_ref",
        "kl_to_ref_se",
        "mean_length",
        "heldout_ce",
    ];
    let row = vec![
        io::num(s.mean_reward),
        io::num(s.reward_se),
        io::num(s.kl_to_ref),
        io::num(s.kl_to_ref_se),
        io::num(s.mean_length),
        heldout_ce.map(io::num).unwrap_or_default(),
    ];
    io::write_csv(&root.join("eval.csv"), &header, std::slice::from_ref(&row))?;
    println!("{}", header.join(","));
    println!("{}", row.join(","));
    Ok(())
}

// ---------------------------------------------------------------------------
// diag
// ---------------------------------------------------------------------------

fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn diag_geometry(
    root: &Path,
    init: &Path,
    a: &Path,
    b: &Path,
    lambda_grid: Option<&[f64]>,
) -> Result<(), CliError> {
    let loaded = load_all(&[init.to_path_buf(), a.to_path_buf(), b.to_path_buf()])?;
    let grid = lambda_grid
        .map(|g| g.to_vec())
        .unwrap_or_else(default_lambda_grid);
    let rows = merge_geometry(&loaded[0].0, &loaded[1].0, &loaded[2].0, &grid)?;
    io::write_csv(
        &root.join("geometry.csv"),
        &[
            "lambda",
            "lerp_norm",
            "slerp_norm",
            "predicted_lerp_norm",
            "slerp_lerp_distance",
            "full_weight_slerp_distance",
        ],
        &rows
            .iter()
            .map(|r| {
                vec![
                    io::num(r.lambda),
                    io::num(r.lerp_norm),
                    io::num(r.slerp_norm),
                    io::num(r.predicted_lerp_norm),
                    io::num(r.slerp_lerp_distance),
                    io::num(r.full_weight_slerp_distance),
                ]
            })
            .collect::<Vec<_>>(),
    )?;

    let angles = angle_report(&loaded[0].0, &loaded[1].0, &loaded[2].0)?;
    io::write_csv(
        &root.join("angles.csv"),
        &[
            "group",
            "norm_a",
            "norm_b",
            "cos_omega",
            "omega_deg",
            "fallback",
        ],
        &angles
            .iter()
            .map(|g| {
                vec![
                    g.name.clone(),
                    io::num(g.norm_a),
                    io::num(g.norm_b),
                    io::num(g.cos_omega),
                    io::num(g.omega_deg),
                    g.fallback.to_string(),
                ]
            })
            .collect::<Vec<_>>(),
    )?;

    let degs: Vec<f64> = angles.iter().map(|g| g.omega_deg).collect();
    let hist = histogram(&degs, 0.0, 180.0, 32);
    io::write_csv(
        &root.join("angle_hist.csv"),
        &["bin_lo_deg", "bin_hi_deg", "count"],
        &hist
            .iter()
            .map(|(lo, hi, n)| vec![io::num(*lo), io::num(*hi), n.to_string()])
            .collect::<Vec<_>>(),
    )?;
    println!(
        "diag geometry: {} lambdas, {} groups -> {}",
        grid.len(),
        angles.len(),
        root.join("geometry.csv").display()
    );
    Ok(())
}

fn diag_compare(
    cfg: &ExperimentConfig,
    root: &Path,
    init: &Path,
    a: &Path,
    b: &Path,
    lambda_grid: Option<&[f64]>,
) -> Result<(), CliError> {
    let loaded = load_all(&[init.to_path_buf(), a.to_path_buf(), b.to_path_buf()])?;
    require_arch(init, &loaded[0].1, &cfg.arch)?;
    let grid = lambda_grid
        .map(|g| g.to_vec())
        .unwrap_or_else(default_lambda_grid);
    let reward = cfg.reward_model()?;
    let rows = merge_comparison(
        &cfg.arch,
        &loaded[0].0,
        &loaded[1].0,
        &loaded[2].0,
        &grid,
        &reward,
        &cfg.eval_prompts(),
        cfg.train.eval_samples_per_prompt,
    )?;
    io::write_csv(
        &root.join("merge_comparison.csv"),
        &[
            "lambda",
            "method",
            "mean_reward",
            "reward_se",
            "kl_to_init",
            "kl_to_init_se",
        ],
        &rows
            .iter()
            .map(|r| {
                vec![
                    io::num(r.lambda),
                    r.method.to_string(),
                    io::num(r.mean_reward),
                    io::num(r.reward_se),
                    io::num(r.kl_to_init),
                    io::num(r.kl_to_init_se),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    println!(
        "diag compare: {} rows -> {}",
        rows.len(),
        root.join("merge_comparison.csv").display()
    );
    Ok(())
}

fn diag_diversity(
    cfg: &ExperimentConfig,
    root: &Path,
    reference: &Path,
    policies: &[PathBuf],
) -> Result<(), CliError> {
    let (ref_ws, ref_arch) = io::load_ckpt(reference)?;
    require_arch(reference, &ref_arch, &cfg.arch)?;
    let mut labeled: Vec<(String, WeightSet)> = Vec::with_capacity(policies.len());
    for p in policies {
        let (ws, arch) = io::load_ckpt(p)?;
        require_same_arch((reference, &ref_arch), (p, &arch))?;
        let label = io::stem(p);
        if labeled.iter().any(|(l, _)| *l == label) {
            return Err(CliError::Usage(format!(
                "duplicate policy label `{label}`; rename the files to disambiguate"
            )));
        }
        labeled.push((label, ws));
    }
    let pairs: Vec<(String, &WeightSet)> = labeled.iter().map(|(l, ws)| (l.clone(), ws)).collect();
    let report = diversity_probe(
        &cfg.arch,
        &pairs,
        &ref_ws,
        &cfg.eval_prompts(),
        cfg.data.diversity_samples,
        cfg.data.diversity_temperature,
        CRN_EVAL_SEED,
    )?;
    io::write_csv(
        &root.join("diversity.csv"),
        &["label", "self_similarity", "kl_to_sft", "kl_to_sft_se"],
        &report
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    io::num(r.self_similarity),
                    io::num(r.kl_to_sft),
                    io::num(r.kl_to_sft_se),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    io::write_csv(
        &root.join("diversity_summary.csv"),
        &["spearman_kl_similarity"],
        &[vec![io::num(report.spearman_kl_similarity)]],
    )?;
    println!(
        "diag diversity: {} policies, spearman(kl, similarity) {} -> {}",
        report.rows.len(),
        io::num(report.spearman_kl_similarity),
        root.join("diversity.csv").display()
    );
    Ok(())
}

fn read_eval_log(path: &Path) -> Result<Vec<EvalPoint>, CliError> {
    let text = io::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let point: EvalPoint = serde_json::from_str(line)
            .map_err(|e| CliError::Usage(format!("log {} line {}: {e}", path.display(), i + 1)))?;
        out.push(point);
    }
    Ok(out)
}

fn diag_length(
    cfg: &ExperimentConfig,
    root: &Path,
    logs: &[PathBuf],
    policies: &[PathBuf],
    reference: Option<&Path>,
) -> Result<(), CliError> {
    if logs.is_empty() && policies.is_empty() {
        return Err(CliError::Usage(
            "nothing to report: pass --logs and/or --policies".into(),
        ));
    }
    let mut series_data: Vec<(String, Vec<EvalPoint>)> = Vec::with_capacity(logs.len());
    for p in logs {
        series_data.push((io::stem(p), read_eval_log(p)?));
    }
    let series: Vec<(String, &[EvalPoint])> = series_data
        .iter()
        .map(|(l, evals)| (l.clone(), evals.as_slice()))
        .collect();
    let mut report = length_report(&series);

    if !policies.is_empty() {
        let ref_path = reference.ok_or_else(|| {
            CliError::Usage("--policies rows need --reference for their KL column".into())
        })?;
        let (ref_ws, ref_arch) = io::load_ckpt(ref_path)?;
        require_arch(ref_path, &ref_arch, &cfg.arch)?;
        let reward = cfg.reward_model()?;
        for p in policies {
            let (ws, arch) = io::load_ckpt(p)?;
            require_same_arch((ref_path, &ref_arch), (p, &arch))?;
            report.rows.push(length_row_for_policy(
                &io::stem(p),
                &cfg.arch,
                &ws,
                &ref_ws,
                &reward,
                &cfg.eval_prompts(),
                cfg.train.eval_samples_per_prompt,
            )?);
        }
    }

    io::write_csv(
        &root.join("length.csv"),
        &["label", "step", "kl_to_sft", "mean_length"],
        &report
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    r.step.map(|s| s.to_string()).unwrap_or_default(),
                    io::num(r.kl_to_sft),
                    io::num(r.mean_length),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    io::write_csv(
        &root.join("length_summary.csv"),
        &["label", "spearman_kl_length"],
        &report
            .spearman_by_label
            .iter()
            .map(|(l, s)| vec![l.clone(), io::num(*s)])
            .collect::<Vec<_>>(),
    )?;
    println!(
        "diag length: {} rows -> {}",
        report.rows.len(),
        root.join("length.csv").display()
    );
    Ok(())
}
