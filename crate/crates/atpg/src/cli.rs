//! Command-line surface: train, eval, rollout, and gradcheck subcommands.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 non-finite gradient,
//! 4 corrupt checkpoint, 5 gradient-check tolerance failure.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradcheckSettings};
use crate::policy::PolicyParams;
use crate::sim::{rollout_eval, sample_scenario, Controller, MotionKind};
use crate::trainer::{self, load_checkpoint, TrainLogRecord};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "atpg", version, about = "Policy training for active multi-target tracking")]
struct Cli {
    /// Rollout worker threads (0 = all hardware threads). Falls back to the
    /// ATPG_JOBS environment variable.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write checkpoints plus a metrics log.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory for checkpoints, logs, and the effective config.
        #[arg(long, default_value = "runs/run")]
        out: PathBuf,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the batch size.
        #[arg(long)]
        episodes_per_batch: Option<usize>,
        /// Override the learning rate.
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Evaluate a checkpoint over a grid of target counts and motions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Target counts to evaluate.
        #[arg(long, num_args = 1.., default_values_t = [3usize, 5, 7])]
        targets: Vec<usize>,
        /// Episodes per (seed, cell).
        #[arg(long, default_value_t = 30)]
        episodes: usize,
        /// Target motion: biased, unbiased, or both.
        #[arg(long, default_value = "both")]
        motion: String,
        /// Scenario seeds pooled into each cell.
        #[arg(long, num_args = 1.., default_values_t = [0u64, 10, 100])]
        seeds: Vec<u64>,
        /// JSON results path.
        #[arg(long, default_value = "eval_results.json")]
        out: PathBuf,
    },
    /// Roll out a checkpoint on one scenario and export the trace.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 3)]
        targets: usize,
        #[arg(long, default_value = "biased")]
        motion: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        episode: u64,
        /// Override the horizon.
        #[arg(long)]
        horizon: Option<usize>,
        /// Output base path; writes <export>.json and <export>.csv.
        #[arg(long)]
        export: PathBuf,
    },
    /// Verify the analytical gradient against central finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        #[arg(long, default_value_t = 2)]
        targets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negative control: corrupt one exponential-map derivative and
        /// confirm the suite fails.
        #[arg(long, hide = true)]
        corrupt_dexp: bool,
    },
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    init_rayon(cli.jobs);
    let outcome = match cli.command {
        Command::Train { config, out, seed, epochs, episodes_per_batch, learning_rate } => {
            cmd_train(config.config.as_deref(), &out, seed, epochs, episodes_per_batch, learning_rate)
        }
        Command::Eval { checkpoint, config, targets, episodes, motion, seeds, out } => {
            cmd_eval(&checkpoint, config.config.as_deref(), &targets, episodes, &motion, &seeds, &out)
        }
        Command::Rollout { checkpoint, config, targets, motion, seed, episode, horizon, export } => {
            cmd_rollout(&checkpoint, config.config.as_deref(), targets, &motion, seed, episode, horizon, &export)
        }
        Command::Gradcheck { config, trials, horizon, targets, seed, corrupt_dexp } => {
            return match cmd_gradcheck(config.config.as_deref(), trials, horizon, targets, seed, corrupt_dexp) {
                Ok(true) => 0,
                Ok(false) => 5,
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            };
        }
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_rayon(jobs: Option<usize>) {
    let jobs = jobs.or_else(|| {
        std::env::var("ATPG_JOBS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = jobs {
        if n > 0 {
            // Ignore the error when a pool already exists (e.g. under tests).
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn parse_motions(motion: &str) -> Result<Vec<MotionKind>> {
    match motion {
        "both" => Ok(vec![MotionKind::Unbiased, MotionKind::Biased]),
        other => other
            .parse::<MotionKind>()
            .map(|m| vec![m])
            .map_err(Error::InvalidConfig),
    }
}

fn write_effective_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_ini())?;
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    episodes_per_batch: Option<usize>,
    learning_rate: Option<f64>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = episodes_per_batch {
        cfg.train.episodes_per_batch = b;
    }
    if let Some(lr) = learning_rate {
        cfg.train.learning_rate = lr;
    }
    cfg.validate()?;

    std::fs::create_dir_all(out)?;
    write_effective_config(&cfg, &out.join("config.effective.cfg"))?;

    let env = cfg.env_model()?;
    let params = PolicyParams::init_random(cfg.policy_layout(), cfg.alpha, cfg.train.seed)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.checkpoint_dir = Some(out.to_path_buf());

    let progress = |r: &TrainLogRecord| {
        let eval = match (r.reward_eval_mean, r.reward_eval_std) {
            (Some(m), Some(s)) => format!("  eval {m:.4} +/- {s:.4}"),
            _ => String::new(),
        };
        println!(
            "epoch {:4}  train {:8.4} +/- {:7.4}  |g| {:10.4e}  {:6.2}s{}",
            r.epoch, r.reward_train_mean, r.reward_train_std, r.grad_norm, r.seconds, eval
        );
    };
    let (_final_params, log) =
        trainer::train(&train_cfg, &env, &cfg.scenario, params, Some(&progress))?;

    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    std::fs::write(out.join("train_log.csv"), csv)?;
    println!("training complete; artifacts in {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalCell {
    targets: usize,
    motion: String,
    mean: f64,
    std: f64,
    episodes: usize,
}

fn cmd_eval(
    checkpoint: &Path,
    config: Option<&Path>,
    targets: &[usize],
    episodes: usize,
    motion: &str,
    seeds: &[u64],
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (params, header) = load_checkpoint(checkpoint)?;
    let mut env = cfg.env_model()?;
    env.bounds = header.bounds;
    let motions = parse_motions(motion)?;

    let mut cells = Vec::new();
    println!("{:>8}  {:>9}  {:>24}  {:>8}", "targets", "motion", "reward (mean +/- std)", "episodes");
    for &n_l in targets {
        for &m in &motions {
            let stats = trainer::evaluate(&params, &env, &cfg.scenario, n_l, episodes, m, seeds)?;
            println!(
                "{:>8}  {:>9}  {:>14.4} +/- {:>6.4}  {:>8}",
                n_l, m.to_string(), stats.mean, stats.std, stats.episodes
            );
            cells.push(EvalCell {
                targets: n_l,
                motion: m.to_string(),
                mean: stats.mean,
                std: stats.std,
                episodes: stats.episodes,
            });
        }
    }

    let json = serde_json::to_string_pretty(&cells).expect("eval cells serialize");
    std::fs::write(out, json)?;
    write_effective_config(&cfg, &out.with_extension("effective.cfg"))?;
    println!("results written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_rollout(
    checkpoint: &Path,
    config: Option<&Path>,
    targets: usize,
    motion: &str,
    seed: u64,
    episode: u64,
    horizon: Option<usize>,
    export: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (params, header) = load_checkpoint(checkpoint)?;
    let mut env = cfg.env_model()?;
    env.bounds = header.bounds;
    let motion = motion.parse::<MotionKind>().map_err(Error::InvalidConfig)?;

    let mut scen = cfg.scenario.clone();
    scen.motion = motion;
    if horizon.is_some() {
        scen.horizon = horizon;
    }
    let scenario_cfg = scen.scenario_config(targets, seed, episode);
    let scenario = sample_scenario(&scenario_cfg, &env.target_model);
    let trace = rollout_eval(&scenario, &env, Controller::Policy(&params))?;

    if let Some(dir) = export.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(export.with_extension("json"), trace.to_json())?;
    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    std::fs::write(export.with_extension("csv"), csv)?;
    write_effective_config(&cfg, &export.with_extension("effective.cfg"))?;
    println!(
        "trace with {} states written to {}.{{json,csv}} (normalized reward {:.6})",
        trace.steps.len(),
        export.display(),
        trace.reward_normalized
    );
    Ok(())
}

fn cmd_gradcheck(
    config: Option<&Path>,
    trials: usize,
    horizon: usize,
    targets: usize,
    seed: u64,
    corrupt_dexp: bool,
) -> Result<bool> {
    let cfg = RunConfig::load(config)?;
    let env = cfg.env_model()?;
    let settings = GradcheckSettings {
        trials,
        horizon,
        n_l: targets,
        seed,
        corrupt_exp_derivative: corrupt_dexp,
        ..Default::default()
    };
    let report = gradcheck::run(&settings, &env)?;
    for t in &report.trials {
        println!(
            "trial {:3}: max abs err {:.3e}  max rel err {:.3e}  {}",
            t.trial,
            t.max_abs_err,
            t.max_rel_err,
            if t.pass { "pass" } else { "FAIL" }
        );
    }
    println!(
        "gradcheck over {} trials, {} parameters: max abs err {:.3e}, max rel err {:.3e} -> {}",
        report.trials.len(),
        report.n_params,
        report.max_abs_err,
        report.max_rel_err,
        if report.pass { "PASS" } else { "FAIL" }
    );
    Ok(report.pass)
}
