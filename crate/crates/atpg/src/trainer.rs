//! Batched gradient-ascent training, evaluation grids, and checkpoint I/O.
//!
//! Each epoch rolls out a batch of episodes (in parallel when a rayon pool
//! is available), averages their reward gradients in episode order, and
//! applies one ascent step with optional momentum and global-norm clipping.
//! All scenario randomness is derived from `(seed, global episode index)`,
//! so results do not depend on thread count.

use crate::error::{Error, Result};
use crate::policy::{ControlBounds, PolicyLayout, PolicyParams};
use crate::sim::{
    rollout_eval, rollout_train, sample_scenario, Controller, EnvModel, EvalFilter, MotionKind,
    ScenarioConfig,
};
use crate::rng::{stream, Purpose};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Scenario-shape settings shared by train and eval episodes. `horizon` and
/// `init_box` default to target-count-dependent rules and can be pinned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSettings {
    pub tau: f64,
    /// Fixed horizon, or `None` for `25 + 5 n_l` steps.
    pub horizon: Option<usize>,
    /// Fixed spawn half-width, or `None` for `2 + n_l` meters.
    pub init_box: Option<f64>,
    pub xi_bound: f64,
    pub bias_bound: f64,
    pub motion: MotionKind,
    pub y0_info: f64,
    /// Belief accounting used by evaluation rollouts.
    pub eval_filter: EvalFilter,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        ScenarioSettings {
            tau: 0.5,
            horizon: None,
            init_box: None,
            xi_bound: 0.2,
            bias_bound: 0.2,
            motion: MotionKind::Biased,
            y0_info: 1.0,
            eval_filter: EvalFilter::Hard,
        }
    }
}

impl ScenarioSettings {
    pub fn scenario_config(&self, n_l: usize, seed: u64, episode: u64) -> ScenarioConfig {
        ScenarioConfig {
            n_l,
            horizon: self.horizon.unwrap_or(25 + 5 * n_l),
            tau: self.tau,
            init_box: self.init_box.unwrap_or(2.0 + n_l as f64),
            xi_bound: self.xi_bound,
            bias_bound: self.bias_bound,
            motion: self.motion,
            y0_info: self.y0_info,
            eval_filter: self.eval_filter,
            seed,
            episode,
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub n_l_min: usize,
    pub n_l_max: usize,
    /// Evaluate and checkpoint every this many epochs.
    pub eval_every: usize,
    /// Held-out episodes per evaluation.
    pub eval_episodes: usize,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            episodes_per_batch: 20,
            learning_rate: 1e-3,
            momentum: 0.0,
            clip_norm: Some(10.0),
            n_l_min: 3,
            n_l_max: 8,
            eval_every: 25,
            eval_episodes: 10,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be finite and non-negative".into()));
        }
        if self.episodes_per_batch == 0 {
            return Err(Error::InvalidConfig("episodes_per_batch must be at least 1".into()));
        }
        if self.n_l_min == 0 || self.n_l_min > self.n_l_max {
            return Err(Error::InvalidConfig("target-count range must satisfy 1 <= min <= max".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// One epoch's metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub reward_train_mean: f64,
    pub reward_train_std: f64,
    pub reward_eval_mean: Option<f64>,
    pub reward_eval_std: Option<f64>,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainLogRecord>,
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "epoch,reward_train_mean,reward_train_std,reward_eval_mean,reward_eval_std,grad_norm,seconds"
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.epoch,
                fmt_f64(r.reward_train_mean),
                fmt_f64(r.reward_train_std),
                r.reward_eval_mean.map(fmt_f64).unwrap_or_default(),
                r.reward_eval_std.map(fmt_f64).unwrap_or_default(),
                fmt_f64(r.grad_norm),
                fmt_f64(r.seconds)
            )?;
        }
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Progress callback invoked after each epoch with the fresh record.
pub type ProgressFn<'a> = dyn Fn(&TrainLogRecord) + Sync + 'a;

/// Gradient-ascent training loop. Returns the final parameters and the
/// per-epoch log. Deterministic in `(cfg.seed, initial params)`.
pub fn train(
    cfg: &TrainConfig,
    env: &EnvModel,
    scen: &ScenarioSettings,
    mut params: PolicyParams,
    progress: Option<&ProgressFn<'_>>,
) -> Result<(PolicyParams, TrainLog)> {
    cfg.validate()?;
    let n_p = params.n_params();
    let mut velocity = vec![0.0; n_p];
    let mut log = TrainLog::default();

    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let base_episode = (epoch * cfg.episodes_per_batch) as u64;

        // Per-episode target counts come from their own stream so batch
        // size changes do not reshuffle scenarios.
        let episodes: Vec<(u64, usize)> = (0..cfg.episodes_per_batch)
            .map(|b| {
                let episode = base_episode + b as u64;
                let mut rng = stream(cfg.seed, episode, Purpose::TargetCount);
                let n_l = rng.random_range(cfg.n_l_min..=cfg.n_l_max);
                (episode, n_l)
            })
            .collect();

        let results: Vec<Result<crate::sim::TrainRollout>> = episodes
            .par_iter()
            .map(|(episode, n_l)| {
                let scenario_cfg = scen.scenario_config(*n_l, cfg.seed, *episode);
                let scenario = sample_scenario(&scenario_cfg, &env.target_model);
                rollout_train(&scenario, env, &params)
            })
            .collect();

        // Deterministic reduction in episode order.
        let mut grad_sum = vec![0.0; n_p];
        let mut rewards = Vec::with_capacity(cfg.episodes_per_batch);
        for ((episode, _), result) in episodes.iter().zip(results) {
            let rollout = result?;
            if rollout.gradient.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { seed: cfg.seed, episode: *episode });
            }
            for (s, g) in grad_sum.iter_mut().zip(&rollout.gradient) {
                *s += g;
            }
            rewards.push(rollout.reward_normalized);
        }
        let scale = 1.0 / cfg.episodes_per_batch as f64;
        let mut grad: Vec<f64> = grad_sum.iter().map(|g| g * scale).collect();
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if let Some(clip) = cfg.clip_norm {
            if grad_norm > clip {
                let s = clip / grad_norm;
                for g in grad.iter_mut() {
                    *g *= s;
                }
            }
        }

        {
            let theta = params.theta_mut();
            for i in 0..n_p {
                velocity[i] = cfg.momentum * velocity[i] + grad[i];
                theta[i] += cfg.learning_rate * velocity[i];
            }
        }

        let (train_mean, train_std) = mean_std(&rewards);
        let is_eval_epoch = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let (eval_mean, eval_std) = if is_eval_epoch && cfg.eval_episodes > 0 {
            let stats = held_out_eval(cfg, env, scen, &params, epoch)?;
            (Some(stats.0), Some(stats.1))
        } else {
            (None, None)
        };

        if is_eval_epoch {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
                save_checkpoint(&path, &params, &env.bounds, cfg.seed, epoch + 1)?;
            }
        }

        let record = TrainLogRecord {
            epoch: epoch + 1,
            reward_train_mean: train_mean,
            reward_train_std: train_std,
            reward_eval_mean: eval_mean,
            reward_eval_std: eval_std,
            grad_norm,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(cb) = progress {
            cb(&record);
        }
        log.records.push(record);
    }

    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(&dir.join("final.ckpt"), &params, &env.bounds, cfg.seed, cfg.epochs)?;
    }
    Ok((params, log))
}

/// Held-out evaluation inside the training loop; scenarios live in their own
/// stream purpose, disjoint from every training episode.
fn held_out_eval(
    cfg: &TrainConfig,
    env: &EnvModel,
    scen: &ScenarioSettings,
    params: &PolicyParams,
    epoch: usize,
) -> Result<(f64, f64)> {
    let episodes: Vec<(u64, usize)> = (0..cfg.eval_episodes)
        .map(|i| {
            let episode = (epoch * cfg.eval_episodes + i) as u64;
            let mut rng = stream(cfg.seed, episode, Purpose::HeldOutEval);
            let n_l = rng.random_range(cfg.n_l_min..=cfg.n_l_max);
            (episode, n_l)
        })
        .collect();
    let rewards: Vec<Result<f64>> = episodes
        .par_iter()
        .map(|(episode, n_l)| {
            let mut scenario_cfg = scen.scenario_config(*n_l, cfg.seed, *episode);
            // Shift eval scenarios into a disjoint stream space.
            scenario_cfg.seed = cfg.seed ^ 0x6576616c; // "eval"
            let scenario = sample_scenario(&scenario_cfg, &env.target_model);
            rollout_eval(&scenario, env, Controller::Policy(params)).map(|t| t.reward_normalized)
        })
        .collect();
    let rewards: Vec<f64> = rewards.into_iter().collect::<Result<_>>()?;
    Ok(mean_std(&rewards))
}

/// Pooled evaluation statistics over a seed/episode grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
}

/// Evaluates a policy over `episodes` scenarios for each seed, pooling all
/// normalized rewards into one mean and standard deviation.
pub fn evaluate(
    params: &PolicyParams,
    env: &EnvModel,
    scen: &ScenarioSettings,
    n_l: usize,
    episodes: usize,
    motion: MotionKind,
    seeds: &[u64],
) -> Result<EvalStats> {
    let mut jobs = Vec::new();
    for &seed in seeds {
        for e in 0..episodes {
            jobs.push((seed, e as u64));
        }
    }
    let rewards: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|(seed, episode)| {
            let mut scen = scen.clone();
            scen.motion = motion;
            let scenario_cfg = scen.scenario_config(n_l, *seed, *episode);
            let scenario = sample_scenario(&scenario_cfg, &env.target_model);
            rollout_eval(&scenario, env, Controller::Policy(params)).map(|t| t.reward_normalized)
        })
        .collect();
    let rewards: Vec<f64> = rewards.into_iter().collect::<Result<_>>()?;
    let (mean, std) = mean_std(&rewards);
    Ok(EvalStats { mean, std, episodes: rewards.len() })
}

/// Same grid with the stationary zero-control baseline.
pub fn evaluate_zero_control(
    env: &EnvModel,
    scen: &ScenarioSettings,
    n_l: usize,
    episodes: usize,
    motion: MotionKind,
    seeds: &[u64],
) -> Result<EvalStats> {
    let mut rewards = Vec::new();
    for &seed in seeds {
        for e in 0..episodes {
            let mut scen = scen.clone();
            scen.motion = motion;
            let scenario_cfg = scen.scenario_config(n_l, seed, e as u64);
            let scenario = sample_scenario(&scenario_cfg, &env.target_model);
            rewards.push(rollout_eval(&scenario, env, Controller::Zero)?.reward_normalized);
        }
    }
    let (mean, std) = mean_std(&rewards);
    Ok(EvalStats { mean, std, episodes: rewards.len() })
}

// --- Checkpoint format -----------------------------------------------------
//
// magic "ATPG" | u32 LE version | u32 LE header length | JSON header |
// f64 LE theta array (length from the header layout) | u32 LE CRC32 of all
// preceding bytes.

const CHECKPOINT_MAGIC: &[u8; 4] = b"ATPG";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layout: PolicyLayout,
    pub alpha: f64,
    pub bounds: ControlBounds,
    pub n_y: usize,
    pub n_l_max: usize,
    pub seed: u64,
    pub epoch: usize,
}

pub fn save_checkpoint(
    path: &Path,
    params: &PolicyParams,
    bounds: &ControlBounds,
    seed: u64,
    epoch: usize,
) -> Result<()> {
    let header = CheckpointHeader {
        layout: params.layout,
        alpha: params.alpha,
        bounds: *bounds,
        n_y: params.layout.n_y,
        n_l_max: params.layout.n_l_max,
        seed,
        epoch,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::BadCheckpoint(format!("header serialization: {e}")))?;
    let mut buf = Vec::with_capacity(16 + header_bytes.len() + params.n_params() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for t in params.theta() {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, CheckpointHeader)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::BadCheckpoint("file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::ChecksumMismatch);
    }
    if &body[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    if body.len() < 12 + header_len {
        return Err(Error::BadCheckpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[12..12 + header_len])
        .map_err(|e| Error::BadCheckpoint(format!("header parse: {e}")))?;
    let theta_bytes = &body[12 + header_len..];
    let n_p = header.layout.n_params();
    if theta_bytes.len() != n_p * 8 {
        return Err(Error::BadCheckpoint(format!(
            "expected {} parameters, found {} bytes",
            n_p,
            theta_bytes.len()
        )));
    }
    let theta: Vec<f64> = theta_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = PolicyParams::from_parts(header.layout, header.alpha, theta)
        .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    Ok((params, header))
}
