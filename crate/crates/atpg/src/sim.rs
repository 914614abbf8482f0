//! Episode environment: scenario sampling, train-mode rollouts (smoothed,
//! measurement-free, with analytical gradient) and eval-mode rollouts
//! (sampled noise, hard-footprint Kalman updates), plus trace export.
//!
//! Everything random is pre-drawn in [`sample_scenario`] from counter-based
//! streams, so a scenario is a pure value and rollouts are deterministic
//! functions of `(scenario, params)`.

use crate::belief::{
    hard_update, info_weight, logdet_spd, predict_with_gain, smooth_update, TargetBelief,
    TargetModel,
};
use crate::error::Result;
use crate::fov::{body_frame, signed_distance, zeta, FovShape, ProbitParams};
use crate::gradient::{ControlJacobian, PerturbationState};
use crate::liegroup::{expmap, se3_right_jacobian, vee, Pose, Twist};
use crate::policy::{build_input, forward, jacobians, ControlBounds, PolicyParams};
use crate::rng::{stream, Purpose};
use nalgebra::{Cholesky, DMatrix, DVector, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Target drift regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    /// Zero-mean per-step inputs.
    Unbiased,
    /// A per-episode constant drift plus zero-mean noise.
    Biased,
}

impl std::str::FromStr for MotionKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unbiased" => Ok(MotionKind::Unbiased),
            "biased" => Ok(MotionKind::Biased),
            other => Err(format!("unknown motion kind '{other}' (expected biased|unbiased)")),
        }
    }
}

impl std::fmt::Display for MotionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MotionKind::Unbiased => write!(f, "unbiased"),
            MotionKind::Biased => write!(f, "biased"),
        }
    }
}

/// Belief accounting used by evaluation rollouts: hard Kalman updates on
/// geometric footprint membership, or the smoothed measurement-free update
/// (an ablation that mirrors the training-time accounting).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalFilter {
    Hard,
    Smoothed,
}

impl std::str::FromStr for EvalFilter {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hard" => Ok(EvalFilter::Hard),
            "smoothed" => Ok(EvalFilter::Smoothed),
            other => Err(format!("unknown eval filter '{other}' (expected hard|smoothed)")),
        }
    }
}

impl std::fmt::Display for EvalFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalFilter::Hard => write!(f, "hard"),
            EvalFilter::Smoothed => write!(f, "smoothed"),
        }
    }
}

/// Parameters of one episode draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_l: usize,
    /// Number of control steps `K`.
    pub horizon: usize,
    /// Step length in seconds.
    pub tau: f64,
    /// Half-width of the square spawn region for agent and targets.
    pub init_box: f64,
    /// Per-step uniform input bound (m/step).
    pub xi_bound: f64,
    /// Per-episode uniform drift bound in biased mode (m/step).
    pub bias_bound: f64,
    pub motion: MotionKind,
    /// Initial information scale: `Y_0 = y0_info * I`.
    pub y0_info: f64,
    /// Belief accounting for evaluation rollouts.
    pub eval_filter: EvalFilter,
    pub seed: u64,
    /// Episode index within the seed's stream space.
    pub episode: u64,
}

/// A fully sampled episode: spawn state plus every random draw the rollout
/// will consume.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: ScenarioConfig,
    pub agent_start: Pose,
    pub targets0: Vec<DVector<f64>>,
    pub beliefs0: Vec<TargetBelief>,
    /// Known inputs, `[target][step]`.
    pub xi: Vec<Vec<DVector<f64>>>,
    /// Process noise, `[target][step]`.
    pub process_noise: Vec<Vec<DVector<f64>>>,
    /// Measurement noise, `[target][step]` (used only when observed).
    pub meas_noise: Vec<Vec<DVector<f64>>>,
}

/// Everything about the world that is not per-episode: target model, sensor
/// footprint, probit smoothing, and control bounds.
#[derive(Debug, Clone)]
pub struct EnvModel {
    pub target_model: TargetModel,
    pub shape: FovShape,
    pub probit: ProbitParams,
    pub bounds: ControlBounds,
}

fn normal_vec<R: Rng>(rng: &mut R, chol: &DMatrix<f64>) -> DVector<f64> {
    let n = chol.nrows();
    let std: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
    chol * std
}

/// Uniform draw on `[-bound, bound)`; zero-width bounds yield zero.
fn uniform_sym<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..bound)
    } else {
        0.0
    }
}

/// Draws one episode. Deterministic in `(cfg.seed, cfg.episode)`; the draw
/// order is fixed, so adding consumers elsewhere cannot shift it.
pub fn sample_scenario(cfg: &ScenarioConfig, model: &TargetModel) -> Scenario {
    let n_y = model.state_dim();
    let m_y = model.input_dim();
    let n_z = model.measurement_dim();
    let w_chol = Cholesky::new(model.w.clone()).expect("W is positive definite").l();
    let v_chol = Cholesky::new(model.v.clone()).expect("V is positive definite").l();

    let mut rng = stream(cfg.seed, cfg.episode, Purpose::Scenario);
    let agent_start = Pose::from_planar(
        rng.random_range(-cfg.init_box..cfg.init_box),
        rng.random_range(-cfg.init_box..cfg.init_box),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    );

    let mut targets0 = Vec::with_capacity(cfg.n_l);
    let mut biases = Vec::with_capacity(cfg.n_l);
    for _ in 0..cfg.n_l {
        let mut y = DVector::zeros(n_y);
        for d in 0..2.min(n_y) {
            y[d] = rng.random_range(-cfg.init_box..cfg.init_box);
        }
        targets0.push(y);
        let bias = match cfg.motion {
            MotionKind::Unbiased => DVector::zeros(m_y),
            MotionKind::Biased => DVector::from_fn(m_y, |_, _| uniform_sym(&mut rng, cfg.bias_bound)),
        };
        biases.push(bias);
    }

    let xi: Vec<Vec<DVector<f64>>> = (0..cfg.n_l)
        .map(|j| {
            (0..cfg.horizon)
                .map(|_| &biases[j] + DVector::from_fn(m_y, |_, _| uniform_sym(&mut rng, cfg.xi_bound)))
                .collect()
        })
        .collect();

    // Initial belief means: true position plus process-scale noise.
    let beliefs0: Vec<TargetBelief> = targets0
        .iter()
        .map(|y| TargetBelief::isotropic(y + normal_vec(&mut rng, &w_chol), cfg.y0_info))
        .collect();

    let mut noise_rng = stream(cfg.seed, cfg.episode, Purpose::ProcessNoise);
    let process_noise: Vec<Vec<DVector<f64>>> = (0..cfg.n_l)
        .map(|_| (0..cfg.horizon).map(|_| normal_vec(&mut noise_rng, &w_chol)).collect())
        .collect();

    let mut meas_rng = stream(cfg.seed, cfg.episode, Purpose::MeasurementNoise);
    let meas_noise: Vec<Vec<DVector<f64>>> = (0..cfg.n_l)
        .map(|_| {
            (0..cfg.horizon)
                .map(|_| {
                    let std: DVector<f64> =
                        DVector::from_fn(n_z, |_, _| meas_rng.sample(StandardNormal));
                    &v_chol * std
                })
                .collect()
        })
        .collect();

    Scenario { cfg: cfg.clone(), agent_start, targets0, beliefs0, xi, process_noise, meas_noise }
}

/// One target's record at one trace step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceTarget {
    pub mean: Vec<f64>,
    /// Row-major `n_y * n_y` information matrix.
    pub info: Vec<f64>,
    /// Smoothed information weight `1 - phi(d)` of the belief mean.
    pub weight: f64,
    /// Geometric footprint membership of the true target state.
    pub in_fov: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: f64,
    /// Row-major 4x4 pose.
    pub pose: Vec<f64>,
    /// Twist applied at this step (zeros on the terminal record).
    pub u: Vec<f64>,
    pub targets: Vec<TraceTarget>,
}

/// Time-indexed episode record: `K + 1` states carrying `K` controls, plus
/// the normalized terminal reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub steps: Vec<TraceStep>,
    pub reward_normalized: f64,
}

fn pose_row_major(p: &Pose) -> Vec<f64> {
    let m = p.matrix();
    (0..4).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect()
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl EpisodeTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map_err(|e| crate::Error::InvalidConfig(format!("trace parse error: {e}")))
    }

    /// Flat CSV: one row per step per target.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n_y = self.steps.first().and_then(|s| s.targets.first()).map_or(0, |t| t.mean.len());
        let mean_cols: Vec<String> = (0..n_y).map(|i| format!("mean_{i}")).collect();
        writeln!(
            w,
            "step,t,agent_x,agent_y,agent_yaw,u_vx,u_wz,target,{},logdet_info,weight,in_fov",
            mean_cols.join(",")
        )?;
        for (k, step) in self.steps.iter().enumerate() {
            let yaw = step.pose[4].atan2(step.pose[0]);
            for (j, tgt) in step.targets.iter().enumerate() {
                let n = tgt.mean.len();
                let info = DMatrix::from_row_slice(n, n, &tgt.info);
                let logdet = logdet_spd(&info).unwrap_or(f64::NAN);
                let means: Vec<String> = tgt.mean.iter().map(|m| fmt_f64(*m)).collect();
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    k,
                    fmt_f64(step.t),
                    fmt_f64(step.pose[3]),
                    fmt_f64(step.pose[7]),
                    fmt_f64(yaw),
                    fmt_f64(step.u[0]),
                    fmt_f64(step.u[5]),
                    j,
                    means.join(","),
                    fmt_f64(logdet),
                    fmt_f64(tgt.weight),
                    tgt.in_fov as u8
                )?;
            }
        }
        Ok(())
    }
}

/// Control source of an eval rollout.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    Policy(&'a PolicyParams),
    /// Stationary agent, used as a reference baseline.
    Zero,
    /// Pre-recorded controls (trace replay).
    Scripted(&'a [Twist]),
}

/// Result of one training rollout.
#[derive(Debug, Clone)]
pub struct TrainRollout {
    pub trace: EpisodeTrace,
    /// Unnormalized terminal reward `sum_j log det Y_K`.
    pub reward_total: f64,
    pub reward_normalized: f64,
    /// `d reward_total / d theta`, empty if gradients were not requested.
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RolloutOptions {
    pub compute_gradient: bool,
    /// Negative-control hook: corrupt one exponential-map derivative so the
    /// verification suite must flag the gradient.
    pub corrupt_exp_derivative: bool,
}

fn record_step(
    t: f64,
    pose: &Pose,
    u: Option<&Twist>,
    beliefs: &[TargetBelief],
    truths: &[DVector<f64>],
    env: &EnvModel,
) -> TraceStep {
    let targets = beliefs
        .iter()
        .zip(truths.iter())
        .map(|(b, y)| {
            let (weight, _) = info_weight(pose, &b.mean, &env.shape, &env.probit);
            let q = body_frame(pose, &zeta(y));
            let (d, _) = signed_distance(&q, &env.shape);
            let n = b.dim();
            TraceTarget {
                mean: b.mean.as_slice().to_vec(),
                info: (0..n * n).map(|k| b.info[(k / n, k % n)]).collect(),
                weight,
                in_fov: d <= 0.0,
            }
        })
        .collect();
    TraceStep {
        t,
        pose: pose_row_major(pose),
        u: u.map_or(vec![0.0; 6], |u| u.as_slice().to_vec()),
        targets,
    }
}

/// Training rollout: measurement-free smoothed information updates with the
/// analytical reward gradient propagated alongside.
pub fn rollout_train(
    scenario: &Scenario,
    env: &EnvModel,
    params: &PolicyParams,
) -> Result<TrainRollout> {
    let opts = RolloutOptions { compute_gradient: true, ..Default::default() };
    rollout_train_opts(scenario, env, params, opts).map(|(r, _)| r)
}

/// Training rollout without gradient propagation; the reward follows the
/// exact same code path as [`rollout_train`].
pub fn rollout_train_reward(
    scenario: &Scenario,
    env: &EnvModel,
    params: &PolicyParams,
) -> Result<f64> {
    let opts = RolloutOptions::default();
    rollout_train_opts(scenario, env, params, opts).map(|(r, _)| r.reward_total)
}

/// Training rollout exposing the terminal perturbation state for
/// verification against finite differences.
pub fn rollout_train_opts(
    scenario: &Scenario,
    env: &EnvModel,
    params: &PolicyParams,
    opts: RolloutOptions,
) -> Result<(TrainRollout, PerturbationState)> {
    let model = &env.target_model;
    let n_l = scenario.cfg.n_l;
    let n_y = model.state_dim();
    let n_p = params.n_params();
    let tau = scenario.cfg.tau;
    let vech_len = params.layout.vech_len();

    let mut pose = scenario.agent_start;
    let mut beliefs = scenario.beliefs0.clone();
    let mut truths = scenario.targets0.clone();
    let mut state = PerturbationState::new(if opts.compute_gradient { n_p } else { 0 }, n_l, n_y);
    state.set_exp_derivative_corruption(opts.corrupt_exp_derivative);

    let mut steps = Vec::with_capacity(scenario.cfg.horizon + 1);

    for k in 0..scenario.cfg.horizon {
        // Predict every target one step ahead.
        let mut priors = Vec::with_capacity(n_l);
        for (j, b) in beliefs.iter().enumerate() {
            let (prior, gain) = predict_with_gain(b, &scenario.xi[j][k], model)?;
            if opts.compute_gradient {
                state.predict_psi(j, &gain);
            }
            priors.push(prior);
        }

        let input = build_input(&pose, &priors, params.layout.n_l_max)?;
        let (u, cache) = forward(&input, params, &env.bounds);

        steps.push(record_step(k as f64 * tau, &pose, Some(&u), &beliefs, &truths, env));

        if opts.compute_gradient {
            let jacs = jacobians(&cache, params)?;
            // Feedback of the perturbations through the network input: the
            // pose enters via its log coordinates, the predicted information
            // via its vech coordinates. Predicted means do not depend on the
            // parameters.
            let jr_inv = se3_right_jacobian(&input.pose_log)
                .try_inverse()
                .expect("right Jacobian is invertible on the admissible domain");
            let t_inv = *pose.inverse().matrix();
            // Pose rows combined once: feed = (Jr^-T jac_pose) . vee(Tinv Lambda).
            let pose_rows: [Vector6<f64>; 2] = [
                jr_inv.transpose() * Vector6::from_column_slice(&jacs.pose[0]),
                jr_inv.transpose() * Vector6::from_column_slice(&jacs.pose[1]),
            ];
            let xis: Vec<Vector6<f64>> =
                (0..n_p).map(|i| vee(&(t_inv * state.lambda(i)))).collect();
            let mut cj = ControlJacobian::zeros(n_p);
            for (r, &twist_row) in crate::policy::ACTIVE_TWIST_ROWS.iter().enumerate() {
                let row = cj.row_mut(twist_row);
                for i in 0..n_p {
                    let mut feed = pose_rows[r].dot(&xis[i]);
                    for j in 0..n_l {
                        let coeffs = &jacs.infos[r][j * vech_len..(j + 1) * vech_len];
                        feed += state.psi_vech_dot(j, i, coeffs);
                    }
                    row[i] = jacs.param[r][i] + feed;
                }
            }
            state.step_lambda(&pose, &u, &cj, tau);
        }

        let next_pose = pose.compose(&expmap(&u, tau));

        // True targets evolve with sampled process noise; beliefs never see
        // measurements in training mode.
        for (j, y) in truths.iter_mut().enumerate() {
            *y = &model.a * &*y + &model.b * &scenario.xi[j][k] + &scenario.process_noise[j][k];
        }

        let mut posts = Vec::with_capacity(n_l);
        for (j, prior) in priors.iter().enumerate() {
            if opts.compute_gradient {
                state.commit_omega(j, prior, &next_pose, model, &env.shape, &env.probit);
            }
            posts.push(smooth_update(prior, &next_pose, model, &env.shape, &env.probit));
        }
        beliefs = posts;
        pose = next_pose;
    }

    steps.push(record_step(
        scenario.cfg.horizon as f64 * tau,
        &pose,
        None,
        &beliefs,
        &truths,
        env,
    ));

    let mut reward_total = 0.0;
    for b in &beliefs {
        reward_total += b.logdet_info()?;
    }
    let reward_normalized = reward_total / n_l as f64;

    let gradient = if opts.compute_gradient {
        let infos: Vec<DMatrix<f64>> = beliefs.iter().map(|b| b.info.clone()).collect();
        state.reward_gradient(&infos)?
    } else {
        Vec::new()
    };

    Ok((
        TrainRollout {
            trace: EpisodeTrace { steps, reward_normalized },
            reward_total,
            reward_normalized,
            gradient,
        },
        state,
    ))
}

/// Evaluation rollout: true targets evolve with sampled noise, measurements
/// are taken for targets geometrically inside the footprint, and beliefs use
/// hard Kalman updates. Returns the trace with the normalized reward.
pub fn rollout_eval(
    scenario: &Scenario,
    env: &EnvModel,
    controller: Controller<'_>,
) -> Result<EpisodeTrace> {
    let model = &env.target_model;
    let n_l = scenario.cfg.n_l;
    let tau = scenario.cfg.tau;

    let mut pose = scenario.agent_start;
    let mut beliefs = scenario.beliefs0.clone();
    let mut truths = scenario.targets0.clone();

    let mut steps = Vec::with_capacity(scenario.cfg.horizon + 1);

    for k in 0..scenario.cfg.horizon {
        let mut priors = Vec::with_capacity(n_l);
        for (j, b) in beliefs.iter().enumerate() {
            let (prior, _) = predict_with_gain(b, &scenario.xi[j][k], model)?;
            priors.push(prior);
        }

        let u = match controller {
            Controller::Policy(params) => {
                let input = build_input(&pose, &priors, params.layout.n_l_max)?;
                forward(&input, params, &env.bounds).0
            }
            Controller::Zero => Twist::zeros(),
            Controller::Scripted(controls) => controls[k],
        };

        steps.push(record_step(k as f64 * tau, &pose, Some(&u), &beliefs, &truths, env));

        let next_pose = pose.compose(&expmap(&u, tau));

        for (j, y) in truths.iter_mut().enumerate() {
            *y = &model.a * &*y + &model.b * &scenario.xi[j][k] + &scenario.process_noise[j][k];
        }

        let mut posts = Vec::with_capacity(n_l);
        for (j, prior) in priors.iter().enumerate() {
            match scenario.cfg.eval_filter {
                EvalFilter::Hard => {
                    let q = body_frame(&next_pose, &zeta(&truths[j]));
                    let (d, _) = signed_distance(&q, &env.shape);
                    if d <= 0.0 {
                        let z = &model.h * &truths[j] + &scenario.meas_noise[j][k];
                        posts.push(hard_update(prior, &z, model)?);
                    } else {
                        posts.push(prior.clone());
                    }
                }
                EvalFilter::Smoothed => {
                    posts.push(smooth_update(prior, &next_pose, model, &env.shape, &env.probit));
                }
            }
        }
        beliefs = posts;
        pose = next_pose;
    }

    steps.push(record_step(
        scenario.cfg.horizon as f64 * tau,
        &pose,
        None,
        &beliefs,
        &truths,
        env,
    ));

    let mut reward_total = 0.0;
    for b in &beliefs {
        reward_total += b.logdet_info()?;
    }
    Ok(EpisodeTrace { steps, reward_normalized: reward_total / n_l as f64 })
}

/// Replays a control sequence through the kinematics. Used to validate
/// exported traces.
pub fn replay_poses(start: &Pose, controls: &[Twist], tau: f64) -> Vec<Pose> {
    let mut poses = vec![*start];
    for u in controls {
        let next = poses.last().unwrap().compose(&expmap(u, tau));
        poses.push(next);
    }
    poses
}

/// Pulls the applied controls back out of a trace (the terminal record
/// carries no control).
pub fn trace_controls(trace: &EpisodeTrace) -> Vec<Twist> {
    trace.steps[..trace.steps.len() - 1]
        .iter()
        .map(|s| Twist::from_column_slice(&s.u))
        .collect()
}

/// Parses the pose of a trace step back into a [`Pose`].
pub fn trace_pose(step: &TraceStep) -> Pose {
    Pose::from_matrix(nalgebra::Matrix4::from_row_slice(&step.pose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyLayout;
    use std::f64::consts::PI;

    fn env() -> EnvModel {
        EnvModel {
            target_model: TargetModel::planar(0.2, 0.05).unwrap(),
            shape: FovShape::triangle2d(2.0, PI / 3.0).unwrap(),
            probit: ProbitParams::new(0.4).unwrap(),
            bounds: ControlBounds::default(),
        }
    }

    fn cfg(n_l: usize, horizon: usize, seed: u64, episode: u64) -> ScenarioConfig {
        ScenarioConfig {
            n_l,
            horizon,
            tau: 0.5,
            init_box: 3.0,
            xi_bound: 0.2,
            bias_bound: 0.2,
            motion: MotionKind::Biased,
            y0_info: 1.0,
            eval_filter: EvalFilter::Hard,
            seed,
            episode,
        }
    }

    fn tiny_params(seed: u64) -> PolicyParams {
        PolicyParams::init_random(PolicyLayout::tiny(2, 4), 4.0, seed).unwrap()
    }

    #[test]
    fn scenarios_are_deterministic() {
        let e = env();
        let c = cfg(3, 10, 42, 7);
        let a = sample_scenario(&c, &e.target_model);
        let b = sample_scenario(&c, &e.target_model);
        assert_eq!(a.agent_start.matrix(), b.agent_start.matrix());
        assert_eq!(a.targets0, b.targets0);
        assert_eq!(a.xi, b.xi);
        assert_eq!(a.process_noise, b.process_noise);
        assert_eq!(a.meas_noise, b.meas_noise);
    }

    #[test]
    fn zero_bias_bound_reduces_biased_to_unbiased() {
        let e = env();
        let mut c = cfg(2, 5, 1, 0);
        c.bias_bound = 0.0;
        let s = sample_scenario(&c, &e.target_model);
        for j in 0..2 {
            for k in 0..5 {
                assert!(s.xi[j][k].amax() <= c.xi_bound);
            }
        }
    }

    #[test]
    fn unbiased_inputs_have_near_zero_mean() {
        let e = env();
        let mut c = cfg(1, 1000, 9, 0);
        c.motion = MotionKind::Unbiased;
        let mut sum = DVector::zeros(2);
        let mut count = 0.0f64;
        for episode in 0..100 {
            c.episode = episode;
            let s = sample_scenario(&c, &e.target_model);
            for x in &s.xi[0] {
                sum += x;
                count += 1.0;
            }
        }
        // 1e5 draws of U[-0.2, 0.2]: sigma_mean = 0.2/sqrt(3)/sqrt(N).
        let bound = 3.0 * (0.2 / 3.0f64.sqrt()) / count.sqrt();
        assert!((sum / count).norm() < bound, "empirical mean too far from zero");
    }

    #[test]
    fn zero_horizon_reward_is_initial_logdet() {
        let e = env();
        let c = cfg(2, 0, 3, 0);
        let s = sample_scenario(&c, &e.target_model);
        let params = tiny_params(1);
        let (r, _) = rollout_train_opts(
            &s,
            &e,
            &params,
            RolloutOptions { compute_gradient: true, ..Default::default() },
        )
        .unwrap();
        assert_eq!(r.trace.steps.len(), 1);
        assert!(r.reward_total.abs() < 1e-12); // log det I = 0
        assert!(r.gradient.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn train_rollouts_are_deterministic() {
        let e = env();
        let c = cfg(3, 12, 5, 2);
        let s = sample_scenario(&c, &e.target_model);
        let params = tiny_params(8);
        let a = rollout_train(&s, &e, &params).unwrap();
        let b = rollout_train(&s, &e, &params).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.gradient, b.gradient);
        assert_eq!(a.reward_total.to_bits(), b.reward_total.to_bits());
    }

    #[test]
    fn reward_only_path_matches_gradient_path() {
        let e = env();
        let c = cfg(2, 15, 6, 1);
        let s = sample_scenario(&c, &e.target_model);
        let params = tiny_params(3);
        let full = rollout_train(&s, &e, &params).unwrap();
        let lean = rollout_train_reward(&s, &e, &params).unwrap();
        assert_eq!(full.reward_total.to_bits(), lean.to_bits());
    }

    #[test]
    fn trace_has_k_plus_one_states() {
        let e = env();
        let c = cfg(2, 9, 10, 0);
        let s = sample_scenario(&c, &e.target_model);
        let params = tiny_params(4);
        let r = rollout_train(&s, &e, &params).unwrap();
        assert_eq!(r.trace.steps.len(), 10);
        // Terminal record carries no control.
        assert!(r.trace.steps[9].u.iter().all(|x| *x == 0.0));
        let eval = rollout_eval(&s, &e, Controller::Policy(&params)).unwrap();
        assert_eq!(eval.steps.len(), 10);
    }

    #[test]
    fn eval_rollouts_are_deterministic() {
        let e = env();
        let c = cfg(3, 12, 11, 4);
        let s = sample_scenario(&c, &e.target_model);
        let params = tiny_params(5);
        let a = rollout_eval(&s, &e, Controller::Policy(&params)).unwrap();
        let b = rollout_eval(&s, &e, Controller::Policy(&params)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn replay_reproduces_poses() {
        let e = env();
        let c = cfg(2, 14, 12, 0);
        let s = sample_scenario(&c, &e.target_model);
        let params = tiny_params(6);
        let trace = rollout_eval(&s, &e, Controller::Policy(&params)).unwrap();
        let controls = trace_controls(&trace);
        let poses = replay_poses(&s.agent_start, &controls, c.tau);
        for (step, pose) in trace.steps.iter().zip(&poses) {
            let recorded = trace_pose(step);
            assert!((recorded.matrix() - pose.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn never_observed_targets_follow_pure_prediction() {
        let e = env();
        let mut c = cfg(1, 20, 13, 0);
        // Spawn box far away so the stationary agent never sees the target.
        c.init_box = 0.5;
        let mut s = sample_scenario(&c, &e.target_model);
        s.targets0[0] = DVector::from_vec(vec![50.0, 50.0]);
        s.beliefs0[0] = TargetBelief::isotropic(s.targets0[0].clone(), 1.0);
        let trace = rollout_eval(&s, &e, Controller::Zero).unwrap();
        assert!(trace.steps.iter().all(|st| !st.targets[0].in_fov));
        // Closed form per axis: y' = (y^-1 + sigma2^2)^-1.
        let mut y = 1.0;
        for _ in 0..20 {
            y = 1.0 / (1.0 / y + 0.05f64.powi(2));
        }
        let expected = 2.0 * y.ln();
        assert!((trace.reward_normalized - expected).abs() < 1e-9);
    }

    #[test]
    fn observed_targets_track_better_than_unobserved() {
        // Episode-averaged squared estimation error of targets observed at
        // least once must be statistically below that of never-observed
        // targets (one-sided comparison over 100 episodes).
        let e = env();
        let mut seen_err = Vec::new();
        let mut unseen_err = Vec::new();
        for episode in 0..100 {
            let mut c = cfg(3, 25, 77, episode);
            // Calibrated initial information (the mean perturbation has
            // covariance W), so updates are correctly weighted.
            c.y0_info = 1.0 / 0.05f64.powi(2);
            let s = sample_scenario(&c, &e.target_model);
            let trace = rollout_eval(&s, &e, Controller::Zero).unwrap();
            // Walk the true states alongside the recorded belief means.
            let mut truths = s.targets0.clone();
            let mut err_sum = vec![0.0; 3];
            for (k, step) in trace.steps.iter().enumerate() {
                for j in 0..3 {
                    let mean = DVector::from_vec(step.targets[j].mean.clone());
                    err_sum[j] += (&truths[j] - &mean).norm_squared();
                }
                if k < c.horizon {
                    for (j, y) in truths.iter_mut().enumerate() {
                        *y = &e.target_model.a * &*y
                            + &e.target_model.b * &s.xi[j][k]
                            + &s.process_noise[j][k];
                    }
                }
            }
            for j in 0..3 {
                let observed = trace.steps.iter().any(|st| st.targets[j].in_fov);
                let avg = err_sum[j] / trace.steps.len() as f64;
                if observed {
                    seen_err.push(avg);
                } else {
                    unseen_err.push(avg);
                }
            }
        }
        assert!(seen_err.len() > 5, "not enough observed targets in the sample");
        assert!(unseen_err.len() > 5, "not enough unobserved targets in the sample");
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&seen_err) < mean(&unseen_err),
            "observed {} vs unobserved {}",
            mean(&seen_err),
            mean(&unseen_err)
        );
    }

    #[test]
    fn reward_is_invariant_to_target_permutation() {
        let e = env();
        let c = cfg(3, 10, 14, 0);
        let s = sample_scenario(&c, &e.target_model);
        let mut permuted = s.clone();
        permuted.targets0.rotate_left(1);
        permuted.beliefs0.rotate_left(1);
        permuted.xi.rotate_left(1);
        permuted.process_noise.rotate_left(1);
        permuted.meas_noise.rotate_left(1);
        let params = tiny_params(7);
        let a = rollout_eval(&s, &e, Controller::Policy(&params)).unwrap();
        let b = rollout_eval(&permuted, &e, Controller::Policy(&params)).unwrap();
        assert!((a.reward_normalized - b.reward_normalized).abs() < 1e-9);
    }

    #[test]
    fn chasing_controls_beat_fleeing_controls() {
        // A scripted run driving straight through the targets' area must
        // collect more terminal information than one driving away.
        let e = env();
        let mut c = cfg(3, 20, 15, 0);
        c.init_box = 0.1;
        let mut s = sample_scenario(&c, &e.target_model);
        s.agent_start = Pose::from_planar(0.0, 0.0, 0.0);
        for (j, t) in s.targets0.iter_mut().enumerate() {
            *t = DVector::from_vec(vec![4.0 + j as f64 * 0.7, 0.3 * j as f64 - 0.3]);
            s.beliefs0[j] = TargetBelief::isotropic(t.clone(), 1.0);
        }
        let forward_controls = vec![Twist::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0); 20];
        let away_controls = vec![Twist::new(-1.0, 0.0, 0.0, 0.0, 0.0, 0.0); 20];
        let toward = rollout_eval(&s, &e, Controller::Scripted(&forward_controls)).unwrap();
        let away = rollout_eval(&s, &e, Controller::Scripted(&away_controls)).unwrap();
        assert!(
            toward.reward_normalized > away.reward_normalized + 1.0,
            "toward {} vs away {}",
            toward.reward_normalized,
            away.reward_normalized
        );
    }

    /// Constant-output policy: zero weights, pinned output biases.
    fn constant_policy(v_bias: f64, w_bias: f64) -> PolicyParams {
        let layout = PolicyLayout::tiny(2, 4);
        let mut theta = vec![0.0; layout.n_params()];
        let n = theta.len();
        theta[n - 2] = v_bias;
        theta[n - 1] = w_bias;
        PolicyParams::from_parts(layout, 4.0, theta).unwrap()
    }

    #[test]
    fn train_reward_prefers_driving_through_targets() {
        // Same scenario, two constant policies: full speed ahead through the
        // targets versus standing still short of them.
        let e = env();
        let mut c = cfg(3, 20, 16, 0);
        c.init_box = 0.1;
        let mut s = sample_scenario(&c, &e.target_model);
        s.agent_start = Pose::from_planar(0.0, 0.0, 0.0);
        for (j, t) in s.targets0.iter_mut().enumerate() {
            *t = DVector::from_vec(vec![6.0 + j as f64, 0.4 * j as f64 - 0.4]);
            s.beliefs0[j] = TargetBelief::isotropic(t.clone(), 1.0);
        }
        let through = rollout_train_reward(&s, &e, &constant_policy(40.0, 0.0)).unwrap();
        let stay = rollout_train_reward(&s, &e, &constant_policy(-40.0, 0.0)).unwrap();
        assert!(through > stay + 1.0, "through {through} vs stay {stay}");
    }

    #[test]
    fn smoothed_eval_accounting_matches_train_reward() {
        let e = env();
        let mut c = cfg(3, 12, 18, 2);
        c.eval_filter = EvalFilter::Smoothed;
        let s = sample_scenario(&c, &e.target_model);
        let params = tiny_params(11);
        let eval = rollout_eval(&s, &e, Controller::Policy(&params)).unwrap();
        let train = rollout_train(&s, &e, &params).unwrap();
        assert_eq!(eval.reward_normalized.to_bits(), train.reward_normalized.to_bits());
        // Hard accounting differs (a measurement-driven path).
        let mut c_hard = c.clone();
        c_hard.eval_filter = EvalFilter::Hard;
        let s_hard = sample_scenario(&c_hard, &e.target_model);
        let hard = rollout_eval(&s_hard, &e, Controller::Policy(&params)).unwrap();
        assert_ne!(hard.reward_normalized.to_bits(), train.reward_normalized.to_bits());
    }
}
