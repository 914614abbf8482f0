//! Flat-sectioned key-value configuration with typed validation.
//!
//! The format is INI-like: `[section]` headers, `key = value` lines, `#` or
//! `;` comments. Unknown sections or keys are rejected so typos cannot
//! silently fall back to defaults. The effective configuration (defaults,
//! then file, then flag overrides) is echoed into every output directory.

use crate::belief::TargetModel;
use crate::error::{Error, Result};
use crate::fov::{FovShape, ProbitParams};
use crate::policy::{ControlBounds, PolicyLayout};
use crate::sim::{EnvModel, EvalFilter, MotionKind};
use crate::trainer::{ScenarioSettings, TrainConfig};
use std::path::Path;

/// Full runtime configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioSettings,
    pub fov_depth: f64,
    pub fov_half_angle: f64,
    pub kappa: f64,
    pub n_y: usize,
    pub sigma_sensor: f64,
    pub sigma_motion: f64,
    pub n_l_max_policy: usize,
    pub alpha: f64,
    pub ap_fc1: usize,
    pub ap_fc2: usize,
    pub li_fc1: usize,
    pub li_fc2: usize,
    pub out_fc1: usize,
    pub bounds: ControlBounds,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: ScenarioSettings::default(),
            fov_depth: 2.0,
            fov_half_angle: std::f64::consts::FRAC_PI_3,
            kappa: 0.4,
            n_y: 2,
            sigma_sensor: 0.2,
            sigma_motion: 0.05,
            n_l_max_policy: 8,
            alpha: 4.0,
            ap_fc1: 32,
            ap_fc2: 32,
            li_fc1: 64,
            li_fc2: 32,
            out_fc1: 64,
            bounds: ControlBounds::default(),
            train: TrainConfig::default(),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn parse<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| bad(format!("[{section}] {key}: cannot parse '{value}'")))
}

fn parse_optional_f64(section: &str, key: &str, value: &str) -> Result<Option<f64>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse::<f64>(section, key, value).map(Some)
    }
}

impl RunConfig {
    /// Defaults overlaid with an optional config file.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                bad(format!("cannot read config file {}: {e}", path.display()))
            })?;
            cfg.apply_text(&text)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines from an INI-style document.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(bad(format!("line {}: malformed section header", lineno + 1)));
                }
                section = line[1..line.len() - 1].trim().to_string();
                if !matches!(
                    section.as_str(),
                    "environment" | "fov" | "probit" | "target_model" | "policy" | "trainer"
                ) {
                    return Err(bad(format!("line {}: unknown section [{section}]", lineno + 1)));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected 'key = value'", lineno + 1)))?;
            self.set(&section, key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one typed key; rejects unknown keys.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("environment", "tau") => self.scenario.tau = parse(section, key, value)?,
            ("environment", "horizon") => {
                self.scenario.horizon = if value == "auto" {
                    None
                } else {
                    Some(parse::<usize>(section, key, value)?)
                }
            }
            ("environment", "init_box") => {
                self.scenario.init_box = parse_optional_f64(section, key, value)?
            }
            ("environment", "xi_bound") => self.scenario.xi_bound = parse(section, key, value)?,
            ("environment", "bias_bound") => self.scenario.bias_bound = parse(section, key, value)?,
            ("environment", "motion") => {
                self.scenario.motion = value.parse::<MotionKind>().map_err(bad)?
            }
            ("environment", "y0_info") => self.scenario.y0_info = parse(section, key, value)?,
            ("environment", "eval_filter") => {
                self.scenario.eval_filter = value.parse::<EvalFilter>().map_err(bad)?
            }
            ("fov", "depth") => self.fov_depth = parse(section, key, value)?,
            ("fov", "half_angle") => self.fov_half_angle = parse(section, key, value)?,
            ("probit", "kappa") => self.kappa = parse(section, key, value)?,
            ("target_model", "n_y") => self.n_y = parse(section, key, value)?,
            ("target_model", "sigma_sensor") => self.sigma_sensor = parse(section, key, value)?,
            ("target_model", "sigma_motion") => self.sigma_motion = parse(section, key, value)?,
            ("policy", "n_l_max") => self.n_l_max_policy = parse(section, key, value)?,
            ("policy", "alpha") => self.alpha = parse(section, key, value)?,
            ("policy", "ap_fc1") => self.ap_fc1 = parse(section, key, value)?,
            ("policy", "ap_fc2") => self.ap_fc2 = parse(section, key, value)?,
            ("policy", "li_fc1") => self.li_fc1 = parse(section, key, value)?,
            ("policy", "li_fc2") => self.li_fc2 = parse(section, key, value)?,
            ("policy", "out_fc1") => self.out_fc1 = parse(section, key, value)?,
            ("policy", "v_min") => self.bounds.v_min = parse(section, key, value)?,
            ("policy", "v_max") => self.bounds.v_max = parse(section, key, value)?,
            ("policy", "omega_min") => self.bounds.omega_min = parse(section, key, value)?,
            ("policy", "omega_max") => self.bounds.omega_max = parse(section, key, value)?,
            ("trainer", "epochs") => self.train.epochs = parse(section, key, value)?,
            ("trainer", "episodes_per_batch") => {
                self.train.episodes_per_batch = parse(section, key, value)?
            }
            ("trainer", "learning_rate") => self.train.learning_rate = parse(section, key, value)?,
            ("trainer", "momentum") => self.train.momentum = parse(section, key, value)?,
            ("trainer", "clip_norm") => {
                self.train.clip_norm = if value == "none" {
                    None
                } else {
                    Some(parse::<f64>(section, key, value)?)
                }
            }
            ("trainer", "n_l_min") => self.train.n_l_min = parse(section, key, value)?,
            ("trainer", "n_l_max") => self.train.n_l_max = parse(section, key, value)?,
            ("trainer", "eval_every") => self.train.eval_every = parse(section, key, value)?,
            ("trainer", "eval_episodes") => self.train.eval_episodes = parse(section, key, value)?,
            ("trainer", "seed") => self.train.seed = parse(section, key, value)?,
            _ => {
                return Err(bad(format!("unknown key [{section}] {key}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scenario.tau > 0.0) {
            return Err(bad("tau must be positive"));
        }
        if let Some(h) = self.scenario.horizon {
            if h == 0 {
                return Err(bad("horizon must be at least 1"));
            }
        }
        if let Some(b) = self.scenario.init_box {
            if !(b > 0.0) {
                return Err(bad("init_box must be positive"));
            }
        }
        if self.scenario.xi_bound < 0.0 || self.scenario.bias_bound < 0.0 {
            return Err(bad("input bounds must be non-negative"));
        }
        if !(self.scenario.y0_info > 0.0) {
            return Err(bad("y0_info must be positive"));
        }
        if !(self.sigma_sensor > 0.0 && self.sigma_motion > 0.0) {
            return Err(bad("noise magnitudes must be positive"));
        }
        FovShape::triangle2d(self.fov_depth, self.fov_half_angle)?;
        ProbitParams::new(self.kappa)?;
        self.bounds.validate()?;
        self.policy_layout().validate()?;
        if !(self.alpha > 0.0) {
            return Err(bad("alpha must be positive"));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(bad("learning_rate must be positive"));
        }
        self.train.validate()?;
        if self.train.n_l_max > self.n_l_max_policy {
            return Err(bad(format!(
                "training target counts up to {} exceed the policy slot count {}",
                self.train.n_l_max, self.n_l_max_policy
            )));
        }
        Ok(())
    }

    pub fn policy_layout(&self) -> PolicyLayout {
        PolicyLayout {
            n_y: self.n_y,
            n_l_max: self.n_l_max_policy,
            ap_fc1: self.ap_fc1,
            ap_fc2: self.ap_fc2,
            li_fc1: self.li_fc1,
            li_fc2: self.li_fc2,
            out_fc1: self.out_fc1,
        }
    }

    pub fn env_model(&self) -> Result<EnvModel> {
        if self.n_y != 2 {
            return Err(bad("only the planar target model (n_y = 2) is configurable"));
        }
        Ok(EnvModel {
            target_model: TargetModel::planar(self.sigma_sensor, self.sigma_motion)?,
            shape: FovShape::triangle2d(self.fov_depth, self.fov_half_angle)?,
            probit: ProbitParams::new(self.kappa)?,
            bounds: self.bounds,
        })
    }

    /// Serializes the effective configuration back to the file format.
    pub fn to_ini(&self) -> String {
        let horizon = self.scenario.horizon.map_or("auto".into(), |h| h.to_string());
        let init_box = self.scenario.init_box.map_or("auto".into(), |b| format!("{b:.17}"));
        let clip = self.train.clip_norm.map_or("none".into(), |c| format!("{c:.17}"));
        format!(
            "[environment]\n\
             tau = {tau:.17}\n\
             horizon = {horizon}\n\
             init_box = {init_box}\n\
             xi_bound = {xi:.17}\n\
             bias_bound = {bias:.17}\n\
             motion = {motion}\n\
             y0_info = {y0:.17}\n\
             eval_filter = {eval_filter}\n\
             \n[fov]\n\
             depth = {depth:.17}\n\
             half_angle = {half_angle:.17}\n\
             \n[probit]\n\
             kappa = {kappa:.17}\n\
             \n[target_model]\n\
             n_y = {n_y}\n\
             sigma_sensor = {ss:.17}\n\
             sigma_motion = {sm:.17}\n\
             \n[policy]\n\
             n_l_max = {nlmax}\n\
             alpha = {alpha:.17}\n\
             ap_fc1 = {ap1}\nap_fc2 = {ap2}\nli_fc1 = {li1}\nli_fc2 = {li2}\nout_fc1 = {out1}\n\
             v_min = {vmin:.17}\nv_max = {vmax:.17}\n\
             omega_min = {omin:.17}\nomega_max = {omax:.17}\n\
             \n[trainer]\n\
             epochs = {epochs}\n\
             episodes_per_batch = {epb}\n\
             learning_rate = {lr:.17}\n\
             momentum = {mom:.17}\n\
             clip_norm = {clip}\n\
             n_l_min = {tnlmin}\n\
             n_l_max = {tnlmax}\n\
             eval_every = {ee}\n\
             eval_episodes = {eep}\n\
             seed = {seed}\n",
            tau = self.scenario.tau,
            xi = self.scenario.xi_bound,
            bias = self.scenario.bias_bound,
            motion = self.scenario.motion,
            y0 = self.scenario.y0_info,
            eval_filter = self.scenario.eval_filter,
            depth = self.fov_depth,
            half_angle = self.fov_half_angle,
            kappa = self.kappa,
            n_y = self.n_y,
            ss = self.sigma_sensor,
            sm = self.sigma_motion,
            nlmax = self.n_l_max_policy,
            alpha = self.alpha,
            ap1 = self.ap_fc1,
            ap2 = self.ap_fc2,
            li1 = self.li_fc1,
            li2 = self.li_fc2,
            out1 = self.out_fc1,
            vmin = self.bounds.v_min,
            vmax = self.bounds.v_max,
            omin = self.bounds.omega_min,
            omax = self.bounds.omega_max,
            epochs = self.train.epochs,
            epb = self.train.episodes_per_batch,
            lr = self.train.learning_rate,
            mom = self.train.momentum,
            tnlmin = self.train.n_l_min,
            tnlmax = self.train.n_l_max,
            ee = self.train.eval_every,
            eep = self.train.eval_episodes,
            seed = self.train.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn ini_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.scenario.horizon = Some(40);
        cfg.train.seed = 99;
        cfg.train.clip_norm = None;
        let text = cfg.to_ini();
        let mut parsed = RunConfig::default();
        parsed.apply_text(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("[environment]\nbogus = 1\n").is_err());
        assert!(cfg.apply_text("[nonsense]\n").is_err());
        assert!(cfg.apply_text("tau = 1\n").is_err()); // key before any section
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# header\n\n[environment]\ntau = 0.25 ; quarter second\n").unwrap();
        assert_eq!(cfg.scenario.tau, 0.25);
    }

    #[test]
    fn shipped_default_config_matches_builtins() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../configs/default.cfg");
        let cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn mismatched_slot_counts_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("[trainer]\nn_l_max = 12\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
