//! Experiment configuration: a flat `key = value` file with `[section]`
//! headers. Every key has a default; unknown keys are errors.
//!
//! ```text
//! [run]
//! seed = 3
//! updates = 1000
//!
//! [objective]
//! kind = ours
//! z_max = 12
//! ```

use std::fmt::Display;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::env::{EnvConfig, EnvKind};
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::numkit::HiddenActivation;
use crate::ppo::{PPOConfig, ReachTask, Task};
use crate::skills::{DistanceMetric, DualState, ObjectiveConfig, ObjectiveKind, SkillSampling};
use crate::tracking::TrackConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Skills,
    Reach,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Skills => "skills",
            TaskKind::Reach => "reach",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "skills" => Ok(TaskKind::Skills),
            "reach" => Ok(TaskKind::Reach),
            other => Err(format!("unknown task `{other}` (skills|reach)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub updates: usize,
    pub task: TaskKind,
    pub checkpoint_every: usize,
    pub deterministic: bool,

    /// `num_envs` is taken from `ppo.rollouts_per_update`.
    pub env: EnvConfig,

    pub objective_kind: ObjectiveKind,
    pub skill_dim: usize,
    pub z_max: f64,
    /// `None` selects `1 / z_max^2`.
    pub sigma: Option<f64>,
    pub beta: f64,
    /// `None` selects the objective's own metric.
    pub distance_metric: Option<DistanceMetric>,
    pub sampling: SkillSampling,

    pub dual: DualState,

    pub encoder_hidden: Vec<usize>,
    pub encoder_activation: HiddenActivation,
    pub encoder_lr: f64,

    pub policy_hidden: Vec<usize>,
    pub policy_activation: HiddenActivation,
    pub value_hidden: Vec<usize>,

    pub ppo: PPOConfig,
    pub reach: ReachTask,
    pub eval: EvalConfig,
    pub track: TrackConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            updates: 1000,
            task: TaskKind::Skills,
            checkpoint_every: 50,
            deterministic: true,
            env: EnvConfig::default(),
            objective_kind: ObjectiveKind::Ours,
            skill_dim: 2,
            z_max: 50.0,
            sigma: None,
            beta: 5.0,
            distance_metric: None,
            sampling: SkillSampling::Ball,
            dual: DualState::default(),
            encoder_hidden: vec![64, 64],
            encoder_activation: HiddenActivation::Relu,
            encoder_lr: 5e-3,
            policy_hidden: vec![128, 128],
            policy_activation: HiddenActivation::Elu,
            value_hidden: vec![128, 128],
            ppo: PPOConfig::default(),
            reach: ReachTask::default(),
            eval: EvalConfig::default(),
            track: TrackConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, found `{value}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value == "auto" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn show_auto<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("auto".to_string(), |x| x.to_string())
}

impl ExperimentConfig {
    /// Sets one `section.key`; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "run.seed" => self.seed = parse_value(key, v)?,
            "run.updates" => self.updates = parse_value(key, v)?,
            "run.task" => self.task = parse_value(key, v)?,
            "run.checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "run.deterministic" => self.deterministic = parse_bool(key, v)?,

            "env.kind" => self.env.kind = parse_value(key, v)?,
            "env.episode_steps" => self.env.episode_steps = parse_value(key, v)?,
            "env.dt" => self.env.dt = parse_value(key, v)?,
            "env.max_accel" => self.env.max_accel = parse_value(key, v)?,
            "env.max_turn_rate" => self.env.max_turn_rate = parse_value(key, v)?,
            "env.damping" => self.env.damping = parse_value(key, v)?,
            "env.w_action_rate" => self.env.extrinsic.action_rate = parse_value(key, v)?,
            "env.w_energy" => self.env.extrinsic.energy = parse_value(key, v)?,
            "env.w_speed" => self.env.extrinsic.speed = parse_value(key, v)?,
            "env.soft_speed" => self.env.soft_speed = parse_value(key, v)?,
            "env.terminate_out_of_bounds" => self.env.terminate_out_of_bounds = parse_bool(key, v)?,
            "env.arena_half_width" => self.env.arena_half_width = parse_value(key, v)?,
            "env.distance_weights" => {
                self.env.distance_weights = if v == "none" { None } else { Some(parse_list(key, v)?) }
            }

            "objective.kind" => self.objective_kind = parse_value(key, v)?,
            "objective.skill_dim" => self.skill_dim = parse_value(key, v)?,
            "objective.z_max" => self.z_max = parse_value(key, v)?,
            "objective.sigma" => self.sigma = auto(key, v)?,
            "objective.beta" => self.beta = parse_value(key, v)?,
            "objective.distance_metric" => self.distance_metric = auto(key, v)?,
            "objective.sampling" => self.sampling = parse_value(key, v)?,

            "dual.lambda_init" => self.dual.lambda = parse_value(key, v)?,
            "dual.lambda_lr" => self.dual.lambda_lr = parse_value(key, v)?,
            "dual.slack" => self.dual.slack = parse_value(key, v)?,

            "encoder.hidden" => self.encoder_hidden = parse_list(key, v)?,
            "encoder.activation" => self.encoder_activation = parse_value(key, v)?,
            "encoder.lr" => self.encoder_lr = parse_value(key, v)?,

            "policy.hidden" => self.policy_hidden = parse_list(key, v)?,
            "policy.activation" => self.policy_activation = parse_value(key, v)?,
            "policy.value_hidden" => self.value_hidden = parse_list(key, v)?,

            "ppo.clip_ratio" => self.ppo.clip_ratio = parse_value(key, v)?,
            "ppo.value_clip_ratio" => self.ppo.value_clip_ratio = parse_value(key, v)?,
            "ppo.entropy_coef" => self.ppo.entropy_coef = parse_value(key, v)?,
            "ppo.value_coef" => self.ppo.value_coef = parse_value(key, v)?,
            "ppo.gamma" => self.ppo.gamma = parse_value(key, v)?,
            "ppo.gae_lambda" => self.ppo.gae_lambda = parse_value(key, v)?,
            "ppo.rollouts_per_update" => self.ppo.rollouts_per_update = parse_value(key, v)?,
            "ppo.horizon" => self.ppo.horizon = parse_value(key, v)?,
            "ppo.epochs" => self.ppo.epochs = parse_value(key, v)?,
            "ppo.minibatches" => self.ppo.minibatches = parse_value(key, v)?,
            "ppo.kl_target" => self.ppo.kl_target = parse_value(key, v)?,
            "ppo.lr_init" => self.ppo.lr_init = parse_value(key, v)?,
            "ppo.lr_min" => self.ppo.lr_min = parse_value(key, v)?,
            "ppo.lr_max" => self.ppo.lr_max = parse_value(key, v)?,
            "ppo.lr_factor" => self.ppo.lr_factor = parse_value(key, v)?,
            "ppo.max_grad_norm" => self.ppo.max_grad_norm = parse_value(key, v)?,
            "ppo.init_std" => self.ppo.init_std = parse_value(key, v)?,
            "ppo.max_std" => self.ppo.max_std = parse_value(key, v)?,
            "ppo.intrinsic_weight" => self.ppo.intrinsic_weight = parse_value(key, v)?,
            "ppo.extrinsic_weight" => self.ppo.extrinsic_weight = parse_value(key, v)?,
            "ppo.normalize_advantages" => self.ppo.normalize_advantages = parse_bool(key, v)?,

            "reach.min_radius" => self.reach.min_radius = parse_value(key, v)?,
            "reach.max_radius" => self.reach.max_radius = parse_value(key, v)?,
            "reach.success_radius" => self.reach.success_radius = parse_value(key, v)?,

            "eval.seed" => self.eval.seed = parse_value(key, v)?,
            "eval.trajectories" => self.eval.trajectories = parse_value(key, v)?,
            "eval.correlation_skills" => self.eval.correlation_skills = parse_value(key, v)?,
            "eval.histogram_bins" => self.eval.histogram_bins = parse_value(key, v)?,
            "eval.speed_min" => self.eval.speed_min = parse_value(key, v)?,
            "eval.speed_max" => self.eval.speed_max = parse_value(key, v)?,
            "eval.coverage_cell" => self.eval.coverage_cell = parse_value(key, v)?,
            "eval.alignment_min_fraction" => self.eval.alignment_min_fraction = parse_value(key, v)?,
            "eval.violation_tolerance" => self.eval.violation_tolerance = parse_value(key, v)?,

            "track.gain" => self.track.gain = parse_value(key, v)?,
            "track.tolerance" => self.track.tolerance = parse_value(key, v)?,
            "track.hold_steps" => self.track.hold_steps = parse_value(key, v)?,
            "track.max_steps" => self.track.max_steps = parse_value(key, v)?,
            "track.heading_tolerance" => self.track.heading_tolerance = parse_value(key, v)?,
            "track.desired_velocity" => self.track.desired_velocity = parse_value(key, v)?,

            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.env;
        let p = &self.ppo;
        vec![
            ("run.seed", self.seed.to_string()),
            ("run.updates", self.updates.to_string()),
            ("run.task", self.task.to_string()),
            ("run.checkpoint_every", self.checkpoint_every.to_string()),
            ("run.deterministic", self.deterministic.to_string()),
            ("env.kind", e.kind.to_string()),
            ("env.episode_steps", e.episode_steps.to_string()),
            ("env.dt", e.dt.to_string()),
            ("env.max_accel", e.max_accel.to_string()),
            ("env.max_turn_rate", e.max_turn_rate.to_string()),
            ("env.damping", e.damping.to_string()),
            ("env.w_action_rate", e.extrinsic.action_rate.to_string()),
            ("env.w_energy", e.extrinsic.energy.to_string()),
            ("env.w_speed", e.extrinsic.speed.to_string()),
            ("env.soft_speed", e.soft_speed.to_string()),
            ("env.terminate_out_of_bounds", e.terminate_out_of_bounds.to_string()),
            ("env.arena_half_width", e.arena_half_width.to_string()),
            (
                "env.distance_weights",
                e.distance_weights.as_ref().map_or("none".to_string(), |w| list(w)),
            ),
            ("objective.kind", self.objective_kind.to_string()),
            ("objective.skill_dim", self.skill_dim.to_string()),
            ("objective.z_max", self.z_max.to_string()),
            ("objective.sigma", show_auto(&self.sigma)),
            ("objective.beta", self.beta.to_string()),
            ("objective.distance_metric", show_auto(&self.distance_metric)),
            ("objective.sampling", self.sampling.to_string()),
            ("dual.lambda_init", self.dual.lambda.to_string()),
            ("dual.lambda_lr", self.dual.lambda_lr.to_string()),
            ("dual.slack", self.dual.slack.to_string()),
            ("encoder.hidden", list(&self.encoder_hidden)),
            ("encoder.activation", self.encoder_activation.to_string()),
            ("encoder.lr", self.encoder_lr.to_string()),
            ("policy.hidden", list(&self.policy_hidden)),
            ("policy.activation", self.policy_activation.to_string()),
            ("policy.value_hidden", list(&self.value_hidden)),
            ("ppo.clip_ratio", p.clip_ratio.to_string()),
            ("ppo.value_clip_ratio", p.value_clip_ratio.to_string()),
            ("ppo.entropy_coef", p.entropy_coef.to_string()),
            ("ppo.value_coef", p.value_coef.to_string()),
            ("ppo.gamma", p.gamma.to_string()),
            ("ppo.gae_lambda", p.gae_lambda.to_string()),
            ("ppo.rollouts_per_update", p.rollouts_per_update.to_string()),
            ("ppo.horizon", p.horizon.to_string()),
            ("ppo.epochs", p.epochs.to_string()),
            ("ppo.minibatches", p.minibatches.to_string()),
            ("ppo.kl_target", p.kl_target.to_string()),
            ("ppo.lr_init", p.lr_init.to_string()),
            ("ppo.lr_min", p.lr_min.to_string()),
            ("ppo.lr_max", p.lr_max.to_string()),
            ("ppo.lr_factor", p.lr_factor.to_string()),
            ("ppo.max_grad_norm", p.max_grad_norm.to_string()),
            ("ppo.init_std", p.init_std.to_string()),
            ("ppo.max_std", p.max_std.to_string()),
            ("ppo.intrinsic_weight", p.intrinsic_weight.to_string()),
            ("ppo.extrinsic_weight", p.extrinsic_weight.to_string()),
            ("ppo.normalize_advantages", p.normalize_advantages.to_string()),
            ("reach.min_radius", self.reach.min_radius.to_string()),
            ("reach.max_radius", self.reach.max_radius.to_string()),
            ("reach.success_radius", self.reach.success_radius.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
            ("eval.trajectories", self.eval.trajectories.to_string()),
            ("eval.correlation_skills", self.eval.correlation_skills.to_string()),
            ("eval.histogram_bins", self.eval.histogram_bins.to_string()),
            ("eval.speed_min", self.eval.speed_min.to_string()),
            ("eval.speed_max", self.eval.speed_max.to_string()),
            ("eval.coverage_cell", self.eval.coverage_cell.to_string()),
            ("eval.alignment_min_fraction", self.eval.alignment_min_fraction.to_string()),
            ("eval.violation_tolerance", self.eval.violation_tolerance.to_string()),
            ("track.gain", self.track.gain.to_string()),
            ("track.tolerance", self.track.tolerance.to_string()),
            ("track.hold_steps", self.track.hold_steps.to_string()),
            ("track.max_steps", self.track.max_steps.to_string()),
            ("track.heading_tolerance", self.track.heading_tolerance.to_string()),
            ("track.desired_velocity", self.track.desired_velocity.to_string()),
        ]
    }

    /// Applies a config file on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::Parse {
                    what: "config",
                    line: i + 1,
                    message: format!("unterminated section header `{line}`"),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                what: "config",
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            self.set(&key, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// `section.key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like section.key=value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, value) in self.entries() {
            let (section, name) = key.split_once('.').expect("keys are sectioned");
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }

    pub fn env_config(&self) -> EnvConfig {
        let mut e = self.env.clone();
        e.num_envs = self.ppo.rollouts_per_update;
        e
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        let mut o = ObjectiveConfig::new(self.objective_kind, self.skill_dim, self.z_max, self.env.episode_steps);
        if let Some(s) = self.sigma {
            o.sigma = s;
        }
        if let Some(m) = self.distance_metric {
            o.distance_metric = m;
        }
        o.beta = self.beta;
        o.sampling = self.sampling;
        o
    }

    pub fn task(&self) -> Task {
        match self.task {
            TaskKind::Skills => Task::Skills(self.objective_config()),
            TaskKind::Reach => Task::Reach(self.reach),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env_config().validate()?;
        self.ppo.validate()?;
        self.eval.validate()?;
        self.track.validate()?;
        if self.task == TaskKind::Skills {
            self.objective_config().validate()?;
        }
        if self.env.kind == EnvKind::PointMass && self.skill_dim == 3 && self.task == TaskKind::Skills {
            log::warn!("3-D skills on the point mass have no heading coordinate to control");
        }
        if !(self.dual.lambda >= 0.0 && self.dual.lambda.is_finite()) {
            return Err(Error::config("dual.lambda_init", "must be a finite non-negative number"));
        }
        if !(self.dual.lambda_lr >= 0.0) || !(self.dual.slack >= 0.0) {
            return Err(Error::config("dual.lambda_lr", "rate and slack must be non-negative"));
        }
        if !(self.encoder_lr > 0.0) {
            return Err(Error::config("encoder.lr", "must be positive"));
        }
        for (key, widths) in [
            ("encoder.hidden", &self.encoder_hidden),
            ("policy.hidden", &self.policy_hidden),
            ("policy.value_hidden", &self.value_hidden),
        ] {
            if widths.contains(&0) {
                return Err(Error::config(key, "hidden widths must be positive"));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("run.checkpoint_every", "must be >= 1"));
        }
        let r = &self.reach;
        if !(r.min_radius >= 0.0 && r.max_radius > r.min_radius && r.success_radius > 0.0) {
            return Err(Error::config("reach.max_radius", "need 0 <= min_radius < max_radius, success_radius > 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let text = c.to_text();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
        assert_eq!(c.entries().len(), text.lines().filter(|l| l.contains('=')).count());
    }

    #[test]
    fn every_key_is_settable() {
        let c = ExperimentConfig::default();
        for (k, v) in c.entries() {
            let mut d = ExperimentConfig::default();
            d.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn sections_and_overrides() {
        let text = "[run]\nseed = 9 # comment\n[objective]\nkind = lsd\nsigma = 0.25\n";
        let mut c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.objective_kind, ObjectiveKind::Lsd);
        assert_eq!(c.objective_config().sigma, 0.25);
        c.apply_overrides(&["ppo.epochs=3", "objective.sigma=auto"]).unwrap();
        assert_eq!(c.ppo.epochs, 3);
        assert_eq!(c.objective_config().sigma, 1.0 / 2500.0);
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_key() {
        match ExperimentConfig::parse("[ppo]\nepochz = 3\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "ppo.epochz"),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::parse("[ppo]\ngamma = 1.5\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "ppo.gamma"),
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::parse("[objective]\nkind = metra\ndistance_metric = euclidean\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "objective.distance_metric"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            ExperimentConfig::parse("[run]\nseed\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
