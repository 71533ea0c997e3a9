//! Zero-shot goal tracking: the commanded skill is the latent difference
//! between a desired state and the current state.

use std::fmt;
use std::fmt::Write as _;

use crate::env::{self, Body, EnvConfig, EnvKind, EnvState};
use crate::error::{Error, Result};
use crate::numkit::{norm, NetParams};
use crate::ppo::{observation, GaussianPolicy, Task};
use crate::skills::{self, ObjectiveConfig, Skill};

/// Velocity coordinates of the desired state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesiredVelocity {
    /// Copied from the current state.
    Copy,
    Zero,
}

impl fmt::Display for DesiredVelocity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DesiredVelocity::Copy => "copy",
            DesiredVelocity::Zero => "zero",
        })
    }
}

impl std::str::FromStr for DesiredVelocity {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "copy" => Ok(DesiredVelocity::Copy),
            "zero" => Ok(DesiredVelocity::Zero),
            other => Err(format!("unknown desired velocity `{other}` (copy|zero)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackConfig {
    pub gain: f64,
    pub tolerance: f64,
    /// Consecutive in-tolerance steps that count as reaching the goal.
    pub hold_steps: usize,
    pub max_steps: usize,
    pub heading_tolerance: f64,
    pub desired_velocity: DesiredVelocity,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            gain: 1.0,
            tolerance: 0.5,
            hold_steps: 25,
            max_steps: 1000,
            heading_tolerance: 0.3,
            desired_velocity: DesiredVelocity::Copy,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0) {
            return Err(Error::config("track.gain", "must be positive"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config("track.tolerance", "must be positive"));
        }
        if !(self.heading_tolerance > 0.0) {
            return Err(Error::config("track.heading_tolerance", "must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("track.max_steps", "must be >= 1"));
        }
        if self.hold_steps == 0 {
            return Err(Error::config("track.hold_steps", "must be >= 1"));
        }
        Ok(())
    }

    pub fn goal(&self, target_position: [f64; 2], target_heading: Option<f64>) -> GoalSpec {
        GoalSpec {
            target_position,
            target_heading,
            tolerance: self.tolerance,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalSpec {
    pub target_position: [f64; 2],
    pub target_heading: Option<f64>,
    pub tolerance: f64,
    pub max_steps: usize,
}

impl GoalSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::config("goal.tolerance", "must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("goal.max_steps", "must be >= 1"));
        }
        if self.target_position.iter().chain(&self.target_heading).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("goal"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingResult {
    pub trajectory: Vec<EnvState>,
    pub skills: Vec<Vec<f64>>,
    pub final_distance: f64,
    /// Wrapped heading error at the end, when the state has a heading.
    pub final_heading_error: Option<f64>,
    pub reached: bool,
    /// First step of the successful hold window.
    pub steps_to_reach: Option<usize>,
    /// Mean speed over the final 10% of steps.
    pub mean_terminal_speed: f64,
}

/// `|wrap(a - b)|`.
pub fn heading_error(target: f64, actual: f64) -> f64 {
    env::wrap_angle(actual - target).abs()
}

/// Copy of `current` with the goal coordinates substituted.
pub fn desired_state(current: &EnvState, goal: &GoalSpec, velocity: DesiredVelocity) -> EnvState {
    let mut s = *current;
    s.set_position(goal.target_position);
    match &mut s.body {
        Body::PointMass { vel, .. } => {
            if velocity == DesiredVelocity::Zero {
                *vel = [0.0, 0.0];
            }
        }
        Body::Unicycle {
            heading,
            speed,
            yaw_rate,
            ..
        } => {
            if let Some(h) = goal.target_heading {
                *heading = env::wrap_angle(h);
            }
            if velocity == DesiredVelocity::Zero {
                *speed = 0.0;
                *yaw_rate = 0.0;
            }
        }
    }
    s
}

/// `z = gain (phi(s_des) - phi(s))`, rescaled onto the ball of radius `z_max`.
pub fn select_skill(
    encoder: &NetParams,
    current: &EnvState,
    desired: &EnvState,
    z_max: f64,
    gain: f64,
) -> Result<Skill> {
    let a = skills::encode(encoder, desired)?;
    let b = skills::encode(encoder, current)?;
    let mut z: Vec<f64> = a.iter().zip(&b).map(|(x, y)| gain * (x - y)).collect();
    let n = norm(&z);
    if n > z_max {
        z.iter_mut().for_each(|v| *v *= z_max / n);
    }
    Ok(Skill(z))
}

fn within(goal: &GoalSpec, s: &EnvState, heading_tolerance: f64) -> bool {
    let p = s.position();
    let d = (p[0] - goal.target_position[0]).hypot(p[1] - goal.target_position[1]);
    let heading_ok = match (goal.target_heading, s.heading()) {
        (Some(t), Some(h)) => heading_error(t, h) <= heading_tolerance,
        _ => true,
    };
    d <= goal.tolerance && heading_ok
}

/// Drives the policy toward `goal` from `start`. Closed loop re-selects the
/// skill every step; open loop keeps the skill chosen at the first step.
/// Stops once the goal has been held for `hold_steps` steps.
#[allow(clippy::too_many_arguments)]
pub fn track_goal(
    policy: &GaussianPolicy,
    encoder: &NetParams,
    env_cfg: &EnvConfig,
    objective: &ObjectiveConfig,
    track: &TrackConfig,
    goal: &GoalSpec,
    start: EnvState,
    closed_loop: bool,
) -> Result<TrackingResult> {
    goal.validate()?;
    if encoder.spec().output_width() != objective.skill_dim {
        return Err(Error::Dimension {
            what: "encoder latent".into(),
            expected: objective.skill_dim,
            found: encoder.spec().output_width(),
        });
    }
    let task = Task::Skills(objective.clone());
    let mut no_limit = env_cfg.clone();
    no_limit.episode_steps = usize::MAX;
    let mut state = start;
    state.step_index = 0;
    let mut trajectory = vec![state];
    let mut skill_log = Vec::new();
    let mut fixed: Option<Skill> = None;
    let mut hold = 0usize;
    let mut hold_start = 0usize;
    let mut reached = false;
    for t in 0..=goal.max_steps {
        if within(goal, &state, track.heading_tolerance) {
            if hold == 0 {
                hold_start = t;
            }
            hold += 1;
            if hold >= track.hold_steps {
                reached = true;
                break;
            }
        } else {
            hold = 0;
        }
        if t == goal.max_steps {
            break;
        }
        let z = match (&fixed, closed_loop) {
            (Some(z), false) => z.clone(),
            _ => {
                let des = desired_state(&state, goal, track.desired_velocity);
                let z = select_skill(encoder, &state, &des, objective.z_max, track.gain)?;
                if !closed_loop {
                    fixed = Some(z.clone());
                }
                z
            }
        };
        debug_assert!(z.norm() <= objective.z_max * (1.0 + 1e-12));
        let a = policy.act_deterministic(&observation(&task, &state, &z.0))?;
        state = env::step_env(&no_limit, &state, a)?.next_state;
        trajectory.push(state);
        skill_log.push(z.0);
    }
    let p = state.position();
    let final_distance = (p[0] - goal.target_position[0]).hypot(p[1] - goal.target_position[1]);
    let tail = (trajectory.len() / 10).max(1);
    let mean_terminal_speed =
        trajectory[trajectory.len() - tail..].iter().map(|s| s.speed()).sum::<f64>() / tail as f64;
    let final_heading_error = match (goal.target_heading, state.heading()) {
        (Some(t), Some(h)) => Some(heading_error(t, h)),
        _ => None,
    };
    Ok(TrackingResult {
        trajectory,
        skills: skill_log,
        final_distance,
        final_heading_error,
        reached,
        steps_to_reach: reached.then_some(hold_start),
        mean_terminal_speed,
    })
}

/// Position and heading goal; needs a 3-D latent on the unicycle.
#[allow(clippy::too_many_arguments)]
pub fn track_heading_goal(
    policy: &GaussianPolicy,
    encoder: &NetParams,
    env_cfg: &EnvConfig,
    objective: &ObjectiveConfig,
    track: &TrackConfig,
    goal: &GoalSpec,
    start: EnvState,
) -> Result<TrackingResult> {
    if objective.skill_dim != 3 || encoder.spec().output_width() != 3 {
        return Err(Error::Dimension {
            what: "latent for heading goals".into(),
            expected: 3,
            found: encoder.spec().output_width(),
        });
    }
    if env_cfg.kind != EnvKind::Unicycle {
        return Err(Error::config("env.kind", "heading goals need the unicycle"));
    }
    if goal.target_heading.is_none() {
        return Err(Error::config("goal.heading", "heading goal without a heading"));
    }
    track_goal(policy, encoder, env_cfg, objective, track, goal, start, true)
}

/// Goal list: one goal per line, `x, y[, heading[, tolerance[, max_steps]]]`.
/// `-` leaves a field at its default; `#` starts a comment.
pub fn parse_goals(text: &str, defaults: &TrackConfig) -> Result<Vec<GoalSpec>> {
    let mut goals = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            what: "goal list",
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 5 {
            return Err(err(format!("expected 2 to 5 fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| err(format!("bad {what} `{s}`")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(format!("non-finite {what}")))
            }
        };
        let opt = |k: usize| fields.get(k).copied().filter(|s| *s != "-" && !s.is_empty());
        let heading = opt(2).map(|s| num(s, "heading")).transpose()?;
        let tolerance = opt(3).map(|s| num(s, "tolerance")).transpose()?.unwrap_or(defaults.tolerance);
        if !(tolerance > 0.0) {
            return Err(err("tolerance must be positive".into()));
        }
        let max_steps = match opt(4) {
            Some(s) => s.parse::<usize>().map_err(|_| err(format!("bad max_steps `{s}`")))?,
            None => defaults.max_steps,
        };
        goals.push(GoalSpec {
            target_position: [num(fields[0], "x")?, num(fields[1], "y")?],
            target_heading: heading,
            tolerance,
            max_steps,
        });
    }
    Ok(goals)
}

pub const TRACKING_HEADER: &str =
    "leg,x,y,heading,tolerance,reached,steps_to_reach,steps,final_distance,final_heading_error,mean_terminal_speed";

pub fn tracking_report(goals: &[GoalSpec], results: &[TrackingResult]) -> String {
    let mut s = String::from(TRACKING_HEADER);
    s.push('\n');
    for (i, (g, r)) in goals.iter().zip(results).enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{},{},{},{},{},{},{}",
            g.target_position[0],
            g.target_position[1],
            g.target_heading.map_or("-".to_string(), |h| h.to_string()),
            g.tolerance,
            r.reached,
            r.steps_to_reach.map_or("-".to_string(), |v| v.to_string()),
            r.trajectory.len() - 1,
            r.final_distance,
            r.final_heading_error.map_or("-".to_string(), |v| v.to_string()),
            r.mean_terminal_speed
        );
    }
    s
}
