//! Planar toy environments: a damped point mass and a damped unicycle.
//!
//! Both integrate with semi-implicit Euler. Actions are two channels in
//! `[-1, 1]` (out-of-range values are clipped). The extrinsic reward is a pure
//! regularizer and is never positive.

use std::f64::consts::PI;
use std::fmt;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seeding::{rng_for, tag};

pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    PointMass,
    Unicycle,
}

impl EnvKind {
    /// Length of the full state vector.
    pub fn state_dim(self) -> usize {
        match self {
            EnvKind::PointMass => 4,
            EnvKind::Unicycle => 5,
        }
    }

    /// Index of the angular component in the state vector, if any.
    pub fn angle_index(self) -> Option<usize> {
        match self {
            EnvKind::PointMass => None,
            EnvKind::Unicycle => Some(2),
        }
    }

    pub fn state_labels(self) -> &'static [&'static str] {
        match self {
            EnvKind::PointMass => &["x", "y", "vx", "vy"],
            EnvKind::Unicycle => &["x", "y", "heading", "speed", "yaw_rate"],
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::PointMass => "point_mass",
            EnvKind::Unicycle => "unicycle",
        })
    }
}

impl std::str::FromStr for EnvKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "point_mass" => Ok(EnvKind::PointMass),
            "unicycle" => Ok(EnvKind::Unicycle),
            other => Err(format!("unknown env kind `{other}` (point_mass|unicycle)")),
        }
    }
}

/// Weights of the extrinsic regularization terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtrinsicWeights {
    /// `||a_t - a_{t-1}||^2`
    pub action_rate: f64,
    /// `||a_t||^2`
    pub energy: f64,
    /// `max(0, speed - soft_speed)^2`
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub num_envs: usize,
    pub episode_steps: usize,
    pub dt: f64,
    /// Linear acceleration at full action (m/s^2).
    pub max_accel: f64,
    /// Yaw acceleration at full action (rad/s^2), unicycle only.
    pub max_turn_rate: f64,
    pub damping: f64,
    pub extrinsic: ExtrinsicWeights,
    pub soft_speed: f64,
    pub terminate_out_of_bounds: bool,
    pub arena_half_width: f64,
    /// Optional per-dimension weights for the state distance.
    pub distance_weights: Option<Vec<f64>>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let dt = 0.02;
        EnvConfig {
            kind: EnvKind::PointMass,
            num_envs: 24,
            episode_steps: 300,
            dt,
            max_accel: 5.0,
            max_turn_rate: 4.0,
            damping: 1.25,
            extrinsic: ExtrinsicWeights {
                action_rate: 5e-2 * dt,
                energy: 1e-3 * dt,
                speed: 1.0 * dt,
            },
            soft_speed: 2.5,
            terminate_out_of_bounds: false,
            arena_half_width: 50.0,
            distance_weights: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive, got {v}")))
            }
        };
        if self.num_envs == 0 {
            return Err(Error::config("env.num_envs", "must be >= 1"));
        }
        if self.episode_steps == 0 {
            return Err(Error::config("env.episode_steps", "must be >= 1"));
        }
        pos("env.dt", self.dt)?;
        pos("env.max_accel", self.max_accel)?;
        pos("env.max_turn_rate", self.max_turn_rate)?;
        pos("env.arena_half_width", self.arena_half_width)?;
        if !(self.damping >= 0.0) || self.damping * self.dt >= 1.0 {
            return Err(Error::config(
                "env.damping",
                format!("must satisfy 0 <= damping * dt < 1, got {}", self.damping),
            ));
        }
        let w = self.extrinsic;
        for (k, v) in [
            ("env.w_action_rate", w.action_rate),
            ("env.w_energy", w.energy),
            ("env.w_speed", w.speed),
            ("env.soft_speed", self.soft_speed),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(k, format!("must be non-negative, got {v}")));
            }
        }
        if let Some(weights) = &self.distance_weights {
            if weights.len() != self.kind.state_dim() {
                return Err(Error::config(
                    "env.distance_weights",
                    format!("expected {} weights, got {}", self.kind.state_dim(), weights.len()),
                ));
            }
            if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                return Err(Error::config("env.distance_weights", "weights must be non-negative"));
            }
        }
        Ok(())
    }

    /// Steady-state speed under full action, `max_accel / damping`.
    pub fn terminal_speed(&self) -> f64 {
        if self.damping > 0.0 {
            self.max_accel / self.damping
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Body {
    PointMass {
        pos: [f64; 2],
        vel: [f64; 2],
    },
    Unicycle {
        pos: [f64; 2],
        heading: f64,
        speed: f64,
        yaw_rate: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub body: Body,
    pub step_index: usize,
    pub previous_action: [f64; 2],
}

impl EnvState {
    pub fn kind(&self) -> EnvKind {
        match self.body {
            Body::PointMass { .. } => EnvKind::PointMass,
            Body::Unicycle { .. } => EnvKind::Unicycle,
        }
    }

    /// Full physical state: `[x, y, vx, vy]` or `[x, y, heading, speed, yaw_rate]`.
    pub fn vector(&self) -> Vec<f64> {
        match self.body {
            Body::PointMass { pos, vel } => vec![pos[0], pos[1], vel[0], vel[1]],
            Body::Unicycle {
                pos,
                heading,
                speed,
                yaw_rate,
            } => vec![pos[0], pos[1], heading, speed, yaw_rate],
        }
    }

    pub fn from_vector(kind: EnvKind, v: &[f64]) -> Result<Self> {
        if v.len() != kind.state_dim() {
            return Err(Error::Dimension {
                what: format!("{kind} state vector"),
                expected: kind.state_dim(),
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("state vector"));
        }
        let body = match kind {
            EnvKind::PointMass => Body::PointMass {
                pos: [v[0], v[1]],
                vel: [v[2], v[3]],
            },
            EnvKind::Unicycle => Body::Unicycle {
                pos: [v[0], v[1]],
                heading: wrap_angle(v[2]),
                speed: v[3],
                yaw_rate: v[4],
            },
        };
        Ok(EnvState {
            body,
            step_index: 0,
            previous_action: [0.0; 2],
        })
    }

    pub fn position(&self) -> [f64; 2] {
        match self.body {
            Body::PointMass { pos, .. } | Body::Unicycle { pos, .. } => pos,
        }
    }

    pub fn set_position(&mut self, p: [f64; 2]) {
        match &mut self.body {
            Body::PointMass { pos, .. } | Body::Unicycle { pos, .. } => *pos = p,
        }
    }

    /// World-frame linear velocity.
    pub fn velocity(&self) -> [f64; 2] {
        match self.body {
            Body::PointMass { vel, .. } => vel,
            Body::Unicycle { heading, speed, .. } => [speed * heading.cos(), speed * heading.sin()],
        }
    }

    pub fn speed(&self) -> f64 {
        match self.body {
            Body::PointMass { vel, .. } => vel[0].hypot(vel[1]),
            Body::Unicycle { speed, .. } => speed.abs(),
        }
    }

    pub fn heading(&self) -> Option<f64> {
        match self.body {
            Body::PointMass { .. } => None,
            Body::Unicycle { heading, .. } => Some(heading),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.vector().iter().all(|v| v.is_finite())
            && self.previous_action.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub extrinsic_reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// Wraps an angle to `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Initial state of environment `env_index` for its `episode`-th episode.
/// Depends only on `(seed, env_index, episode)`.
pub fn reset_env(config: &EnvConfig, seed: u64, env_index: usize, episode: u64) -> EnvState {
    let body = match config.kind {
        EnvKind::PointMass => Body::PointMass {
            pos: [0.0; 2],
            vel: [0.0; 2],
        },
        EnvKind::Unicycle => {
            let mut rng = rng_for(seed, &[tag::ENV_RESET, env_index as u64, episode]);
            Body::Unicycle {
                pos: [0.0; 2],
                heading: rng.random_range(-PI..PI),
                speed: 0.0,
                yaw_rate: 0.0,
            }
        }
    };
    EnvState {
        body,
        step_index: 0,
        previous_action: [0.0; 2],
    }
}

pub fn reset(config: &EnvConfig, seed: u64) -> Vec<EnvState> {
    (0..config.num_envs)
        .map(|i| reset_env(config, seed, i, 0))
        .collect()
}

/// Advances one environment by one control step.
pub fn step_env(config: &EnvConfig, state: &EnvState, action: [f64; 2]) -> Result<StepResult> {
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("action"));
    }
    let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
    let dt = config.dt;
    let keep = 1.0 - config.damping * dt;
    let body = match state.body {
        Body::PointMass { pos, vel } => {
            let v = [
                keep * vel[0] + a[0] * config.max_accel * dt,
                keep * vel[1] + a[1] * config.max_accel * dt,
            ];
            Body::PointMass {
                pos: [pos[0] + v[0] * dt, pos[1] + v[1] * dt],
                vel: v,
            }
        }
        Body::Unicycle {
            pos,
            heading,
            speed,
            yaw_rate,
        } => {
            let v = keep * speed + a[0] * config.max_accel * dt;
            let w = keep * yaw_rate + a[1] * config.max_turn_rate * dt;
            Body::Unicycle {
                pos: [pos[0] + v * heading.cos() * dt, pos[1] + v * heading.sin() * dt],
                heading: wrap_angle(heading + w * dt),
                speed: v,
                yaw_rate: w,
            }
        }
    };
    let next = EnvState {
        body,
        step_index: state.step_index + 1,
        previous_action: a,
    };
    let w = config.extrinsic;
    let rate = (a[0] - state.previous_action[0]).powi(2) + (a[1] - state.previous_action[1]).powi(2);
    let energy = a[0] * a[0] + a[1] * a[1];
    let over = (next.speed() - config.soft_speed).max(0.0);
    let extrinsic_reward = -w.action_rate * rate - w.energy * energy - w.speed * over * over;
    let p = next.position();
    let terminated = config.terminate_out_of_bounds
        && (p[0].abs() > config.arena_half_width || p[1].abs() > config.arena_half_width);
    Ok(StepResult {
        next_state: next,
        extrinsic_reward,
        terminated,
        truncated: next.step_index >= config.episode_steps,
    })
}

pub fn step(config: &EnvConfig, states: &[EnvState], actions: &[[f64; 2]]) -> Result<Vec<StepResult>> {
    if states.len() != actions.len() {
        return Err(Error::Dimension {
            what: "action batch".into(),
            expected: states.len(),
            found: actions.len(),
        });
    }
    states
        .iter()
        .zip(actions)
        .map(|(s, a)| step_env(config, s, *a))
        .collect()
}

/// Distance between two state vectors of the same kind; angular components
/// use the wrapped difference.
pub fn euclidean_transition_norm(
    kind: EnvKind,
    s: &[f64],
    s_next: &[f64],
    weights: Option<&[f64]>,
) -> f64 {
    debug_assert_eq!(s.len(), s_next.len());
    let angle = kind.angle_index();
    s.iter()
        .zip(s_next)
        .enumerate()
        .map(|(i, (a, b))| {
            let d = if Some(i) == angle {
                wrap_angle(b - a)
            } else {
                b - a
            };
            let w = weights.map_or(1.0, |w| w[i]);
            w * d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn state_distance(config: &EnvConfig, s: &EnvState, s_next: &EnvState) -> f64 {
    euclidean_transition_norm(
        config.kind,
        &s.vector(),
        &s_next.vector(),
        config.distance_weights.as_deref(),
    )
}

/// One row of a trajectory dump.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub env: usize,
    pub step: usize,
    pub state: Vec<f64>,
    pub action: [f64; 2],
    pub skill: Vec<f64>,
    pub intrinsic: f64,
    pub extrinsic: f64,
}

/// Comma-separated dump with a header line:
/// `env,step,<state labels>,a0,a1,z0..z{k-1},intrinsic,extrinsic`.
pub fn trajectory_dump(kind: EnvKind, skill_dim: usize, rows: &[TrajectoryRow]) -> String {
    let mut out = String::from("env,step");
    for l in kind.state_labels() {
        out.push(',');
        out.push_str(l);
    }
    out.push_str(",a0,a1");
    for k in 0..skill_dim {
        let _ = write!(out, ",z{k}");
    }
    out.push_str(",intrinsic,extrinsic\n");
    for r in rows {
        let _ = write!(out, "{},{}", r.env, r.step);
        for v in r.state.iter().chain(&r.action).chain(&r.skill) {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{},{}", r.intrinsic, r.extrinsic);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(damping: f64) -> EnvConfig {
        EnvConfig {
            damping,
            max_accel: 1.0,
            ..EnvConfig::default()
        }
    }

    fn unicycle() -> EnvConfig {
        EnvConfig {
            kind: EnvKind::Unicycle,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn point_mass_resets_to_origin_at_rest() {
        let states = reset(&pm(0.0), 7);
        assert_eq!(states.len(), 24);
        for s in &states {
            assert_eq!(s.vector(), vec![0.0; 4]);
            assert_eq!(s.step_index, 0);
        }
    }

    #[test]
    fn resets_are_deterministic_and_partition_free() {
        let cfg = unicycle();
        assert_eq!(reset(&cfg, 11), reset(&cfg, 11));
        let small = EnvConfig {
            num_envs: 5,
            ..cfg.clone()
        };
        assert_eq!(&reset(&cfg, 11)[..5], reset(&small, 11).as_slice());
    }

    #[test]
    fn unicycle_headings_are_uniform() {
        let cfg = EnvConfig {
            num_envs: 10_000,
            ..unicycle()
        };
        let states = reset(&cfg, 3);
        let n = states.len() as f64;
        let (c, s) = states.iter().fold((0.0, 0.0), |(c, s), st| {
            let h = st.heading().unwrap();
            assert!((-PI..PI).contains(&h));
            (c + h.cos(), s + h.sin())
        });
        assert!((c / n).abs() < 0.05);
        assert!((s / n).abs() < 0.05);
    }

    #[test]
    fn zero_action_from_rest_is_equilibrium() {
        for cfg in [pm(0.3), unicycle()] {
            let s0 = reset_env(&cfg, 1, 0, 0);
            let r = step_env(&cfg, &s0, [0.0, 0.0]).unwrap();
            assert_eq!(r.next_state.vector(), s0.vector());
            assert_eq!(r.next_state.step_index, 1);
            assert_eq!(r.extrinsic_reward, 0.0);
        }
    }

    #[test]
    fn one_step_hand_evaluation() {
        let cfg = pm(0.0);
        let s0 = reset_env(&cfg, 0, 0, 0);
        let r = step_env(&cfg, &s0, [1.0, 0.0]).unwrap();
        let v = r.next_state.vector();
        assert!((v[2] - 0.02).abs() < 1e-15);
        assert!((v[0] - 0.0004).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
    }

    #[test]
    fn actions_are_clipped_and_nan_rejected() {
        let cfg = pm(0.0);
        let s0 = reset_env(&cfg, 0, 0, 0);
        let a = step_env(&cfg, &s0, [7.0, -3.0]).unwrap();
        let b = step_env(&cfg, &s0, [1.0, -1.0]).unwrap();
        assert_eq!(a, b);
        assert!(step_env(&cfg, &s0, [f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn constant_action_speed_converges_below_terminal() {
        let cfg = EnvConfig {
            max_accel: 2.0,
            damping: 0.8,
            ..EnvConfig::default()
        };
        let mut s = reset_env(&cfg, 0, 0, 0);
        let bound = cfg.terminal_speed();
        for _ in 0..cfg.episode_steps * 4 {
            s = step_env(&cfg, &s, [0.6, 0.8]).unwrap().next_state;
            assert!(s.speed() <= bound + 1e-12);
        }
        assert!(s.speed() > 0.95 * bound);
    }

    #[test]
    fn truncation_at_episode_end() {
        let cfg = EnvConfig {
            episode_steps: 3,
            ..pm(0.1)
        };
        let mut s = reset_env(&cfg, 0, 0, 0);
        for t in 1..=3 {
            let r = step_env(&cfg, &s, [0.1, 0.1]).unwrap();
            assert_eq!(r.truncated, t == 3);
            s = r.next_state;
        }
    }

    #[test]
    fn out_of_bounds_termination_is_opt_in() {
        let mut cfg = pm(0.0);
        cfg.arena_half_width = 0.1;
        let mut s = reset_env(&cfg, 0, 0, 0);
        s.set_position([0.2, 0.0]);
        assert!(!step_env(&cfg, &s, [0.0, 0.0]).unwrap().terminated);
        cfg.terminate_out_of_bounds = true;
        assert!(step_env(&cfg, &s, [0.0, 0.0]).unwrap().terminated);
    }

    #[test]
    fn transition_norm_cases() {
        let s = [1.0, 2.0, 0.5, -0.5];
        assert_eq!(euclidean_transition_norm(EnvKind::PointMass, &s, &s, None), 0.0);
        let t = [4.0, 6.0, 0.5, -0.5];
        assert_eq!(euclidean_transition_norm(EnvKind::PointMass, &s, &t, None), 5.0);
        let a = [0.0, 0.0, 3.1, 0.0, 0.0];
        let b = [0.0, 0.0, -3.1, 0.0, 0.0];
        let d = euclidean_transition_norm(EnvKind::Unicycle, &a, &b, None);
        assert!((d - (2.0 * PI - 6.2)).abs() < 1e-12);
        let w = [0.0, 1.0, 1.0, 1.0];
        assert_eq!(euclidean_transition_norm(EnvKind::PointMass, &s, &t, Some(&w)), 4.0);
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -PI, -1.0, 0.0, PI, 3.5, 100.0] {
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn dump_has_documented_header() {
        let row = TrajectoryRow {
            env: 0,
            step: 1,
            state: vec![0.0, 1.0, 2.0, 3.0],
            action: [0.5, -0.5],
            skill: vec![1.0, 2.0],
            intrinsic: 0.25,
            extrinsic: -0.0,
        };
        let text = trajectory_dump(EnvKind::PointMass, 2, &[row]);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "env,step,x,y,vx,vy,a0,a1,z0,z1,intrinsic,extrinsic");
        assert_eq!(lines.next().unwrap().split(',').count(), 12);
    }

    #[test]
    fn validate_catches_bad_values() {
        assert!(EnvConfig::default().validate().is_ok());
        assert!(EnvConfig { num_envs: 0, ..EnvConfig::default() }.validate().is_err());
        assert!(EnvConfig { dt: 0.0, ..EnvConfig::default() }.validate().is_err());
        assert!(EnvConfig { distance_weights: Some(vec![1.0]), ..EnvConfig::default() }.validate().is_err());
    }
}
