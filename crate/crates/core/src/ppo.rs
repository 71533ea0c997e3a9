//! Clipped PPO with GAE for the skill-conditioned Gaussian policy.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::env::{self, EnvConfig, EnvKind, EnvState, ACTION_DIM};
use crate::error::{Error, Result};
use crate::numkit::{
    AdamState, HiddenActivation, Matrix, NetParams, NetSpec, OutputActivation,
};
use crate::seeding::{rng_for, tag};
use crate::skills::{self, ObjectiveConfig};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct PPOConfig {
    pub clip_ratio: f64,
    pub value_clip_ratio: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Environments stepped in parallel; each contributes `horizon` steps per update.
    pub rollouts_per_update: usize,
    pub horizon: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub kl_target: f64,
    pub lr_init: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Multiplicative lr step of the adaptive schedule.
    pub lr_factor: f64,
    pub max_grad_norm: f64,
    pub init_std: f64,
    /// Upper bound on the per-dimension action std. Actions are clipped by
    /// the env, so without it the entropy bonus grows the std unboundedly.
    pub max_std: f64,
    pub intrinsic_weight: f64,
    pub extrinsic_weight: f64,
    pub normalize_advantages: bool,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            clip_ratio: 0.2,
            value_clip_ratio: 0.2,
            entropy_coef: 0.1,
            value_coef: 1.0,
            gamma: 0.99,
            gae_lambda: 0.95,
            rollouts_per_update: 24,
            horizon: 300,
            epochs: 15,
            minibatches: 4,
            kl_target: 8e-3,
            lr_init: 1e-3,
            lr_min: 1e-5,
            lr_max: 1e-2,
            lr_factor: 1.5,
            max_grad_norm: 1.0,
            init_std: 1.0,
            max_std: 1.0,
            intrinsic_weight: 1.0,
            extrinsic_weight: 1.0,
            normalize_advantages: true,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, "must be positive"))
            }
        };
        positive("ppo.clip_ratio", self.clip_ratio)?;
        positive("ppo.value_clip_ratio", self.value_clip_ratio)?;
        positive("ppo.kl_target", self.kl_target)?;
        positive("ppo.lr_init", self.lr_init)?;
        positive("ppo.lr_min", self.lr_min)?;
        positive("ppo.lr_max", self.lr_max)?;
        positive("ppo.max_grad_norm", self.max_grad_norm)?;
        positive("ppo.init_std", self.init_std)?;
        positive("ppo.max_std", self.max_std)?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("ppo.gamma", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config("ppo.gae_lambda", "must lie in [0, 1]"));
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return Err(Error::config("ppo.entropy_coef", "loss scales must be non-negative"));
        }
        if !(self.lr_factor > 1.0) {
            return Err(Error::config("ppo.lr_factor", "must exceed 1"));
        }
        if !(self.lr_min <= self.lr_init && self.lr_init <= self.lr_max) {
            return Err(Error::config("ppo.lr_init", "must lie in [lr_min, lr_max]"));
        }
        if self.rollouts_per_update == 0 || self.horizon == 0 {
            return Err(Error::config("ppo.horizon", "rollout size must be >= 1"));
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return Err(Error::config("ppo.minibatches", "epochs and minibatches must be >= 1"));
        }
        if self.minibatches > self.rollouts_per_update * self.horizon {
            return Err(Error::config("ppo.minibatches", "more minibatches than samples"));
        }
        Ok(())
    }
}

/// Multiplicative KL-keyed learning-rate schedule.
pub fn adaptive_lr(approx_kl: f64, config: &PPOConfig, lr: f64) -> f64 {
    if approx_kl > 2.0 * config.kl_target {
        (lr / config.lr_factor).max(config.lr_min)
    } else if approx_kl < 0.5 * config.kl_target {
        (lr * config.lr_factor).min(config.lr_max)
    } else {
        lr
    }
}

/// Diagonal Gaussian with a state-independent learnable log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean: NetParams,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn init<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        activation: HiddenActivation,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = NetSpec::with_hidden(obs_dim, hidden, ACTION_DIM, activation, OutputActivation::Identity)?;
        Ok(GaussianPolicy {
            mean: NetParams::init(spec, 0.01, rng)?,
            log_std: vec![init_std.ln(); ACTION_DIM],
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.mean.spec().input_width()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.is_finite() && self.log_std.iter().all(|v| v.is_finite())
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|l| l + 0.5 * (LOG_2PI + 1.0)).sum()
    }

    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        gaussian_log_prob(mean, &self.log_std, action)
    }

    /// Mean action for one observation.
    pub fn act_deterministic(&self, obs: &[f64]) -> Result<[f64; 2]> {
        let m = self.mean.predict_one(obs)?;
        Ok([m[0], m[1]])
    }
}

pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, l), a)| {
            let u = (a - m) / l.exp();
            -0.5 * u * u - l - 0.5 * LOG_2PI
        })
        .sum()
}

/// `KL(old || new)` between diagonal Gaussians.
pub fn gaussian_kl(mean_old: &[f64], log_std_old: &[f64], mean_new: &[f64], log_std_new: &[f64]) -> f64 {
    let mut kl = 0.0;
    for j in 0..mean_old.len() {
        let (so, sn) = (log_std_old[j].exp(), log_std_new[j].exp());
        let dm = mean_old[j] - mean_new[j];
        kl += log_std_new[j] - log_std_old[j] + (so * so + dm * dm) / (2.0 * sn * sn) - 0.5;
    }
    kl
}

pub fn value_net_init<R: Rng + ?Sized>(
    obs_dim: usize,
    hidden: &[usize],
    activation: HiddenActivation,
    rng: &mut R,
) -> Result<NetParams> {
    let spec = NetSpec::with_hidden(obs_dim, hidden, 1, activation, OutputActivation::Identity)?;
    NetParams::init(spec, 1.0, rng)
}

/// Dense goal-reaching task used to check the trainer without any skill machinery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReachTask {
    pub min_radius: f64,
    pub max_radius: f64,
    pub success_radius: f64,
}

impl Default for ReachTask {
    fn default() -> Self {
        ReachTask {
            min_radius: 1.0,
            max_radius: 3.0,
            success_radius: 0.3,
        }
    }
}

/// What the policy is conditioned on and rewarded for.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    /// Commands are skills; reward from the latent encoder.
    Skills(ObjectiveConfig),
    /// Commands are goal positions; reward is progress toward the goal.
    Reach(ReachTask),
}

impl Task {
    pub fn command_dim(&self) -> usize {
        match self {
            Task::Skills(o) => o.skill_dim,
            Task::Reach(_) => 2,
        }
    }

    pub fn sample_command<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Task::Skills(o) => skills::sample_skill(o.skill_dim, o.z_max, o.sampling, rng).0,
            Task::Reach(r) => {
                let angle = rng.random_range(-PI..PI);
                let radius = rng.random_range(r.min_radius..r.max_radius);
                vec![radius * angle.cos(), radius * angle.sin()]
            }
        }
    }
}

/// Velocity normalization inside policy observations.
const SPEED_SCALE: f64 = 2.5;
const YAW_RATE_SCALE: f64 = 3.0;

pub fn observation_dim(kind: EnvKind, task: &Task) -> usize {
    let body = match kind {
        EnvKind::PointMass => 2,
        EnvKind::Unicycle => 4,
    };
    body + ACTION_DIM + task.command_dim()
}

/// Policy observation: body-relative dynamics, previous action and the
/// scaled command. Absolute position is left out so that behavior is
/// translation invariant; for reaching, the goal offset takes its place.
pub fn observation(task: &Task, state: &EnvState, command: &[f64]) -> Vec<f64> {
    let mut obs = Vec::with_capacity(8);
    match state.body {
        env::Body::PointMass { vel, .. } => {
            obs.push(vel[0] / SPEED_SCALE);
            obs.push(vel[1] / SPEED_SCALE);
        }
        env::Body::Unicycle {
            heading,
            speed,
            yaw_rate,
            ..
        } => {
            obs.push(heading.cos());
            obs.push(heading.sin());
            obs.push(speed / SPEED_SCALE);
            obs.push(yaw_rate / YAW_RATE_SCALE);
        }
    }
    obs.extend_from_slice(&state.previous_action);
    match task {
        Task::Skills(o) => obs.extend(command.iter().map(|z| z / o.z_max)),
        Task::Reach(r) => {
            let p = state.position();
            obs.extend([(command[0] - p[0]) / r.max_radius, (command[1] - p[1]) / r.max_radius]);
        }
    }
    obs
}

/// Per-environment episode bookkeeping that persists across updates.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSlot {
    pub state: EnvState,
    pub command: Vec<f64>,
    pub episode: u64,
    /// Sum of speeds over the current episode, for logging.
    pub speed_sum: f64,
}

/// Vectorized environments plus their current commands.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvRunner {
    pub env: EnvConfig,
    pub task: Task,
    pub seed: u64,
    pub slots: Vec<EnvSlot>,
    /// Mean speeds of episodes finished since the last drain.
    pub finished_speeds: Vec<f64>,
    pub finished_success: Vec<bool>,
}

impl EnvRunner {
    pub fn new(env: EnvConfig, task: Task, seed: u64) -> Self {
        let slots = (0..env.num_envs)
            .map(|i| EnvSlot {
                state: env::reset_env(&env, seed, i, 0),
                command: task.sample_command(&mut rng_for(seed, &[tag::SKILL, i as u64, 0])),
                episode: 0,
                speed_sum: 0.0,
            })
            .collect();
        EnvRunner {
            env,
            task,
            seed,
            slots,
            finished_speeds: Vec::new(),
            finished_success: Vec::new(),
        }
    }

    fn restart(&mut self, i: usize) {
        let slot = &mut self.slots[i];
        slot.episode += 1;
        slot.state = env::reset_env(&self.env, self.seed, i, slot.episode);
        slot.command = self
            .task
            .sample_command(&mut rng_for(self.seed, &[tag::SKILL, i as u64, slot.episode]));
        slot.speed_sum = 0.0;
    }
}

/// Time-major per environment: sample `env * horizon + t`.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub num_envs: usize,
    pub horizon: usize,
    pub observations: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub next_states: Vec<Vec<f64>>,
    pub commands: Vec<Vec<f64>>,
    pub actions: Vec<[f64; 2]>,
    pub action_means: Vec<[f64; 2]>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub intrinsic: Vec<f64>,
    pub extrinsic: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    /// `V(s_{t+1})` for truncated steps, 0 elsewhere.
    pub bootstrap_values: Vec<f64>,
    pub latents: Vec<Vec<f64>>,
    pub next_latents: Vec<Vec<f64>>,
    pub state_distances: Vec<f64>,
    /// Value of the state following the last step, per environment.
    pub last_values: Vec<f64>,
    /// Log-std in force when the batch was collected.
    pub log_std: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn encoder_batch(&self, indices: &[usize]) -> skills::EncoderBatch {
        skills::EncoderBatch {
            states: indices.iter().map(|&i| self.states[i].clone()).collect(),
            next_states: indices.iter().map(|&i| self.next_states[i].clone()).collect(),
            skills: indices.iter().map(|&i| self.commands[i].clone()).collect(),
            state_distances: indices.iter().map(|&i| self.state_distances[i]).collect(),
        }
    }
}

fn value_of(value: &NetParams, obs: &Matrix) -> Result<Vec<f64>> {
    Ok(value.predict(obs)?.into_vec())
}

fn encode_rows(encoder: &NetParams, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let m = encoder.predict(&Matrix::from_rows(rows)?)?;
    Ok((0..m.rows()).map(|i| m.row(i).to_vec()).collect())
}

/// Steps every environment `horizon` times under the stochastic policy.
///
/// `update` keys the action-noise streams so that collection is reproducible.
/// For skill tasks, `encoder` must be the snapshot taken at rollout start.
pub fn collect_rollouts(
    policy: &GaussianPolicy,
    value: &NetParams,
    encoder: Option<&NetParams>,
    runner: &mut EnvRunner,
    config: &PPOConfig,
    update: u64,
) -> Result<RolloutBatch> {
    let n_env = runner.slots.len();
    let horizon = config.horizon;
    let total = n_env * horizon;
    let mut b = RolloutBatch {
        num_envs: n_env,
        horizon,
        log_std: policy.log_std.clone(),
        ..RolloutBatch::default()
    };
    if horizon == 0 {
        return Ok(b);
    }
    let objective = match &runner.task {
        Task::Skills(o) => {
            if encoder.is_none() {
                return Err(Error::InvalidSpec("skill task requires an encoder".into()));
            }
            Some(o.clone())
        }
        Task::Reach(_) => None,
    };
    let mut rngs: Vec<ChaCha8Rng> = (0..n_env)
        .map(|i| rng_for(runner.seed, &[tag::ACTION, update, i as u64]))
        .collect();

    // Step-major scratch; transposed into env-major at the end.
    let mut steps: Vec<Vec<StepRecord>> = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let obs: Vec<Vec<f64>> = runner
            .slots
            .iter()
            .map(|s| observation(&runner.task, &s.state, &s.command))
            .collect();
        let obs_m = Matrix::from_rows(&obs)?;
        let means = policy.mean.predict(&obs_m)?;
        let values = value_of(value, &obs_m)?;
        let mut records = Vec::with_capacity(n_env);
        let mut next_states = Vec::with_capacity(n_env);
        for i in 0..n_env {
            let m = means.row(i);
            let mut a = [0.0; 2];
            for j in 0..ACTION_DIM {
                let eps: f64 = rngs[i].sample(StandardNormal);
                a[j] = m[j] + policy.log_std[j].exp() * eps;
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("policy action"));
            }
            let slot = &runner.slots[i];
            let res = env::step_env(&runner.env, &slot.state, a)?;
            next_states.push(res.next_state);
            records.push(StepRecord {
                obs: obs[i].clone(),
                state: slot.state.vector(),
                next_state: res.next_state.vector(),
                command: slot.command.clone(),
                action: a,
                mean: [m[0], m[1]],
                log_prob: policy.log_prob(m, &a),
                value: values[i],
                extrinsic: res.extrinsic_reward,
                intrinsic: 0.0,
                terminated: res.terminated,
                truncated: res.truncated && !res.terminated,
                bootstrap: 0.0,
                latent: Vec::new(),
                next_latent: Vec::new(),
                distance: env::state_distance(&runner.env, &slot.state, &res.next_state),
            });
        }

        if let (Some(obj), Some(enc)) = (&objective, encoder) {
            let cur: Vec<Vec<f64>> = records.iter().map(|r| r.state.clone()).collect();
            let nxt: Vec<Vec<f64>> = records.iter().map(|r| r.next_state.clone()).collect();
            let phi = encode_rows(enc, &cur)?;
            let phi_next = encode_rows(enc, &nxt)?;
            for (r, (p, q)) in records.iter_mut().zip(phi.into_iter().zip(phi_next)) {
                let delta: Vec<f64> = q.iter().zip(&p).map(|(a, b)| a - b).collect();
                r.intrinsic = skills::skill_reward(obj, &delta, &r.command);
                r.latent = p;
                r.next_latent = q;
            }
        } else if let Task::Reach(task) = &runner.task {
            for r in records.iter_mut() {
                let g = &r.command;
                let d0 = (g[0] - r.state[0]).hypot(g[1] - r.state[1]);
                let d1 = (g[0] - r.next_state[0]).hypot(g[1] - r.next_state[1]);
                r.intrinsic = (d0 - d1) / (runner.env.dt * task.max_radius);
            }
        }

        // Truncation bootstraps from the value of the final state.
        let trunc: Vec<usize> = (0..n_env).filter(|&i| records[i].truncated).collect();
        if !trunc.is_empty() {
            let rows: Vec<Vec<f64>> = trunc
                .iter()
                .map(|&i| observation(&runner.task, &next_states[i], &runner.slots[i].command))
                .collect();
            let v = value_of(value, &Matrix::from_rows(&rows)?)?;
            for (k, &i) in trunc.iter().enumerate() {
                records[i].bootstrap = v[k];
            }
        }

        for i in 0..n_env {
            let r = &records[i];
            let slot = &mut runner.slots[i];
            slot.state = next_states[i];
            slot.speed_sum += slot.state.speed();
            if r.terminated || r.truncated {
                let steps_done = slot.state.step_index.max(1) as f64;
                runner.finished_speeds.push(slot.speed_sum / steps_done);
                if let Task::Reach(task) = &runner.task {
                    let p = slot.state.position();
                    let g = &slot.command;
                    runner
                        .finished_success
                        .push((g[0] - p[0]).hypot(g[1] - p[1]) <= task.success_radius);
                }
                runner.restart(i);
            }
        }
        steps.push(records);
    }

    let final_obs: Vec<Vec<f64>> = runner
        .slots
        .iter()
        .map(|s| observation(&runner.task, &s.state, &s.command))
        .collect();
    b.last_values = value_of(value, &Matrix::from_rows(&final_obs)?)?;

    // Environment-major order: each environment's horizon is contiguous.
    #[allow(clippy::needless_range_loop)]
    for i in 0..n_env {
        for t in 0..horizon {
            let r = &mut steps[t][i];
            b.observations.push(std::mem::take(&mut r.obs));
            b.states.push(std::mem::take(&mut r.state));
            b.next_states.push(std::mem::take(&mut r.next_state));
            b.commands.push(std::mem::take(&mut r.command));
            b.actions.push(r.action);
            b.action_means.push(r.mean);
            b.log_probs.push(r.log_prob);
            b.values.push(r.value);
            b.intrinsic.push(r.intrinsic);
            b.extrinsic.push(r.extrinsic);
            b.rewards
                .push(config.intrinsic_weight * r.intrinsic + config.extrinsic_weight * r.extrinsic);
            b.terminated.push(r.terminated);
            b.truncated.push(r.truncated);
            b.bootstrap_values.push(r.bootstrap);
            b.latents.push(std::mem::take(&mut r.latent));
            b.next_latents.push(std::mem::take(&mut r.next_latent));
            b.state_distances.push(r.distance);
        }
    }
    debug_assert_eq!(b.len(), total);
    Ok(b)
}

struct StepRecord {
    obs: Vec<f64>,
    state: Vec<f64>,
    next_state: Vec<f64>,
    command: Vec<f64>,
    action: [f64; 2],
    mean: [f64; 2],
    log_prob: f64,
    value: f64,
    extrinsic: f64,
    intrinsic: f64,
    terminated: bool,
    truncated: bool,
    bootstrap: f64,
    latent: Vec<f64>,
    next_latent: Vec<f64>,
    distance: f64,
}

/// GAE over one environment's time-ordered slice.
///
/// Terminated steps do not bootstrap; truncated steps bootstrap from
/// `bootstrap_values[t]`; the last step bootstraps from `last_value`.
#[allow(clippy::too_many_arguments)]
pub fn gae_slice(
    rewards: &[f64],
    values: &[f64],
    terminated: &[bool],
    truncated: &[bool],
    bootstrap_values: &[f64],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let (next_v, carry) = if terminated[t] {
            (0.0, 0.0)
        } else if truncated[t] {
            (bootstrap_values[t], 0.0)
        } else if t + 1 == n {
            (last_value, 0.0)
        } else {
            (values[t + 1], 1.0)
        };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda * carry * next_adv;
        adv[t] = next_adv;
    }
    adv
}

/// Fills `advantages` (raw, not normalized) and `returns = advantages + values`.
pub fn compute_gae(batch: &mut RolloutBatch, gamma: f64, lambda: f64) {
    let h = batch.horizon;
    batch.advantages = Vec::with_capacity(batch.len());
    for e in 0..batch.num_envs {
        let r = e * h..(e + 1) * h;
        batch.advantages.extend(gae_slice(
            &batch.rewards[r.clone()],
            &batch.values[r.clone()],
            &batch.terminated[r.clone()],
            &batch.truncated[r.clone()],
            &batch.bootstrap_values[r],
            batch.last_values[e],
            gamma,
            lambda,
        ));
    }
    batch.returns = batch
        .advantages
        .iter()
        .zip(&batch.values)
        .map(|(a, v)| a + v)
        .collect();
}

/// Optimizer state for the policy mean, its log-std and the value net.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoOptimizer {
    pub policy: AdamState,
    pub log_std: AdamState,
    pub value: AdamState,
    pub lr: f64,
}

impl PpoOptimizer {
    pub fn new(policy: &GaussianPolicy, value: &NetParams, lr: f64) -> Self {
        PpoOptimizer {
            policy: AdamState::for_params(&policy.mean, lr),
            log_std: AdamState::new(policy.log_std.len(), lr),
            value: AdamState::for_params(value, lr),
            lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub lr: f64,
    /// Largest `|ratio - 1|` seen in the first minibatch of the first epoch.
    pub first_ratio_deviation: f64,
}

/// Epochs × minibatches of clipped PPO. `on_minibatch` runs after each
/// policy/value step with the minibatch indices (the encoder shares the loop).
///
/// On any non-finite loss or gradient, policy, value net and optimizer are
/// restored to their pre-update values and a numeric fault is returned.
pub fn ppo_update<F>(
    policy: &mut GaussianPolicy,
    value: &mut NetParams,
    optim: &mut PpoOptimizer,
    batch: &RolloutBatch,
    config: &PPOConfig,
    shuffle_rng: &mut ChaCha8Rng,
    mut on_minibatch: F,
) -> Result<PpoStats>
where
    F: FnMut(&[usize]) -> Result<()>,
{
    let n = batch.len();
    if n == 0 {
        return Ok(PpoStats {
            lr: optim.lr,
            entropy: policy.entropy(),
            ..PpoStats::default()
        });
    }
    if batch.advantages.len() != n || batch.returns.len() != n {
        return Err(Error::InvalidSpec("ppo_update needs advantages; run compute_gae first".into()));
    }
    let saved = (policy.clone(), value.clone(), optim.clone());
    let result = run_epochs(policy, value, optim, batch, config, shuffle_rng, &mut on_minibatch);
    if result.is_err() {
        *policy = saved.0;
        *value = saved.1;
        *optim = saved.2;
    }
    result
}

fn run_epochs<F>(
    policy: &mut GaussianPolicy,
    value: &mut NetParams,
    optim: &mut PpoOptimizer,
    batch: &RolloutBatch,
    config: &PPOConfig,
    shuffle_rng: &mut ChaCha8Rng,
    on_minibatch: &mut F,
) -> Result<PpoStats>
where
    F: FnMut(&[usize]) -> Result<()>,
{
    let n = batch.len();
    let advantages = prepared_advantages(batch, config);

    let mut stats = PpoStats::default();
    let mut count = 0usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mb = config.minibatches;
    for epoch in 0..config.epochs {
        indices.shuffle(shuffle_rng);
        for k in 0..mb {
            let idx = &indices[k * n / mb..(k + 1) * n / mb];
            let s = minibatch_step(policy, value, optim, batch, &advantages, idx, config)?;
            if epoch == 0 && k == 0 {
                stats.first_ratio_deviation = s.first_ratio_deviation;
            }
            stats.policy_loss += s.policy_loss;
            stats.value_loss += s.value_loss;
            stats.approx_kl += s.approx_kl;
            stats.clip_fraction += s.clip_fraction;
            count += 1;
            on_minibatch(idx)?;
        }
    }
    let c = count as f64;
    stats.policy_loss /= c;
    stats.value_loss /= c;
    stats.approx_kl /= c;
    stats.clip_fraction /= c;
    stats.entropy = policy.entropy();
    stats.lr = optim.lr;
    Ok(stats)
}

/// PPO minibatch loss `-surrogate + value_coef * value_loss - entropy_coef * H`
/// and its gradients, evaluated at the current parameters.
#[derive(Debug, Clone)]
pub struct PpoLoss {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean analytic KL from the collection-time policy to the current one.
    pub kl: f64,
    pub clip_fraction: f64,
    pub max_ratio_deviation: f64,
    pub mean_grad: NetParams,
    pub log_std_grad: Vec<f64>,
    pub value_grad: NetParams,
}

impl PpoLoss {
    pub fn total(&self, config: &PPOConfig) -> f64 {
        self.policy_loss + config.value_coef * self.value_loss - config.entropy_coef * self.entropy
    }
}

pub fn ppo_loss(
    policy: &GaussianPolicy,
    value: &NetParams,
    batch: &RolloutBatch,
    advantages: &[f64],
    idx: &[usize],
    config: &PPOConfig,
) -> Result<PpoLoss> {
    if idx.is_empty() {
        return Err(Error::shape("ppo minibatch", "at least one index", 0));
    }
    let m = idx.len() as f64;
    let obs = Matrix::from_rows(&idx.iter().map(|&i| batch.observations[i].as_slice()).collect::<Vec<_>>())?;
    let (means, pcache) = policy.mean.forward(&obs)?;
    let (vals, vcache) = value.forward(&obs)?;

    let mut kl = 0.0;
    for (r, &i) in idx.iter().enumerate() {
        kl += gaussian_kl(&batch.action_means[i], &batch.log_std, means.row(r), &policy.log_std);
    }
    kl /= m;

    let std: Vec<f64> = policy.log_std.iter().map(|l| l.exp()).collect();
    let mut mean_grad = Matrix::zeros(idx.len(), ACTION_DIM);
    let mut log_std_grad = vec![0.0; ACTION_DIM];
    let mut value_grad = Matrix::zeros(idx.len(), 1);
    let (mut policy_loss, mut value_loss, mut clipped) = (0.0, 0.0, 0usize);
    let mut max_dev: f64 = 0.0;
    for (r, &i) in idx.iter().enumerate() {
        let mu = means.row(r);
        let a = &batch.actions[i];
        let logp = gaussian_log_prob(mu, &policy.log_std, a);
        let ratio = (logp - batch.log_probs[i]).exp();
        max_dev = max_dev.max((ratio - 1.0).abs());
        let adv = advantages[i];
        let unclipped = ratio * adv;
        let clipped_ratio = ratio.clamp(1.0 - config.clip_ratio, 1.0 + config.clip_ratio);
        let surrogate = unclipped.min(clipped_ratio * adv);
        policy_loss -= surrogate / m;
        if clipped_ratio != ratio {
            clipped += 1;
        }
        // d(-surrogate)/d(logp) is nonzero only where the unclipped branch is active.
        let active = unclipped <= clipped_ratio * adv;
        if active {
            let dlogp = -adv * ratio / m;
            for j in 0..ACTION_DIM {
                let u = (a[j] - mu[j]) / std[j];
                mean_grad.row_mut(r)[j] = dlogp * u / std[j];
                log_std_grad[j] += dlogp * (u * u - 1.0);
            }
        }

        let v = vals.row(r)[0];
        let v_old = batch.values[i];
        let ret = batch.returns[i];
        let v_clip = v_old + (v - v_old).clamp(-config.value_clip_ratio, config.value_clip_ratio);
        let (l1, l2) = ((v - ret).powi(2), (v_clip - ret).powi(2));
        value_loss += l1.max(l2) / m;
        let g = if l1 >= l2 {
            2.0 * (v - ret)
        } else if (v - v_old).abs() < config.value_clip_ratio {
            2.0 * (v_clip - ret)
        } else {
            0.0
        };
        value_grad.row_mut(r)[0] = config.value_coef * g / m;
    }
    for g in log_std_grad.iter_mut() {
        *g -= config.entropy_coef;
    }
    let entropy = policy.entropy();
    let total = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy;
    if !total.is_finite() {
        return Err(Error::NumericFault(format!("ppo loss is {total}")));
    }
    Ok(PpoLoss {
        policy_loss,
        value_loss,
        entropy,
        kl,
        clip_fraction: clipped as f64 / m,
        max_ratio_deviation: max_dev,
        mean_grad: policy.mean.backward(&pcache, &mean_grad)?.params,
        log_std_grad,
        value_grad: value.backward(&vcache, &value_grad)?.params,
    })
}

fn minibatch_step(
    policy: &mut GaussianPolicy,
    value: &mut NetParams,
    optim: &mut PpoOptimizer,
    batch: &RolloutBatch,
    advantages: &[f64],
    idx: &[usize],
    config: &PPOConfig,
) -> Result<PpoStats> {
    let l = ppo_loss(policy, value, batch, advantages, idx, config)?;
    // Learning rate adapts to the KL measured before this step.
    if l.kl.is_finite() {
        optim.lr = adaptive_lr(l.kl, config, optim.lr);
    }
    let (pg, vg) = (l.mean_grad.as_slice(), l.value_grad.as_slice());
    let sq: f64 = pg.iter().chain(vg).chain(&l.log_std_grad).map(|g| g * g).sum();
    let gnorm = sq.sqrt();
    if !gnorm.is_finite() {
        return Err(Error::NumericFault("non-finite ppo gradient".into()));
    }
    let scale = if gnorm > config.max_grad_norm {
        config.max_grad_norm / gnorm
    } else {
        1.0
    };
    let scaled = |v: &[f64]| v.iter().map(|g| g * scale).collect::<Vec<_>>();
    optim.policy.learning_rate = optim.lr;
    optim.log_std.learning_rate = optim.lr;
    optim.value.learning_rate = optim.lr;
    optim.policy.update(policy.mean.as_mut_slice(), &scaled(pg))?;
    optim.log_std.update(&mut policy.log_std, &scaled(&l.log_std_grad))?;
    let cap = config.max_std.ln();
    for l in policy.log_std.iter_mut() {
        *l = l.min(cap);
    }
    optim.value.update(value.as_mut_slice(), &scaled(vg))?;

    Ok(PpoStats {
        policy_loss: l.policy_loss,
        value_loss: l.value_loss,
        entropy: policy.entropy(),
        approx_kl: l.kl,
        clip_fraction: l.clip_fraction,
        lr: optim.lr,
        first_ratio_deviation: l.max_ratio_deviation,
    })
}

/// Advantages as used by the update: normalized to zero mean and unit
/// deviation when `normalize_advantages` is set.
pub fn prepared_advantages(batch: &RolloutBatch, config: &PPOConfig) -> Vec<f64> {
    let n = batch.advantages.len();
    if !config.normalize_advantages || n == 0 {
        return batch.advantages.clone();
    }
    let mean = batch.advantages.iter().sum::<f64>() / n as f64;
    let var = batch.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt() + 1e-8;
    batch.advantages.iter().map(|a| (a - mean) / sd).collect()
}

/// Deterministic sampling helper for skills used outside training.
pub fn sample_commands(task: &Task, seed: u64, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| task.sample_command(&mut rng_for(seed, &[tag::EVAL, i as u64])))
        .collect()
}
