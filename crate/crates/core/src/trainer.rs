//! The alternating rollout / update loop and its persistent state.

use std::fmt::Write as _;

use crate::config::{ExperimentConfig, TaskKind};
use crate::env::{EnvState, ACTION_DIM};
use crate::error::{Error, Result};
use crate::numkit::{AdamState, Checkpoint, NetParams, NetSpec, OutputActivation};
use crate::ppo::{
    collect_rollouts, compute_gae, observation_dim, ppo_update, value_net_init, EnvRunner,
    GaussianPolicy, PpoOptimizer, PpoStats, Task,
};
use crate::seeding::{rng_for, tag};
use crate::skills::{constrained_encoder_step, DualState, EncoderDiagnostics, ObjectiveConfig};

/// Columns of the training log, in order.
pub const LOG_COLUMNS: [&str; 17] = [
    "update",
    "env_steps",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_fraction",
    "lr",
    "encoder_loss",
    "lambda",
    "violation_fraction",
    "mean_dphi_norm",
    "mean_intrinsic",
    "mean_extrinsic",
    "mean_episode_speed",
    "episodes",
    "success_rate",
];

pub fn log_header() -> String {
    LOG_COLUMNS.join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LogRow {
    pub update: u64,
    pub env_steps: u64,
    pub ppo: PpoStats,
    pub encoder: EncoderDiagnostics,
    pub mean_intrinsic: f64,
    pub mean_extrinsic: f64,
    pub mean_episode_speed: f64,
    pub episodes: usize,
    pub success_rate: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.update,
            self.env_steps,
            self.ppo.policy_loss,
            self.ppo.value_loss,
            self.ppo.entropy,
            self.ppo.approx_kl,
            self.ppo.clip_fraction,
            self.ppo.lr,
            self.encoder.objective_loss,
            self.encoder.lambda,
            self.encoder.violation_fraction,
            self.encoder.mean_dphi_norm,
            self.mean_intrinsic,
            self.mean_extrinsic,
            self.mean_episode_speed,
            self.episodes,
            self.success_rate
        );
        s
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub policy: GaussianPolicy,
    pub value: NetParams,
    pub optim: PpoOptimizer,
    pub encoder: Option<NetParams>,
    pub encoder_adam: Option<AdamState>,
    pub dual: DualState,
    pub runner: EnvRunner,
    pub update: u64,
    pub env_steps: u64,
}

fn encoder_init(config: &ExperimentConfig) -> Result<NetParams> {
    let spec = NetSpec::with_hidden(
        config.env.kind.state_dim(),
        &config.encoder_hidden,
        config.skill_dim,
        config.encoder_activation,
        OutputActivation::Identity,
    )?;
    NetParams::init(spec, 1.0, &mut rng_for(config.seed, &[tag::INIT, 2]))
}

impl TrainState {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let task = config.task();
        let obs_dim = observation_dim(config.env.kind, &task);
        let policy = GaussianPolicy::init(
            obs_dim,
            &config.policy_hidden,
            config.policy_activation,
            config.ppo.init_std,
            &mut rng_for(config.seed, &[tag::INIT, 0]),
        )?;
        let value = value_net_init(
            obs_dim,
            &config.value_hidden,
            config.policy_activation,
            &mut rng_for(config.seed, &[tag::INIT, 1]),
        )?;
        let (encoder, encoder_adam) = match config.task {
            TaskKind::Skills => {
                let e = encoder_init(config)?;
                let a = AdamState::for_params(&e, config.encoder_lr);
                (Some(e), Some(a))
            }
            TaskKind::Reach => (None, None),
        };
        let optim = PpoOptimizer::new(&policy, &value, config.ppo.lr_init);
        Ok(TrainState {
            config: config.clone(),
            runner: EnvRunner::new(config.env_config(), task, config.seed),
            policy,
            value,
            optim,
            encoder,
            encoder_adam,
            dual: config.dual,
            update: 0,
            env_steps: 0,
        })
    }

    pub fn objective(&self) -> Option<&ObjectiveConfig> {
        match &self.runner.task {
            Task::Skills(o) => Some(o),
            Task::Reach(_) => None,
        }
    }

    /// One rollout plus one update. On failure the state is left exactly as
    /// it was before the call.
    pub fn step(&mut self) -> Result<LogRow> {
        let backup = self.clone();
        let r = self.step_inner();
        if r.is_err() {
            *self = backup;
        }
        r
    }

    fn step_inner(&mut self) -> Result<LogRow> {
        let cfg = self.config.ppo.clone();
        let snapshot = self.encoder.clone();
        let mut batch = collect_rollouts(
            &self.policy,
            &self.value,
            snapshot.as_ref(),
            &mut self.runner,
            &cfg,
            self.update,
        )?;
        compute_gae(&mut batch, cfg.gamma, cfg.gae_lambda);
        let mut shuffle = rng_for(self.config.seed, &[tag::SHUFFLE, self.update]);

        let objective = self.objective().cloned();
        let mut enc_sum = EncoderDiagnostics::default();
        let mut enc_steps = 0usize;
        let encoder = &mut self.encoder;
        let encoder_adam = &mut self.encoder_adam;
        let dual = &mut self.dual;
        let stats = ppo_update(
            &mut self.policy,
            &mut self.value,
            &mut self.optim,
            &batch,
            &cfg,
            &mut shuffle,
            |idx| {
                if let (Some(obj), Some(enc), Some(adam)) = (&objective, encoder.as_mut(), encoder_adam.as_mut()) {
                    let d = constrained_encoder_step(enc, adam, dual, &batch.encoder_batch(idx), obj)?;
                    enc_sum.objective_loss += d.objective_loss;
                    enc_sum.constraint_penalty += d.constraint_penalty;
                    enc_sum.violation_fraction += d.violation_fraction;
                    enc_sum.mean_residual += d.mean_residual;
                    enc_sum.mean_dphi_norm += d.mean_dphi_norm;
                    enc_steps += 1;
                }
                Ok(())
            },
        )?;
        if let Some(e) = &self.encoder {
            if !e.is_finite() || !self.dual.lambda.is_finite() {
                return Err(Error::NumericFault("encoder or multiplier became non-finite".into()));
            }
        }
        if enc_steps > 0 {
            let c = enc_steps as f64;
            enc_sum.objective_loss /= c;
            enc_sum.constraint_penalty /= c;
            enc_sum.violation_fraction /= c;
            enc_sum.mean_residual /= c;
            enc_sum.mean_dphi_norm /= c;
        }
        enc_sum.lambda = self.dual.lambda;

        self.update += 1;
        self.env_steps += batch.len() as u64;
        let n = batch.len().max(1) as f64;
        let speeds = std::mem::take(&mut self.runner.finished_speeds);
        let successes = std::mem::take(&mut self.runner.finished_success);
        Ok(LogRow {
            update: self.update,
            env_steps: self.env_steps,
            ppo: stats,
            encoder: enc_sum,
            mean_intrinsic: batch.intrinsic.iter().sum::<f64>() / n,
            mean_extrinsic: batch.extrinsic.iter().sum::<f64>() / n,
            mean_episode_speed: if speeds.is_empty() {
                0.0
            } else {
                speeds.iter().sum::<f64>() / speeds.len() as f64
            },
            episodes: speeds.len(),
            success_rate: if successes.is_empty() {
                0.0
            } else {
                successes.iter().filter(|&&s| s).count() as f64 / successes.len() as f64
            },
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put_text("config", &self.config.to_text());
        c.put_u64("progress", &[self.update, self.env_steps]);
        c.put_net("policy", &self.policy.mean);
        c.put_f64("policy.log_std", &[self.policy.log_std.len()], &self.policy.log_std);
        c.put_net("value", &self.value);
        c.put_adam("optim.policy", &self.optim.policy);
        c.put_adam("optim.log_std", &self.optim.log_std);
        c.put_adam("optim.value", &self.optim.value);
        c.put_f64("optim.lr", &[1], &[self.optim.lr]);
        if let (Some(e), Some(a)) = (&self.encoder, &self.encoder_adam) {
            c.put_net("encoder", e);
            c.put_adam("optim.encoder", a);
        }
        c.put_f64("dual", &[3], &[self.dual.lambda, self.dual.lambda_lr, self.dual.slack]);

        let slots = &self.runner.slots;
        let n = slots.len();
        let sd = self.config.env.kind.state_dim();
        let k = slots.first().map_or(0, |s| s.command.len());
        c.put_f64(
            "runner.states",
            &[n, sd],
            &slots.iter().flat_map(|s| s.state.vector()).collect::<Vec<_>>(),
        );
        c.put_f64(
            "runner.previous_action",
            &[n, ACTION_DIM],
            &slots.iter().flat_map(|s| s.state.previous_action).collect::<Vec<_>>(),
        );
        c.put_u64(
            "runner.step_index",
            &slots.iter().map(|s| s.state.step_index as u64).collect::<Vec<_>>(),
        );
        c.put_u64("runner.episode", &slots.iter().map(|s| s.episode).collect::<Vec<_>>());
        c.put_f64(
            "runner.commands",
            &[n, k],
            &slots.iter().flat_map(|s| s.command.iter().copied()).collect::<Vec<_>>(),
        );
        c.put_f64(
            "runner.speed_sum",
            &[n],
            &slots.iter().map(|s| s.speed_sum).collect::<Vec<_>>(),
        );
        c
    }

    /// Restores training state; the stored config is authoritative.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config = ExperimentConfig::parse(c.text("config")?)?;
        let mut s = TrainState::new(&config)?;
        let progress = c.u64_array("progress")?;
        if progress.len() != 2 {
            return Err(Error::Checkpoint("bad progress entry".into()));
        }
        s.update = progress[0];
        s.env_steps = progress[1];
        s.policy.mean = checked_net(c, "policy", &s.policy.mean)?;
        s.policy.log_std = c.f64_array("policy.log_std")?.1.to_vec();
        s.value = checked_net(c, "value", &s.value)?;
        s.optim.policy = c.adam("optim.policy")?;
        s.optim.log_std = c.adam("optim.log_std")?;
        s.optim.value = c.adam("optim.value")?;
        s.optim.lr = c.f64_scalar("optim.lr")?;
        if let Some(e) = &s.encoder {
            s.encoder = Some(checked_net(c, "encoder", e)?);
            s.encoder_adam = Some(c.adam("optim.encoder")?);
        }
        let d = c.f64_array("dual")?.1;
        if d.len() != 3 {
            return Err(Error::Checkpoint("bad dual entry".into()));
        }
        s.dual = DualState {
            lambda: d[0],
            lambda_lr: d[1],
            slack: d[2],
        };

        let kind = config.env.kind;
        let (shape, states) = c.f64_array("runner.states")?;
        let n = s.runner.slots.len();
        if shape != [n, kind.state_dim()] {
            return Err(Error::Checkpoint(format!(
                "runner.states has shape {shape:?}, expected [{n}, {}]",
                kind.state_dim()
            )));
        }
        let prev = c.f64_array("runner.previous_action")?.1;
        let steps = c.u64_array("runner.step_index")?;
        let episodes = c.u64_array("runner.episode")?;
        let (cshape, commands) = c.f64_array("runner.commands")?;
        let speed_sum = c.f64_array("runner.speed_sum")?.1;
        if prev.len() != n * ACTION_DIM || steps.len() != n || episodes.len() != n || speed_sum.len() != n || cshape.first() != Some(&n) {
            return Err(Error::Checkpoint("runner entries disagree on environment count".into()));
        }
        let k = cshape.get(1).copied().unwrap_or(0);
        for (i, slot) in s.runner.slots.iter_mut().enumerate() {
            let sd = kind.state_dim();
            let mut st = EnvState::from_vector(kind, &states[i * sd..(i + 1) * sd])?;
            st.previous_action = [prev[2 * i], prev[2 * i + 1]];
            st.step_index = steps[i] as usize;
            slot.state = st;
            slot.episode = episodes[i];
            slot.command = commands[i * k..(i + 1) * k].to_vec();
            slot.speed_sum = speed_sum[i];
        }
        Ok(s)
    }
}

fn checked_net(c: &Checkpoint, prefix: &str, like: &NetParams) -> Result<NetParams> {
    let net = c.net(prefix)?;
    if net.spec() != like.spec() {
        return Err(Error::Shape {
            context: "checkpoint network",
            expected: format!("{prefix} widths {:?}", like.spec().layer_widths),
            found: format!("{:?}", net.spec().layer_widths),
        });
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&[
            "ppo.rollouts_per_update=3",
            "ppo.horizon=40",
            "env.episode_steps=30",
            "ppo.epochs=2",
            "ppo.minibatches=2",
            "policy.hidden=8",
            "policy.value_hidden=8",
            "encoder.hidden=8",
            "objective.z_max=5",
        ])
        .unwrap();
        c
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut s = TrainState::new(&tiny()).unwrap();
        s.step().unwrap();
        let c = s.to_checkpoint();
        let back = TrainState::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_checkpoint().to_bytes(), c.to_bytes());
    }

    #[test]
    fn resumed_state_continues_identically() {
        let mut a = TrainState::new(&tiny()).unwrap();
        a.step().unwrap();
        let mut b = TrainState::from_checkpoint(&a.to_checkpoint()).unwrap();
        let ra = a.step().unwrap();
        let rb = b.step().unwrap();
        assert_eq!(ra.to_csv(), rb.to_csv());
        assert_eq!(a, b);
    }
}
