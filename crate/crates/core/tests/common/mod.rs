//! Finite-difference oracles and small fixtures shared by the test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skillab::env::{EnvConfig, EnvKind};
use skillab::numkit::{HiddenActivation, Matrix, NetParams, NetSpec, OutputActivation};
use skillab::ppo::{self, EnvRunner, GaussianPolicy, PPOConfig, RolloutBatch, Task};
use skillab::skills::{self, EncoderBatch, ObjectiveConfig, ObjectiveKind};

pub const FD_STEP: f64 = 1e-5;

/// Elementwise relative error `|a - n| / max(|a|, |n|, floor)` with the
/// floor at `1e-3 * max|n|`. Structurally zero gradients (output biases under
/// a difference of encodings, dead ReLU units) leave only central-difference
/// roundoff, which must not count as relative error.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], mut f: F) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = f(&p);
            p[i] = orig - FD_STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn random_net(rng: &mut ChaCha8Rng, input: usize, output: usize) -> NetParams {
    let depth = rng.random_range(0..3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..8)).collect();
    let act = if rng.random_bool(0.5) {
        HiddenActivation::Relu
    } else {
        HiddenActivation::Elu
    };
    let out = if rng.random_bool(0.5) {
        OutputActivation::Identity
    } else {
        OutputActivation::Tanh
    };
    let spec = NetSpec::with_hidden(input, &hidden, output, act, out).unwrap();
    random_params(rng, spec)
}

/// Every weight and bias uniform in (-1, 1). Nonzero biases keep ReLU units
/// away from their kink, where a central difference is meaningless.
pub fn random_params(rng: &mut ChaCha8Rng, spec: NetSpec) -> NetParams {
    let data = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    NetParams::from_vec(spec, data).unwrap()
}

/// Worst parameter- and input-gradient error of `L = sum(w * f(x))` for a
/// random network, random batch and random output weights.
pub fn net_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (input, output) = (rng.random_range(1..6), rng.random_range(1..4));
    let net = random_net(&mut rng, input, output);
    let batch = rng.random_range(1..5);
    let x = random_matrix(&mut rng, batch, input, 2.0);
    let w = random_matrix(&mut rng, batch, output, 1.0);
    let objective = |y: &Matrix| y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>();

    let (_, cache) = net.forward(&x).unwrap();
    let grads = net.backward(&cache, &w).unwrap();

    let numeric = central_diff(net.as_slice(), |p| {
        let n = NetParams::from_vec(net.spec().clone(), p.to_vec()).unwrap();
        objective(&n.predict(&x).unwrap())
    });
    let params = max_rel_err(grads.params.as_slice(), &numeric);

    let numeric_x = central_diff(x.as_slice(), |v| {
        let m = Matrix::new(batch, input, v.to_vec()).unwrap();
        objective(&net.predict(&m).unwrap())
    });
    params.max(max_rel_err(grads.input.as_slice(), &numeric_x))
}

pub fn random_encoder_batch(rng: &mut ChaCha8Rng, state_dim: usize, skill_dim: usize, n: usize) -> EncoderBatch {
    let vec = |rng: &mut ChaCha8Rng, d: usize, s: f64| (0..d).map(|_| rng.random_range(-s..s)).collect::<Vec<_>>();
    let states: Vec<Vec<f64>> = (0..n).map(|_| vec(rng, state_dim, 3.0)).collect();
    let next_states = states
        .iter()
        .map(|s| s.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect())
        .collect();
    EncoderBatch {
        states,
        next_states,
        skills: (0..n).map(|_| vec(rng, skill_dim, 12.0)).collect(),
        state_distances: (0..n).map(|_| rng.random_range(0.0..0.2)).collect(),
    }
}

/// Worst gradient error of the full constrained encoder loss (objective plus
/// `lambda * mean(max(0, c))`) for a random encoder and batch.
pub fn encoder_gradient_error(seed: u64, kind: ObjectiveKind) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skill_dim = rng.random_range(2..4);
    let state_dim = rng.random_range(2..6);
    let spec = NetSpec::with_hidden(
        state_dim,
        &[rng.random_range(2..8)],
        skill_dim,
        HiddenActivation::Relu,
        OutputActivation::Identity,
    )
    .unwrap();
    let encoder = random_params(&mut rng, spec);
    let n = rng.random_range(1..12);
    let batch = random_encoder_batch(&mut rng, state_dim, skill_dim, n);
    let config = ObjectiveConfig::new(kind, skill_dim, 12.0, 300);
    let lambda = rng.random_range(0.0..40.0);

    let analytic = skills::encoder_loss(&encoder, &batch, &config, lambda).unwrap();
    let numeric = central_diff(encoder.as_slice(), |p| {
        let e = NetParams::from_vec(encoder.spec().clone(), p.to_vec()).unwrap();
        skills::encoder_loss(&e, &batch, &config, lambda).unwrap().total()
    });
    max_rel_err(analytic.grad.as_slice(), &numeric)
}

pub fn tiny_env(kind: EnvKind, envs: usize, steps: usize) -> EnvConfig {
    EnvConfig {
        kind,
        num_envs: envs,
        episode_steps: steps,
        ..EnvConfig::default()
    }
}

/// A short real rollout with a slightly perturbed policy afterwards so
/// likelihood ratios differ from one.
pub fn perturbed_rollout(seed: u64) -> (GaussianPolicy, NetParams, RolloutBatch, PPOConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = tiny_env(EnvKind::PointMass, 2, 6);
    let objective = ObjectiveConfig::new(ObjectiveKind::Ours, 2, 12.0, 6);
    let task = Task::Skills(objective);
    let obs_dim = ppo::observation_dim(env.kind, &task);
    let hidden = [rng.random_range(2..6)];
    let policy = GaussianPolicy::init(obs_dim, &hidden, HiddenActivation::Elu, 1.0, &mut rng).unwrap();
    let value = ppo::value_net_init(obs_dim, &hidden, HiddenActivation::Elu, &mut rng).unwrap();
    let encoder = NetParams::init(
        NetSpec::with_hidden(4, &[4], 2, HiddenActivation::Relu, OutputActivation::Identity).unwrap(),
        1.0,
        &mut rng,
    )
    .unwrap();
    let config = PPOConfig {
        horizon: 4,
        ..PPOConfig::default()
    };
    let mut runner = EnvRunner::new(env, task, seed);
    let mut batch = ppo::collect_rollouts(&policy, &value, Some(&encoder), &mut runner, &config, 0).unwrap();
    ppo::compute_gae(&mut batch, config.gamma, config.gae_lambda);

    let mut moved = policy.clone();
    for p in moved.mean.as_mut_slice() {
        *p += rng.random_range(-0.05..0.05);
    }
    for l in moved.log_std.iter_mut() {
        *l += rng.random_range(-0.1..0.1);
    }
    let mut value_moved = value.clone();
    for p in value_moved.as_mut_slice() {
        *p += rng.random_range(-0.05..0.05);
    }
    (moved, value_moved, batch, config)
}

/// Worst gradient error of the PPO minibatch loss with respect to the policy
/// mean network, the log-std vector and the value network.
pub fn ppo_gradient_error(seed: u64) -> f64 {
    let (policy, value, batch, config) = perturbed_rollout(seed);
    let adv = ppo::prepared_advantages(&batch, &config);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let loss = ppo::ppo_loss(&policy, &value, &batch, &adv, &idx, &config).unwrap();
    let total = |p: &GaussianPolicy, v: &NetParams| ppo::ppo_loss(p, v, &batch, &adv, &idx, &config).unwrap().total(&config);

    let mean_fd = central_diff(policy.mean.as_slice(), |x| {
        let mut p = policy.clone();
        p.mean.as_mut_slice().copy_from_slice(x);
        total(&p, &value)
    });
    let std_fd = central_diff(&policy.log_std, |x| {
        let mut p = policy.clone();
        p.log_std.copy_from_slice(x);
        total(&p, &value)
    });
    let value_fd = central_diff(value.as_slice(), |x| {
        let mut v = value.clone();
        v.as_mut_slice().copy_from_slice(x);
        total(&policy, &v)
    });
    max_rel_err(loss.mean_grad.as_slice(), &mean_fd)
        .max(max_rel_err(&loss.log_std_grad, &std_fd))
        .max(max_rel_err(loss.value_grad.as_slice(), &value_fd))
}
