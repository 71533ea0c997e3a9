mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use skillab::env::EnvKind;
use skillab::numkit::{HiddenActivation, NetParams, NetSpec, OutputActivation};
use skillab::ppo::{
    self, adaptive_lr, compute_gae, gae_slice, gaussian_log_prob, EnvRunner, GaussianPolicy, PPOConfig,
    PpoOptimizer, RolloutBatch, Task,
};
use skillab::skills::{per_step_matching_error, intrinsic_reward, ObjectiveConfig, ObjectiveKind};

fn skill_task() -> Task {
    Task::Skills(ObjectiveConfig::new(ObjectiveKind::Ours, 2, 12.0, 10))
}

fn nets(obs_dim: usize, seed: u64) -> (GaussianPolicy, NetParams, NetParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = GaussianPolicy::init(obs_dim, &[8], HiddenActivation::Elu, 1.0, &mut rng).unwrap();
    let value = ppo::value_net_init(obs_dim, &[8], HiddenActivation::Elu, &mut rng).unwrap();
    let encoder = common::random_params(
        &mut rng,
        NetSpec::with_hidden(4, &[8], 2, HiddenActivation::Relu, OutputActivation::Identity).unwrap(),
    );
    (policy, value, encoder)
}

#[test]
fn zero_horizon_gives_empty_batch() {
    let task = skill_task();
    let (policy, value, encoder) = nets(ppo::observation_dim(EnvKind::PointMass, &task), 0);
    let mut runner = EnvRunner::new(common::tiny_env(EnvKind::PointMass, 3, 10), task, 0);
    let config = PPOConfig {
        horizon: 0,
        ..PPOConfig::default()
    };
    let batch = ppo::collect_rollouts(&policy, &value, Some(&encoder), &mut runner, &config, 0).unwrap();
    assert!(batch.is_empty());
}

#[test]
fn motionless_policy_pays_the_full_skill_error() {
    let task = skill_task();
    let obs_dim = ppo::observation_dim(EnvKind::PointMass, &task);
    let (mut policy, value, encoder) = nets(obs_dim, 1);
    policy.mean = NetParams::zeros(policy.mean.spec().clone()).unwrap();
    policy.log_std = vec![-60.0; 2];
    let objective = match &task {
        Task::Skills(o) => o.clone(),
        Task::Reach(_) => unreachable!(),
    };
    let mut runner = EnvRunner::new(common::tiny_env(EnvKind::PointMass, 3, 10), task, 5);
    let config = PPOConfig {
        horizon: 25,
        ..PPOConfig::default()
    };
    let batch = ppo::collect_rollouts(&policy, &value, Some(&encoder), &mut runner, &config, 0).unwrap();
    for i in 0..batch.len() {
        assert!(batch.states[i].iter().all(|v| v.abs() < 1e-20));
        let z = &batch.commands[i];
        let expected = intrinsic_reward(z[0] * z[0] + z[1] * z[1], objective.sigma);
        let delta: Vec<f64> = batch.next_latents[i].iter().zip(&batch.latents[i]).map(|(a, b)| a - b).collect();
        assert_eq!(per_step_matching_error(&delta, z, objective.episode_steps), z[0] * z[0] + z[1] * z[1]);
        assert!((batch.intrinsic[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn skills_are_constant_within_episodes_and_resampled_between() {
    let task = skill_task();
    let (policy, value, encoder) = nets(ppo::observation_dim(EnvKind::PointMass, &task), 2);
    let mut runner = EnvRunner::new(common::tiny_env(EnvKind::PointMass, 2, 10), task, 9);
    let config = PPOConfig {
        horizon: 30,
        ..PPOConfig::default()
    };
    let batch = ppo::collect_rollouts(&policy, &value, Some(&encoder), &mut runner, &config, 0).unwrap();
    for e in 0..2 {
        for t in 1..30 {
            let (i, prev) = (e * 30 + t, e * 30 + t - 1);
            if batch.truncated[prev] {
                assert_ne!(batch.commands[i], batch.commands[prev]);
            } else {
                assert_eq!(batch.commands[i], batch.commands[prev]);
            }
        }
        assert_eq!((0..30).filter(|t| batch.truncated[e * 30 + t]).count(), 3);
    }
}

#[test]
fn gae_closed_forms() {
    let f = [false; 4];
    assert_eq!(gae_slice(&[0.0; 4], &[0.0; 4], &f, &f, &[0.0; 4], 0.0, 0.99, 0.95), vec![0.0; 4]);
    // One step: r + gamma V(s') - V(s).
    let a = gae_slice(&[1.5], &[0.25], &[false], &[false], &[0.0], 2.0, 0.9, 0.95);
    assert!((a[0] - (1.5 + 0.9 * 2.0 - 0.25)).abs() < 1e-15);
    // gamma = 0: advantage is the immediate reward minus the value.
    let r = [1.0, -2.0, 0.5];
    let v = [0.3, 0.1, -0.4];
    let a = gae_slice(&r, &v, &[false; 3], &[false; 3], &[0.0; 3], 7.0, 0.0, 0.95);
    for t in 0..3 {
        assert!((a[t] - (r[t] - v[t])).abs() < 1e-15);
    }
    // Termination cuts the bootstrap, truncation uses the stored value.
    let a = gae_slice(&[1.0, 1.0], &[0.0, 0.0], &[true, false], &[false, false], &[0.0; 2], 5.0, 0.5, 1.0);
    assert_eq!(a, vec![1.0, 1.0 + 0.5 * 5.0]);
    let a = gae_slice(&[1.0, 1.0], &[0.0, 0.0], &[false, false], &[true, false], &[3.0, 0.0], 5.0, 0.5, 1.0);
    assert_eq!(a, vec![1.0 + 0.5 * 3.0, 1.0 + 0.5 * 5.0]);
}

/// Independent recursion of the discounted return for lambda = 1 over one
/// untruncated segment: `A_t = sum_k gamma^k r_{t+k} + gamma^(n-t) V_last - V_t`.
#[test]
fn gae_with_unit_lambda_is_discounted_return() {
    let r = [0.3, -1.0, 2.0, 0.7, 0.1];
    let v = [0.5, 0.2, -0.3, 0.0, 1.1];
    let (g, last) = (0.9f64, 1.7);
    let a = gae_slice(&r, &v, &[false; 5], &[false; 5], &[0.0; 5], last, g, 1.0);
    for t in 0..5 {
        let ret: f64 = (t..5).map(|k| g.powi((k - t) as i32) * r[k]).sum::<f64>() + g.powi((5 - t) as i32) * last;
        assert!((a[t] - (ret - v[t])).abs() < 1e-12);
    }
}

#[test]
fn adaptive_lr_rule() {
    let c = PPOConfig::default();
    assert_eq!(adaptive_lr(c.kl_target, &c, 1e-3), 1e-3);
    assert!((adaptive_lr(10.0 * c.kl_target, &c, 1e-3) - 6.666666666666667e-4).abs() < 1e-15);
    assert_eq!(adaptive_lr(1.0, &c, c.lr_min), c.lr_min);
    assert_eq!(adaptive_lr(0.0, &c, c.lr_max), c.lr_max);
}

fn fresh_batch(seed: u64) -> (GaussianPolicy, NetParams, RolloutBatch, PPOConfig) {
    let task = skill_task();
    let (policy, value, encoder) = nets(ppo::observation_dim(EnvKind::PointMass, &task), seed);
    let mut runner = EnvRunner::new(common::tiny_env(EnvKind::PointMass, 4, 10), task, seed);
    let config = PPOConfig {
        horizon: 16,
        epochs: 3,
        ..PPOConfig::default()
    };
    let mut batch = ppo::collect_rollouts(&policy, &value, Some(&encoder), &mut runner, &config, 0).unwrap();
    compute_gae(&mut batch, config.gamma, config.gae_lambda);
    (policy, value, batch, config)
}

#[test]
fn unchanged_policy_has_unit_ratio_and_score_gradient() {
    let (policy, value, batch, config) = fresh_batch(3);
    let adv = ppo::prepared_advantages(&batch, &config);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let loss = ppo::ppo_loss(&policy, &value, &batch, &adv, &idx, &config).unwrap();
    assert!(loss.max_ratio_deviation < 1e-12);
    assert_eq!(loss.clip_fraction, 0.0);
    assert!(loss.kl.abs() < 1e-15);
    // With ratio 1 the surrogate is the mean advantage-weighted log-likelihood,
    // so its log-std gradient is -mean(A (u^2 - 1)) minus the entropy push.
    let m = batch.len() as f64;
    for j in 0..2 {
        let std = policy.log_std[j].exp();
        let expected = -(0..batch.len())
            .map(|i| {
                let u = (batch.actions[i][j] - batch.action_means[i][j]) / std;
                adv[i] * (u * u - 1.0)
            })
            .sum::<f64>()
            / m
            - config.entropy_coef;
        assert!((loss.log_std_grad[j] - expected).abs() < 1e-10);
    }
}

#[test]
fn zero_advantages_leave_only_the_entropy_term() {
    let (policy, value, mut batch, config) = fresh_batch(4);
    batch.advantages = vec![0.0; batch.len()];
    let adv = ppo::prepared_advantages(&batch, &config);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let loss = ppo::ppo_loss(&policy, &value, &batch, &adv, &idx, &config).unwrap();
    assert_eq!(loss.policy_loss, 0.0);
    assert!(loss.mean_grad.as_slice().iter().all(|g| *g == 0.0));
    assert_eq!(loss.log_std_grad, vec![-config.entropy_coef; 2]);
}

#[test]
fn null_update_is_a_fixed_point() {
    let (mut policy, mut value, mut batch, mut config) = fresh_batch(5);
    config.entropy_coef = 0.0;
    config.value_coef = 0.0;
    batch.advantages = vec![0.0; batch.len()];
    let (p0, v0) = (policy.clone(), value.clone());
    let mut optim = PpoOptimizer::new(&policy, &value, config.lr_init);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    ppo::ppo_update(&mut policy, &mut value, &mut optim, &batch, &config, &mut rng, |_| Ok(())).unwrap();
    assert_eq!(policy, p0);
    assert_eq!(value.as_slice(), v0.as_slice());
}

#[test]
fn shuffling_is_deterministic_under_a_seed() {
    let run = || {
        let (mut policy, mut value, batch, config) = fresh_batch(6);
        let mut optim = PpoOptimizer::new(&policy, &value, config.lr_init);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut seen = Vec::new();
        let stats = ppo::ppo_update(&mut policy, &mut value, &mut optim, &batch, &config, &mut rng, |idx| {
            seen.extend_from_slice(idx);
            Ok(())
        })
        .unwrap();
        (policy, value.as_slice().to_vec(), seen, stats.policy_loss)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.3.to_bits(), b.3.to_bits());
    // Every epoch visits every sample exactly once.
    let n = a.2.len() / 3;
    for e in 0..3 {
        let mut epoch = a.2[e * n..(e + 1) * n].to_vec();
        epoch.sort_unstable();
        assert_eq!(epoch, (0..n).collect::<Vec<_>>());
    }
}

/// Two "arms" at actions (+0.8, 0) and (-0.8, 0) from the same observation:
/// a positive advantage on arm 1 must raise its likelihood after one update.
#[test]
fn bandit_update_favours_the_rewarded_arm() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs = vec![0.1, -0.2, 0.3];
    let mut policy = GaussianPolicy::init(3, &[8], HiddenActivation::Elu, 1.0, &mut rng).unwrap();
    let mut value = ppo::value_net_init(3, &[8], HiddenActivation::Elu, &mut rng).unwrap();
    let mean = policy.act_deterministic(&obs).unwrap();
    let arms = [[0.8, 0.0], [-0.8, 0.0]];
    let n = 64;
    let mut batch = RolloutBatch {
        num_envs: 1,
        horizon: n,
        log_std: policy.log_std.clone(),
        ..RolloutBatch::default()
    };
    for i in 0..n {
        let a = arms[i % 2];
        batch.observations.push(obs.clone());
        batch.actions.push(a);
        batch.action_means.push(mean);
        batch.log_probs.push(gaussian_log_prob(&mean, &policy.log_std, &a));
        batch.values.push(0.0);
        batch.advantages.push(if i % 2 == 0 { 1.0 } else { -1.0 });
        batch.returns.push(0.0);
    }
    let before = policy.log_prob(&mean, &arms[0]);
    let config = PPOConfig {
        epochs: 1,
        minibatches: 1,
        ..PPOConfig::default()
    };
    let mut optim = PpoOptimizer::new(&policy, &value, config.lr_init);
    let mut shuffle = ChaCha8Rng::seed_from_u64(0);
    ppo::ppo_update(&mut policy, &mut value, &mut optim, &batch, &config, &mut shuffle, |_| Ok(())).unwrap();
    let new_mean = policy.act_deterministic(&obs).unwrap();
    assert!(policy.log_prob(&new_mean, &arms[0]) > before);
    assert!(new_mean[0] > mean[0]);
}

#[test]
fn std_never_exceeds_the_cap() {
    let (mut policy, mut value, mut batch, config) = fresh_batch(10);
    // Advantages that reward the tails push the std up along with the entropy bonus.
    for i in 0..batch.len() {
        let u = batch.actions[i][0] - batch.action_means[i][0];
        batch.advantages[i] = u * u - 1.0;
    }
    let mut optim = PpoOptimizer::new(&policy, &value, 1e-2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        ppo::ppo_update(&mut policy, &mut value, &mut optim, &batch, &config, &mut rng, |_| Ok(())).unwrap();
    }
    assert!(policy.log_std.iter().all(|l| *l <= config.max_std.ln()));
}

#[test]
fn failing_callback_restores_everything() {
    let (mut policy, mut value, batch, config) = fresh_batch(11);
    let (p0, v0) = (policy.clone(), value.clone());
    let mut optim = PpoOptimizer::new(&policy, &value, config.lr_init);
    let o0 = optim.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut calls = 0;
    let err = ppo::ppo_update(&mut policy, &mut value, &mut optim, &batch, &config, &mut rng, |_| {
        calls += 1;
        if calls == 3 {
            Err(skillab::Error::NumericFault("injected".into()))
        } else {
            Ok(())
        }
    });
    assert!(err.is_err());
    assert_eq!(policy, p0);
    assert_eq!(value.as_slice(), v0.as_slice());
    assert_eq!(optim.lr, o0.lr);
}
