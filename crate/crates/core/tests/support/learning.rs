//! PPO oracles: term-by-term advantage sums, central finite differences and
//! the closed-form policy gradient of a linear Gaussian policy.

use gaitspeed_core::ppo::{gae, gaussian_log_prob, ppo_loss_and_grad, ActorCritic, Batch, PPOConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Advantages summed term by term, without the backward recursion.
pub fn gae_oracle(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminated: &[bool],
    episode_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let boot = if terminated[t] { 0.0 } else { next_values[t] };
            rewards[t] + gamma * boot - values[t]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut weight = 1.0;
            for k in t..n {
                sum += weight * delta[k];
                if episode_end[k] {
                    break;
                }
                weight *= gamma * lambda;
            }
            sum
        })
        .collect()
}

/// Largest difference in advantages or returns between [`gae`] and the
/// oracle over random sequences with random episode boundaries.
pub fn gae_max_error(seed: u64, sequences: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..sequences {
        let n = rng.random_range(1..120);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let next_values: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let terminated: Vec<bool> = (0..n).map(|_| rng.random_bool(0.05)).collect();
        let mut episode_end: Vec<bool> = terminated.iter().map(|&t| t || rng.random_bool(0.05)).collect();
        episode_end[n - 1] = true;
        let gamma = rng.random_range(0.8..1.0);
        let lambda = rng.random_range(0.0..1.0);
        let (adv, ret) = gae(&rewards, &values, &next_values, &terminated, &episode_end, gamma, lambda);
        let oracle = gae_oracle(&rewards, &values, &next_values, &terminated, &episode_end, gamma, lambda);
        for t in 0..n {
            worst = worst.max((adv[t] - oracle[t]).abs());
            worst = worst.max((ret[t] - (oracle[t] + values[t])).abs());
        }
    }
    worst
}

pub fn toy_config(hidden: Vec<usize>) -> PPOConfig {
    PPOConfig {
        hidden,
        init_log_std: -0.3,
        entropy_coef: 0.01,
        ..PPOConfig::default()
    }
}

/// A batch whose stored log-probabilities put row `i`'s probability ratio
/// at `exp(shifts[i % len])`.
pub fn toy_batch(ac: &ActorCritic, rng: &mut ChaCha8Rng, rows: usize, shifts: &[f64]) -> Batch {
    let obs_dim = ac.obs_dim();
    let act_dim = ac.action_dim();
    let obs = Array2::from_shape_fn((rows, obs_dim), |_| rng.sample::<f64, _>(StandardNormal));
    let (mean, log_std) = ac.policy_forward(obs.view()).unwrap();
    let mut pre_squash = mean.clone();
    for (u, j) in pre_squash.iter_mut().zip((0..act_dim).cycle()) {
        *u += log_std[j].exp() * rng.sample::<f64, _>(StandardNormal);
    }
    let log_probs = (0..rows)
        .map(|i| {
            let logp = gaussian_log_prob(
                pre_squash.row(i).as_slice().unwrap(),
                mean.row(i).as_slice().unwrap(),
                &log_std,
            );
            logp - shifts[i % shifts.len()]
        })
        .collect();
    Batch {
        obs,
        pre_squash,
        log_probs,
        advantages: (0..rows).map(|_| rng.random_range(-1.5..1.5)).collect(),
        returns: (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn total_loss(ac: &ActorCritic, batch: &Batch, idx: &[usize], config: &PPOConfig) -> f64 {
    ppo_loss_and_grad(ac, batch, idx, config).0.total_loss
}

/// Worst relative error of the analytic loss gradient against central
/// differences, over every policy and value parameter of a two-hidden-layer
/// toy network. Ratios sit on both sides of the clip range and away from its
/// kinks, where the loss is not differentiable.
pub fn finite_difference_worst_relative_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = toy_config(vec![5, 4]);
    let mut ac = ActorCritic::with_action_dim(3, 2, &config, &mut rng);
    // Larger output weights than the default init so every layer matters.
    for p in ac.policy.iter_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let batch = toy_batch(&ac, &mut rng, 24, &[0.5, 0.05, -0.05, -0.5]);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (_, pg, vg) = ppo_loss_and_grad(&ac, &batch, &idx, &config);

    let h = 1e-6;
    let relative = |fd: f64, g: f64| (fd - g).abs() / fd.abs().max(g.abs()).max(1e-3);
    let mut worst: f64 = 0.0;
    for k in 0..ac.policy.len() {
        let mut plus = ac.clone();
        plus.policy[k] += h;
        let mut minus = ac.clone();
        minus.policy[k] -= h;
        let fd = (total_loss(&plus, &batch, &idx, &config) - total_loss(&minus, &batch, &idx, &config)) / (2.0 * h);
        worst = worst.max(relative(fd, pg[k]));
    }
    for k in 0..ac.value.len() {
        let mut plus = ac.clone();
        plus.value[k] += h;
        let mut minus = ac.clone();
        minus.value[k] -= h;
        let fd = (total_loss(&plus, &batch, &idx, &config) - total_loss(&minus, &batch, &idx, &config)) / (2.0 * h);
        worst = worst.max(relative(fd, vg[k]));
    }
    worst
}

/// At ratio one and without an entropy bonus the clipped objective's gradient
/// is the plain policy gradient `-mean(A ∇log π)`. For a linear policy
/// `μ = xW + b` that gradient has a closed form; returns the largest
/// difference from it.
pub fn vanilla_gradient_max_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = PPOConfig {
        entropy_coef: 0.0,
        ..toy_config(Vec::new())
    };
    let (obs_dim, act_dim) = (4, 3);
    let mut ac = ActorCritic::with_action_dim(obs_dim, act_dim, &config, &mut rng);
    for p in ac.policy.iter_mut() {
        *p = rng.random_range(-0.5..0.5);
    }
    let batch = toy_batch(&ac, &mut rng, 40, &[0.0]);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (_, pg, _) = ppo_loss_and_grad(&ac, &batch, &idx, &config);

    let n_weights = obs_dim * act_dim;
    let log_std = ac.log_std().to_vec();
    let (mean, _) = ac.policy_forward(batch.obs.view()).unwrap();
    let mut oracle = vec![0.0; ac.policy.len()];
    let b = batch.len() as f64;
    for i in 0..batch.len() {
        let a = batch.advantages[i];
        for j in 0..act_dim {
            let var = (2.0 * log_std[j]).exp();
            let diff = batch.pre_squash[[i, j]] - mean[[i, j]];
            let dmu = diff / var;
            for k in 0..obs_dim {
                oracle[k * act_dim + j] -= a * dmu * batch.obs[[i, k]] / b;
            }
            oracle[n_weights + j] -= a * dmu / b;
            oracle[n_weights + act_dim + j] -= a * (diff * diff / var - 1.0) / b;
        }
    }
    pg.iter().zip(&oracle).map(|(g, o)| (g - o).abs()).fold(0.0, f64::max)
}
