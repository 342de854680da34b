//! PPO numerics against independent oracles: brute-force advantage sums,
//! finite-difference gradients, the closed-form policy gradient of a linear
//! Gaussian policy and numerical integration of the squashed density.

use gaitspeed_core::ppo::{
    gaussian_log_prob, ppo_update, squashed_log_prob, ActorCritic, PPOConfig, PpoOptimizer,
};
use gaitspeed_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod support;
use support::learning::{self, toy_batch, toy_config};

#[test]
fn gae_matches_brute_force() {
    let worst = learning::gae_max_error(11, 200);
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn loss_gradient_matches_central_differences() {
    let worst = learning::finite_difference_worst_relative_error(12);
    assert!(worst <= 1e-4, "worst relative gradient error {worst}");
}

#[test]
fn unit_ratio_reduces_to_vanilla_policy_gradient() {
    let worst = learning::vanilla_gradient_max_error(13);
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn squashed_density_integrates_to_one() {
    for &(mean, log_std) in &[(0.0, -0.5), (0.8, 0.0), (-1.2, -1.0), (0.3, 0.4)] {
        // Integrate over a in (-1, 1) with the substitution a = tanh(u), so the
        // quadrature is of p_a(tanh u) * (1 - tanh² u) du on a wide u grid.
        let n = 200_000;
        let (lo, hi) = (-12.0, 12.0);
        let du = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            let u: f64 = lo + (i as f64 + 0.5) * du;
            let density_a = squashed_log_prob(&[u], &[mean], &[log_std]).exp();
            let jac = 1.0 - u.tanh().powi(2);
            total += density_a * jac * du;
        }
        assert!((total - 1.0).abs() < 1e-6, "mean={mean} log_std={log_std}: {total}");

        // Same density by the change-of-variables formula in the action.
        for &a in &[-0.9, -0.2, 0.0, 0.5, 0.95] {
            let u = f64::atanh(a);
            let direct = gaussian_log_prob(&[u], &[mean], &[log_std]) - (1.0 - a * a).ln();
            let lib = squashed_log_prob(&[u], &[mean], &[log_std]);
            assert!((direct - lib).abs() < 1e-10);
        }
    }
}

#[test]
fn squashed_log_prob_is_finite_in_the_tails() {
    let lp = squashed_log_prob(&[30.0, -40.0], &[29.0, -41.0], &[0.0, 0.0]);
    assert!(lp.is_finite());
}

#[test]
fn non_finite_gradient_aborts_and_restores() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let config = toy_config(vec![6]);
    let mut ac = ActorCritic::with_action_dim(3, 2, &config, &mut rng);
    let mut batch = toy_batch(&ac, &mut rng, 16, &[0.0]);
    batch.advantages[3] = f64::NAN;
    let mut opt = PpoOptimizer::new(&ac, 1e-3);
    let before = (ac.clone(), opt.clone());
    let err = ppo_update(&mut ac, &mut opt, &batch, &config, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)));
    assert_eq!(ac, before.0);
    assert_eq!(opt, before.1);
}

#[test]
fn update_raises_likelihood_of_advantaged_actions() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let config = PPOConfig {
        minibatch_size: 32,
        epochs: 8,
        ..toy_config(vec![8])
    };
    let mut ac = ActorCritic::with_action_dim(2, 1, &config, &mut rng);
    let mut batch = toy_batch(&ac, &mut rng, 128, &[0.0]);
    // Reward actions above the mean, penalize those below.
    let (mean, _) = ac.policy_forward(batch.obs.view()).unwrap();
    for i in 0..batch.len() {
        batch.advantages[i] = (batch.pre_squash[[i, 0]] - mean[[i, 0]]).signum();
    }
    let mut opt = PpoOptimizer::new(&ac, 1e-2);
    let before = mean.column(0).mean().unwrap();
    ppo_update(&mut ac, &mut opt, &batch, &config, &mut rng).unwrap();
    let (after, _) = ac.policy_forward(batch.obs.view()).unwrap();
    assert!(after.column(0).mean().unwrap() > before + 0.05);
}
