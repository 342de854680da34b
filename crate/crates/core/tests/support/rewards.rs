//! Reward oracles: closed-form telescoping sums, the per-step clip bound and
//! hand-computed examples.

use gaitspeed_core::env::N_JOINTS;
use gaitspeed_core::rewards::{
    clipped_angle_term, reward_de, reward_he, reward_mix, reward_to, RewardConfig, RewardInputs,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random trajectory of angles, drifts and joint offsets.
pub struct Trajectory {
    pub theta: Vec<f64>,
    pub dx: Vec<f64>,
    pub q: Vec<[f64; N_JOINTS]>,
}

impl Trajectory {
    pub fn random(rng: &mut ChaCha8Rng, len: usize) -> Self {
        let mut theta = vec![rng.random_range(0.0..std::f64::consts::PI)];
        let mut dx = vec![0.0];
        let mut q = vec![[0.0; N_JOINTS]];
        for _ in 0..len {
            let t: f64 = theta.last().unwrap() + rng.random_range(-0.3..0.3);
            theta.push(t.clamp(0.0, std::f64::consts::PI));
            let d: f64 = dx.last().unwrap() + rng.random_range(-0.005..0.005);
            dx.push(d.abs());
            let mut qi = [0.0; N_JOINTS];
            for v in qi.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            q.push(qi);
        }
        Trajectory { theta, dx, q }
    }

    pub fn inputs(&self, t: usize, threshold: f64) -> RewardInputs {
        RewardInputs::new(self.theta[t - 1], self.theta[t], self.dx[t - 1], self.dx[t], self.q[t], threshold)
    }

    pub fn len(&self) -> usize {
        self.theta.len() - 1
    }
}

/// Largest gap between the summed dense reward and its closed form
/// `λ_θ(θ₀ - θ_n) + λ_x(Δx₀ - Δx_n) - λ_q Σ Σ q⁴` over random trajectories.
pub fn telescoping_max_error(seed: u64, trajectories: usize) -> f64 {
    let cfg = RewardConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trajectories {
        let len = rng.random_range(1..300);
        let traj = Trajectory::random(&mut rng, len);
        let n = traj.len();
        let total: f64 = (1..=n).map(|t| reward_de(&traj.inputs(t, 0.4), &cfg)).sum();
        let penalty: f64 = (1..=n).map(|t| traj.q[t].iter().map(|v| v.powi(4)).sum::<f64>()).sum();
        let closed = cfg.lambda_theta * (traj.theta[0] - traj.theta[n]) + cfg.lambda_x * (traj.dx[0] - traj.dx[n])
            - cfg.lambda_q * penalty;
        worst = worst.max((total - closed).abs());
    }
    worst
}

/// Largest excess of the clipped angle term over `λ_θ·θ_clip` on any step,
/// and of a segment sum over `λ_θ·θ_clip·len`, across random segments with
/// random clips and weights.
pub fn clip_bound_max_excess(seed: u64, segments: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..segments {
        let len = rng.random_range(1..60);
        let traj = Trajectory::random(&mut rng, len);
        let clip = rng.random_range(0.0125..0.125);
        let lambda = rng.random_range(0.1..2.0);
        let mut sum = 0.0;
        for t in 1..=traj.len() {
            let term = clipped_angle_term(&traj.inputs(t, 0.4), clip, lambda);
            worst = worst.max(term - lambda * clip);
            sum += term;
        }
        worst = worst.max(sum - lambda * clip * traj.len() as f64);
    }
    worst
}

/// Hand-computed cases as (label, computed, expected).
pub fn worked_examples() -> Vec<(&'static str, f64, f64)> {
    let cfg = RewardConfig::default();
    let half = [0.5; N_JOINTS];
    let moving = RewardInputs::new(1.0, 0.8, 0.01, 0.02, half, 0.4);
    let in_goal = RewardInputs::new(0.3, 0.3, 0.0, 0.0, [0.0; N_JOINTS], 0.4);
    vec![
        // 8 * (-0.01) - 12 * 0.0625 / 24
        ("HE moving", reward_he(&moving, &cfg), -0.11125),
        // 0.2 - 0.11125
        ("DE moving", reward_de(&moving, &cfg), 0.08875),
        ("MIX(1,3) moving", reward_mix(&moving, &RewardConfig::mix(1.0, 3.0)), 0.08875),
        ("TO in goal", reward_to(&in_goal, &cfg), 0.03),
        ("MIX(0,1) in goal", reward_mix(&in_goal, &RewardConfig::mix(0.0, 1.0)), 0.03),
        ("MIX(1,10) in goal", reward_mix(&in_goal, &RewardConfig::mix(1.0, 10.0)), 0.3),
    ]
}
