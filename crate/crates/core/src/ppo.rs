//! Actor-critic networks, conditioning signals, GAE and the clipped-surrogate
//! update.
//!
//! The policy is a diagonal Gaussian over a pre-squash vector `u`; the
//! environment receives `tanh(u)`. Log-probabilities used in the ratio are
//! those of `u`, since the tanh Jacobian cancels between new and old policy.
//!
//! In [`ActionMode::Residual`] the joint entries of `u` are increments: the
//! agent keeps a per-episode pre-squash target, adds `residual_scale * u` to
//! it each step and the environment receives `tanh(target)`. A zero output then holds the commanded joint targets,
//! which makes slow motion a small-output behaviour instead of a precise
//! identity map.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{ACTION_DIM, N_JOINTS};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Adam, MlpLayout, RunningMeanStd};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// How the joint part of a sampled action becomes a joint target.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    /// `tanh(u)` is the target, relative to the nominal posture.
    Absolute,
    /// `u` increments the agent's running pre-squash target.
    #[default]
    Residual,
}

/// Bound on the running pre-squash target, `tanh(3) ≈ 0.995`; keeps the
/// integrator from winding up deep in saturation.
pub const RESIDUAL_TARGET_LIMIT: f64 = 3.0;

fn default_residual_scale() -> f64 {
    1.0
}

/// Extra policy input describing the requested speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConditioningMode {
    None,
    Speed,
    Time,
    Both,
}

impl ConditioningMode {
    pub fn xi_len(self) -> usize {
        match self {
            ConditioningMode::None => 0,
            ConditioningMode::Speed | ConditioningMode::Time => 1,
            ConditioningMode::Both => 2,
        }
    }
}

pub const SPEED_NORMALIZER: f64 = 2.5;
pub const TIME_NORMALIZER: f64 = 10.0;

/// Speed is divided by 2.5 rad/s; remaining time by 10 s, clamped to [-1, 1].
pub fn build_xi(mode: ConditioningMode, omega_d: f64, target_time: f64, t: f64) -> Vec<f64> {
    let speed = omega_d / SPEED_NORMALIZER;
    let time = ((target_time - t) / TIME_NORMALIZER).clamp(-1.0, 1.0);
    match mode {
        ConditioningMode::None => vec![],
        ConditioningMode::Speed => vec![speed],
        ConditioningMode::Time => vec![time],
        ConditioningMode::Both => vec![speed, time],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PPOConfig {
    pub action_mode: ActionMode,
    /// Gain from policy output to target increment in residual mode. Small
    /// gains keep the sampled outputs O(1) while the exploration random walk
    /// of the targets stays slow.
    pub residual_scale: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub n_envs: usize,
    pub steps_per_rollout: usize,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    /// Initial bias of the grasp-gate output; negative keeps the grasp
    /// closed at the start of training.
    pub gate_bias_init: f64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            action_mode: ActionMode::Residual,
            residual_scale: 1.0,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            entropy_coef: 1e-3,
            value_coef: 0.5,
            learning_rate: 3e-4,
            epochs: 4,
            minibatch_size: 1024,
            n_envs: 32,
            steps_per_rollout: 64,
            max_grad_norm: 0.5,
            hidden: vec![256, 256],
            init_log_std: -0.5,
            gate_bias_init: -1.0,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("ppo.{field}: {msg}")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda", "must lie in [0, 1]");
        }
        if !(self.clip_ratio > 0.0) {
            return bad("clip_ratio", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.residual_scale > 0.0 && self.residual_scale.is_finite()) {
            return bad("residual_scale", "must be positive");
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.n_envs == 0 || self.steps_per_rollout == 0 {
            return bad("epochs/minibatch_size/n_envs/steps_per_rollout", "must be at least 1");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm", "must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "layer widths must be positive");
        }
        if !self.entropy_coef.is_finite() || !self.value_coef.is_finite() || !self.init_log_std.is_finite() {
            return bad("entropy_coef/value_coef/init_log_std", "must be finite");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.n_envs * self.steps_per_rollout
    }
}

pub fn squash(u: f64) -> f64 {
    u.tanh()
}

pub fn unsquash(a: f64) -> f64 {
    a.atanh()
}

/// Log-density of `u` under the diagonal Gaussian.
pub fn gaussian_log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    u.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((u, m), ls)| {
            let z = (u - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// `ln(1 - tanh(u)^2)`, stable for large `|u|`.
fn log_tanh_jacobian(u: f64) -> f64 {
    let x = -2.0 * u.abs();
    2.0 * (std::f64::consts::LN_2 - u.abs() - x.exp().ln_1p())
}

/// Log-density of the squashed action `tanh(u)`.
pub fn squashed_log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    gaussian_log_prob(u, mean, log_std) - u.iter().map(|&v| log_tanh_jacobian(v)).sum::<f64>()
}

/// Entropy of the pre-squash Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (LN_2PI + 1.0)).sum()
}

/// Policy and value networks with the observation normalizer they were
/// trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub policy_layout: MlpLayout,
    pub value_layout: MlpLayout,
    /// Policy MLP parameters followed by one log-std per action dimension.
    pub policy: Vec<f64>,
    pub value: Vec<f64>,
    pub obs_norm: RunningMeanStd,
    pub action_mode: ActionMode,
    #[serde(default = "default_residual_scale")]
    pub residual_scale: f64,
}

pub struct ActOutput {
    pub pre_squash: Array2<f64>,
    pub log_probs: Array1<f64>,
    pub values: Array1<f64>,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, config: &PPOConfig, rng: &mut R) -> Self {
        Self::with_action_dim(obs_dim, ACTION_DIM, config, rng)
    }

    pub fn with_action_dim<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        config: &PPOConfig,
        rng: &mut R,
    ) -> Self {
        let policy_layout = MlpLayout::new(obs_dim, &config.hidden, action_dim);
        let value_layout = MlpLayout::new(obs_dim, &config.hidden, 1);
        let mut policy = policy_layout.init(rng, 0.01);
        if action_dim == ACTION_DIM {
            let gate = policy_layout.output_bias_offset() + ACTION_DIM - 1;
            policy[gate] = config.gate_bias_init;
        }
        policy.extend(std::iter::repeat_n(config.init_log_std, action_dim));
        let value = value_layout.init(rng, 1.0);
        ActorCritic {
            policy_layout,
            value_layout,
            policy,
            value,
            obs_norm: RunningMeanStd::new(obs_dim),
            action_mode: if action_dim == ACTION_DIM {
                config.action_mode
            } else {
                ActionMode::Absolute
            },
            residual_scale: config.residual_scale,
        }
    }

    /// Fresh per-episode target memory for [`ActorCritic::env_action`].
    pub fn initial_targets(&self) -> Vec<f64> {
        match self.action_mode {
            ActionMode::Absolute => Vec::new(),
            ActionMode::Residual => vec![0.0; N_JOINTS],
        }
    }

    /// Squashed environment action for one sampled pre-squash row.
    pub fn env_action(&self, pre_squash: &[f64], targets: &mut [f64]) -> Vec<f64> {
        let mut out: Vec<f64> = pre_squash.iter().map(|u| u.tanh()).collect();
        if self.action_mode == ActionMode::Residual {
            for ((a, u), target) in out.iter_mut().zip(pre_squash).zip(targets.iter_mut()) {
                *target = (*target + self.residual_scale * u).clamp(-RESIDUAL_TARGET_LIMIT, RESIDUAL_TARGET_LIMIT);
                *a = target.tanh();
            }
        }
        out
    }

    pub fn obs_dim(&self) -> usize {
        self.policy_layout.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.policy_layout.output_dim()
    }

    fn split_policy(&self) -> (&[f64], &[f64]) {
        self.policy.split_at(self.policy_layout.param_count())
    }

    pub fn log_std(&self) -> &[f64] {
        self.split_policy().1
    }

    fn check_dims(&self, obs: &ArrayView2<f64>) -> Result<()> {
        if obs.ncols() != self.obs_dim() {
            return Err(Error::Config(format!(
                "observation has {} features, network expects {}",
                obs.ncols(),
                self.obs_dim()
            )));
        }
        Ok(())
    }

    /// Action means (pre-squash) and the shared log-std, for already
    /// normalized observations.
    pub fn policy_forward(&self, obs: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
        self.check_dims(&obs)?;
        let (mlp, log_std) = self.split_policy();
        Ok((self.policy_layout.predict(mlp, obs), log_std.to_vec()))
    }

    pub fn value_forward(&self, obs: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_dims(&obs)?;
        let out = self.value_layout.predict(&self.value, obs);
        Ok(out.column(0).to_owned())
    }

    /// Samples pre-squash actions (or takes the mean when `deterministic`).
    pub fn act<R: Rng>(
        &self,
        obs: ArrayView2<f64>,
        deterministic: bool,
        rngs: &mut [R],
    ) -> Result<ActOutput> {
        let (mean, log_std) = self.policy_forward(obs)?;
        let values = self.value_forward(obs)?;
        let mut pre_squash = mean.clone();
        if !deterministic {
            assert_eq!(rngs.len(), obs.nrows(), "one rng per observation row");
            for (mut row, rng) in pre_squash.rows_mut().into_iter().zip(rngs.iter_mut()) {
                for (u, ls) in row.iter_mut().zip(&log_std) {
                    let n: f64 = StandardNormal.sample(rng);
                    *u += ls.exp() * n;
                }
            }
        }
        let log_probs = Array1::from_iter(pre_squash.rows().into_iter().zip(mean.rows()).map(
            |(u, m)| {
                gaussian_log_prob(
                    u.as_slice().expect("contiguous"),
                    m.as_slice().expect("contiguous"),
                    &log_std,
                )
            },
        ));
        Ok(ActOutput {
            pre_squash,
            log_probs,
            values,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.policy.iter().chain(&self.value).all(|v| v.is_finite())
            && self
                .obs_norm
                .mean
                .iter()
                .chain(&self.obs_norm.var)
                .all(|v| v.is_finite())
    }

    /// Rounds all parameters and normalizer statistics through `f32`, the
    /// checkpoint storage precision, so that a saved and reloaded agent
    /// behaves identically.
    pub fn round_to_f32(&mut self) {
        let norm = &mut self.obs_norm;
        for v in self
            .policy
            .iter_mut()
            .chain(self.value.iter_mut())
            .chain(norm.mean.iter_mut())
            .chain(norm.var.iter_mut())
        {
            *v = *v as f32 as f64;
        }
    }
}

/// Generalized advantage estimation over a flat sequence of transitions.
///
/// `next_values[t]` is the value of the state reached after step `t`: the
/// following state, the truncated state, or the rollout's bootstrap state.
/// It is ignored when `terminated[t]`. The recursion is cut wherever
/// `episode_end[t]` (termination or truncation).
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminated: &[bool],
    episode_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(
        values.len() == n && next_values.len() == n && terminated.len() == n && episode_end.len() == n,
        "gae inputs must have equal lengths"
    );
    let mut advantages = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let bootstrap = if terminated[t] { 0.0 } else { next_values[t] };
        let delta = rewards[t] + gamma * bootstrap - values[t];
        let carry = if episode_end[t] { 0.0 } else { next_adv };
        advantages[t] = delta + gamma * lambda * carry;
        next_adv = advantages[t];
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

/// Shifts and scales to zero mean and unit (population) std.
pub fn normalize_advantages(advantages: &mut [f64]) {
    let n = advantages.len() as f64;
    if n == 0.0 {
        return;
    }
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in advantages.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { *a - mean };
    }
}

/// Transitions prepared for an update. Observations are already normalized.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub pre_squash: Array2<f64>,
    pub log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossStats {
    pub total_loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Loss on the rows `idx` of `batch` and its gradient with respect to the
/// policy and value parameters.
///
/// `total = -mean(min(ρA, clip(ρ)A)) - c_ent·H + c_v·mean(½(V - R)²)`.
pub fn ppo_loss_and_grad(
    ac: &ActorCritic,
    batch: &Batch,
    idx: &[usize],
    config: &PPOConfig,
) -> (LossStats, Vec<f64>, Vec<f64>) {
    let b = idx.len();
    let bf = b as f64;
    let obs = batch.obs.select(ndarray::Axis(0), idx);
    let (mlp, log_std) = ac.policy.split_at(ac.policy_layout.param_count());
    let act_dim = log_std.len();
    let cache = ac.policy_layout.forward(mlp, obs.view());
    let mean = cache.output();
    let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();

    let mut grad_mean = Array2::<f64>::zeros((b, act_dim));
    let mut grad_log_std = vec![0.0; act_dim];
    let mut stats = LossStats::default();
    let eps = config.clip_ratio;
    for (row, &i) in idx.iter().enumerate() {
        let u = batch.pre_squash.row(i);
        let m = mean.row(row);
        let logp = gaussian_log_prob(
            u.as_slice().expect("contiguous"),
            m.as_slice().expect("contiguous"),
            log_std,
        );
        let log_ratio = logp - batch.log_probs[i];
        let ratio = log_ratio.exp();
        let adv = batch.advantages[i];
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
        let unclipped_obj = ratio * adv;
        let clipped_obj = clipped * adv;
        stats.policy_loss -= unclipped_obj.min(clipped_obj) / bf;
        if (ratio - 1.0).abs() > eps {
            stats.clip_fraction += 1.0 / bf;
        }
        stats.approx_kl += (ratio - 1.0 - log_ratio) / bf;
        // Written as a negation so a NaN advantage reaches the gradient.
        if !(unclipped_obj > clipped_obj) {
            // d(-ρA/B)/d logp
            let g = -ratio * adv / bf;
            for j in 0..act_dim {
                let diff = u[j] - m[j];
                grad_mean[[row, j]] += g * diff * inv_var[j];
                grad_log_std[j] += g * (diff * diff * inv_var[j] - 1.0);
            }
        }
    }
    stats.entropy = gaussian_entropy(log_std);
    for g in grad_log_std.iter_mut() {
        *g -= config.entropy_coef;
    }

    let mut policy_grad = vec![0.0; ac.policy.len()];
    let (mlp_grad, ls_grad) = policy_grad.split_at_mut(ac.policy_layout.param_count());
    ac.policy_layout.backward(mlp, &cache, grad_mean, mlp_grad);
    ls_grad.copy_from_slice(&grad_log_std);

    let vcache = ac.value_layout.forward(&ac.value, obs.view());
    let v = vcache.output();
    let mut grad_v = Array2::<f64>::zeros((b, 1));
    for (row, &i) in idx.iter().enumerate() {
        let diff = v[[row, 0]] - batch.returns[i];
        stats.value_loss += 0.5 * diff * diff / bf;
        grad_v[[row, 0]] = config.value_coef * diff / bf;
    }
    let mut value_grad = vec![0.0; ac.value.len()];
    ac.value_layout.backward(&ac.value, &vcache, grad_v, &mut value_grad);

    stats.total_loss =
        stats.policy_loss - config.entropy_coef * stats.entropy + config.value_coef * stats.value_loss;
    (stats, policy_grad, value_grad)
}

/// Adam state for the two networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoOptimizer {
    pub policy: Adam,
    pub value: Adam,
}

impl PpoOptimizer {
    pub fn new(ac: &ActorCritic, learning_rate: f64) -> Self {
        PpoOptimizer {
            policy: Adam::new(ac.policy.len(), learning_rate),
            value: Adam::new(ac.value.len(), learning_rate),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub loss: LossStats,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Runs `epochs` passes of shuffled minibatch steps. Advantages in `batch`
/// must already be normalized. On a non-finite gradient the parameters and
/// optimizer state are restored to their values before the call.
pub fn ppo_update<R: Rng + ?Sized>(
    ac: &mut ActorCritic,
    optimizer: &mut PpoOptimizer,
    batch: &Batch,
    config: &PPOConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    if batch.is_empty() {
        return Err(Error::Usage("ppo_update on an empty batch".into()));
    }
    let snapshot = (ac.policy.clone(), ac.value.clone(), optimizer.clone());
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mb = config.minibatch_size.min(batch.len());
    let mut acc = UpdateStats::default();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(mb) {
            let (stats, mut pg, mut vg) = ppo_loss_and_grad(ac, batch, chunk, config);
            let np = pg.len();
            pg.append(&mut vg);
            let norm = clip_grad_norm(&mut pg, config.max_grad_norm);
            if !norm.is_finite() {
                ac.policy = snapshot.0;
                ac.value = snapshot.1;
                *optimizer = snapshot.2;
                return Err(Error::Numerical(format!(
                    "non-finite gradient norm {norm} in PPO update; update aborted"
                )));
            }
            optimizer.policy.step(&mut ac.policy, &pg[..np]);
            optimizer.value.step(&mut ac.value, &pg[np..]);
            acc.minibatches += 1;
            acc.grad_norm += norm;
            acc.loss.total_loss += stats.total_loss;
            acc.loss.policy_loss += stats.policy_loss;
            acc.loss.value_loss += stats.value_loss;
            acc.loss.entropy += stats.entropy;
            acc.loss.clip_fraction += stats.clip_fraction;
            acc.loss.approx_kl += stats.approx_kl;
        }
    }
    let k = acc.minibatches as f64;
    acc.grad_norm /= k;
    acc.loss.total_loss /= k;
    acc.loss.policy_loss /= k;
    acc.loss.value_loss /= k;
    acc.loss.entropy /= k;
    acc.loss.clip_fraction /= k;
    acc.loss.approx_kl /= k;
    Ok(acc)
}
