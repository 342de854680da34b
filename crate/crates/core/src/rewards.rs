//! Reward algebra: time-optimal bonus, dense angle shaping, the hand
//! engineering terms, one-sided clipping, and linear mixtures.

use serde::{Deserialize, Serialize};

use crate::env::{StepEvents, N_JOINTS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardMode {
    /// Sparse time-optimal bonus only.
    #[serde(rename = "TO")]
    TimeOptimal,
    /// Dense angle progress plus hand terms.
    #[serde(rename = "DE")]
    Dense,
    /// `lambda_de * DE + lambda_to * TO`.
    #[serde(rename = "MIX")]
    Mix,
    /// Clipped angle progress plus hand terms.
    #[serde(rename = "CL")]
    Clipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda_s: f64,
    pub lambda_theta: f64,
    pub lambda_x: f64,
    pub lambda_q: f64,
    #[serde(rename = "lambda_DE")]
    pub lambda_de: f64,
    #[serde(rename = "lambda_TO")]
    pub lambda_to: f64,
    /// Per-step cap on rewarded progress (rad). In clipped mode it is derived
    /// from the episode's target speed when left unset.
    pub theta_clip: Option<f64>,
    pub mode: RewardMode,
    /// Goal threshold used for the in-goal indicator (rad).
    pub success_threshold: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_s: 0.03,
            lambda_theta: 1.0,
            lambda_x: 8.0,
            lambda_q: 1.0 / 24.0,
            lambda_de: 1.0,
            lambda_to: 3.0,
            theta_clip: None,
            mode: RewardMode::Mix,
            success_threshold: 0.4,
        }
    }
}

impl RewardConfig {
    pub fn mix(lambda_de: f64, lambda_to: f64) -> Self {
        RewardConfig {
            lambda_de,
            lambda_to,
            ..RewardConfig::default()
        }
    }

    pub fn clipped(theta_clip: Option<f64>) -> Self {
        RewardConfig {
            lambda_de: 1.0,
            lambda_to: 0.0,
            theta_clip,
            mode: RewardMode::Clipped,
            ..RewardConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_s", self.lambda_s),
            ("lambda_theta", self.lambda_theta),
            ("lambda_x", self.lambda_x),
            ("lambda_q", self.lambda_q),
            ("lambda_DE", self.lambda_de),
            ("lambda_TO", self.lambda_to),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "reward.{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.success_threshold > 0.0) {
            return Err(Error::Config(
                "reward.success_threshold must be positive".into(),
            ));
        }
        if let Some(c) = self.theta_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!(
                    "reward.theta_clip must be positive, got {c}"
                )));
            }
        }
        if self.mode == RewardMode::Clipped && self.lambda_to != 0.0 {
            return Err(Error::Config(
                "reward.lambda_TO must be 0 in CL mode: the bonus would overshadow the clipping"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Copy with the clip value filled in for an episode's target speed.
    pub fn for_episode(&self, omega_d: f64, f_nn: f64) -> RewardConfig {
        let mut out = self.clone();
        if out.mode == RewardMode::Clipped && out.theta_clip.is_none() {
            out.theta_clip = Some(theta_clip_from_speed(omega_d, f_nn));
        }
        out
    }
}

/// Quantities the rewards are computed from, all taken from the true
/// simulator state.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardInputs {
    pub theta_prev: f64,
    pub theta_t: f64,
    pub delta_x_prev: f64,
    pub delta_x_t: f64,
    /// `q_t - q_nominal`.
    pub q_offset: [f64; N_JOINTS],
    pub in_goal: bool,
}

impl RewardInputs {
    pub fn new(
        theta_prev: f64,
        theta_t: f64,
        delta_x_prev: f64,
        delta_x_t: f64,
        q_offset: [f64; N_JOINTS],
        success_threshold: f64,
    ) -> Self {
        RewardInputs {
            theta_prev,
            theta_t,
            delta_x_prev,
            delta_x_t,
            q_offset,
            in_goal: theta_t < success_threshold,
        }
    }

    pub fn from_events(events: &StepEvents) -> Self {
        RewardInputs {
            theta_prev: events.theta_prev,
            theta_t: events.theta_t,
            delta_x_prev: events.delta_x_prev,
            delta_x_t: events.delta_x_t,
            q_offset: events.q_penalty_input,
            in_goal: events.in_goal,
        }
    }
}

/// `lambda_s` while the object is inside the goal threshold, else 0.
pub fn reward_to(inputs: &RewardInputs, config: &RewardConfig) -> f64 {
    if inputs.in_goal {
        config.lambda_s
    } else {
        0.0
    }
}

/// Position-drift progress minus the quartic joint penalty.
pub fn reward_he(inputs: &RewardInputs, config: &RewardConfig) -> f64 {
    let penalty: f64 = inputs.q_offset.iter().map(|d| d.powi(4)).sum();
    config.lambda_x * (inputs.delta_x_prev - inputs.delta_x_t) - config.lambda_q * penalty
}

pub fn reward_de(inputs: &RewardInputs, config: &RewardConfig) -> f64 {
    config.lambda_theta * (inputs.theta_prev - inputs.theta_t) + reward_he(inputs, config)
}

pub fn reward_mix(inputs: &RewardInputs, config: &RewardConfig) -> f64 {
    // Skip the dense term entirely in the sparse configuration.
    let dense = if config.lambda_de == 0.0 {
        0.0
    } else {
        config.lambda_de * reward_de(inputs, config)
    };
    dense + config.lambda_to * reward_to(inputs, config)
}

/// Only the positive side is capped: moving away is penalized in full.
pub fn clipped_angle_term(inputs: &RewardInputs, theta_clip: f64, lambda_theta: f64) -> f64 {
    lambda_theta * (inputs.theta_prev - inputs.theta_t).min(theta_clip)
}

pub fn reward_cl(inputs: &RewardInputs, config: &RewardConfig) -> Result<f64> {
    let clip = config
        .theta_clip
        .ok_or_else(|| Error::Config("CL reward needs theta_clip".into()))?;
    Ok(clipped_angle_term(inputs, clip, config.lambda_theta) + reward_he(inputs, config))
}

/// Per-step rewarded rotation at exactly the target speed.
pub fn theta_clip_from_speed(omega_d: f64, f_nn: f64) -> f64 {
    omega_d / f_nn
}

/// Dispatches on `config.mode`.
pub fn reward(inputs: &RewardInputs, config: &RewardConfig) -> Result<f64> {
    match config.mode {
        RewardMode::TimeOptimal => Ok(config.lambda_to * reward_to(inputs, config)),
        RewardMode::Dense => Ok(config.lambda_de * reward_de(inputs, config)),
        RewardMode::Mix => Ok(reward_mix(inputs, config)),
        RewardMode::Clipped => reward_cl(inputs, config),
    }
}
