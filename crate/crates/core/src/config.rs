//! Experiment configuration: everything needed to train and evaluate one
//! arm, serialized as JSON.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnvConfig, HorizonMode, OMEGA_D_MAX, OMEGA_D_MIN};
use crate::error::{Error, Result};
use crate::estimator::EstimatorConfig;
use crate::evaluation::Grouping;
use crate::ppo::{ConditioningMode, PPOConfig};
use crate::rewards::{RewardConfig, RewardMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// The policy observes the true object pose.
    Oracle,
    /// The policy observes the jointly trained estimator's output.
    Ecrl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpeedLaw {
    Fixed { omega_d: f64 },
    Uniform { low: f64, high: f64 },
}

impl SpeedLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            SpeedLaw::Fixed { omega_d } => omega_d,
            SpeedLaw::Uniform { low, high } => {
                if high > low {
                    rng.random_range(low..high)
                } else {
                    low
                }
            }
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        let (lo, hi) = match *self {
            SpeedLaw::Fixed { omega_d } => (omega_d, omega_d),
            SpeedLaw::Uniform { low, high } => (low, high),
        };
        if !(lo <= hi && lo >= OMEGA_D_MIN && hi <= OMEGA_D_MAX) {
            return Err(Error::Config(format!(
                "{field}: target speeds must satisfy {OMEGA_D_MIN} <= low <= high <= {OMEGA_D_MAX}, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HExpLaw {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
}

impl HExpLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            HExpLaw::Constant { value } => value,
            HExpLaw::Uniform { low, high } => {
                if high > low {
                    rng.random_range(low..high)
                } else {
                    low
                }
            }
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        let (lo, hi) = match *self {
            HExpLaw::Constant { value } => (value, value),
            HExpLaw::Uniform { low, high } => (low, high),
        };
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "{field}: slack must satisfy 0 <= low <= high, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// How a trained policy is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub episodes: usize,
    pub seed: u64,
    pub omega_d_law: SpeedLaw,
    pub h_exp_law: HExpLaw,
    pub min_theta_0: f64,
    pub drop_failures: bool,
    pub grouping: Grouping,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            episodes: 300,
            seed: 10_000,
            omega_d_law: SpeedLaw::Uniform {
                low: OMEGA_D_MIN,
                high: OMEGA_D_MAX,
            },
            h_exp_law: HExpLaw::Constant { value: 0.0 },
            min_theta_0: 0.0,
            drop_failures: false,
            grouping: Grouping::None,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("eval.episodes must be at least 1".into()));
        }
        self.omega_d_law.validate("eval.omega_d_law")?;
        self.h_exp_law.validate("eval.h_exp_law")?;
        if !(self.min_theta_0 >= 0.0) {
            return Err(Error::Config("eval.min_theta_0 must be non-negative".into()));
        }
        Ok(())
    }
}

fn default_curve_window() -> usize {
    200
}

/// One experiment arm. Seeds are listed here; each seed trains separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub ppo: PPOConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    pub conditioning: ConditioningMode,
    pub scheme: Scheme,
    pub mode: HorizonMode,
    pub omega_d_law: SpeedLaw,
    pub h_exp_law: HExpLaw,
    pub updates: usize,
    /// Number of most recent first-goal outcomes averaged per curve point.
    #[serde(default = "default_curve_window")]
    pub curve_window: usize,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub eval: EvalSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config("name: must be a non-empty path component".into()));
        }
        self.env
            .validate()
            .map_err(|e| Error::Config(format!("env: {e}")))?;
        self.reward.validate()?;
        self.ppo.validate()?;
        self.estimator.validate()?;
        self.omega_d_law.validate("omega_d_law")?;
        self.h_exp_law.validate("h_exp_law")?;
        self.eval.validate()?;
        if self.reward.mode == RewardMode::Clipped && self.mode != HorizonMode::SpeedHorizon {
            return Err(Error::Config(
                "reward.mode: CL reward requires mode = speed_horizon".into(),
            ));
        }
        if self.updates == 0 {
            return Err(Error::Config("updates: must be at least 1".into()));
        }
        if self.curve_window == 0 {
            return Err(Error::Config("curve_window: must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (object keys sorted).
    pub fn config_hash(&self) -> String {
        value_hash(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn observation_len(&self) -> usize {
        self.env.observation_len(self.conditioning.xi_len())
    }
}

/// SHA-256 (hex) of [`canonical_json`].
pub fn value_hash(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(canonical_json(value).as_bytes()))
}

/// Compact JSON with object keys in sorted order.
pub fn canonical_json(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<_> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| {
                    format!(
                        "{}:{}",
                        serde_json::Value::String(k.clone()),
                        canonical_json(&map[k])
                    )
                })
                .collect();
            format!("{{{}}}", body.join(","))
        }
        serde_json::Value::Array(items) => {
            let body: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", body.join(","))
        }
        other => other.to_string(),
    }
}
