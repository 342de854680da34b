//! Vectorized rollout collection and the training loop for both schemes.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Scheme};
use crate::env::{Action, EnvState, EpisodeMode, SurrogateEnv, TaskParams};
use crate::error::{Error, Result};
use crate::estimator::{ecrl_step, Estimator, EstimatorBuffer, EstimatorCarry, EstimatorSample, EstimatorTrainer};
use crate::ppo::{build_xi, gae, normalize_advantages, ppo_update, ActorCritic, Batch, ConditioningMode, PpoOptimizer};
use crate::rewards::{reward, RewardConfig, RewardInputs};
use crate::so3::Pose;

/// Stream ids keep the per-purpose generators independent.
const STREAM_ENV: u64 = 1 << 32;
const STREAM_POLICY: u64 = 2 << 32;
const STREAM_UPDATE: u64 = 3 << 32;
const STREAM_INIT: u64 = 4 << 32;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Writes the policy input for the current state into `out` (cleared
/// first). `pose` is the pose the policy is allowed to see.
pub fn write_observation(
    env: &SurrogateEnv,
    pose: &Pose,
    conditioning: ConditioningMode,
    out: &mut Vec<f64>,
) -> Result<()> {
    let s = env.state()?;
    let f_nn = env.config().f_nn;
    let xi = build_xi(conditioning, s.omega_d, s.target_time, s.segment_time(f_nn));
    let obs = env.observation_window(pose, xi)?;
    out.clear();
    obs.write_into(out);
    Ok(())
}

/// The pose the policy observes under `scheme`.
pub fn visible_pose(scheme: Scheme, state: &EnvState, carry: Option<&EstimatorCarry>) -> Pose {
    match (scheme, carry) {
        (Scheme::Ecrl, Some(c)) => c.pose,
        (Scheme::Ecrl, None) => panic!("ecrl scheme without an estimator carry"),
        (Scheme::Oracle, _) => state.object,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub update: usize,
    pub env_steps: u64,
    pub success_rate: f64,
    pub mean_t: f64,
    pub mean_reward: f64,
    pub clip_fraction: f64,
    pub kl: f64,
}

pub const CURVE_COLUMNS: [&str; 7] = [
    "update",
    "env_steps",
    "success_rate",
    "mean_T",
    "mean_reward",
    "clip_fraction",
    "kl",
];

struct Worker {
    env: SurrogateEnv,
    env_rng: ChaCha8Rng,
    carry: Option<EstimatorCarry>,
    reward: RewardConfig,
    first_goal_open: bool,
    /// Running joint targets for residual actions; empty otherwise.
    targets: Vec<f64>,
}

/// Outcome of the first goal of a training episode.
#[derive(Debug, Clone, Copy, PartialEq)]
struct FirstGoal {
    success: bool,
    time: Option<f64>,
}

fn reset_worker(config: &ExperimentConfig, estimator_hidden: Option<usize>, worker: &mut Worker) -> Result<()> {
    let omega_d = config.omega_d_law.sample(&mut worker.env_rng);
    let h_exp = config.h_exp_law.sample(&mut worker.env_rng);
    let task = TaskParams {
        horizon_mode: config.mode,
        omega_d,
        h_exp,
        episode_mode: EpisodeMode::Training,
    };
    let state = worker.env.reset(task, &mut worker.env_rng)?;
    worker.carry = estimator_hidden.map(|h| EstimatorCarry::seeded(h, state.object));
    worker.reward = config.reward.for_episode(omega_d, config.env.f_nn);
    worker.first_goal_open = true;
    worker.targets.fill(0.0);
    Ok(())
}

pub struct Trainer {
    config: ExperimentConfig,
    agent: ActorCritic,
    optimizer: PpoOptimizer,
    estimator: Option<(Estimator, EstimatorTrainer)>,
    workers: Vec<Worker>,
    policy_rngs: Vec<ChaCha8Rng>,
    update_rng: ChaCha8Rng,
    update: usize,
    env_steps: u64,
    outcomes: VecDeque<FirstGoal>,
}

/// Result of a completed training run. Parameters are rounded to
/// checkpoint precision.
pub struct TrainOutcome {
    pub agent: ActorCritic,
    pub estimator: Option<Estimator>,
    pub curves: Vec<CurvePoint>,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init_rng = stream_rng(seed, STREAM_INIT);
        let obs_dim = config.observation_len();
        let agent = ActorCritic::new(obs_dim, &config.ppo, &mut init_rng);
        let optimizer = PpoOptimizer::new(&agent, config.ppo.learning_rate);
        let estimator = match config.scheme {
            Scheme::Oracle => None,
            Scheme::Ecrl => {
                let est = Estimator::new(Estimator::input_dim(&config.env), config.estimator.clone(), &mut init_rng);
                let trainer = EstimatorTrainer::new(&est);
                Some((est, trainer))
            }
        };
        let mut trainer = Trainer {
            config: config.clone(),
            agent,
            optimizer,
            estimator,
            workers: Vec::new(),
            policy_rngs: (0..config.ppo.n_envs)
                .map(|i| stream_rng(seed, STREAM_POLICY + i as u64))
                .collect(),
            update_rng: stream_rng(seed, STREAM_UPDATE),
            update: 0,
            env_steps: 0,
            outcomes: VecDeque::new(),
        };
        for i in 0..config.ppo.n_envs {
            let env = SurrogateEnv::new(config.env.clone())?;
            let mut worker = Worker {
                env,
                env_rng: stream_rng(seed, STREAM_ENV + i as u64),
                carry: None,
                reward: config.reward.clone(),
                first_goal_open: true,
                targets: trainer.agent.initial_targets(),
            };
            reset_worker(config, trainer.estimator_hidden(), &mut worker)?;
            trainer.workers.push(worker);
        }
        Ok(trainer)
    }

    pub fn agent(&self) -> &ActorCritic {
        &self.agent
    }

    pub fn estimator(&self) -> Option<&Estimator> {
        self.estimator.as_ref().map(|(e, _)| e)
    }

    fn estimator_hidden(&self) -> Option<usize> {
        self.estimator.as_ref().map(|(e, _)| e.config.hidden)
    }

    pub fn updates_done(&self) -> usize {
        self.update
    }

    fn observe(&self, worker: &Worker, out: &mut Vec<f64>) -> Result<()> {
        let state = worker.env.state()?;
        let pose = visible_pose(self.config.scheme, state, worker.carry.as_ref());
        write_observation(&worker.env, &pose, self.config.conditioning, out)
    }

    fn observe_all(&self) -> Result<Array2<f64>> {
        let n = self.workers.len();
        let dim = self.agent.obs_dim();
        let mut raw = Array2::<f64>::zeros((n, dim));
        let mut row = Vec::with_capacity(dim);
        for (i, w) in self.workers.iter().enumerate() {
            self.observe(w, &mut row)?;
            raw.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
        Ok(raw)
    }

    /// Collects one rollout, applies the PPO update and, in the ecrl
    /// scheme, the estimator update. Returns the new curve point.
    pub fn step_update(&mut self) -> Result<CurvePoint> {
        let n_envs = self.workers.len();
        let horizon = self.config.ppo.steps_per_rollout;
        let dim = self.agent.obs_dim();
        let act_dim = self.agent.action_dim();
        let total = n_envs * horizon;

        // Row index is t * n_envs + e.
        let mut obs = Array2::<f64>::zeros((total, dim));
        let mut raw_rows = Array2::<f64>::zeros((total, dim));
        let mut pre_squash = Array2::<f64>::zeros((total, act_dim));
        let mut log_probs = vec![0.0; total];
        let mut values = vec![0.0; total];
        let mut rewards = vec![0.0; total];
        let mut terminated = vec![false; total];
        let mut episode_end = vec![false; total];
        // Raw observations of truncated states, for bootstrapping.
        let mut truncated_obs: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut est_buffer = EstimatorBuffer {
            sequences: vec![Vec::new(); if self.estimator.is_some() { n_envs } else { 0 }],
        };
        let mut finished_sequences = Vec::new();
        let mut row = Vec::with_capacity(dim);

        for t in 0..horizon {
            let raw = self.observe_all()?;
            let mut normed = raw.clone();
            self.agent.obs_norm.normalize(&mut normed);
            let out = self.agent.act(normed.view(), false, &mut self.policy_rngs)?;
            let base = t * n_envs;
            for e in 0..n_envs {
                obs.row_mut(base + e).assign(&normed.row(e));
                raw_rows.row_mut(base + e).assign(&raw.row(e));
                pre_squash.row_mut(base + e).assign(&out.pre_squash.row(e));
                log_probs[base + e] = out.log_probs[e];
                values[base + e] = out.values[e];
            }

            let mut est_inputs = Vec::new();
            let mut previous_truth = Vec::with_capacity(n_envs);
            let mut events_all = Vec::with_capacity(n_envs);
            for e in 0..n_envs {
                let w = &mut self.workers[e];
                let u = out.pre_squash.row(e);
                let squashed = self.agent.env_action(u.as_slice().expect("contiguous"), &mut w.targets);
                let action = Action::from_slice(&squashed);
                let before = w.env.state()?.object;
                let events = w.env.step(&action, &mut w.env_rng)?;
                let r = reward(&RewardInputs::from_events(&events), &w.reward)?;
                rewards[base + e] = r;
                terminated[base + e] = events.terminated();
                episode_end[base + e] = events.done();
                if let Some(carry) = &w.carry {
                    let z = w.env.proprio()?;
                    est_inputs.push(Estimator::input_for(&z, &carry.pose, &self.config.env, w.env.basis()));
                }
                previous_truth.push(before);
                events_all.push(events);
            }

            if let Some((est, _)) = &self.estimator {
                let mut carries: Vec<EstimatorCarry> = self
                    .workers
                    .iter()
                    .map(|w| w.carry.clone().expect("ecrl carry"))
                    .collect();
                let inputs = Array2::from_shape_fn((n_envs, est_inputs[0].len()), |(i, j)| est_inputs[i][j]);
                est.step_batch(&mut carries, inputs.view())?;
                for (e, (carry, input)) in carries.into_iter().zip(est_inputs).enumerate() {
                    let w = &mut self.workers[e];
                    let prev_carry = w.carry.replace(carry).expect("ecrl carry");
                    est_buffer.sequences[e].push(EstimatorSample {
                        input,
                        hidden_before: prev_carry.hidden,
                        previous_truth: previous_truth[e],
                        truth: w.env.state()?.object,
                    });
                }
            }

            for (e, events) in events_all.iter().enumerate() {
                self.record_first_goal(e, events)?;
                if events.truncated && !events.terminated() {
                    self.observe(&self.workers[e], &mut row)?;
                    truncated_obs.push((base + e, row.clone()));
                }
                if events.done() {
                    if let Some(seq) = est_buffer.sequences.get_mut(e) {
                        finished_sequences.push(std::mem::take(seq));
                    }
                    let hidden = self.estimator_hidden();
                    reset_worker(&self.config, hidden, &mut self.workers[e])?;
                }
            }
        }

        // Bootstrap values.
        let last_raw = self.observe_all()?;
        let mut last = last_raw;
        self.agent.obs_norm.normalize(&mut last);
        let last_values = self.agent.value_forward(last.view())?;
        let mut next_values = vec![0.0; total];
        for t in 0..horizon {
            for e in 0..n_envs {
                let i = t * n_envs + e;
                next_values[i] = if t + 1 < horizon {
                    values[i + n_envs]
                } else {
                    last_values[e]
                };
            }
        }
        if !truncated_obs.is_empty() {
            let mut trunc = Array2::from_shape_fn((truncated_obs.len(), dim), |(i, j)| truncated_obs[i].1[j]);
            self.agent.obs_norm.normalize(&mut trunc);
            let v = self.agent.value_forward(trunc.view())?;
            for (k, (i, _)) in truncated_obs.iter().enumerate() {
                next_values[*i] = v[k];
            }
        }

        // GAE per environment, in time order.
        let mut advantages = vec![0.0; total];
        let mut returns = vec![0.0; total];
        for e in 0..n_envs {
            let idx: Vec<usize> = (0..horizon).map(|t| t * n_envs + e).collect();
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let pickb = |v: &[bool]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let (adv, ret) = gae(
                &pick(&rewards),
                &pick(&values),
                &pick(&next_values),
                &pickb(&terminated),
                &pickb(&episode_end),
                self.config.ppo.gamma,
                self.config.ppo.gae_lambda,
            );
            for (k, &i) in idx.iter().enumerate() {
                advantages[i] = adv[k];
                returns[i] = ret[k];
            }
        }
        normalize_advantages(&mut advantages);

        self.agent.obs_norm.update(raw_rows.view());
        let batch = Batch {
            obs,
            pre_squash,
            log_probs,
            advantages,
            returns,
        };
        let stats = ppo_update(
            &mut self.agent,
            &mut self.optimizer,
            &batch,
            &self.config.ppo,
            &mut self.update_rng,
        )?;

        if let Some((est, trainer)) = &mut self.estimator {
            finished_sequences.extend(est_buffer.sequences.into_iter().filter(|s| !s.is_empty()));
            let buffer = EstimatorBuffer {
                sequences: finished_sequences,
            };
            ecrl_step(est, trainer, &buffer, &mut self.update_rng)?;
        }

        self.update += 1;
        self.env_steps += total as u64;
        if !self.agent.is_finite() || self.estimator().is_some_and(|e| !e.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite parameters after update {}",
                self.update
            )));
        }
        let (success_rate, mean_t) = self.window_stats();
        Ok(CurvePoint {
            update: self.update,
            env_steps: self.env_steps,
            success_rate,
            mean_t,
            mean_reward: rewards.iter().sum::<f64>() / total as f64,
            clip_fraction: stats.loss.clip_fraction,
            kl: stats.loss.approx_kl,
        })
    }

    fn record_first_goal(&mut self, e: usize, events: &crate::env::StepEvents) -> Result<()> {
        let w = &mut self.workers[e];
        if !w.first_goal_open {
            return Ok(());
        }
        let f_nn = self.config.env.f_nn;
        let outcome = if events.goal_resampled {
            let state = w.env.state()?;
            Some(FirstGoal {
                success: true,
                time: state.first_reach_step.map(|s| s as f64 / f_nn),
            })
        } else if events.done() {
            Some(FirstGoal {
                success: false,
                time: None,
            })
        } else {
            None
        };
        if let Some(o) = outcome {
            w.first_goal_open = false;
            self.outcomes.push_back(o);
            while self.outcomes.len() > self.config.curve_window {
                self.outcomes.pop_front();
            }
        }
        Ok(())
    }

    fn window_stats(&self) -> (f64, f64) {
        if self.outcomes.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let n = self.outcomes.len() as f64;
        let successes = self.outcomes.iter().filter(|o| o.success).count() as f64;
        let times: Vec<f64> = self.outcomes.iter().filter_map(|o| o.time).collect();
        let mean_t = if times.is_empty() {
            f64::NAN
        } else {
            times.iter().sum::<f64>() / times.len() as f64
        };
        (successes / n, mean_t)
    }

    /// Runs all configured updates. `on_point` sees each curve point as it
    /// is produced. On failure the trainer keeps its last parameters so the
    /// caller can write a diagnostic checkpoint.
    pub fn run(&mut self, mut on_point: impl FnMut(&CurvePoint)) -> Result<Vec<CurvePoint>> {
        let mut curves = Vec::with_capacity(self.config.updates);
        while self.update < self.config.updates {
            let point = self.step_update()?;
            on_point(&point);
            curves.push(point);
        }
        Ok(curves)
    }

    pub fn into_outcome(self, curves: Vec<CurvePoint>) -> TrainOutcome {
        let mut agent = self.agent;
        agent.round_to_f32();
        let estimator = self.estimator.map(|(mut e, _)| {
            e.round_to_f32();
            e
        });
        TrainOutcome {
            agent,
            estimator,
            curves,
        }
    }
}

/// Trains one seed of an experiment to completion.
pub fn train(config: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, seed)?;
    let curves = trainer.run(|_| {})?;
    Ok(trainer.into_outcome(curves))
}
