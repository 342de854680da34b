//! Evaluation episodes, filtering, grouped statistics and rank correlation.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{HExpLaw, Scheme, SpeedLaw};
use crate::env::{Action, EnvConfig, EpisodeMode, HorizonMode, SurrogateEnv, TaskParams};
use crate::error::{Error, Result};
use crate::estimator::{Estimator, EstimatorCarry};
use crate::ppo::{ActorCritic, ConditioningMode};
use crate::train::{stream_rng, visible_pose, write_observation};

/// Episodes advanced together so the policy runs on a batch.
const LANES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub index: usize,
    pub seed: u64,
    pub success: bool,
    pub dropped: bool,
    pub theta_0: f64,
    /// Time of the first step with θ below the goal threshold.
    pub t: Option<f64>,
    /// `theta_0 / t`; present iff the episode succeeded with `t > 0`.
    pub omega: Option<f64>,
    pub omega_d: f64,
    pub t_d: f64,
    pub h_exp: f64,
}

/// Everything needed to run a trained policy.
pub struct EvalPolicy<'a> {
    pub agent: &'a ActorCritic,
    pub estimator: Option<&'a Estimator>,
    pub trained_scheme: Scheme,
    pub conditioning: ConditioningMode,
    pub env: &'a EnvConfig,
    pub mode: HorizonMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRequest {
    pub scheme: Scheme,
    pub episodes: usize,
    pub omega_d_law: SpeedLaw,
    pub h_exp_law: HExpLaw,
    pub seed: u64,
}

struct Lane {
    env: SurrogateEnv,
    rng: rand_chacha::ChaCha8Rng,
    carry: Option<EstimatorCarry>,
    result: EpisodeResult,
    finished: bool,
    targets: Vec<f64>,
}

/// Runs `episodes` independent single-goal episodes with deterministic
/// actions. Episode `i` draws everything from stream `i` of `seed`, so the
/// results do not depend on batching.
pub fn run_eval(policy: &EvalPolicy, request: &EvalRequest) -> Result<Vec<EpisodeResult>> {
    if request.scheme != policy.trained_scheme {
        return Err(Error::Compatibility(format!(
            "policy trained with {:?} scheme cannot be evaluated as {:?}",
            policy.trained_scheme, request.scheme
        )));
    }
    let expected = policy.env.observation_len(policy.conditioning.xi_len());
    if policy.agent.obs_dim() != expected {
        return Err(Error::Config(format!(
            "checkpoint expects {} observation features, config produces {expected}",
            policy.agent.obs_dim()
        )));
    }
    let estimator = match (request.scheme, policy.estimator) {
        (Scheme::Ecrl, Some(e)) => Some(e),
        (Scheme::Ecrl, None) => {
            return Err(Error::Compatibility(
                "ecrl evaluation needs an estimator checkpoint".into(),
            ))
        }
        (Scheme::Oracle, _) => None,
    };
    let f_nn = policy.env.f_nn;
    let mut results = Vec::with_capacity(request.episodes);
    let mut start = 0;
    while start < request.episodes {
        let end = (start + LANES).min(request.episodes);
        let mut lanes = Vec::with_capacity(end - start);
        for index in start..end {
            let mut rng = stream_rng(request.seed, index as u64);
            let omega_d = request.omega_d_law.sample(&mut rng);
            let h_exp = request.h_exp_law.sample(&mut rng);
            let mut env = SurrogateEnv::new(policy.env.clone())?;
            let task = TaskParams {
                horizon_mode: policy.mode,
                omega_d,
                h_exp,
                episode_mode: EpisodeMode::Evaluation,
            };
            let state = env.reset(task, &mut rng)?;
            let theta_0 = state.theta_0;
            let reached_at_start = state.first_reach_step.is_some();
            let carry = estimator.map(|e| EstimatorCarry::seeded(e.config.hidden, state.object));
            let t_d = state.target_time;
            lanes.push(Lane {
                env,
                rng,
                carry,
                result: EpisodeResult {
                    index,
                    seed: request.seed,
                    success: reached_at_start,
                    dropped: false,
                    theta_0,
                    t: reached_at_start.then_some(0.0),
                    omega: None,
                    omega_d,
                    t_d,
                    h_exp,
                },
                finished: reached_at_start,
                targets: policy.agent.initial_targets(),
            });
        }
        run_lanes(policy, estimator, request.scheme, &mut lanes, f_nn)?;
        results.extend(lanes.into_iter().map(|l| l.result));
        start = end;
    }
    debug_assert!(results.iter().enumerate().all(|(i, r)| r.index == i));
    Ok(results)
}

fn run_lanes(
    policy: &EvalPolicy,
    estimator: Option<&Estimator>,
    scheme: Scheme,
    lanes: &mut [Lane],
    f_nn: f64,
) -> Result<()> {
    let dim = policy.agent.obs_dim();
    let mut row = Vec::with_capacity(dim);
    let mut no_rngs: [rand_chacha::ChaCha8Rng; 0] = [];
    loop {
        let active: Vec<usize> = (0..lanes.len()).filter(|&i| !lanes[i].finished).collect();
        if active.is_empty() {
            return Ok(());
        }
        let mut obs = Array2::<f64>::zeros((active.len(), dim));
        for (r, &i) in active.iter().enumerate() {
            let lane = &lanes[i];
            let state = lane.env.state()?;
            let pose = visible_pose(scheme, state, lane.carry.as_ref());
            write_observation(&lane.env, &pose, policy.conditioning, &mut row)?;
            policy.agent.obs_norm.normalize_row(&mut row);
            obs.row_mut(r).assign(&ndarray::ArrayView1::from(&row));
        }
        let out = policy.agent.act(obs.view(), true, &mut no_rngs)?;
        let mut est_inputs = Vec::new();
        for (r, &i) in active.iter().enumerate() {
            let lane = &mut lanes[i];
            let u = out.pre_squash.row(r);
            let squashed = policy.agent.env_action(u.as_slice().expect("contiguous"), &mut lane.targets);
            let events = lane.env.step(&Action::from_slice(&squashed), &mut lane.rng)?;
            let state = lane.env.state()?;
            if events.dropped {
                lane.result.dropped = true;
                lane.finished = true;
            } else if events.in_goal {
                let t = state.t as f64 / f_nn;
                lane.result.success = true;
                lane.result.t = Some(t);
                lane.result.omega = (t > 0.0).then(|| lane.result.theta_0 / t);
                lane.finished = true;
            } else if events.done() {
                lane.finished = true;
            }
            if let (Some(_), Some(carry)) = (estimator, &lane.carry) {
                let z = lane.env.proprio()?;
                est_inputs.push(Estimator::input_for(&z, &carry.pose, policy.env, lane.env.basis()));
            }
        }
        if let Some(est) = estimator {
            let mut carries: Vec<EstimatorCarry> = active
                .iter()
                .map(|&i| lanes[i].carry.clone().expect("ecrl carry"))
                .collect();
            let inputs = Array2::from_shape_fn((active.len(), est_inputs[0].len()), |(i, j)| est_inputs[i][j]);
            est.step_batch(&mut carries, inputs.view())?;
            for (&i, carry) in active.iter().zip(carries) {
                lanes[i].carry = Some(carry);
            }
        }
    }
}

/// Outcome of [`filter_episodes`].
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    pub kept: Vec<EpisodeResult>,
    pub discarded_fraction: f64,
}

/// Keeps episodes with `theta_0 >= min_theta_0` and, if `drop_failures`,
/// only successful ones.
pub fn filter_episodes(results: &[EpisodeResult], min_theta_0: f64, drop_failures: bool) -> Filtered {
    let kept: Vec<EpisodeResult> = results
        .iter()
        .filter(|r| r.theta_0 >= min_theta_0 && (!drop_failures || r.success))
        .cloned()
        .collect();
    let discarded_fraction = if results.is_empty() {
        0.0
    } else {
        1.0 - kept.len() as f64 / results.len() as f64
    };
    Filtered {
        kept,
        discarded_fraction,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Integer buckets of the target time, rounding half to even.
    ByRoundedTd,
    /// Buckets of width [`OMEGA_BUCKET_WIDTH`] in target speed.
    ByOmegaDBucket,
    None,
}

pub const OMEGA_BUCKET_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
}

/// Population statistics with linearly interpolated percentiles.
pub fn describe(values: &[f64]) -> Option<Stats> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(Stats {
        count: values.len(),
        mean,
        std: var.sqrt(),
        median: percentile(&sorted, 50.0),
        p5: percentile(&sorted, 5.0),
        p95: percentile(&sorted, 95.0),
    })
}

/// Linear interpolation between closest ranks on sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub key: f64,
    pub t: Option<Stats>,
    pub omega: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Success rate over all episodes before filtering.
    pub success_rate_all: f64,
    pub successes_all: usize,
    pub episodes_all: usize,
    /// Success rate over the retained episodes.
    pub success_rate: f64,
    pub episodes_retained: usize,
    pub grouping: Grouping,
    pub groups: Vec<GroupStats>,
    pub overall_t: Option<Stats>,
    pub overall_omega: Option<Stats>,
    /// Spearman correlation of achieved T against T_d over retained
    /// episodes that reached the goal.
    pub spearman_t_td: Option<f64>,
    pub warnings: Vec<String>,
}

pub fn group_key(result: &EpisodeResult, grouping: Grouping) -> f64 {
    match grouping {
        Grouping::ByRoundedTd => result.t_d.round_ties_even(),
        Grouping::ByOmegaDBucket => (result.omega_d / OMEGA_BUCKET_WIDTH).floor() * OMEGA_BUCKET_WIDTH,
        Grouping::None => 0.0,
    }
}

/// Summarizes `retained` (already filtered) with success bookkeeping taken
/// from `all`.
pub fn summarize(all: &[EpisodeResult], retained: &[EpisodeResult], grouping: Grouping) -> Result<MetricsReport> {
    if retained.is_empty() {
        return Err(Error::Usage("summarize needs at least one retained episode".into()));
    }
    let successes_all = all.iter().filter(|r| r.success).count();
    let retained_successes = retained.iter().filter(|r| r.success).count();
    let mut buckets: BTreeMap<i64, (f64, Vec<&EpisodeResult>)> = BTreeMap::new();
    for r in retained {
        let key = group_key(r, grouping);
        // Keys are multiples of 0.25, so this map key is exact.
        let slot = (key * 4.0).round() as i64;
        buckets.entry(slot).or_insert_with(|| (key, Vec::new())).1.push(r);
    }
    let mut warnings = Vec::new();
    let mut groups = Vec::new();
    for (key, members) in buckets.into_values() {
        let ts: Vec<f64> = members.iter().filter_map(|r| r.t).collect();
        let omegas: Vec<f64> = members.iter().filter_map(|r| r.omega).collect();
        if ts.is_empty() {
            warnings.push(format!("group {key}: no successful episodes, omitted"));
            continue;
        }
        groups.push(GroupStats {
            key,
            t: describe(&ts),
            omega: describe(&omegas),
        });
    }
    let all_t: Vec<f64> = retained.iter().filter_map(|r| r.t).collect();
    let all_omega: Vec<f64> = retained.iter().filter_map(|r| r.omega).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = retained
        .iter()
        .filter_map(|r| r.t.map(|t| (t, r.t_d)))
        .unzip();
    Ok(MetricsReport {
        success_rate_all: successes_all as f64 / all.len().max(1) as f64,
        successes_all,
        episodes_all: all.len(),
        success_rate: retained_successes as f64 / retained.len() as f64,
        episodes_retained: retained.len(),
        grouping,
        groups,
        overall_t: describe(&all_t),
        overall_omega: describe(&all_omega),
        spearman_t_td: spearman(&xs, &ys),
        warnings,
    })
}

/// Ranks starting at 1, ties receiving their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// `None` for fewer than two points or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "spearman inputs must have equal length");
    if x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Guard: a policy trained with the ecrl scheme must not be reported with
/// ground-truth poses.
pub fn assert_report_scheme(trained: Scheme, evaluated: Scheme) -> Result<()> {
    if trained == Scheme::Ecrl && evaluated != Scheme::Ecrl {
        return Err(Error::Compatibility(
            "ecrl-trained policies are only reported with estimated poses".into(),
        ));
    }
    Ok(())
}
