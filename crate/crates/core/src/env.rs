//! Analytic surrogate for grasp-coupled in-hand reorientation.
//!
//! Twelve joints track low-pass filtered targets under velocity and
//! acceleration limits. While the grasp is closed, joint motion is mapped to
//! object motion through fixed coupling (`J`) and drift (`G`) matrices; while
//! it is open the object is frozen and a speed-dependent drop hazard is
//! active. No contacts are simulated.

use std::collections::VecDeque;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::EnvError;
use crate::so3::{
    self, basis_point_encoding, geodesic_distance_unchecked, relative_rotation,
    rotation_to_feature, sample_uniform_rotation, BasisPointSet, Cuboid, Pose, Rotation, Vec3,
};

pub const N_JOINTS: usize = 12;
/// Joint target deltas plus the grasp gate.
pub const ACTION_DIM: usize = N_JOINTS + 1;

/// Range of target speeds accepted in speed-horizon mode (rad/s).
pub const OMEGA_D_MIN: f64 = 0.25;
pub const OMEGA_D_MAX: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainRandomization {
    pub enabled: bool,
    /// Relative per-entry perturbation of the coupling and drift matrices.
    pub dynamics_scale: f64,
    /// Standard deviation of the measurement noise on `q` (rad).
    pub joint_obs_noise: f64,
}

impl Default for DomainRandomization {
    fn default() -> Self {
        DomainRandomization {
            enabled: false,
            dynamics_scale: 0.1,
            joint_obs_noise: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Policy rate (Hz).
    pub f_nn: f64,
    /// Observation sampling and inner simulation rate (Hz).
    pub f_z: f64,
    /// Action filter time constant (s).
    pub tau: f64,
    /// Observation stack depth.
    pub k: usize,
    pub n_joints: usize,
    pub q_nominal: Vec<f64>,
    /// Joint range about `q_nominal` (rad).
    pub joint_limit: f64,
    pub v_joint_max: f64,
    pub a_joint_max: f64,
    /// Joint tracking gain (1/s).
    pub k_track: f64,
    pub success_threshold: f64,
    /// Episode timeout (s).
    pub timeout: f64,
    /// Horizon used in fixed-horizon mode (s).
    pub fixed_horizon: f64,
    pub drop_radius: f64,
    /// Base drop probability per sub-step while the grasp is open.
    pub regrasp_hazard: f64,
    /// Standard deviation of the entries of `J` (rad per rad).
    pub coupling_matrix_scale: f64,
    /// Standard deviation of the entries of `G` (m per rad).
    pub drift_matrix_scale: f64,
    /// Object angular speed above which the grasp slips (rad/s).
    pub object_speed_max: f64,
    /// Squeeze offset added to the commanded joint angles while the grasp is
    /// closed (rad). Shows up in `q_d - q` as the contact signature.
    pub grip_squeeze: f64,
    pub dynamics_seed: u64,
    pub initial_joint_noise: f64,
    pub shape: Cuboid,
    pub basis_count: usize,
    pub basis_radius: f64,
    pub domain_randomization: DomainRandomization,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            f_nn: 20.0,
            f_z: 60.0,
            tau: 0.2,
            k: 6,
            n_joints: N_JOINTS,
            q_nominal: vec![0.0; N_JOINTS],
            joint_limit: 1.0,
            v_joint_max: 9.6,
            a_joint_max: 110.0,
            k_track: 40.0,
            success_threshold: 0.4,
            timeout: 20.0,
            fixed_horizon: 5.0,
            drop_radius: 0.03,
            regrasp_hazard: 0.02,
            coupling_matrix_scale: 1.0,
            drift_matrix_scale: 0.006,
            object_speed_max: 3.5,
            grip_squeeze: 0.05,
            dynamics_seed: 7,
            initial_joint_noise: 0.02,
            shape: Cuboid::cube(0.035).expect("valid default cube"),
            basis_count: 32,
            basis_radius: 0.06,
            domain_randomization: DomainRandomization::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = [
            ("f_nn", self.f_nn),
            ("f_z", self.f_z),
            ("tau", self.tau),
            ("joint_limit", self.joint_limit),
            ("v_joint_max", self.v_joint_max),
            ("a_joint_max", self.a_joint_max),
            ("k_track", self.k_track),
            ("success_threshold", self.success_threshold),
            ("timeout", self.timeout),
            ("fixed_horizon", self.fixed_horizon),
            ("drop_radius", self.drop_radius),
            ("object_speed_max", self.object_speed_max),
            ("basis_radius", self.basis_radius),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(EnvError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("regrasp_hazard", self.regrasp_hazard),
            ("coupling_matrix_scale", self.coupling_matrix_scale),
            ("drift_matrix_scale", self.drift_matrix_scale),
            ("grip_squeeze", self.grip_squeeze),
            ("initial_joint_noise", self.initial_joint_noise),
            (
                "domain_randomization.dynamics_scale",
                self.domain_randomization.dynamics_scale,
            ),
            (
                "domain_randomization.joint_obs_noise",
                self.domain_randomization.joint_obs_noise,
            ),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(EnvError::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.regrasp_hazard > 1.0 {
            return Err(EnvError::Config("regrasp_hazard must be <= 1".into()));
        }
        if self.n_joints != N_JOINTS {
            return Err(EnvError::Config(format!(
                "n_joints must be {N_JOINTS}, got {}",
                self.n_joints
            )));
        }
        if self.q_nominal.len() != N_JOINTS || self.q_nominal.iter().any(|q| !q.is_finite()) {
            return Err(EnvError::Config(format!(
                "q_nominal must hold {N_JOINTS} finite values"
            )));
        }
        if self.k == 0 {
            return Err(EnvError::Config("k must be at least 1".into()));
        }
        if self.basis_count == 0 {
            return Err(EnvError::Config("basis_count must be at least 1".into()));
        }
        let ratio = self.f_z / self.f_nn;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(EnvError::Config(format!(
                "f_z ({}) must be an integer multiple of f_nn ({})",
                self.f_z, self.f_nn
            )));
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        (self.f_z / self.f_nn).round() as usize
    }

    pub fn dt_sub(&self) -> f64 {
        1.0 / self.f_z
    }

    pub fn timeout_steps(&self) -> usize {
        (self.timeout * self.f_nn).round() as usize
    }

    /// Duration covered by the observation stack (s).
    pub fn window_duration(&self) -> f64 {
        self.k as f64 / self.f_z
    }

    pub fn basis(&self) -> BasisPointSet {
        BasisPointSet::halton_ball(self.basis_count, self.basis_radius, [0.0; 3])
            .expect("validated basis parameters")
    }

    /// Number of reals in the proprioceptive stack.
    pub fn z_len(&self) -> usize {
        2 * N_JOINTS * self.k
    }

    /// Length of the flat observation vector for a given conditioning width.
    pub fn observation_len(&self, xi_len: usize) -> usize {
        self.z_len() + 6 + 3 * self.basis_count + xi_len
    }
}

/// Per-sub-step drop probability while the grasp is open, growing with the
/// Euclidean joint speed.
pub fn hazard_probability(config: &EnvConfig, qdot: &[f64; N_JOINTS]) -> f64 {
    let speed = qdot.iter().map(|v| v * v).sum::<f64>().sqrt();
    (config.regrasp_hazard * (1.0 + speed / config.v_joint_max)).min(1.0)
}

/// Coupling (`J`, rad per rad) and drift (`G`, m per rad) matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub coupling: [[f64; N_JOINTS]; 3],
    pub drift: [[f64; N_JOINTS]; 3],
}

impl Dynamics {
    pub fn generate(config: &EnvConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.dynamics_seed);
        let mut coupling = [[0.0; N_JOINTS]; 3];
        let mut drift = [[0.0; N_JOINTS]; 3];
        for row in coupling.iter_mut() {
            for v in row.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v = n * config.coupling_matrix_scale;
            }
        }
        for row in drift.iter_mut() {
            for v in row.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v = n * config.drift_matrix_scale;
            }
        }
        Dynamics { coupling, drift }
    }

    fn perturbed<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Self {
        let mut out = self.clone();
        for row in out.coupling.iter_mut().chain(out.drift.iter_mut()) {
            for v in row.iter_mut() {
                *v *= 1.0 + rng.random_range(-scale..=scale);
            }
        }
        out
    }

    pub fn angular_velocity(&self, qdot: &[f64; N_JOINTS]) -> Vec3 {
        mat_vec(&self.coupling, qdot)
    }

    pub fn linear_velocity(&self, qdot: &[f64; N_JOINTS]) -> Vec3 {
        mat_vec(&self.drift, qdot)
    }
}

fn mat_vec(m: &[[f64; N_JOINTS]; 3], v: &[f64; N_JOINTS]) -> Vec3 {
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(m) {
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonMode {
    FixedHorizon,
    SpeedHorizon,
}

/// Training episodes chain goals at the horizon; evaluation episodes run a
/// single goal until it is reached, dropped, or timed out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeMode {
    Training,
    Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub horizon_mode: HorizonMode,
    /// Target speed (rad/s); only drives the horizon in speed-horizon mode.
    pub omega_d: f64,
    /// Extra time added to the target time (s).
    pub h_exp: f64,
    pub episode_mode: EpisodeMode,
}

impl TaskParams {
    pub fn fixed() -> Self {
        TaskParams {
            horizon_mode: HorizonMode::FixedHorizon,
            omega_d: 1.0,
            h_exp: 0.0,
            episode_mode: EpisodeMode::Training,
        }
    }

    pub fn speed(omega_d: f64, h_exp: f64) -> Self {
        TaskParams {
            horizon_mode: HorizonMode::SpeedHorizon,
            omega_d,
            h_exp,
            episode_mode: EpisodeMode::Training,
        }
    }

    pub fn evaluation(mut self) -> Self {
        self.episode_mode = EpisodeMode::Evaluation;
        self
    }

    fn validate(&self) -> Result<(), EnvError> {
        if self.horizon_mode == HorizonMode::SpeedHorizon
            && !(OMEGA_D_MIN..=OMEGA_D_MAX).contains(&self.omega_d)
        {
            return Err(EnvError::Config(format!(
                "omega_d {} outside [{OMEGA_D_MIN}, {OMEGA_D_MAX}]",
                self.omega_d
            )));
        }
        if !(self.h_exp.is_finite() && self.h_exp >= 0.0) {
            return Err(EnvError::Config(format!("h_exp must be >= 0, got {}", self.h_exp)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub joint_target_delta: [f64; N_JOINTS],
    pub grasp_gate: f64,
}

impl Action {
    pub fn zero() -> Self {
        Action {
            joint_target_delta: [0.0; N_JOINTS],
            grasp_gate: -1.0,
        }
    }

    pub fn from_slice(values: &[f64]) -> Self {
        assert_eq!(values.len(), ACTION_DIM, "action needs {ACTION_DIM} values");
        let mut joint_target_delta = [0.0; N_JOINTS];
        joint_target_delta.copy_from_slice(&values[..N_JOINTS]);
        Action {
            joint_target_delta,
            grasp_gate: values[N_JOINTS],
        }
    }

    fn clamped(&self) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        Action {
            joint_target_delta: self.joint_target_delta.map(c),
            grasp_gate: c(self.grasp_gate),
        }
    }

    pub fn grasp_closed(&self) -> bool {
        self.grasp_gate <= 0.0
    }
}

/// One proprioceptive sample: measured joints and `q_d - q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSample {
    pub q: [f64; N_JOINTS],
    pub e: [f64; N_JOINTS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub q: [f64; N_JOINTS],
    pub qdot: [f64; N_JOINTS],
    pub q_d: [f64; N_JOINTS],
    pub object: Pose,
    pub goal: Rotation,
    pub grasp_open: bool,
    pub t: usize,
    pub theta: f64,
    pub delta_x: f64,
    pub theta_0: f64,
    pub x_0: Vec3,
    /// Step at which the current goal segment is judged.
    pub horizon: usize,
    pub segment_start: usize,
    pub segment: usize,
    /// Target time for the current segment (s).
    pub target_time: f64,
    pub omega_d: f64,
    pub h_exp: f64,
    pub task: TaskParams,
    pub reached_in_segment: bool,
    /// First step at which the first goal was within the threshold.
    pub first_reach_step: Option<usize>,
    pub dropped: bool,
    pub failed: bool,
    pub truncated: bool,
    pub dynamics: Dynamics,
    /// Newest first.
    pub samples: VecDeque<JointSample>,
}

impl EnvState {
    pub fn is_done(&self) -> bool {
        self.dropped || self.failed || self.truncated
    }

    /// Time since the current goal was set (s).
    pub fn segment_time(&self, f_nn: f64) -> f64 {
        (self.t - self.segment_start) as f64 / f_nn
    }

    pub fn remaining_time(&self, f_nn: f64) -> f64 {
        self.target_time - self.segment_time(f_nn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvents {
    /// The angle dropped below the threshold for the first time in this
    /// goal segment.
    pub reached_goal: bool,
    pub goal_resampled: bool,
    pub dropped: bool,
    /// Horizon reached without being in the goal.
    pub failed: bool,
    pub truncated: bool,
    pub theta_t: f64,
    pub theta_prev: f64,
    pub delta_x_t: f64,
    pub delta_x_prev: f64,
    /// `q_t - q_nominal`.
    pub q_penalty_input: [f64; N_JOINTS],
    pub in_goal: bool,
}

impl StepEvents {
    pub fn terminated(&self) -> bool {
        self.dropped || self.failed
    }

    pub fn done(&self) -> bool {
        self.terminated() || self.truncated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// `k` samples of `(q, e)`, newest first.
    pub z: Vec<f64>,
    pub goal_feature: [f64; 6],
    pub shape_encoding: Vec<f64>,
    pub xi: Vec<f64>,
}

impl Observation {
    /// Concatenation in policy input order: z, goal, shape, xi.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut out =
            Vec::with_capacity(self.z.len() + 6 + self.shape_encoding.len() + self.xi.len());
        self.write_into(&mut out);
        out
    }

    pub fn write_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.z);
        out.extend_from_slice(&self.goal_feature);
        out.extend_from_slice(&self.shape_encoding);
        out.extend_from_slice(&self.xi);
    }
}

/// Distance covered moving at `v`, then `v - dv`, `v - 2dv`, ... until
/// stopped.
fn braking_distance(v: f64, dv: f64, dt: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    let n = ((v / dv).ceil() - 1.0).max(0.0);
    dt * ((n + 1.0) * v - dv * n * (n + 1.0) / 2.0)
}

/// Largest velocity from which the joint can still stop within `dist` while
/// decelerating by at most `dv` per sub-step of length `dt`.
fn stopping_velocity(dist: f64, dv: f64, dt: f64) -> f64 {
    if dist <= 0.0 {
        return 0.0;
    }
    let travel = |v: f64| braking_distance(v, dv, dt);
    let (mut lo, mut hi) = (0.0, dist / dt);
    if travel(hi) <= dist {
        return hi;
    }
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if travel(mid) <= dist {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

pub struct SurrogateEnv {
    config: EnvConfig,
    nominal_dynamics: Dynamics,
    basis: BasisPointSet,
    state: Option<EnvState>,
}

impl SurrogateEnv {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let nominal_dynamics = Dynamics::generate(&config);
        let basis = config.basis();
        Ok(SurrogateEnv {
            config,
            nominal_dynamics,
            basis,
            state: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn nominal_dynamics(&self) -> &Dynamics {
        &self.nominal_dynamics
    }

    pub fn basis(&self) -> &BasisPointSet {
        &self.basis
    }

    pub fn state(&self) -> Result<&EnvState, EnvError> {
        self.state.as_ref().ok_or(EnvError::NotReset)
    }

    /// Direct state access for tests and tooling.
    pub fn state_mut(&mut self) -> Result<&mut EnvState, EnvError> {
        self.state.as_mut().ok_or(EnvError::NotReset)
    }

    pub fn q_nominal(&self) -> [f64; N_JOINTS] {
        let mut out = [0.0; N_JOINTS];
        out.copy_from_slice(&self.config.q_nominal);
        out
    }

    fn horizon_for(&self, theta_0: f64, task: &TaskParams) -> (usize, f64) {
        match task.horizon_mode {
            HorizonMode::FixedHorizon => (
                (self.config.fixed_horizon * self.config.f_nn).round() as usize,
                self.config.fixed_horizon,
            ),
            HorizonMode::SpeedHorizon => {
                let target_time = theta_0 / task.omega_d;
                let steps = ((target_time + task.h_exp) * self.config.f_nn).round() as usize;
                (steps.max(1), target_time)
            }
        }
    }

    pub fn reset<R: Rng + ?Sized>(
        &mut self,
        task: TaskParams,
        rng: &mut R,
    ) -> Result<&EnvState, EnvError> {
        task.validate()?;
        let cfg = &self.config;
        let q_nominal = self.q_nominal();
        let noise = Normal::new(0.0, cfg.initial_joint_noise.max(1e-300))
            .map_err(|e| EnvError::Config(e.to_string()))?;
        let mut q = q_nominal;
        for (qi, q0) in q.iter_mut().zip(q_nominal) {
            let n = if cfg.initial_joint_noise > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            let bound = 0.999 * cfg.joint_limit;
            *qi = q0 + n.clamp(-bound, bound);
        }
        let orientation = sample_uniform_rotation(rng);
        let goal = sample_uniform_rotation(rng);
        let dynamics = if cfg.domain_randomization.enabled {
            self.nominal_dynamics
                .perturbed(cfg.domain_randomization.dynamics_scale, rng)
        } else {
            self.nominal_dynamics.clone()
        };
        let object = Pose {
            position: [0.0; 3],
            orientation,
        };
        let theta_0 = geodesic_distance_unchecked(&goal, &orientation);
        let (horizon, target_time) = self.horizon_for(theta_0, &task);
        let q_d = q;
        let mut state = EnvState {
            q,
            qdot: [0.0; N_JOINTS],
            q_d,
            object,
            goal,
            grasp_open: false,
            t: 0,
            theta: theta_0,
            delta_x: 0.0,
            theta_0,
            x_0: object.position,
            horizon,
            segment_start: 0,
            segment: 0,
            target_time,
            omega_d: task.omega_d,
            h_exp: task.h_exp,
            task,
            reached_in_segment: false,
            first_reach_step: None,
            dropped: false,
            failed: false,
            truncated: false,
            dynamics,
            samples: VecDeque::with_capacity(cfg.k),
        };
        let first = self.measure(&state, rng);
        state.samples.extend(std::iter::repeat_n(first, cfg.k));
        if theta_0 < cfg.success_threshold {
            state.reached_in_segment = true;
            state.first_reach_step = Some(0);
        }
        self.state = Some(state);
        Ok(self.state.as_ref().expect("just set"))
    }

    fn measure<R: Rng + ?Sized>(&self, state: &EnvState, rng: &mut R) -> JointSample {
        let dr = &self.config.domain_randomization;
        let mut q = state.q;
        if dr.enabled && dr.joint_obs_noise > 0.0 {
            for v in q.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *v += dr.joint_obs_noise * n;
            }
        }
        let squeeze = if state.grasp_open {
            0.0
        } else {
            self.config.grip_squeeze
        };
        let mut e = [0.0; N_JOINTS];
        for i in 0..N_JOINTS {
            e[i] = state.q_d[i] + squeeze - q[i];
        }
        JointSample { q, e }
    }

    /// Advances one policy step (`f_z / f_nn` inner sub-steps).
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        action: &Action,
        rng: &mut R,
    ) -> Result<StepEvents, EnvError> {
        let mut state = self.state.take().ok_or(EnvError::NotReset)?;
        if state.is_done() {
            self.state = Some(state);
            return Err(EnvError::Terminated);
        }
        let events = self.advance(&mut state, action, rng);
        self.state = Some(state);
        Ok(events)
    }

    fn advance<R: Rng + ?Sized>(
        &self,
        s: &mut EnvState,
        action: &Action,
        rng: &mut R,
    ) -> StepEvents {
        let cfg = &self.config;
        let action = action.clamped();
        let q_nominal = self.q_nominal();
        let dt = cfg.dt_sub();
        let alpha = 1.0 - (-dt / cfg.tau).exp();
        let dv = cfg.a_joint_max * dt;
        // Beyond this distance from a limit the braking cap never binds.
        let free_travel = braking_distance(cfg.v_joint_max, dv, dt);
        let open = !action.grasp_closed();
        s.grasp_open = open;
        let mut hazard_fired = false;

        for _ in 0..cfg.substeps() {
            let mut qdot_eff = [0.0; N_JOINTS];
            for i in 0..N_JOINTS {
                let target = q_nominal[i] + action.joint_target_delta[i] * cfg.joint_limit;
                s.q_d[i] += alpha * (target - s.q_d[i]);
                let upper = q_nominal[i] + cfg.joint_limit;
                let lower = q_nominal[i] - cfg.joint_limit;
                let cap = |dist: f64| {
                    if dist >= free_travel {
                        cfg.v_joint_max
                    } else {
                        stopping_velocity(dist, dv, dt).min(cfg.v_joint_max)
                    }
                };
                let cap_up = cap(upper - s.q[i]);
                let cap_down = cap(s.q[i] - lower);
                let desired = (cfg.k_track * (s.q_d[i] - s.q[i])).clamp(-cap_down, cap_up);
                let qdot = s.qdot[i] + (desired - s.qdot[i]).clamp(-dv, dv);
                let q_next = (s.q[i] + qdot * dt).clamp(lower, upper);
                qdot_eff[i] = (q_next - s.q[i]) / dt;
                s.q[i] = q_next;
                s.qdot[i] = qdot_eff[i];
            }
            if open {
                let p = hazard_probability(cfg, &qdot_eff);
                if rng.random::<f64>() < p {
                    hazard_fired = true;
                }
            } else {
                let omega = s.dynamics.angular_velocity(&qdot_eff);
                let vel = s.dynamics.linear_velocity(&qdot_eff);
                let speed = so3::norm(omega);
                let slip = if speed > cfg.object_speed_max {
                    cfg.object_speed_max / speed
                } else {
                    1.0
                };
                s.object.orientation =
                    Rotation::exp(so3::scale(omega, slip * dt)).compose(&s.object.orientation);
                s.object.position = so3::add(s.object.position, so3::scale(vel, slip * dt));
            }
            let sample = self.measure(s, rng);
            s.samples.pop_back();
            s.samples.push_front(sample);
        }

        s.t += 1;
        let theta_prev = s.theta;
        let delta_x_prev = s.delta_x;
        let theta_t = geodesic_distance_unchecked(&s.goal, &s.object.orientation);
        let delta_x_t = so3::norm(so3::sub(s.object.position, s.x_0));
        s.theta = theta_t;
        s.delta_x = delta_x_t;
        let in_goal = theta_t < cfg.success_threshold;
        let mut q_penalty_input = [0.0; N_JOINTS];
        for i in 0..N_JOINTS {
            q_penalty_input[i] = s.q[i] - q_nominal[i];
        }
        let mut events = StepEvents {
            reached_goal: false,
            goal_resampled: false,
            dropped: false,
            failed: false,
            truncated: false,
            theta_t,
            theta_prev,
            delta_x_t,
            delta_x_prev,
            q_penalty_input,
            in_goal,
        };

        if hazard_fired || delta_x_t > cfg.drop_radius {
            s.dropped = true;
            events.dropped = true;
            return events;
        }
        if in_goal && !s.reached_in_segment {
            s.reached_in_segment = true;
            events.reached_goal = true;
            if s.segment == 0 && s.first_reach_step.is_none() {
                s.first_reach_step = Some(s.t);
            }
        }
        if s.task.episode_mode == EpisodeMode::Training && s.t >= s.horizon {
            if in_goal {
                s.goal = sample_uniform_rotation(rng);
                s.segment += 1;
                s.segment_start = s.t;
                s.theta_0 = geodesic_distance_unchecked(&s.goal, &s.object.orientation);
                s.theta = s.theta_0;
                let (steps, target_time) = self.horizon_for(s.theta_0, &s.task);
                s.horizon = s.t + steps;
                s.target_time = target_time;
                s.reached_in_segment = s.theta_0 < cfg.success_threshold;
                events.goal_resampled = true;
            } else {
                s.failed = true;
                events.failed = true;
                return events;
            }
        }
        if s.t >= cfg.timeout_steps() {
            s.truncated = true;
            events.truncated = true;
        }
        events
    }

    /// The `k` most recent samples with goal feature and shape encoding
    /// computed from `pose` (true pose for the oracle scheme, the estimate
    /// otherwise).
    pub fn observation_window(&self, pose: &Pose, xi: Vec<f64>) -> Result<Observation, EnvError> {
        let s = self.state()?;
        Ok(observation_from_state(s, &self.config, &self.basis, pose, xi))
    }

    pub fn proprio(&self) -> Result<Vec<f64>, EnvError> {
        Ok(flatten_samples(&self.state()?.samples))
    }
}

pub fn flatten_samples(samples: &VecDeque<JointSample>) -> Vec<f64> {
    let mut z = Vec::with_capacity(samples.len() * 2 * N_JOINTS);
    for sample in samples {
        z.extend_from_slice(&sample.q);
        z.extend_from_slice(&sample.e);
    }
    z
}

pub fn shape_features(pose: &Pose, shape: &Cuboid, basis: &BasisPointSet) -> Vec<f64> {
    basis_point_encoding(pose, shape, basis)
        .into_iter()
        .flatten()
        .collect()
}

pub fn observation_from_state(
    s: &EnvState,
    cfg: &EnvConfig,
    basis: &BasisPointSet,
    pose: &Pose,
    xi: Vec<f64>,
) -> Observation {
    Observation {
        z: flatten_samples(&s.samples),
        goal_feature: rotation_to_feature(&relative_rotation(&s.goal, &pose.orientation)),
        shape_encoding: shape_features(pose, &cfg.shape, basis),
        xi,
    }
}
