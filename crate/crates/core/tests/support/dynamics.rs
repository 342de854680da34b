//! Dynamics oracles: a literal re-implementation of the joint update, the
//! analytic hazard product and the first-order filter closed form.

use gaitspeed_core::env::{Action, EnvConfig, SurrogateEnv, TaskParams, ACTION_DIM, N_JOINTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default dynamics without start noise or drops.
pub fn quiet() -> EnvConfig {
    EnvConfig {
        initial_joint_noise: 0.0,
        regrasp_hazard: 0.0,
        ..EnvConfig::default()
    }
}

pub fn action(delta: f64, open: bool) -> Action {
    Action {
        joint_target_delta: [delta; N_JOINTS],
        grasp_gate: if open { 1.0 } else { -1.0 },
    }
}

pub fn evaluation_env(config: EnvConfig, seed: u64) -> (SurrogateEnv, ChaCha8Rng) {
    let mut env = SurrogateEnv::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    env.reset(TaskParams::fixed().evaluation(), &mut rng).unwrap();
    (env, rng)
}

/// The joint update written out from its definition, valid while no joint
/// is close enough to a limit for braking to matter.
pub struct JointOracle {
    pub q: [f64; N_JOINTS],
    pub qdot: [f64; N_JOINTS],
    pub q_d: [f64; N_JOINTS],
}

impl JointOracle {
    pub fn substep(&mut self, cfg: &EnvConfig, delta: &[f64; N_JOINTS]) -> [f64; N_JOINTS] {
        let dt = cfg.dt_sub();
        let alpha = 1.0 - (-1.0 / (cfg.f_z * cfg.tau)).exp();
        for i in 0..N_JOINTS {
            let target = cfg.q_nominal[i] + delta[i] * cfg.joint_limit;
            self.q_d[i] += alpha * (target - self.q_d[i]);
            let desired = (cfg.k_track * (self.q_d[i] - self.q[i])).clamp(-cfg.v_joint_max, cfg.v_joint_max);
            let dv = cfg.a_joint_max * dt;
            self.qdot[i] += (desired - self.qdot[i]).clamp(-dv, dv);
            self.q[i] += self.qdot[i] * dt;
        }
        self.qdot
    }
}

/// Fraction of a step target reached by the filtered targets after one time
/// constant, for every joint. The closed form is `1 - e^-1`.
pub fn filter_fraction_at_tau() -> Vec<f64> {
    let cfg = quiet();
    // tau = 0.2 s is 12 sub-steps, i.e. 4 policy steps.
    let steps = (cfg.tau * cfg.f_nn).round() as usize;
    let (mut env, mut rng) = evaluation_env(cfg.clone(), 1);
    let target = 0.5 * cfg.joint_limit;
    for _ in 0..steps {
        env.step(&action(0.5, false), &mut rng).unwrap();
    }
    env.state().unwrap().q_d.iter().map(|v| v / target).collect()
}

pub struct LimitExcess {
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
}

/// Largest excess over the joint position, speed and acceleration limits
/// under random actions, measured by finite differences of the sub-step
/// samples. Non-positive values mean the limits hold.
pub fn limit_excess(seed: u64, steps: usize) -> LimitExcess {
    let cfg = EnvConfig {
        regrasp_hazard: 0.0,
        drop_radius: 1e9,
        ..EnvConfig::default()
    };
    let (mut env, mut rng) = evaluation_env(cfg.clone(), seed);
    let dt = cfg.dt_sub();
    let mut history: Vec<[f64; N_JOINTS]> = vec![env.state().unwrap().q];
    let mut out = LimitExcess {
        position: f64::NEG_INFINITY,
        velocity: f64::NEG_INFINITY,
        acceleration: f64::NEG_INFINITY,
    };
    for _ in 0..steps {
        let mut a = [0.0; ACTION_DIM];
        for v in a.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        env.step(&Action::from_slice(&a), &mut rng).unwrap();
        let s = env.state().unwrap();
        // Three new samples per policy step, newest first.
        for k in (0..3).rev() {
            history.push(s.samples[k].q);
        }
        for i in 0..N_JOINTS {
            out.position = out.position.max((s.q[i] - cfg.q_nominal[i]).abs() - cfg.joint_limit);
        }
    }
    for w in history.windows(3) {
        for i in 0..N_JOINTS {
            let v1 = (w[1][i] - w[0][i]) / dt;
            let v2 = (w[2][i] - w[1][i]) / dt;
            out.velocity = out.velocity.max(v2.abs() - cfg.v_joint_max);
            out.acceleration = out.acceleration.max(((v2 - v1) / dt).abs() - cfg.a_joint_max);
        }
    }
    out
}

/// Whether any random open-grasp action moved the object at all.
pub fn open_grasp_moves_object(seed: u64, steps: usize) -> bool {
    let (mut env, mut rng) = evaluation_env(quiet(), seed);
    let before = env.state().unwrap().object;
    for _ in 0..steps {
        let mut a = [0.0; ACTION_DIM];
        for v in a.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        a[N_JOINTS] = 0.5;
        env.step(&Action::from_slice(&a), &mut rng).unwrap();
        if env.state().unwrap().object != before {
            return true;
        }
    }
    false
}

pub struct HazardComparison {
    /// Analytic survival after each policy step, starting with 1.
    pub analytic: Vec<f64>,
    pub empirical: Vec<f64>,
}

impl HazardComparison {
    pub fn worst_relative_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.empirical)
            .map(|(a, e)| (e - a).abs() / a)
            .fold(0.0, f64::max)
    }
}

/// Survival with the grasp held open while the joints move: Monte Carlo
/// over `trials` seeds against the product over sub-steps of
/// `1 - p₁(1 + ‖q̇‖₂ / v_max)`, with q̇ from the literal kinematics.
pub fn hazard_survival(trials: usize, steps: usize) -> HazardComparison {
    let cfg = EnvConfig {
        initial_joint_noise: 0.0,
        regrasp_hazard: 0.02,
        ..EnvConfig::default()
    };
    let delta = [0.4; N_JOINTS];
    let mut oracle = JointOracle {
        q: cfg.q_nominal.clone().try_into().unwrap(),
        qdot: [0.0; N_JOINTS],
        q_d: cfg.q_nominal.clone().try_into().unwrap(),
    };
    let mut analytic = vec![1.0];
    for _ in 0..steps {
        let mut s = *analytic.last().unwrap();
        for _ in 0..cfg.substeps() {
            let qdot = oracle.substep(&cfg, &delta);
            let speed = qdot.iter().map(|v| v * v).sum::<f64>().sqrt();
            s *= 1.0 - cfg.regrasp_hazard * (1.0 + speed / cfg.v_joint_max);
        }
        analytic.push(s);
    }

    let mut alive = vec![0usize; steps + 1];
    let mut env = SurrogateEnv::new(cfg).unwrap();
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial as u64);
        env.reset(TaskParams::fixed().evaluation(), &mut rng).unwrap();
        alive[0] += 1;
        for n in 1..=steps {
            let ev = env
                .step(&Action { joint_target_delta: delta, grasp_gate: 1.0 }, &mut rng)
                .unwrap();
            if ev.dropped {
                break;
            }
            alive[n] += 1;
        }
    }
    let empirical = alive.iter().map(|&a| a as f64 / trials as f64).collect();
    HazardComparison { analytic, empirical }
}
