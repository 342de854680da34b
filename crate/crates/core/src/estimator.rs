//! Recurrent pose estimator trained alongside the policy.
//!
//! Each step the network sees the proprioceptive stack `z_t` and the shape
//! encoding of its own previous estimate, and predicts an increment: a
//! position offset and a 6D rotation feature that is orthonormalized and
//! applied on the left of the previous orientation. Training uses teacher
//! forcing (the increment is composed with the true previous pose) and
//! truncated backpropagation through time.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{shape_features, EnvConfig};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Adam, GruCache, GruLayout};
use crate::so3::{self, geodesic_distance_unchecked, BasisPointSet, Pose, Rotation, Vec3};

pub const HEAD_DIM: usize = 9;
/// Head bias origin: zero translation and the identity rotation feature.
const HEAD_BASE: [f64; HEAD_DIM] = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub tbptt_window: usize,
    pub epochs: usize,
    /// Windows per minibatch.
    pub minibatch_windows: usize,
    /// Weight of the squared angle error, m²/rad².
    pub beta: f64,
    /// Metres per unit of the position head output.
    pub position_scale: f64,
    pub max_grad_norm: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            hidden: 128,
            learning_rate: 1e-3,
            tbptt_window: 20,
            epochs: 2,
            minibatch_windows: 64,
            beta: 1.0,
            position_scale: 0.01,
            max_grad_norm: 1.0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.tbptt_window == 0 || self.epochs == 0 || self.minibatch_windows == 0 {
            return Err(Error::Config(
                "estimator.hidden/tbptt_window/epochs/minibatch_windows must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("beta", self.beta),
            ("position_scale", self.position_scale),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("estimator.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    pub gru: GruLayout,
    pub config: EstimatorConfig,
    /// Recurrent parameters, then the head weights (hidden × 9, row-major)
    /// and head bias.
    pub params: Vec<f64>,
}

/// Per-environment recurrent state: hidden vector plus the last estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorCarry {
    pub hidden: Vec<f64>,
    pub pose: Pose,
}

impl EstimatorCarry {
    /// Fresh carry for an episode whose initial pose is known.
    pub fn seeded(hidden: usize, initial: Pose) -> Self {
        EstimatorCarry {
            hidden: vec![0.0; hidden],
            pose: initial,
        }
    }
}

/// Orthonormalized columns and the intermediates needed for the backward
/// pass. Identical arithmetic to [`so3::gram_schmidt`].
struct GsForward {
    a2: Vec3,
    n1: f64,
    n2: f64,
    b: [Vec3; 3],
}

fn gs_forward(f: &[f64]) -> Option<GsForward> {
    let feature: [f64; 6] = f.try_into().ok()?;
    let b = so3::gram_schmidt(&feature).ok()?;
    let a1 = [f[0], f[1], f[2]];
    let a2 = [f[3], f[4], f[5]];
    let n1 = so3::norm(a1);
    let u2 = so3::sub(a2, so3::scale(b[0], so3::dot(b[0], a2)));
    Some(GsForward {
        a2,
        n1,
        n2: so3::norm(u2),
        b,
    })
}

/// Gradient with respect to the 6D feature given gradients on the three
/// orthonormal columns.
fn gs_backward(gs: &GsForward, g: [Vec3; 3]) -> [f64; 6] {
    let [b1, b2, _] = gs.b;
    // b3 = b1 × b2
    let mut g1 = so3::add(g[0], so3::cross(b2, g[2]));
    let g2 = so3::add(g[1], so3::cross(g[2], b1));
    // b2 = u2 / |u2|
    let du2 = so3::scale(so3::sub(g2, so3::scale(b2, so3::dot(b2, g2))), 1.0 / gs.n2);
    // u2 = a2 - (b1·a2) b1
    let b1a2 = so3::dot(b1, gs.a2);
    let da2 = so3::sub(du2, so3::scale(b1, so3::dot(b1, du2)));
    g1 = so3::sub(g1, so3::add(so3::scale(du2, b1a2), so3::scale(gs.a2, so3::dot(b1, du2))));
    // b1 = a1 / |a1|
    let da1 = so3::scale(so3::sub(g1, so3::scale(b1, so3::dot(b1, g1))), 1.0 / gs.n1);
    [da1[0], da1[1], da1[2], da2[0], da2[1], da2[2]]
}

fn columns_to_matrix(b: &[Vec3; 3]) -> [[f64; 3]; 3] {
    [
        [b[0][0], b[1][0], b[2][0]],
        [b[0][1], b[1][1], b[2][1]],
        [b[0][2], b[1][2], b[2][2]],
    ]
}

/// Applies a head output to a previous pose.
pub fn apply_head(output: &[f64], previous: &Pose, position_scale: f64) -> Result<Pose> {
    let mut feature = [0.0; 6];
    feature.copy_from_slice(&output[3..9]);
    let increment = so3::rotation_from_feature(&feature)
        .map_err(|e| Error::EstimatorDivergence(format!("rotation head: {e}")))?;
    let offset = so3::scale([output[0], output[1], output[2]], position_scale);
    Ok(Pose {
        position: so3::add(previous.position, offset),
        orientation: increment.compose(&previous.orientation),
    })
}

/// `‖x̂ - x‖² + β·d(R̂, R)²`.
pub fn estimator_loss(estimate: &Pose, truth: &Pose, beta: f64) -> f64 {
    let dx = so3::sub(estimate.position, truth.position);
    let angle = geodesic_distance_unchecked(&estimate.orientation, &truth.orientation);
    so3::dot(dx, dx) + beta * angle * angle
}

/// Loss of a head output composed with `previous`, and its gradient with
/// respect to the raw head output (before adding the identity origin).
pub fn head_loss_and_grad(
    output: &[f64],
    previous: &Pose,
    truth: &Pose,
    config: &EstimatorConfig,
) -> Option<(f64, [f64; HEAD_DIM])> {
    let gs = gs_forward(&output[3..9])?;
    let a = columns_to_matrix(&gs.b);
    let increment = Rotation::from_matrix(&a).ok()?;
    let estimate = Pose {
        position: so3::add(
            previous.position,
            so3::scale([output[0], output[1], output[2]], config.position_scale),
        ),
        orientation: increment.compose(&previous.orientation),
    };
    let loss = estimator_loss(&estimate, truth, config.beta);
    let mut grad = [0.0; HEAD_DIM];
    let dx = so3::sub(estimate.position, truth.position);
    for i in 0..3 {
        grad[i] = 2.0 * dx[i] * config.position_scale;
    }
    // With C = R Pᵀ, cos θ = (⟨A, C⟩ - 1) / 2 so dθ²/dA = -(θ / sin θ) C.
    let theta = geodesic_distance_unchecked(&estimate.orientation, &truth.orientation);
    let ratio = if theta < 1e-8 { 1.0 } else { theta / theta.sin().max(1e-3) };
    let r = truth.orientation.to_matrix();
    let p = previous.orientation.to_matrix();
    let mut g_cols = [[0.0; 3]; 3];
    for (i, row) in r.iter().enumerate() {
        for (j, p_row) in p.iter().enumerate() {
            let c_ij: f64 = (0..3).map(|k| row[k] * p_row[k]).sum();
            g_cols[j][i] = -config.beta * ratio * c_ij;
        }
    }
    let df = gs_backward(&gs, g_cols);
    grad[3..9].copy_from_slice(&df);
    Some((loss, grad))
}

/// One transition recorded for estimator training.
#[derive(Debug, Clone)]
pub struct EstimatorSample {
    /// `z_t` followed by the shape encoding of the previous estimate.
    pub input: Vec<f64>,
    /// Hidden state the rollout fed into this step.
    pub hidden_before: Vec<f64>,
    pub previous_truth: Pose,
    pub truth: Pose,
}

/// Per-environment sequences of estimator samples from one rollout. A new
/// sequence begins at every episode reset.
#[derive(Debug, Clone, Default)]
pub struct EstimatorBuffer {
    pub sequences: Vec<Vec<EstimatorSample>>,
}

impl EstimatorBuffer {
    pub fn len(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn windows(&self, window: usize) -> Vec<&[EstimatorSample]> {
        self.sequences
            .iter()
            .flat_map(|seq| seq.chunks(window))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EstimatorStats {
    pub loss: f64,
    pub samples: usize,
}

impl Estimator {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, config: EstimatorConfig, rng: &mut R) -> Self {
        let gru = GruLayout {
            input: input_dim,
            hidden: config.hidden,
        };
        let mut params = gru.init(rng);
        params.extend(std::iter::repeat_n(0.0, config.hidden * HEAD_DIM + HEAD_DIM));
        Estimator { gru, config, params }
    }

    pub fn param_count(&self) -> usize {
        self.gru.param_count() + self.config.hidden * HEAD_DIM + HEAD_DIM
    }

    /// Input width for an environment: `z` plus the shape encoding.
    pub fn input_dim(env: &EnvConfig) -> usize {
        env.z_len() + 3 * env.basis_count
    }

    fn split(&self) -> (&[f64], &[f64]) {
        self.params.split_at(self.gru.param_count())
    }

    pub fn input_for(
        z: &[f64],
        previous: &Pose,
        env: &EnvConfig,
        basis: &BasisPointSet,
    ) -> Vec<f64> {
        let mut input = z.to_vec();
        input.extend(shape_features(previous, &env.shape, basis));
        input
    }

    fn head(&self, hidden: ArrayView2<f64>) -> Array2<f64> {
        let (_, head) = self.split();
        let h = self.config.hidden;
        let w = ArrayView2::from_shape((h, HEAD_DIM), &head[..h * HEAD_DIM]).expect("head shape");
        let mut out = hidden.dot(&w);
        out += &ndarray::ArrayView1::from(&head[h * HEAD_DIM..]);
        out += &ndarray::ArrayView1::from(&HEAD_BASE);
        out
    }

    /// Advances a batch of carries by one step. `inputs` has one row per
    /// carry.
    pub fn step_batch(&self, carries: &mut [EstimatorCarry], inputs: ArrayView2<f64>) -> Result<()> {
        let h = self.config.hidden;
        let hidden = Array2::from_shape_fn((carries.len(), h), |(i, j)| carries[i].hidden[j]);
        let (gru, _) = self.split();
        let (next, _) = self.gru.step(gru, inputs, hidden.view());
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::EstimatorDivergence("non-finite recurrent state".into()));
        }
        let out = self.head(next.view());
        for (i, carry) in carries.iter_mut().enumerate() {
            let row = out.row(i);
            carry.pose = apply_head(row.as_slice().expect("contiguous"), &carry.pose, self.config.position_scale)?;
            carry.hidden.copy_from_slice(next.row(i).as_slice().expect("contiguous"));
        }
        Ok(())
    }

    /// Single-carry convenience wrapper around [`Estimator::step_batch`].
    pub fn estimator_step(&self, carry: &EstimatorCarry, input: &[f64]) -> Result<EstimatorCarry> {
        let mut next = [carry.clone()];
        let inputs = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Usage(e.to_string()))?;
        self.step_batch(&mut next, inputs)?;
        let [next] = next;
        Ok(next)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.params {
            *v = *v as f32 as f64;
        }
    }

    /// Mean teacher-forced loss over windows and its parameter gradient.
    fn windows_loss_and_grad(&self, windows: &[&[EstimatorSample]], want_grad: bool) -> Result<(f64, usize, Vec<f64>)> {
        let hd = self.config.hidden;
        let b = windows.len();
        let len = windows.iter().map(|w| w.len()).max().unwrap_or(0);
        let in_dim = self.gru.input;
        let (gru, head) = self.split();
        let mut h = Array2::from_shape_fn((b, hd), |(i, j)| windows[i][0].hidden_before[j]);
        let mut caches: Vec<GruCache> = Vec::with_capacity(len);
        let mut hiddens = Vec::with_capacity(len);
        let mut out_grads = Vec::with_capacity(len);
        let mut total = 0.0;
        let mut count = 0usize;
        for t in 0..len {
            let x = Array2::from_shape_fn((b, in_dim), |(i, j)| {
                windows[i].get(t).map_or(0.0, |s| s.input[j])
            });
            let (next, cache) = self.gru.step(gru, x.view(), h.view());
            let out = self.head(next.view());
            let mut g = Array2::<f64>::zeros((b, HEAD_DIM));
            for (i, w) in windows.iter().enumerate() {
                let Some(sample) = w.get(t) else { continue };
                let row = out.row(i);
                let (loss, grad) = head_loss_and_grad(
                    row.as_slice().expect("contiguous"),
                    &sample.previous_truth,
                    &sample.truth,
                    &self.config,
                )
                .ok_or_else(|| Error::EstimatorDivergence("degenerate rotation head output".into()))?;
                total += loss;
                count += 1;
                g.row_mut(i).assign(&ndarray::ArrayView1::from(&grad));
            }
            caches.push(cache);
            hiddens.push(next.clone());
            out_grads.push(g);
            h = next;
        }
        if !total.is_finite() {
            return Err(Error::EstimatorDivergence(format!("non-finite loss {total}")));
        }
        let mut grads = vec![0.0; self.params.len()];
        if want_grad && count > 0 {
            let scale = 1.0 / count as f64;
            let gru_len = self.gru.param_count();
            let (g_gru, g_head) = grads.split_at_mut(gru_len);
            let w = ArrayView2::from_shape((hd, HEAD_DIM), &head[..hd * HEAD_DIM]).expect("head shape");
            let mut dh = Array2::<f64>::zeros((b, hd));
            for t in (0..len).rev() {
                let g = &out_grads[t] * scale;
                let gw = hiddens[t].t().dot(&g);
                for (acc, v) in g_head[..hd * HEAD_DIM].iter_mut().zip(gw.iter()) {
                    *acc += v;
                }
                for (acc, v) in g_head[hd * HEAD_DIM..].iter_mut().zip(g.sum_axis(ndarray::Axis(0)).iter()) {
                    *acc += v;
                }
                dh += &g.dot(&w.t());
                dh = self.gru.step_backward(gru, &caches[t], dh.view(), g_gru);
            }
        }
        Ok((total, count, grads))
    }

    /// Mean teacher-forced loss over the whole buffer.
    pub fn buffer_loss(&self, buffer: &EstimatorBuffer) -> Result<f64> {
        if buffer.is_empty() {
            return Err(Error::Usage("estimator loss on an empty buffer".into()));
        }
        let windows = buffer.windows(self.config.tbptt_window);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in windows.chunks(self.config.minibatch_windows) {
            let (loss, n, _) = self.windows_loss_and_grad(chunk, false)?;
            total += loss;
            count += n;
        }
        Ok(total / count as f64)
    }
}

pub struct EstimatorTrainer {
    pub adam: Adam,
}

impl EstimatorTrainer {
    pub fn new(estimator: &Estimator) -> Self {
        EstimatorTrainer {
            adam: Adam::new(estimator.params.len(), estimator.config.learning_rate),
        }
    }
}

/// Supervised update of the estimator on the rollout buffer. The policy is
/// not touched: no gradient flows from the policy loss into the estimator
/// or back.
pub fn ecrl_step<R: Rng + ?Sized>(
    estimator: &mut Estimator,
    trainer: &mut EstimatorTrainer,
    buffer: &EstimatorBuffer,
    rng: &mut R,
) -> Result<EstimatorStats> {
    if buffer.is_empty() {
        return Err(Error::Usage("ecrl_step needs a non-empty experience buffer".into()));
    }
    let mut windows = buffer.windows(estimator.config.tbptt_window);
    let mut stats = EstimatorStats::default();
    for _ in 0..estimator.config.epochs {
        windows.shuffle(rng);
        stats = EstimatorStats::default();
        for chunk in windows.chunks(estimator.config.minibatch_windows) {
            let (loss, n, mut grads) = estimator.windows_loss_and_grad(chunk, true)?;
            let norm = clip_grad_norm(&mut grads, estimator.config.max_grad_norm);
            if !norm.is_finite() {
                return Err(Error::EstimatorDivergence(format!("gradient norm {norm}")));
            }
            trainer.adam.step(&mut estimator.params, &grads);
            stats.loss += loss;
            stats.samples += n;
        }
        stats.loss /= stats.samples.max(1) as f64;
    }
    Ok(stats)
}

/// Runs the estimator open-loop along a recorded sequence from a known
/// initial pose and returns the per-step geodesic errors.
pub fn rollout_errors(estimator: &Estimator, initial: Pose, samples: &[(Vec<f64>, Pose)]) -> Result<Vec<f64>> {
    let mut carry = EstimatorCarry::seeded(estimator.config.hidden, initial);
    let mut errors = Vec::with_capacity(samples.len());
    for (input, truth) in samples {
        carry = estimator.estimator_step(&carry, input)?;
        errors.push(geodesic_distance_unchecked(&carry.pose.orientation, &truth.orientation));
    }
    Ok(errors)
}
