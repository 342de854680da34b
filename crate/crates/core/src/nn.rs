//! Small dense networks with hand-written backward passes: a tanh MLP, a
//! gated recurrent cell, Adam, and a running observation normalizer.
//!
//! Parameters live in flat `Vec<f64>` buffers; layouts only describe how to
//! slice them. Batches are row-major `(batch, features)` matrices.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

/// Fully connected network; tanh on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

pub struct MlpCache {
    /// Input followed by the post-activation output of every layer.
    pub activations: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("non-empty cache")
    }
}

impl MlpLayout {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        MlpLayout {
            sizes,
            activation: Activation::Tanh,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty layout")
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let start = offset;
            offset += w[0] * w[1] + w[1];
            (start, w[0], w[1])
        })
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Gaussian init with variance `1 / fan_in`; the last layer is scaled by
    /// `output_gain`. Biases start at zero.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, output_gain: f64) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count()];
        let n_layers = self.sizes.len() - 1;
        for (li, (start, fan_in, fan_out)) in self.layers().enumerate() {
            let gain = if li + 1 == n_layers { output_gain } else { 1.0 };
            let std = gain / (fan_in as f64).sqrt();
            for w in &mut params[start..start + fan_in * fan_out] {
                let n: f64 = StandardNormal.sample(rng);
                *w = n * std;
            }
        }
        params
    }

    /// Offset of the output layer bias inside the flat parameter vector.
    pub fn output_bias_offset(&self) -> usize {
        let (start, fan_in, fan_out) = self.layers().last().expect("non-empty layout");
        start + fan_in * fan_out
    }

    pub fn forward(&self, params: &[f64], input: ArrayView2<f64>) -> MlpCache {
        assert_eq!(params.len(), self.param_count(), "parameter count mismatch");
        assert_eq!(input.ncols(), self.input_dim(), "input width mismatch");
        let n_layers = self.sizes.len() - 1;
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(input.to_owned());
        for (li, (start, fan_in, fan_out)) in self.layers().enumerate() {
            let w = ArrayView2::from_shape((fan_in, fan_out), &params[start..start + fan_in * fan_out])
                .expect("layer shape");
            let b = ArrayView1::from(&params[start + fan_in * fan_out..start + fan_in * fan_out + fan_out]);
            let mut out = activations[li].dot(&w);
            out += &b;
            if li + 1 < n_layers {
                out.mapv_inplace(f64::tanh);
            }
            activations.push(out);
        }
        MlpCache { activations }
    }

    pub fn predict(&self, params: &[f64], input: ArrayView2<f64>) -> Array2<f64> {
        let mut cache = self.forward(params, input);
        cache.activations.pop().expect("non-empty cache")
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        grad_output: Array2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        assert_eq!(grads.len(), self.param_count(), "gradient buffer mismatch");
        let layers: Vec<_> = self.layers().collect();
        let n_layers = layers.len();
        let mut delta = grad_output;
        for li in (0..n_layers).rev() {
            let (start, fan_in, fan_out) = layers[li];
            if li + 1 < n_layers {
                // d tanh = 1 - y^2
                let y = &cache.activations[li + 1];
                ndarray::Zip::from(&mut delta)
                    .and(y)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
            }
            let x = &cache.activations[li];
            let gw = x.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            let wlen = fan_in * fan_out;
            for (g, v) in grads[start..start + wlen].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            for (g, v) in grads[start + wlen..start + wlen + fan_out]
                .iter_mut()
                .zip(gb.iter())
            {
                *g += v;
            }
            let w = ArrayView2::from_shape((fan_in, fan_out), &params[start..start + wlen])
                .expect("layer shape");
            delta = delta.dot(&w.t());
        }
        delta
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gated recurrent cell:
/// `z = σ(xWz + hUz + bz)`, `r = σ(xWr + hUr + br)`,
/// `n = tanh(xWn + r ⊙ (hUn) + bn)`, `h' = (1 - z) ⊙ n + z ⊙ h`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruLayout {
    pub input: usize,
    pub hidden: usize,
}

pub struct GruCache {
    x: Array2<f64>,
    h: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    n: Array2<f64>,
    hu_n: Array2<f64>,
}

impl GruLayout {
    pub fn param_count(&self) -> usize {
        let h3 = 3 * self.hidden;
        self.input * h3 + self.hidden * h3 + h3
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let h3 = 3 * self.hidden;
        let w = 0;
        let u = self.input * h3;
        let b = u + self.hidden * h3;
        (w, u, b)
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count()];
        let (w, u, b) = self.offsets();
        let std_w = 1.0 / (self.input as f64).sqrt();
        let std_u = 1.0 / (self.hidden as f64).sqrt();
        for v in &mut params[w..u] {
            let n: f64 = StandardNormal.sample(rng);
            *v = n * std_w;
        }
        for v in &mut params[u..b] {
            let n: f64 = StandardNormal.sample(rng);
            *v = n * std_u;
        }
        params
    }

    pub fn step(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        h: ArrayView2<f64>,
    ) -> (Array2<f64>, GruCache) {
        assert_eq!(params.len(), self.param_count(), "parameter count mismatch");
        let hd = self.hidden;
        let (wo, uo, bo) = self.offsets();
        let w = ArrayView2::from_shape((self.input, 3 * hd), &params[wo..uo]).expect("W shape");
        let u = ArrayView2::from_shape((hd, 3 * hd), &params[uo..bo]).expect("U shape");
        let b = ArrayView1::from(&params[bo..bo + 3 * hd]);
        let mut xa = x.dot(&w);
        xa += &b;
        let ha = h.dot(&u);
        let z = (&xa.slice(s![.., 0..hd]) + &ha.slice(s![.., 0..hd])).mapv(sigmoid);
        let r = (&xa.slice(s![.., hd..2 * hd]) + &ha.slice(s![.., hd..2 * hd])).mapv(sigmoid);
        let hu_n = ha.slice(s![.., 2 * hd..]).to_owned();
        let n = (&xa.slice(s![.., 2 * hd..]) + &(&r * &hu_n)).mapv(f64::tanh);
        let h_next = &n + &(&z * &(&h - &n));
        let cache = GruCache {
            x: x.to_owned(),
            h: h.to_owned(),
            z,
            r,
            n,
            hu_n,
        };
        (h_next, cache)
    }

    /// Backward through one step. Accumulates parameter gradients and
    /// returns the gradient with respect to the previous hidden state.
    pub fn step_backward(
        &self,
        params: &[f64],
        cache: &GruCache,
        grad_h_next: ArrayView2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let hd = self.hidden;
        let (wo, uo, bo) = self.offsets();
        let u = ArrayView2::from_shape((hd, 3 * hd), &params[uo..bo]).expect("U shape");
        let GruCache {
            x,
            h,
            z,
            r,
            n,
            hu_n,
        } = cache;
        let dn = &grad_h_next * &z.mapv(|v| 1.0 - v);
        let dz = &grad_h_next * &(h - n);
        let mut dh = &grad_h_next * z;
        let da_n = &dn * &n.mapv(|v| 1.0 - v * v);
        let dr = &da_n * hu_n;
        let dhu_n = &da_n * r;
        let da_r = &dr * &r.mapv(|v| v * (1.0 - v));
        let da_z = &dz * &z.mapv(|v| v * (1.0 - v));

        let rows = x.nrows();
        let mut da_x = Array2::<f64>::zeros((rows, 3 * hd));
        da_x.slice_mut(s![.., 0..hd]).assign(&da_z);
        da_x.slice_mut(s![.., hd..2 * hd]).assign(&da_r);
        da_x.slice_mut(s![.., 2 * hd..]).assign(&da_n);
        let mut da_h = da_x.clone();
        da_h.slice_mut(s![.., 2 * hd..]).assign(&dhu_n);

        let gw = x.t().dot(&da_x);
        let gu = h.t().dot(&da_h);
        let gb = da_x.sum_axis(Axis(0));
        for (g, v) in grads[wo..uo].iter_mut().zip(gw.iter()) {
            *g += v;
        }
        for (g, v) in grads[uo..bo].iter_mut().zip(gu.iter()) {
            *g += v;
        }
        for (g, v) in grads[bo..bo + 3 * hd].iter_mut().zip(gb.iter()) {
            *g += v;
        }
        dh += &da_h.dot(&u.t());
        dh
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer size mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Scales `grads` so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

/// Running per-feature mean and variance (parallel Welford update).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningMeanStd {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
    pub clip: f64,
}

impl RunningMeanStd {
    pub fn new(dim: usize) -> Self {
        RunningMeanStd {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 1e-4,
            clip: 10.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, batch: ArrayView2<f64>) {
        let n = batch.nrows() as f64;
        if n == 0.0 {
            return;
        }
        let batch_mean: Array1<f64> = batch.mean_axis(Axis(0)).expect("non-empty batch");
        let batch_var: Array1<f64> = batch.var_axis(Axis(0), 0.0);
        let total = self.count + n;
        for i in 0..self.mean.len() {
            let delta = batch_mean[i] - self.mean[i];
            let m_a = self.var[i] * self.count;
            let m_b = batch_var[i] * n;
            let m2 = m_a + m_b + delta * delta * self.count * n / total;
            self.mean[i] += delta * n / total;
            self.var[i] = m2 / total;
        }
        self.count = total;
    }

    pub fn normalize_row(&self, row: &mut [f64]) {
        for ((v, m), var) in row.iter_mut().zip(&self.mean).zip(&self.var) {
            *v = ((*v - m) / (var + 1e-8).sqrt()).clamp(-self.clip, self.clip);
        }
    }

    pub fn normalize(&self, batch: &mut Array2<f64>) {
        for mut row in batch.rows_mut() {
            let slice = row.as_slice_mut().expect("contiguous rows");
            self.normalize_row(slice);
        }
    }
}
