//! Minimal dense-network toolkit in `f64`: named parameter sets, LSTM cell
//! forward/backward, softmax helpers and the AdamW optimizer.

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered, named collection of 2-D tensors. Biases are stored as `1 × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub values: Vec<Array2<f64>>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct StoredTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Params {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, value: Array2<f64>) -> usize {
        self.names.push(name.to_string());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| v.fill(0.0));
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().flat_map(|v| v.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| v.mapv_inplace(|x| x * s));
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Row `i` of a `1 × n` bias tensor.
    pub fn bias(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values[i].row(0)
    }

    pub(crate) fn to_stored(&self) -> Vec<StoredTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| StoredTensor {
                name: n.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
                data: v.iter().copied().collect(),
            })
            .collect()
    }

    /// Restore values into a parameter set with the same layout.
    pub(crate) fn load_stored(&mut self, stored: Vec<StoredTensor>) -> Result<()> {
        if stored.len() != self.values.len() {
            return Err(Error::format("checkpoint", "parameter count mismatch"));
        }
        for (i, t) in stored.into_iter().enumerate() {
            if t.name != self.names[i] || (t.rows, t.cols) != self.values[i].dim() {
                return Err(Error::format("checkpoint", format!("tensor {} has wrong name or shape", t.name)));
            }
            self.values[i] = Array2::from_shape_vec((t.rows, t.cols), t.data)
                .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        }
        Ok(())
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Uniform `[-scale, scale]` initialization.
pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..=scale))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - lse)
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    log_softmax(logits).mapv(f64::exp)
}

/// `acc += aᵀ·b` for row vectors `a` (m) and `b` (n).
pub fn add_outer(acc: &mut Array2<f64>, a: &ArrayView1<f64>, b: &ArrayView1<f64>) {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    general_mat_mul(1.0, &a2, &b2, 1.0, acc);
}

/// Inverted-dropout mask (entries 0 or `1/(1-p)`), or all ones when `rng` is `None`.
pub fn dropout_mask<R: Rng>(n: usize, p: f64, rng: Option<&mut R>) -> Array1<f64> {
    match rng {
        Some(r) if p > 0.0 => Array1::from_shape_fn(n, |_| if r.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) }),
        _ => Array1::ones(n),
    }
}

/// Indices of one LSTM cell's tensors in a [`Params`] set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmIdx {
    pub wx: usize,
    pub wh: usize,
    pub b: usize,
}

impl LstmIdx {
    /// Register an LSTM cell; gate order is input, forget, cell, output.
    /// The forget-gate bias starts at 1.
    pub fn register<R: Rng>(params: &mut Params, rng: &mut R, prefix: &str, input: usize, hidden: usize) -> Self {
        let s = 1.0 / (hidden as f64).sqrt();
        let wx = params.push(&format!("{prefix}.wx"), uniform(rng, input, 4 * hidden, s));
        let wh = params.push(&format!("{prefix}.wh"), uniform(rng, hidden, 4 * hidden, s));
        let mut bias = Array2::zeros((1, 4 * hidden));
        bias.slice_mut(ndarray::s![0, hidden..2 * hidden]).fill(1.0);
        let b = params.push(&format!("{prefix}.b"), bias);
        Self { wx, wh, b }
    }
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    pub x: Array1<f64>,
    pub h_prev: Array1<f64>,
    pub c_prev: Array1<f64>,
    pub i: Array1<f64>,
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub o: Array1<f64>,
    pub tanh_c: Array1<f64>,
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

pub fn lstm_forward(p: &Params, idx: LstmIdx, x: Array1<f64>, h_prev: Array1<f64>, c_prev: Array1<f64>) -> LstmCache {
    let hidden = h_prev.len();
    let gates = x.dot(&p.values[idx.wx]) + h_prev.dot(&p.values[idx.wh]) + p.bias(idx.b);
    let i = gates.slice(ndarray::s![0..hidden]).mapv(sigmoid);
    let f = gates.slice(ndarray::s![hidden..2 * hidden]).mapv(sigmoid);
    let g = gates.slice(ndarray::s![2 * hidden..3 * hidden]).mapv(f64::tanh);
    let o = gates.slice(ndarray::s![3 * hidden..]).mapv(sigmoid);
    let c = &f * &c_prev + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h = &o * &tanh_c;
    LstmCache {
        x,
        h_prev,
        c_prev,
        i,
        f,
        g,
        o,
        tanh_c,
        h,
        c,
    }
}

/// Backpropagate through one LSTM step. Returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_backward(
    p: &Params,
    grads: &mut Params,
    idx: LstmIdx,
    cache: &LstmCache,
    dh: &Array1<f64>,
    dc_next: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let hidden = dh.len();
    let do_ = dh * &cache.tanh_c;
    let dc = dc_next + &(dh * &cache.o * cache.tanh_c.mapv(|t| 1.0 - t * t));
    let di = &dc * &cache.g;
    let dg = &dc * &cache.i;
    let df = &dc * &cache.c_prev;
    let dc_prev = &dc * &cache.f;
    let mut dgates = Array1::zeros(4 * hidden);
    dgates.slice_mut(ndarray::s![0..hidden]).assign(&(&di * &cache.i * cache.i.mapv(|v| 1.0 - v)));
    dgates
        .slice_mut(ndarray::s![hidden..2 * hidden])
        .assign(&(&df * &cache.f * cache.f.mapv(|v| 1.0 - v)));
    dgates
        .slice_mut(ndarray::s![2 * hidden..3 * hidden])
        .assign(&(&dg * cache.g.mapv(|v| 1.0 - v * v)));
    dgates
        .slice_mut(ndarray::s![3 * hidden..])
        .assign(&(&do_ * &cache.o * cache.o.mapv(|v| 1.0 - v)));
    add_outer(&mut grads.values[idx.wx], &cache.x.view(), &dgates.view());
    add_outer(&mut grads.values[idx.wh], &cache.h_prev.view(), &dgates.view());
    grads.values[idx.b].row_mut(0).scaled_add(1.0, &dgates);
    let dx = p.values[idx.wx].dot(&dgates);
    let dh_prev = p.values[idx.wh].dot(&dgates);
    (dx, dh_prev, dc_prev)
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &Params, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like().values,
            v: params.zeros_like().values,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .values
            .iter_mut()
            .zip(&grads.values)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * self.weight_decay * *p;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            });
        }
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Params, max_norm: f64) {
    let n = grads.norm();
    if n > max_norm && n.is_finite() {
        grads.scale(max_norm / n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::new();
        let idx = LstmIdx::register(&mut p, &mut rng, "cell", 3, 4);
        let x = Array1::from(vec![0.3, -0.2, 0.9]);
        let h0 = Array1::from(vec![0.1, 0.0, -0.4, 0.2]);
        let c0 = Array1::from(vec![-0.3, 0.5, 0.1, 0.0]);
        let w = Array1::from(vec![0.7, -1.1, 0.4, 0.9]);
        // loss = w·h + 0.5·|c|²
        let loss = |p: &Params| {
            let c = lstm_forward(p, idx, x.clone(), h0.clone(), c0.clone());
            w.dot(&c.h) + 0.5 * c.c.dot(&c.c)
        };
        let cache = lstm_forward(&p, idx, x.clone(), h0.clone(), c0.clone());
        let mut grads = p.zeros_like();
        lstm_backward(&p, &mut grads, idx, &cache, &w, &cache.c.clone());
        for t in 0..p.values.len() {
            for j in 0..p.values[t].len() {
                let mut plus = p.clone();
                plus.values[t].as_slice_mut().unwrap()[j] += 1e-6;
                let mut minus = p.clone();
                minus.values[t].as_slice_mut().unwrap()[j] -= 1e-6;
                let fd = (loss(&plus) - loss(&minus)) / 2e-6;
                let an = grads.values[t].as_slice().unwrap()[j];
                assert!((fd - an).abs() < 1e-7 * (1.0 + fd.abs()), "{} [{j}]: {fd} vs {an}", p.names[t]);
            }
        }
    }

    #[test]
    fn adamw_decreases_quadratic() {
        let mut p = Params::new();
        p.push("w", Array2::from_elem((1, 2), 3.0));
        let mut opt = AdamW::new(&p, 0.1, 0.0);
        for _ in 0..200 {
            let g = Params {
                names: p.names.clone(),
                values: vec![p.values[0].mapv(|v| 2.0 * v)],
            };
            opt.step(&mut p, &g);
        }
        assert!(p.values[0].iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn log_softmax_normalizes() {
        let l = log_softmax(&Array1::from(vec![1.0, 2.0, 3.0, 1000.0]));
        assert!((l.mapv(f64::exp).sum() - 1.0).abs() < 1e-12);
    }
}
