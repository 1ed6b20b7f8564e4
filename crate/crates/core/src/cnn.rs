//! A small convolutional image classifier with unit ablation.
//!
//! `conv1 (3×3) → relu → maxpool 2 → conv2 (3×3) → relu → global max → linear`.
//! Units are the post-relu channels of `conv1` and `conv2`; ablating a unit
//! zeroes its channel everywhere before pooling.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{Grid, RgbImage};
use crate::model::{ActivationSource, Classifier, LabeledSet, LayerInfo};
use crate::neuron::UnitSet;

pub const CNN_CHECKPOINT_VERSION: u32 = 1;
pub const CONV1: &str = "conv1";
pub const CONV2: &str = "conv2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub input_size: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub classes: usize,
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.input_size >= 4 && self.input_size % 4 == 0, || "input size must be a positive multiple of 4".into())?;
        ensure(self.conv1_channels > 0 && self.conv2_channels > 0 && self.classes >= 2, || {
            "channel counts must be positive and classes ≥ 2".into()
        })
    }

    fn flat_dim(&self) -> usize {
        self.conv2_channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CnnParams {
    w1: Array2<f32>,
    b1: Array1<f32>,
    w2: Array2<f32>,
    b2: Array1<f32>,
    wf: Array2<f32>,
    bf: Array1<f32>,
}

impl CnnParams {
    fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
            wf: Array2::zeros(self.wf.raw_dim()),
            bf: Array1::zeros(self.bf.raw_dim()),
        }
    }

    fn slices_mut(&mut self) -> [&mut [f32]; 6] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.wf.as_slice_mut().unwrap(),
            self.bf.as_slice_mut().unwrap(),
        ]
    }

    fn is_finite(&self) -> bool {
        [&self.w1, &self.w2, &self.wf].iter().all(|w| w.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallCnn {
    pub model_id: String,
    pub config: CnnConfig,
    params: CnnParams,
}

/// Per-batch forward values kept for the backward pass.
struct Forward {
    n: usize,
    col1: Array2<f32>,
    a1: Array2<f32>,
    arg1: Vec<usize>,
    col2: Array2<f32>,
    a2: Array2<f32>,
    arg2: Vec<usize>,
    flat: Array2<f32>,
    logits: Array2<f32>,
}

/// `(n·h·w, c)` NHWC rows → `(n·h·w, 9c)` 3×3 patches with zero padding.
fn im2col(x: ArrayView2<f32>, n: usize, h: usize, w: usize) -> Array2<f32> {
    let c = x.ncols();
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let mut out = Array2::<f32>::zeros((n * h * w, 9 * c));
    let o = out.as_slice_mut().unwrap();
    for img in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let base = ((img * h + y) * w + xx) * 9 * c;
                let (x_lo, x_hi) = (xx.saturating_sub(1), (xx + 2).min(w));
                let dx0 = x_lo + 1 - xx;
                let span = (x_hi - x_lo) * c;
                for dy in 0..3 {
                    let Some(sy) = (y + dy).checked_sub(1).filter(|sy| *sy < h) else {
                        continue;
                    };
                    let src = ((img * h + sy) * w + x_lo) * c;
                    let dst = base + (dy * 3 + dx0) * c;
                    o[dst..dst + span].copy_from_slice(&xs[src..src + span]);
                }
            }
        }
    }
    out
}

/// Adjoint of `im2col`.
fn col2im(cols: &Array2<f32>, n: usize, h: usize, w: usize, c: usize) -> Array2<f32> {
    let cs = cols.as_slice().unwrap();
    let mut out = Array2::<f32>::zeros((n * h * w, c));
    let o = out.as_slice_mut().unwrap();
    for img in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let base = ((img * h + y) * w + xx) * 9 * c;
                let (x_lo, x_hi) = (xx.saturating_sub(1), (xx + 2).min(w));
                let dx0 = x_lo + 1 - xx;
                let span = (x_hi - x_lo) * c;
                for dy in 0..3 {
                    let Some(sy) = (y + dy).checked_sub(1).filter(|sy| *sy < h) else {
                        continue;
                    };
                    let dst = ((img * h + sy) * w + x_lo) * c;
                    let src = base + (dy * 3 + dx0) * c;
                    for (a, b) in o[dst..dst + span].iter_mut().zip(&cs[src..src + span]) {
                        *a += *b;
                    }
                }
            }
        }
    }
    out
}

/// 2×2 max pool on NHWC rows; returns pooled rows and source row per output element.
fn maxpool(x: &Array2<f32>, n: usize, h: usize, w: usize) -> (Array2<f32>, Vec<usize>) {
    let c = x.ncols();
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.as_slice().unwrap();
    let mut out = Array2::<f32>::zeros((n * oh * ow, c));
    let mut arg = vec![0usize; n * oh * ow * c];
    let o = out.as_slice_mut().unwrap();
    for img in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let orow = (img * oh + y) * ow + xx;
                for k in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_row = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let r = (img * h + 2 * y + dy) * w + 2 * xx + dx;
                        let v = xs[r * c + k];
                        if v > best {
                            best = v;
                            best_row = r;
                        }
                    }
                    o[orow * c + k] = best;
                    arg[orow * c + k] = best_row;
                }
            }
        }
    }
    (out, arg)
}

/// Per-image channel maxima of NHWC rows, with the source row of each.
fn global_max(x: &Array2<f32>, n: usize) -> (Array2<f32>, Vec<usize>) {
    let c = x.ncols();
    let per = x.nrows() / n;
    let xs = x.as_slice().unwrap();
    let mut out = Array2::<f32>::from_elem((n, c), f32::NEG_INFINITY);
    let mut arg = vec![0usize; n * c];
    let o = out.as_slice_mut().unwrap();
    for r in 0..x.nrows() {
        let img = r / per;
        for k in 0..c {
            let v = xs[r * c + k];
            if v > o[img * c + k] {
                o[img * c + k] = v;
                arg[img * c + k] = r;
            }
        }
    }
    (out, arg)
}

fn unpool(d: &Array2<f32>, arg: &[usize], rows: usize) -> Array2<f32> {
    let c = d.ncols();
    let ds = d.as_slice().unwrap();
    let mut out = Array2::<f32>::zeros((rows, c));
    let o = out.as_slice_mut().unwrap();
    for (i, &r) in arg.iter().enumerate() {
        o[r * c + i % c] += ds[i];
    }
    out
}

/// Normalized NHWC rows for a batch of images.
fn to_rows(images: &[&RgbImage], size: usize) -> Result<Array2<f32>> {
    let mut out = Array2::<f32>::zeros((images.len() * size * size, 3));
    let o = out.as_slice_mut().unwrap();
    for (i, img) in images.iter().enumerate() {
        if img.height != size || img.width != size {
            return Err(Error::Argument(format!(
                "image is {}x{}, classifier expects {size}x{size}",
                img.height, img.width
            )));
        }
        let base = i * size * size * 3;
        for (j, v) in img.data.iter().enumerate() {
            o[base + j] = (*v as f32 / 255.0 - 0.5) * 4.0;
        }
    }
    Ok(out)
}

fn channel_mask(channels: usize, layer: &str, ablated: &UnitSet) -> Option<Array1<f32>> {
    let mut m = Array1::<f32>::ones(channels);
    let mut any = false;
    for u in ablated.iter().filter(|u| u.layer == layer) {
        if u.unit < channels {
            m[u.unit] = 0.0;
            any = true;
        }
    }
    any.then_some(m)
}

impl SmallCnn {
    pub fn new(model_id: impl Into<String>, config: CnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |rows: usize, cols: usize| {
            let bound = (6.0 / rows as f32).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        let params = CnnParams {
            w1: he(27, config.conv1_channels),
            b1: Array1::zeros(config.conv1_channels),
            w2: he(9 * config.conv1_channels, config.conv2_channels),
            b2: Array1::zeros(config.conv2_channels),
            wf: he(config.flat_dim(), config.classes) * 0.5,
            bf: Array1::zeros(config.classes),
        };
        Ok(Self {
            model_id: model_id.into(),
            config,
            params,
        })
    }

    fn forward(&self, images: &[&RgbImage], ablated: &UnitSet) -> Result<Forward> {
        let (s1, p) = (self.config.input_size, &self.params);
        let n = images.len();
        let x = to_rows(images, s1)?;
        let col1 = im2col(x.view(), n, s1, s1);
        let mut a1 = col1.dot(&p.w1) + &p.b1;
        a1.mapv_inplace(|v| v.max(0.0));
        if let Some(m) = channel_mask(self.config.conv1_channels, CONV1, ablated) {
            a1 *= &m;
        }
        let (p1, arg1) = maxpool(&a1, n, s1, s1);
        let s2 = s1 / 2;
        let col2 = im2col(p1.view(), n, s2, s2);
        let mut a2 = col2.dot(&p.w2) + &p.b2;
        a2.mapv_inplace(|v| v.max(0.0));
        if let Some(m) = channel_mask(self.config.conv2_channels, CONV2, ablated) {
            a2 *= &m;
        }
        let (flat, arg2) = global_max(&a2, n);
        let logits = flat.dot(&p.wf) + &p.bf;
        Ok(Forward {
            n,
            col1,
            a1,
            arg1,
            col2,
            a2,
            arg2,
            flat,
            logits,
        })
    }

    /// Mean cross-entropy and its gradient.
    fn backward(&self, f: &Forward, labels: &[usize], ablated: &UnitSet) -> (f32, CnnParams) {
        let p = &self.params;
        let (n, s1) = (f.n, self.config.input_size);
        let s2 = s1 / 2;
        let mut dlogits = f.logits.clone();
        let mut loss = 0.0f32;
        for (i, mut row) in dlogits.rows_mut().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row /= z;
            loss -= row[labels[i]].max(1e-30).ln();
            row[labels[i]] -= 1.0;
        }
        dlogits /= n as f32;
        let mut g = p.zeros_like();
        g.wf = f.flat.t().dot(&dlogits);
        g.bf = dlogits.sum_axis(Axis(0));
        let dflat = dlogits.dot(&p.wf.t());
        let mut dz2 = unpool(&dflat, &f.arg2, n * s2 * s2);
        dz2.zip_mut_with(&f.a2, |d, a| {
            if *a <= 0.0 {
                *d = 0.0
            }
        });
        if let Some(m) = channel_mask(self.config.conv2_channels, CONV2, ablated) {
            dz2 *= &m;
        }
        g.w2 = f.col2.t().dot(&dz2);
        g.b2 = dz2.sum_axis(Axis(0));
        let dcol2 = dz2.dot(&p.w2.t());
        let dp1 = col2im(&dcol2, n, s2, s2, self.config.conv1_channels);
        let mut dz1 = unpool(&dp1, &f.arg1, n * s1 * s1);
        dz1.zip_mut_with(&f.a1, |d, a| {
            if *a <= 0.0 {
                *d = 0.0
            }
        });
        if let Some(m) = channel_mask(self.config.conv1_channels, CONV1, ablated) {
            dz1 *= &m;
        }
        g.w1 = f.col1.t().dot(&dz1);
        g.b1 = dz1.sum_axis(Axis(0));
        (loss / n as f32, g)
    }

    /// Class logits for a batch.
    pub fn logits(&self, images: &[RgbImage], ablated: &UnitSet) -> Result<Array2<f32>> {
        let mut out = Array2::zeros((0, self.config.classes));
        for chunk in images.chunks(PREDICT_BATCH) {
            let refs: Vec<&RgbImage> = chunk.iter().collect();
            let f = self.forward(&refs, ablated)?;
            out.append(Axis(0), f.logits.view()).expect("matching widths");
        }
        Ok(out)
    }

    /// Mean cross-entropy and accuracy on a labeled set.
    pub fn evaluate(&self, set: &LabeledSet, ablated: &UnitSet) -> Result<(f64, f64)> {
        ensure(!set.is_empty(), || "empty evaluation set".into())?;
        self.validate_units(ablated)?;
        let logits = self.logits(&set.images, ablated)?;
        let (mut total, mut correct) = (0.0f64, 0usize);
        for (row, &y) in logits.rows().into_iter().zip(&set.labels) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|v| ((v - m) as f64).exp()).sum::<f64>().ln() + m as f64;
            total += lse - row[y] as f64;
            correct += (argmax(row.iter()) == y) as usize;
        }
        Ok((total / set.len() as f64, correct as f64 / set.len() as f64))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = CnnCheckpoint {
            format_version: CNN_CHECKPOINT_VERSION,
            model_id: self.model_id.clone(),
            config: self.config.clone(),
            params: self.params.clone(),
        };
        fs::write(path, serde_json::to_vec(&ck)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: CnnCheckpoint =
            serde_json::from_slice(&raw).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        if ck.format_version != CNN_CHECKPOINT_VERSION {
            return Err(Error::format(path.display().to_string(), "unsupported classifier checkpoint version"));
        }
        ck.config.validate()?;
        ensure(
            ck.params.w1.dim() == (27, ck.config.conv1_channels)
                && ck.params.w2.dim() == (9 * ck.config.conv1_channels, ck.config.conv2_channels)
                && ck.params.wf.dim() == (ck.config.flat_dim(), ck.config.classes),
            || "classifier checkpoint shapes do not match its config".into(),
        )?;
        Ok(Self {
            model_id: ck.model_id,
            config: ck.config,
            params: ck.params,
        })
    }
}

const PREDICT_BATCH: usize = 256;

/// First index of the maximum.
fn argmax<'a>(v: impl Iterator<Item = &'a f32>) -> usize {
    v.enumerate()
        .fold((0, f32::NEG_INFINITY), |b, (i, x)| if *x > b.1 { (i, *x) } else { b })
        .0
}

#[derive(Serialize, Deserialize)]
struct CnnCheckpoint {
    format_version: u32,
    model_id: String,
    config: CnnConfig,
    params: CnnParams,
}

impl ActivationSource for SmallCnn {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn layers(&self) -> Vec<LayerInfo> {
        self.ablatable_layers()
    }

    fn activations(&self, layer: &str, image: &RgbImage) -> Result<Vec<Grid>> {
        let info = ActivationSource::layer_info(self, layer)?;
        let f = self.forward(&[image], &UnitSet::new())?;
        let (a, side) = if layer == CONV1 {
            (&f.a1, self.config.input_size)
        } else {
            (&f.a2, self.config.input_size / 2)
        };
        (0..info.channels)
            .map(|c| Grid::new(side, side, a.column(c).to_vec()))
            .collect()
    }
}

impl Classifier for SmallCnn {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn ablatable_layers(&self) -> Vec<LayerInfo> {
        vec![
            LayerInfo {
                id: CONV1.into(),
                channels: self.config.conv1_channels,
            },
            LayerInfo {
                id: CONV2.into(),
                channels: self.config.conv2_channels,
            },
        ]
    }

    fn predict(&self, images: &[RgbImage], ablated: &UnitSet) -> Result<Vec<usize>> {
        self.validate_units(ablated)?;
        let logits = self.logits(images, ablated)?;
        Ok(logits.rows().into_iter().map(|r| argmax(r.iter())).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnTrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for CnnTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 128,
            max_epochs: 100,
            patience: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Adam training with early stopping on validation loss; returns the best checkpoint.
pub fn train_cnn(model: &mut SmallCnn, train: &LabeledSet, val: &LabeledSet, cfg: &CnnTrainConfig) -> Result<Vec<CnnEpoch>> {
    ensure(!train.is_empty() && !val.is_empty(), || "train and validation sets must be non-empty".into())?;
    ensure(cfg.batch_size > 0 && cfg.max_epochs > 0, || "batch size and epochs must be positive".into())?;
    ensure(train.labels.iter().chain(&val.labels).all(|y| *y < model.config.classes), || {
        "label out of range".into()
    })?;
    let none = UnitSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m = model.params.zeros_like();
    let mut v = model.params.zeros_like();
    let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
    let mut t = 0i32;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, CnnParams)> = None;
    let mut stale = 0;
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let imgs: Vec<&RgbImage> = batch.iter().map(|&i| &train.images[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let f = model.forward(&imgs, &none)?;
            let (loss, mut g) = model.backward(&f, &labels, &none);
            loss_sum += loss as f64 * batch.len() as f64;
            t += 1;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            let lr = cfg.learning_rate;
            for ((p, gs), (ms, vs)) in model
                .params
                .slices_mut()
                .into_iter()
                .zip(g.slices_mut())
                .zip(m.slices_mut().into_iter().zip(v.slices_mut()))
            {
                for i in 0..p.len() {
                    ms[i] = b1 * ms[i] + (1.0 - b1) * gs[i];
                    vs[i] = b2 * vs[i] + (1.0 - b2) * gs[i] * gs[i];
                    p[i] -= lr * (ms[i] / c1) / ((vs[i] / c2).sqrt() + eps);
                }
            }
        }
        if !model.params.is_finite() {
            return Err(Error::Training(format!("classifier diverged at epoch {epoch}")));
        }
        let (val_loss, val_accuracy) = model.evaluate(val, &none)?;
        history.push(CnnEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_accuracy,
        });
        tracing::debug!(epoch, val_loss, val_accuracy, "classifier epoch");
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.params = best.expect("one epoch ran").1;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::accuracy;
    use crate::neuron::UnitId;

    fn tiny() -> SmallCnn {
        let cfg = CnnConfig {
            input_size: 8,
            conv1_channels: 2,
            conv2_channels: 3,
            classes: 3,
        };
        SmallCnn::new("tiny", cfg, 1).unwrap()
    }

    fn img(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::new(8, 8, (0..192).map(|_| rng.random()).collect()).unwrap()
    }

    fn loss_at(model: &SmallCnn, imgs: &[&RgbImage], labels: &[usize], ablated: &UnitSet) -> f64 {
        let f = model.forward(imgs, ablated).unwrap();
        model.backward(&f, labels, ablated).0 as f64
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = tiny();
        let images: Vec<RgbImage> = (0..3).map(img).collect();
        let refs: Vec<&RgbImage> = images.iter().collect();
        let labels = [0, 2, 1];
        let ablated: UnitSet = [UnitId::new(CONV2, 1)].into_iter().collect();
        let f = model.forward(&refs, &ablated).unwrap();
        let (_, mut g) = model.backward(&f, &labels, &ablated);
        let grads: Vec<Vec<f32>> = g.slices_mut().iter().map(|s| s.to_vec()).collect();
        let h = 1e-3f32;
        for (t, grad) in grads.iter().enumerate() {
            for j in (0..grad.len()).step_by(7) {
                let mut plus = model.clone();
                plus.params.slices_mut()[t][j] += h;
                let mut minus = model.clone();
                minus.params.slices_mut()[t][j] -= h;
                let fd = (loss_at(&plus, &refs, &labels, &ablated) - loss_at(&minus, &refs, &labels, &ablated)) / (2.0 * h as f64);
                let an = grad[j] as f64;
                assert!((fd - an).abs() < 2e-3 + 0.05 * an.abs(), "tensor {t}[{j}] fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn ablation_zeroes_channels_and_composes() {
        let model = tiny();
        let images: Vec<RgbImage> = (0..4).map(img).collect();
        let none = UnitSet::new();
        let base = model.logits(&images, &none).unwrap();
        assert_eq!(base, model.logits(&images, &none).unwrap());
        let u: UnitSet = [UnitId::new(CONV1, 0)].into_iter().collect();
        let v: UnitSet = [UnitId::new(CONV2, 2)].into_iter().collect();
        let uv: UnitSet = u.union(&v).cloned().collect();
        let refs: Vec<&RgbImage> = images.iter().collect();
        let f = model.forward(&refs, &uv).unwrap();
        assert!(f.a1.column(0).iter().all(|x| *x == 0.0));
        assert!(f.a2.column(2).iter().all(|x| *x == 0.0));
        let bad: UnitSet = [UnitId::new(CONV2, 9)].into_iter().collect();
        assert!(model.predict(&images, &bad).is_err());
        assert_eq!(model.activations(CONV2, &images[0]).unwrap().len(), 3);
        assert_eq!(model.activations(CONV1, &images[0]).unwrap()[0].height, 8);
    }

    #[test]
    fn im2col_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_fn((2 * 4 * 4, 3), |_| rng.random_range(-1.0f32..1.0));
        let y = Array2::from_shape_fn((2 * 4 * 4, 27), |_| rng.random_range(-1.0f32..1.0));
        let lhs = (&im2col(x.view(), 2, 4, 4) * &y).sum();
        let rhs = (&x * &col2im(&y, 2, 4, 4, 3)).sum();
        assert!((lhs - rhs).abs() < 1e-3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cnn.json");
        model.save(&p).unwrap();
        assert_eq!(SmallCnn::load(&p).unwrap(), model);
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        let mut model = tiny();
        let make = |n: usize, seed: u64| {
            let mut set = LabeledSet::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..n {
                let y = rng.random_range(0..3usize);
                let mut im = RgbImage::filled(8, 8, [0, 0, 0]);
                for yy in 0..8 {
                    for xx in 0..8 {
                        let mut px = [rng.random_range(0..40u8); 3];
                        px[y] = 200;
                        im.set_pixel(yy, xx, px);
                    }
                }
                set.push(im, y);
            }
            set
        };
        let (train, val) = (make(96, 1), make(30, 2));
        let cfg = CnnTrainConfig {
            learning_rate: 1e-2,
            batch_size: 16,
            max_epochs: 15,
            patience: 15,
            seed: 0,
        };
        train_cnn(&mut model, &train, &val, &cfg).unwrap();
        assert!(accuracy(&model, &val, &UnitSet::new()).unwrap() > 0.9);
    }
}
