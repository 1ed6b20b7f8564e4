//! Mask-weighted pooling of multi-layer backbone features: each exemplar
//! image becomes one vector, the concatenation over backbone layers of the
//! per-channel spatial sums of `resampled mask ⊙ feature map`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dissect::ExemplarSet;
use crate::error::{ensure, Error, Result};
use crate::image::{Grid, Mask, RgbImage};
use crate::model::LayerInfo;
use crate::neuron::NeuronRef;

/// Channel-major feature map of one backbone layer, layout `[c][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure(data.len() == channels * height * width, || {
            format!("feature map length {} != {channels}x{height}x{width}", data.len())
        })?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub backbone_id: String,
    pub layers: Vec<LayerInfo>,
}

impl BackboneSpec {
    pub fn new(backbone_id: impl Into<String>, layers: Vec<LayerInfo>) -> Result<Self> {
        ensure(!layers.is_empty(), || "backbone needs at least one layer".into())?;
        ensure(layers.iter().all(|l| l.channels >= 1), || "every layer needs a channel".into())?;
        Ok(Self {
            backbone_id: backbone_id.into(),
            layers,
        })
    }

    /// Feature vector length, the sum of layer widths.
    pub fn dim(&self) -> usize {
        self.layers.iter().map(|l| l.channels).sum()
    }

    /// Layer widths of the first convolution and the four residual stages of
    /// a 101-layer bottleneck residual network.
    pub fn resnet101_reference() -> Self {
        let layers = [("conv1", 64), ("layer1", 256), ("layer2", 512), ("layer3", 1024), ("layer4", 2048)]
            .into_iter()
            .map(|(id, channels)| LayerInfo {
                id: id.into(),
                channels,
            })
            .collect();
        Self {
            backbone_id: "resnet101".into(),
            layers,
        }
    }
}

/// A frozen convolutional feature extractor.
pub trait Backbone: Sync {
    fn spec(&self) -> &BackboneSpec;
    fn input_size(&self) -> usize;
    /// Stage outputs in layer order; must be deterministic.
    fn forward(&self, image: &RgbImage) -> Result<Vec<FeatureMap>>;
}

/// Bilinearly resample a binary mask to a feature grid; values stay in `[0, 1]`.
pub fn resample_mask(mask: &Mask, target: (usize, usize)) -> Result<Grid> {
    ensure(target.0 > 0 && target.1 > 0, || format!("zero-area target {:?}", target))?;
    mask.to_grid().resize_bilinear(target.0, target.1)
}

/// Per-channel spatial sum of `mask ⊙ features`.
pub fn masked_pool(features: &FeatureMap, mask: &Grid) -> Result<Vec<f32>> {
    ensure(features.height == mask.height && features.width == mask.width, || {
        format!(
            "mask {}x{} does not match features {}x{}",
            mask.height, mask.width, features.height, features.width
        )
    })?;
    Ok((0..features.channels)
        .map(|c| features.channel(c).iter().zip(&mask.data).map(|(f, m)| f * m).sum())
        .collect())
}

/// One pooled vector per image: masked pools of every backbone layer, concatenated.
pub fn encode_image<B: Backbone + ?Sized>(backbone: &B, image: &RgbImage, mask: &Mask) -> Result<Vec<f32>> {
    let side = backbone.input_size();
    ensure(image.height == side && image.width == side, || {
        format!("image {}x{} is not at backbone resolution {side}", image.height, image.width)
    })?;
    let maps = backbone.forward(image).map_err(|e| match e {
        Error::Encoder(_) => e,
        other => Error::Encoder(other.to_string()),
    })?;
    let spec = backbone.spec();
    ensure(maps.len() == spec.layers.len(), || "backbone layer count mismatch".into())?;
    let mut out = Vec::with_capacity(spec.dim());
    for (map, layer) in maps.iter().zip(&spec.layers) {
        if map.channels != layer.channels {
            return Err(Error::Encoder(format!("layer {} produced {} channels", layer.id, map.channels)));
        }
        let m = resample_mask(mask, (map.height, map.width))?;
        out.extend(masked_pool(map, &m)?);
    }
    Ok(out)
}

/// The k pooled exemplar vectors of one neuron and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub neuron: NeuronRef,
    pub backbone_id: String,
    pub vectors: Vec<Vec<f32>>,
    pub mean: Vec<f32>,
}

impl FeatureBundle {
    pub fn from_vectors(neuron: NeuronRef, backbone_id: impl Into<String>, vectors: Vec<Vec<f32>>) -> Result<Self> {
        ensure(!vectors.is_empty(), || "bundle needs at least one vector".into())?;
        let dim = vectors[0].len();
        ensure(vectors.iter().all(|v| v.len() == dim), || "ragged bundle".into())?;
        ensure(vectors.iter().flatten().all(|v| v.is_finite()), || {
            format!("non-finite feature in bundle for {neuron}")
        })?;
        let mut mean = vec![0f64; dim];
        for v in &vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += *x as f64;
            }
        }
        let k = vectors.len() as f64;
        let mean = mean.into_iter().map(|m| (m / k) as f32).collect();
        Ok(Self {
            neuron,
            backbone_id: backbone_id.into(),
            vectors,
            mean,
        })
    }

    pub fn k(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn encode_set<B: Backbone + ?Sized>(backbone: &B, set: &ExemplarSet) -> Result<FeatureBundle> {
    ensure(set.is_complete(), || format!("exemplar set for {} is incomplete", set.neuron))?;
    let vectors = set
        .images
        .iter()
        .zip(&set.masks)
        .map(|(img, mask)| encode_image(backbone, img, mask))
        .collect::<Result<Vec<_>>>()?;
    FeatureBundle::from_vectors(set.neuron.clone(), backbone.spec().backbone_id.clone(), vectors)
}

const CACHE_MAGIC: &[u8; 6] = b"NDFB1\n";

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    model_id: String,
    layer_id: String,
    unit: usize,
    k: usize,
    dim: usize,
    backbone_id: String,
}

/// Write bundles as `magic, { u32 header length, JSON header, k·dim f32 LE }*`.
pub fn write_bundle_cache(path: &Path, bundles: &[FeatureBundle]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    for b in bundles {
        let header = serde_json::to_vec(&CacheHeader {
            model_id: b.neuron.model_id.clone(),
            layer_id: b.neuron.layer_id.clone(),
            unit: b.neuron.unit,
            k: b.k(),
            dim: b.dim(),
            backbone_id: b.backbone_id.clone(),
        })?;
        w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for v in b.vectors.iter().flatten() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_bundle_cache(path: &Path) -> Result<Vec<FeatureBundle>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let loc = path.display().to_string();
    if !bytes.starts_with(CACHE_MAGIC) {
        return Err(Error::format(loc, "not a feature bundle cache"));
    }
    let mut pos = CACHE_MAGIC.len();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let slice = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| Error::format(path.display().to_string(), "truncated record"))?;
        *pos += n;
        Ok(slice)
    };
    let mut out = Vec::new();
    while pos < bytes.len() {
        let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let header: CacheHeader =
            serde_json::from_slice(take(&mut pos, len)?).map_err(|e| Error::format(loc.clone(), e.to_string()))?;
        let raw = take(&mut pos, header.k * header.dim * 4)?;
        let floats: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let vectors = floats.chunks(header.dim.max(1)).map(<[f32]>::to_vec).collect();
        let neuron = NeuronRef::new(header.model_id, header.layer_id, header.unit);
        out.push(FeatureBundle::from_vectors(neuron, header.backbone_id, vectors)?);
    }
    Ok(out)
}

/// Fixed, hand-designed multi-scale filter bank: color opponency, oriented
/// edge energy and coarse texture statistics. Deterministic and parameter-free.
///
/// Stage outputs are divided by their spatial cell count, so masked pooling
/// yields mask-weighted means rather than raw sums at different scales.
#[derive(Debug, Clone)]
pub struct FilterBankBackbone {
    spec: BackboneSpec,
    input_size: usize,
}

const COLOR_CHANNELS: usize = 8;
const EDGE_CHANNELS: usize = 8;
const TEXTURE_CHANNELS: usize = 8;
const STAGE_GAIN: f32 = 10.0;
const EDGE_GAIN: f32 = 4.0;

impl FilterBankBackbone {
    pub fn new(input_size: usize) -> Self {
        let layers = [("color", COLOR_CHANNELS), ("edges", EDGE_CHANNELS), ("texture", TEXTURE_CHANNELS)]
            .into_iter()
            .map(|(id, channels)| LayerInfo {
                id: id.into(),
                channels,
            })
            .collect();
        Self {
            spec: BackboneSpec {
                backbone_id: format!("filterbank-{input_size}"),
                layers,
            },
            input_size,
        }
    }
}

/// Average pool by an integer factor (floor of size).
fn avg_pool(plane: &[f32], h: usize, w: usize, f: usize) -> (Vec<f32>, usize, usize) {
    let (oh, ow) = ((h / f).max(1), (w / f).max(1));
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh * f.min(h) {
        for x in 0..ow * f.min(w) {
            let (yy, xx) = ((y / f).min(oh - 1), (x / f).min(ow - 1));
            out[yy * ow + xx] += plane[y.min(h - 1) * w + x.min(w - 1)];
        }
    }
    let n = (f * f) as f32;
    out.iter_mut().for_each(|v| *v /= n);
    (out, oh, ow)
}

fn sobel(plane: &[f32], h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    let at = |y: isize, x: isize| plane[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1))
                / 4.0;
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1))
                / 4.0;
        }
    }
    (gx, gy)
}

/// Gradient magnitude tuned to four edge orientations (0°, 45°, 90°, 135°):
/// `|g| · max(0, cos 2(θ − θₖ))²`, so each channel ignores orthogonal and
/// diagonal neighbours.
fn oriented_energy(gx: &[f32], gy: &[f32]) -> [Vec<f32>; 4] {
    let centers = [0.0f32, 45.0, 90.0, 135.0].map(f32::to_radians);
    centers.map(|c| {
        gx.iter()
            .zip(gy)
            .map(|(x, y)| {
                let m = (x * x + y * y).sqrt();
                if m <= 1e-9 {
                    return 0.0;
                }
                let t = (2.0 * (y.atan2(*x) - c)).cos().max(0.0);
                EDGE_GAIN * m * t * t
            })
            .collect()
    })
}

impl Backbone for FilterBankBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn input_size(&self) -> usize {
        self.input_size
    }

    fn forward(&self, image: &RgbImage) -> Result<Vec<FeatureMap>> {
        let (h, w) = (image.height, image.width);
        if h < 4 || w < 4 {
            return Err(Error::Encoder(format!("image {h}x{w} too small for the filter bank")));
        }
        let planar = image.to_planar();
        let n = h * w;
        let (r, g, b) = (&planar[..n], &planar[n..2 * n], &planar[2 * n..]);

        // Stage 1: color channels at half resolution.
        let mut color: Vec<Vec<f32>> = vec![Vec::with_capacity(n); COLOR_CHANNELS];
        let hues = [0.0f32, 60.0, 120.0, 180.0, 240.0, 300.0];
        for i in 0..n {
            let (rr, gg, bb) = (r[i], g[i], b[i]);
            let max = rr.max(gg).max(bb);
            let min = rr.min(gg).min(bb);
            let sat = max - min;
            let hue = if sat <= 1e-6 {
                0.0
            } else if max == rr {
                60.0 * (((gg - bb) / sat).rem_euclid(6.0))
            } else if max == gg {
                60.0 * ((bb - rr) / sat + 2.0)
            } else {
                60.0 * ((rr - gg) / sat + 4.0)
            };
            for (c, center) in hues.iter().enumerate() {
                let d = ((hue - center + 540.0).rem_euclid(360.0) - 180.0).abs();
                let tuning = (1.0 - d / 60.0).max(0.0);
                color[c].push(sat * tuning);
            }
            let lum = (rr + gg + bb) / 3.0;
            color[6].push((1.0 - sat) * lum);
            color[7].push((1.0 - sat) * (1.0 - lum));
        }
        let mut stage1 = Vec::new();
        let (mut h1, mut w1) = (0, 0);
        for plane in &color {
            let (p, ph, pw) = avg_pool(plane, h, w, 2);
            stage1.extend(p);
            (h1, w1) = (ph, pw);
        }

        // Stage 2: oriented edge energy of luminance and saturation at half resolution.
        let lum: Vec<f32> = (0..n).map(|i| (r[i] + g[i] + b[i]) / 3.0).collect();
        let sat: Vec<f32> = (0..n).map(|i| r[i].max(g[i]).max(b[i]) - r[i].min(g[i]).min(b[i])).collect();
        let (lx, ly) = sobel(&lum, h, w);
        let (sx, sy) = sobel(&sat, h, w);
        let lum_e = oriented_energy(&lx, &ly);
        let sat_e = oriented_energy(&sx, &sy);
        let mut stage2 = Vec::new();
        let (mut h2, mut w2) = (0, 0);
        for plane in lum_e.iter().chain(sat_e.iter()) {
            let (p, ph, pw) = avg_pool(plane, h, w, 2);
            stage2.extend(p);
            (h2, w2) = (ph, pw);
        }

        // Stage 3: texture statistics at quarter resolution.
        let lap: Vec<f32> = {
            let at = |y: isize, x: isize| lum[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
            (0..h as isize)
                .flat_map(|y| (0..w as isize).map(move |x| (y, x)))
                .map(|(y, x)| (4.0 * at(y, x) - at(y - 1, x) - at(y + 1, x) - at(y, x - 1) - at(y, x + 1)).abs())
                .collect()
        };
        let (gx2, gy2) = sobel(&lx.iter().zip(&ly).map(|(a, b)| (a * a + b * b).sqrt()).collect::<Vec<_>>(), h, w);
        let curvature: Vec<f32> = gx2.iter().zip(&gy2).map(|(a, b)| (a * a + b * b).sqrt()).collect();
        let corner_hv: Vec<f32> = lum_e[0].iter().zip(&lum_e[2]).map(|(a, b)| (a * b).sqrt()).collect();
        let corner_diag: Vec<f32> = lum_e[1].iter().zip(&lum_e[3]).map(|(a, b)| (a * b).sqrt()).collect();
        let energy: Vec<f32> = lum_e.iter().fold(vec![0.0; n], |acc, e| acc.iter().zip(e).map(|(a, b)| a + b).collect());
        let mut texture_planes = vec![lap, curvature, corner_hv, corner_diag];
        for e in &lum_e {
            let (pooled, ph, pw) = avg_pool(e, h, w, 4);
            // Orientation dominance: local share of each orientation.
            let (tot, _, _) = avg_pool(&energy, h, w, 4);
            let share: Vec<f32> = pooled.iter().zip(&tot).map(|(a, t)| a / (t + 1e-3)).collect();
            let mut up = vec![0.0; n];
            for y in 0..h {
                for x in 0..w {
                    up[y * w + x] = share[(y / 4).min(ph - 1) * pw + (x / 4).min(pw - 1)];
                }
            }
            texture_planes.push(up);
        }
        let mut stage3 = Vec::new();
        let (mut h3, mut w3) = (0, 0);
        for plane in &texture_planes {
            let (p, ph, pw) = avg_pool(plane, h, w, 4);
            stage3.extend(p);
            (h3, w3) = (ph, pw);
        }

        let scale = |mut v: Vec<f32>, hh: usize, ww: usize| {
            let s = STAGE_GAIN / (hh * ww) as f32;
            v.iter_mut().for_each(|x| *x *= s);
            v
        };
        Ok(vec![
            FeatureMap::new(COLOR_CHANNELS, h1, w1, scale(stage1, h1, w1))?,
            FeatureMap::new(EDGE_CHANNELS, h2, w2, scale(stage2, h2, w2))?,
            FeatureMap::new(TEXTURE_CHANNELS, h3, w3, scale(stage3, h3, w3))?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn resample_constant_masks() {
        let ones = resample_mask(&Mask::filled(224, 224, true), (7, 7)).unwrap();
        assert!(ones.data.iter().all(|v| (*v - 1.0).abs() < 1e-6));
        let zeros = resample_mask(&Mask::filled(224, 224, false), (7, 7)).unwrap();
        assert!(zeros.data.iter().all(|v| *v == 0.0));
        let corner = resample_mask(&Mask::from_rows(&[&[1, 0], &[0, 0]]).unwrap(), (1, 1)).unwrap();
        assert!((corner.data[0] - 0.25).abs() < 1e-7);
        assert!(resample_mask(&Mask::filled(2, 2, true), (0, 1)).is_err());
    }

    #[test]
    fn masked_pool_hand_example() {
        let f = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = Grid::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(masked_pool(&f, &m).unwrap(), vec![5.0]);
        assert_eq!(masked_pool(&f, &Grid::filled(2, 2, 1.0)).unwrap(), vec![10.0]);
        assert_eq!(masked_pool(&f, &Grid::filled(2, 2, 0.0)).unwrap(), vec![0.0]);
        assert!(masked_pool(&f, &Grid::filled(3, 2, 1.0)).is_err());
    }

    #[test]
    fn filter_bank_layout_and_determinism() {
        let bb = FilterBankBackbone::new(32);
        let img = crate::world::Scene::random_for_test(3).render();
        let a = encode_image(&bb, &img, &Mask::filled(32, 32, true)).unwrap();
        let b = encode_image(&bb, &img, &Mask::filled(32, 32, true)).unwrap();
        assert_eq!(a.len(), bb.spec().dim());
        assert_eq!(a, b);
        let z = encode_image(&bb, &img, &Mask::filled(32, 32, false)).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reference_backbone_width() {
        assert_eq!(BackboneSpec::resnet101_reference().dim(), 64 + 256 + 512 + 1024 + 2048);
    }

    #[test]
    fn cache_round_trip() {
        let n = NeuronRef::new("m", "l", 7);
        let b = FeatureBundle::from_vectors(n, "bb", vec![vec![1.0, -2.5, 3.0], vec![0.5, 0.25, 0.0]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.bin");
        write_bundle_cache(&p, &[b.clone(), b.clone()]).unwrap();
        assert_eq!(read_bundle_cache(&p).unwrap(), vec![b.clone(), b]);
    }

    proptest! {
        #[test]
        fn pooling_is_linear_in_the_mask(
            feats in prop::collection::vec(-5f32..5.0, 2 * 3 * 4),
            m1 in prop::collection::vec(0f32..1.0, 12),
            m2 in prop::collection::vec(0f32..1.0, 12),
            a in -3f32..3.0, b in -3f32..3.0,
        ) {
            let f = FeatureMap::new(2, 3, 4, feats).unwrap();
            let g1 = Grid::new(3, 4, m1.clone()).unwrap();
            let g2 = Grid::new(3, 4, m2.clone()).unwrap();
            let mix = Grid::new(3, 4, m1.iter().zip(&m2).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let lhs = masked_pool(&f, &mix).unwrap();
            let p1 = masked_pool(&f, &g1).unwrap();
            let p2 = masked_pool(&f, &g2).unwrap();
            for c in 0..2 {
                let rhs = a * p1[c] + b * p2[c];
                prop_assert!((lhs[c] - rhs).abs() <= 1e-5 * (1.0 + rhs.abs()));
            }
        }

        #[test]
        fn enlarging_mask_never_decreases_nonnegative_pools(
            feats in prop::collection::vec(0f32..5.0, 9),
            base in prop::collection::vec(0f32..1.0, 9),
            extra in prop::collection::vec(0f32..1.0, 9),
        ) {
            let f = FeatureMap::new(1, 3, 3, feats).unwrap();
            let small = Grid::new(3, 3, base.clone()).unwrap();
            let big = Grid::new(3, 3, base.iter().zip(&extra).map(|(a, b)| (a + b).min(1.0).max(*a)).collect()).unwrap();
            prop_assert!(masked_pool(&f, &big).unwrap()[0] >= masked_pool(&f, &small).unwrap()[0]);
        }
    }
}
