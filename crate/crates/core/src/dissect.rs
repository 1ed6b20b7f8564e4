//! Exemplar extraction: activation statistics over a probe set, per-unit
//! thresholds, top-k image ranking, binary activation masks and the on-disk
//! exemplar layout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ensure, Error, Result};
use crate::image::{Grid, Mask, RgbImage};
use crate::model::ActivationSource;
use crate::neuron::NeuronRef;
use crate::sketch::{exact_quantile, QuantileSketch};

/// Default top-k exemplar count.
pub const DEFAULT_K: usize = 15;
/// Default activation quantile used for the per-unit threshold.
pub const DEFAULT_QUANTILE: f64 = 0.99;

/// Source of probe images. Loading may fail per image.
pub trait ProbeDataset: Sync {
    fn id(&self) -> &str;
    fn len(&self) -> usize;
    fn reference(&self, index: usize) -> String;
    fn load(&self, index: usize) -> Result<RgbImage>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Probe images held in memory.
#[derive(Debug, Clone)]
pub struct InMemoryProbe {
    pub id: String,
    pub images: Vec<(String, RgbImage)>,
}

impl ProbeDataset for InMemoryProbe {
    fn id(&self) -> &str {
        &self.id
    }
    fn len(&self) -> usize {
        self.images.len()
    }
    fn reference(&self, index: usize) -> String {
        self.images[index].0.clone()
    }
    fn load(&self, index: usize) -> Result<RgbImage> {
        Ok(self.images[index].1.clone())
    }
}

/// Every `*.png` in a directory, in file-name order.
#[derive(Debug, Clone)]
pub struct DirectoryProbe {
    id: String,
    files: Vec<PathBuf>,
}

impl DirectoryProbe {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        let id = dir.file_name().map_or_else(|| "probe".into(), |n| n.to_string_lossy().into_owned());
        Ok(Self { id, files })
    }
}

impl ProbeDataset for DirectoryProbe {
    fn id(&self) -> &str {
        &self.id
    }
    fn len(&self) -> usize {
        self.files.len()
    }
    fn reference(&self, index: usize) -> String {
        self.files[index].display().to_string()
    }
    fn load(&self, index: usize) -> Result<RgbImage> {
        RgbImage::load_png(&self.files[index])
    }
}

/// How probe images are brought to the model's input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResizePolicy {
    /// Shorter side to the model input size, then center crop.
    ShorterSideCenterCrop { side: usize },
}

/// What is kept per (unit, image).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Retention {
    /// Keep every spatial map; thresholds are exact.
    FullMaps,
    /// Keep per-image maxima and a quantile sketch with this relative accuracy.
    Summary { relative_accuracy: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub index: usize,
    pub reference: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct UnitRecord {
    maxima: Vec<f32>,
    maps: Option<Vec<Grid>>,
    sketch: Option<QuantileSketch>,
}

/// Per-unit activation statistics of one layer over a probe set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStore {
    pub model_id: String,
    pub layer_id: String,
    pub dataset_id: String,
    pub resize: ResizePolicy,
    pub retention: Retention,
    /// Probe index and reference of every recorded image, in store order.
    pub images: Vec<(usize, String)>,
    /// Images that could not be read.
    pub skipped: Vec<SkippedImage>,
    units: Vec<UnitRecord>,
}

impl ActivationStore {
    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    fn unit(&self, neuron: &NeuronRef) -> Result<&UnitRecord> {
        if neuron.model_id != self.model_id || neuron.layer_id != self.layer_id {
            return Err(Error::Lookup(format!(
                "neuron {neuron} not in store for {}/{}",
                self.model_id, self.layer_id
            )));
        }
        self.units
            .get(neuron.unit)
            .ok_or_else(|| Error::Lookup(format!("neuron {neuron} not in store")))
    }

    /// Per-image maximum activation of a unit, in store order.
    pub fn maxima(&self, neuron: &NeuronRef) -> Result<&[f32]> {
        Ok(&self.unit(neuron)?.maxima)
    }

    /// Retained spatial map of a unit for the image at store position `pos`.
    pub fn map(&self, neuron: &NeuronRef, pos: usize) -> Result<Option<&Grid>> {
        Ok(self.unit(neuron)?.maps.as_ref().map(|m| &m[pos]))
    }

    /// Concatenate a store recorded over the following shard of the same probe.
    pub fn merge(&mut self, other: ActivationStore) -> Result<()> {
        ensure(
            self.model_id == other.model_id
                && self.layer_id == other.layer_id
                && self.dataset_id == other.dataset_id
                && self.resize == other.resize
                && self.retention == other.retention
                && self.units.len() == other.units.len(),
            || "cannot merge stores with different model, layer, dataset or retention".into(),
        )?;
        for (mine, theirs) in self.units.iter_mut().zip(other.units) {
            mine.maxima.extend(theirs.maxima);
            if let (Some(a), Some(b)) = (mine.maps.as_mut(), theirs.maps) {
                a.extend(b);
            }
            if let (Some(a), Some(b)) = (mine.sketch.as_mut(), theirs.sketch.as_ref()) {
                a.merge(b)?;
            }
        }
        self.images.extend(other.images);
        self.skipped.extend(other.skipped);
        Ok(())
    }
}

/// Record activations of `layer` over the whole probe.
pub fn record_activations<M: ActivationSource + ?Sized, P: ProbeDataset + ?Sized>(
    model: &M,
    layer: &str,
    probe: &P,
    retention: Retention,
) -> Result<ActivationStore> {
    record_shard(model, layer, probe, 0..probe.len(), retention)
}

/// Record activations over a contiguous range of probe indices. Shards of
/// adjacent ranges combine with [`ActivationStore::merge`].
pub fn record_shard<M: ActivationSource + ?Sized, P: ProbeDataset + ?Sized>(
    model: &M,
    layer: &str,
    probe: &P,
    range: std::ops::Range<usize>,
    retention: Retention,
) -> Result<ActivationStore> {
    let info = model.layer_info(layer)?;
    ensure(!probe.is_empty(), || "probe dataset is empty".into())?;
    ensure(range.end <= probe.len(), || "shard range exceeds probe size".into())?;
    let side = model.input_size();
    let mk_sketch = || match retention {
        Retention::FullMaps => Ok(None),
        Retention::Summary { relative_accuracy } => QuantileSketch::new(relative_accuracy).map(Some),
    };
    let mut units = (0..info.channels)
        .map(|_| {
            Ok(UnitRecord {
                maxima: Vec::new(),
                maps: matches!(retention, Retention::FullMaps).then(Vec::new),
                sketch: mk_sketch()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for index in range {
        let reference = probe.reference(index);
        let image = match probe.load(index).and_then(|img| img.resize_shorter_center_crop(side)) {
            Ok(img) => img,
            Err(e) => {
                tracing::warn!(%reference, error = %e, "skipping unreadable probe image");
                skipped.push(SkippedImage {
                    index,
                    reference,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let maps = model.activations(layer, &image)?;
        if maps.len() != info.channels {
            return Err(Error::Config(format!(
                "layer {layer} returned {} channels, expected {}",
                maps.len(),
                info.channels
            )));
        }
        for (rec, map) in units.iter_mut().zip(maps) {
            rec.maxima.push(map.max());
            if let Some(s) = rec.sketch.as_mut() {
                map.data.iter().for_each(|v| s.insert(*v as f64));
            }
            if let Some(m) = rec.maps.as_mut() {
                m.push(map);
            }
        }
        images.push((index, reference));
    }
    Ok(ActivationStore {
        model_id: model.model_id().to_string(),
        layer_id: layer.to_string(),
        dataset_id: probe.id().to_string(),
        resize: ResizePolicy::ShorterSideCenterCrop { side },
        retention,
        images,
        skipped,
        units,
    })
}

/// Nearest-rank `q`-quantile over every spatial activation of the neuron
/// across the probe set: exact with full maps, sketch-approximate otherwise.
pub fn compute_threshold(store: &ActivationStore, neuron: &NeuronRef, q: f64) -> Result<f64> {
    ensure(q > 0.0 && q < 1.0, || format!("quantile {q} outside (0, 1)"))?;
    let unit = store.unit(neuron)?;
    let value = match (&unit.maps, &unit.sketch) {
        (Some(maps), _) => {
            let all: Vec<f32> = maps.iter().flat_map(|m| m.data.iter().copied()).collect();
            exact_quantile(&all, q).map(f64::from)
        }
        (None, Some(sketch)) => sketch.quantile(q),
        (None, None) => None,
    };
    value.ok_or_else(|| Error::Lookup(format!("no activations recorded for {neuron}")))
}

/// Top-k exemplars of a neuron, possibly without pixels and masks yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub neuron: NeuronRef,
    pub k: usize,
    pub image_refs: Vec<String>,
    /// Store positions of the chosen images (not persisted).
    #[serde(skip)]
    pub positions: Vec<usize>,
    pub images: Vec<RgbImage>,
    pub masks: Vec<Mask>,
    pub threshold: f64,
    pub quantile: f64,
    pub scores: Vec<f64>,
    pub probe_dataset_id: String,
}

impl ExemplarSet {
    pub fn is_complete(&self) -> bool {
        self.images.len() == self.k && self.masks.len() == self.k
    }
}

/// Indices of the k largest values, descending, ties by ascending index.
pub fn top_k_indices(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    order.truncate(k);
    order
}

/// Rank the k probe images with the highest per-image maximum. Masks and
/// pixels are left empty; see [`extract_exemplars`].
pub fn rank_exemplars(store: &ActivationStore, neuron: &NeuronRef, k: usize, q: f64) -> Result<ExemplarSet> {
    let maxima = store.maxima(neuron)?;
    ensure(k >= 1 && k <= maxima.len(), || {
        format!("k = {k} but the probe has {} images", maxima.len())
    })?;
    let positions = top_k_indices(maxima, k);
    Ok(ExemplarSet {
        neuron: neuron.clone(),
        k,
        image_refs: positions.iter().map(|p| store.images[*p].1.clone()).collect(),
        scores: positions.iter().map(|p| maxima[*p] as f64).collect(),
        positions,
        images: Vec::new(),
        masks: Vec::new(),
        threshold: compute_threshold(store, neuron, q)?,
        quantile: q,
        probe_dataset_id: store.dataset_id.clone(),
    })
}

/// Binarize an activation map at image resolution: bilinear resample, then
/// `cell = value > threshold`. An all-zero result becomes the argmax singleton.
pub fn build_mask(map: &Grid, threshold: f64, target: (usize, usize)) -> Result<Mask> {
    ensure(!map.is_empty(), || "empty activation map".into())?;
    ensure(threshold.is_finite(), || "threshold must be finite".into())?;
    let up = map.resize_bilinear(target.0, target.1)?;
    let mut bits: Vec<bool> = up.data.iter().map(|v| (*v as f64) > threshold).collect();
    if !bits.iter().any(|b| *b) {
        bits[up.argmax()] = true;
    }
    Mask::new(target.0, target.1, bits)
}

/// Rank exemplars and fill in their pixels and masks by re-running the model
/// on the chosen images when maps were not retained.
pub fn extract_exemplars<M: ActivationSource + ?Sized, P: ProbeDataset + ?Sized>(
    model: &M,
    store: &ActivationStore,
    probe: &P,
    neuron: &NeuronRef,
    k: usize,
    q: f64,
) -> Result<ExemplarSet> {
    let mut set = rank_exemplars(store, neuron, k, q)?;
    let side = model.input_size();
    for &pos in &set.positions {
        let (index, _) = &store.images[pos];
        let image = probe.load(*index)?.resize_shorter_center_crop(side)?;
        let map = match store.map(neuron, pos)? {
            Some(m) => m.clone(),
            None => model
                .activations(&neuron.layer_id, &image)?
                .into_iter()
                .nth(neuron.unit)
                .ok_or_else(|| Error::Lookup(format!("unit {neuron} missing from model output")))?,
        };
        set.masks.push(build_mask(&map, set.threshold, (image.height, image.width))?);
        set.images.push(image);
    }
    Ok(set)
}

/// Directory holding one neuron's exemplars under `root`.
pub fn exemplar_dir(root: &Path, neuron: &NeuronRef) -> PathBuf {
    root.join(&neuron.model_id).join(&neuron.layer_id).join(neuron.unit_dir())
}

/// Write `image_KK.png`, `mask_KK.png` and `metadata.json` for a complete set.
pub fn save_exemplars(set: &ExemplarSet, root: &Path) -> Result<PathBuf> {
    ensure(set.is_complete(), || format!("exemplar set for {} lacks images or masks", set.neuron))?;
    let dir = exemplar_dir(root, &set.neuron);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (j, (image, mask)) in set.images.iter().zip(&set.masks).enumerate() {
        ensure(image.height == mask.height && image.width == mask.width, || {
            format!("mask {j} dimensions differ from image")
        })?;
        image.save_png(&dir.join(format!("image_{j:02}.png")))?;
        mask.save_png(&dir.join(format!("mask_{j:02}.png")))?;
    }
    let meta = json!({
        "k": set.k,
        "threshold": set.threshold,
        "scores": set.scores,
        "image_refs": set.image_refs,
        "quantile": set.quantile,
        "probe_dataset_id": set.probe_dataset_id,
    });
    let path = dir.join("metadata.json");
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

fn field<'a>(meta: &'a Value, name: &str, path: &Path) -> Result<&'a Value> {
    meta.get(name)
        .ok_or_else(|| Error::format(path.display().to_string(), format!("missing field `{name}`")))
}

fn bad(path: &Path, name: &str, what: &str) -> Error {
    Error::format(path.display().to_string(), format!("field `{name}` must be {what}"))
}

pub fn load_exemplars(root: &Path, neuron: &NeuronRef) -> Result<ExemplarSet> {
    let dir = exemplar_dir(root, neuron);
    let path = dir.join("metadata.json");
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Value = serde_json::from_slice(&raw)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let k = field(&meta, "k", &path)?.as_u64().ok_or_else(|| bad(&path, "k", "a non-negative integer"))? as usize;
    let threshold = field(&meta, "threshold", &path)?
        .as_f64()
        .ok_or_else(|| bad(&path, "threshold", "a number"))?;
    let quantile = field(&meta, "quantile", &path)?
        .as_f64()
        .ok_or_else(|| bad(&path, "quantile", "a number"))?;
    let probe_dataset_id = field(&meta, "probe_dataset_id", &path)?
        .as_str()
        .ok_or_else(|| bad(&path, "probe_dataset_id", "a string"))?
        .to_string();
    let scores = field(&meta, "scores", &path)?
        .as_array()
        .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
        .ok_or_else(|| bad(&path, "scores", "an array of numbers"))?;
    let image_refs = field(&meta, "image_refs", &path)?
        .as_array()
        .and_then(|a| a.iter().map(|v| v.as_str().map(String::from)).collect::<Option<Vec<_>>>())
        .ok_or_else(|| bad(&path, "image_refs", "an array of strings"))?;
    if scores.len() != k {
        return Err(bad(&path, "scores", &format!("of length k = {k}")));
    }
    if image_refs.len() != k {
        return Err(bad(&path, "image_refs", &format!("of length k = {k}")));
    }
    let mut images = Vec::with_capacity(k);
    let mut masks = Vec::with_capacity(k);
    let mut missing = Vec::new();
    for j in 0..k {
        for name in [format!("image_{j:02}.png"), format!("mask_{j:02}.png")] {
            if !dir.join(&name).is_file() {
                missing.push(name);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::format(
            dir.display().to_string(),
            format!("missing exemplar files: {}", missing.join(", ")),
        ));
    }
    for j in 0..k {
        let image = RgbImage::load_png(&dir.join(format!("image_{j:02}.png")))?;
        let mask = Mask::load_png(&dir.join(format!("mask_{j:02}.png")))?;
        if (image.height, image.width) != (mask.height, mask.width) {
            return Err(Error::format(
                dir.display().to_string(),
                format!("mask_{j:02}.png dimensions differ from image_{j:02}.png"),
            ));
        }
        images.push(image);
        masks.push(mask);
    }
    Ok(ExemplarSet {
        neuron: neuron.clone(),
        k,
        image_refs,
        positions: Vec::new(),
        images,
        masks,
        threshold,
        quantile,
        scores,
        probe_dataset_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerInfo;

    /// Returns channel maps scripted per probe image id (encoded in pixel 0).
    struct Scripted {
        maps: Vec<Vec<Grid>>,
    }

    impl ActivationSource for Scripted {
        fn model_id(&self) -> &str {
            "toy"
        }
        fn input_size(&self) -> usize {
            2
        }
        fn layers(&self) -> Vec<LayerInfo> {
            vec![LayerInfo {
                id: "conv".into(),
                channels: self.maps[0].len(),
            }]
        }
        fn activations(&self, layer: &str, image: &RgbImage) -> Result<Vec<Grid>> {
            assert_eq!(layer, "conv");
            Ok(self.maps[image.data[0] as usize].clone())
        }
    }

    fn probe(n: usize) -> InMemoryProbe {
        InMemoryProbe {
            id: "probe".into(),
            images: (0..n).map(|i| (format!("img{i}"), RgbImage::filled(2, 2, [i as u8, 0, 0]))).collect(),
        }
    }

    fn neuron(unit: usize) -> NeuronRef {
        NeuronRef::new("toy", "conv", unit)
    }

    #[test]
    fn constant_map_single_image() {
        let model = Scripted {
            maps: vec![vec![Grid::filled(2, 2, 1.5)]],
        };
        for retention in [Retention::FullMaps, Retention::Summary { relative_accuracy: 0.01 }] {
            let store = record_activations(&model, "conv", &probe(1), retention).unwrap();
            assert_eq!(store.maxima(&neuron(0)).unwrap(), &[1.5]);
            for q in [0.01, 0.5, 0.99] {
                assert_eq!(compute_threshold(&store, &neuron(0), q).unwrap(), 1.5);
            }
        }
    }

    #[test]
    fn per_image_maxima() {
        let model = Scripted {
            maps: vec![
                vec![Grid::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap()],
                vec![Grid::from_rows(&[&[0.0, 0.0], &[0.0, 9.0]]).unwrap()],
            ],
        };
        let store = record_activations(&model, "conv", &probe(2), Retention::FullMaps).unwrap();
        assert_eq!(store.maxima(&neuron(0)).unwrap(), &[4.0, 9.0]);
    }

    #[test]
    fn unknown_layer_is_config_error() {
        let model = Scripted {
            maps: vec![vec![Grid::filled(2, 2, 0.0)]],
        };
        let err = record_activations(&model, "fc", &probe(1), Retention::FullMaps).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn threshold_errors() {
        let model = Scripted {
            maps: vec![vec![Grid::filled(2, 2, 0.0)]],
        };
        let store = record_activations(&model, "conv", &probe(1), Retention::FullMaps).unwrap();
        assert!(matches!(compute_threshold(&store, &neuron(3), 0.5), Err(Error::Lookup(_))));
        assert!(compute_threshold(&store, &neuron(0), 1.0).is_err());
    }

    #[test]
    fn ranking_descending_with_stable_ties() {
        let maps = [5.0, 7.0, 6.0, 7.0]
            .iter()
            .map(|v| vec![Grid::filled(2, 2, *v)])
            .collect();
        let model = Scripted { maps };
        let store = record_activations(&model, "conv", &probe(4), Retention::FullMaps).unwrap();
        let set = rank_exemplars(&store, &neuron(0), 4, 0.5).unwrap();
        assert_eq!(set.image_refs, vec!["img1", "img3", "img2", "img0"]);
        assert_eq!(set.scores, vec![7.0, 7.0, 6.0, 5.0]);
        assert!(rank_exemplars(&store, &neuron(0), 5, 0.5).is_err());
    }

    #[test]
    fn mask_hand_example_and_guard() {
        let map = Grid::from_rows(&[&[0.0, 2.0], &[3.0, 1.0]]).unwrap();
        let m = build_mask(&map, 1.5, (2, 2)).unwrap();
        assert_eq!(m, Mask::from_rows(&[&[0, 1], &[1, 0]]).unwrap());
        let all = build_mask(&map, -1.0, (4, 4)).unwrap();
        assert_eq!(all.count_ones(), 16);
        let guard = build_mask(&map, 10.0, (2, 2)).unwrap();
        assert_eq!(guard, Mask::from_rows(&[&[0, 0], &[1, 0]]).unwrap());
        assert!(build_mask(&Grid::filled(0, 0, 0.0), 0.0, (2, 2)).is_err());
    }

    #[test]
    fn unreadable_probe_images_are_skipped() {
        struct Flaky;
        impl ProbeDataset for Flaky {
            fn id(&self) -> &str {
                "flaky"
            }
            fn len(&self) -> usize {
                3
            }
            fn reference(&self, i: usize) -> String {
                format!("f{i}")
            }
            fn load(&self, i: usize) -> Result<RgbImage> {
                if i == 1 {
                    Err(Error::format("f1", "truncated"))
                } else {
                    Ok(RgbImage::filled(2, 2, [i as u8, 0, 0]))
                }
            }
        }
        let model = Scripted {
            maps: (0..3).map(|i| vec![Grid::filled(2, 2, i as f32)]).collect(),
        };
        let store = record_activations(&model, "conv", &Flaky, Retention::FullMaps).unwrap();
        assert_eq!(store.image_count(), 2);
        assert_eq!(store.skipped.len(), 1);
        assert_eq!(store.skipped[0].reference, "f1");
    }

    fn complete_set() -> ExemplarSet {
        let model = Scripted {
            maps: (0..3)
                .map(|i| vec![Grid::from_rows(&[&[i as f32, 0.5], &[0.25, 1.0]]).unwrap()])
                .collect(),
        };
        let p = probe(3);
        let store = record_activations(&model, "conv", &p, Retention::FullMaps).unwrap();
        extract_exemplars(&model, &store, &p, &neuron(0), 2, 0.9).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let set = complete_set();
        let dir = tempfile::tempdir().unwrap();
        let written = save_exemplars(&set, dir.path()).unwrap();
        assert!(written.ends_with("toy/conv/unit_0000"));
        let mut loaded = load_exemplars(dir.path(), &set.neuron).unwrap();
        loaded.positions = set.positions.clone();
        assert_eq!(loaded, set);
    }

    #[test]
    fn load_reports_missing_mask_and_bad_fields() {
        let set = complete_set();
        let dir = tempfile::tempdir().unwrap();
        let unit = save_exemplars(&set, dir.path()).unwrap();
        fs::remove_file(unit.join("mask_01.png")).unwrap();
        let msg = load_exemplars(dir.path(), &set.neuron).unwrap_err().to_string();
        assert!(msg.contains("mask_01.png"), "{msg}");

        save_exemplars(&set, dir.path()).unwrap();
        let meta = unit.join("metadata.json");
        let mut v: Value = serde_json::from_slice(&fs::read(&meta).unwrap()).unwrap();
        v["threshold"] = json!("high");
        fs::write(&meta, v.to_string()).unwrap();
        let msg = load_exemplars(dir.path(), &set.neuron).unwrap_err().to_string();
        assert!(msg.contains("threshold"), "{msg}");
    }
}
