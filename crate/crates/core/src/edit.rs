//! Spurious-text editing: a text-poisoned dataset, keyword-selected units,
//! single-unit importance and incremental ablation with a validation-only stop.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analyze::AblationSession;
use crate::cnn::{train_cnn, CnnConfig, CnnEpoch, CnnTrainConfig, SmallCnn};
use crate::describe::{describe_neuron, write_description_table, DescribeConfig, DescriptionRow, DEFAULT_LAMBDA};
use crate::dissect::{extract_exemplars, record_activations, save_exemplars, InMemoryProbe, Retention, DEFAULT_K, DEFAULT_QUANTILE};
use crate::experiment::{train_describer, Describer, SynthDescribeConfig};
use crate::featpool::FilterBankBackbone;
use crate::synth::{probe_scenes, synth_corpus};
use crate::error::{ensure, Error, Result};
use crate::image::RgbImage;
use crate::keywords::{KeywordSet, TEXT_KEYWORDS};
use crate::model::{accuracy, Classifier, LabeledSet};
use crate::neuron::{NeuronRef, UnitId, UnitSet};
use crate::world::{random_shape, Color, Element, Orientation, Scene, SceneParams, Shape};

/// Names rendered as text labels, one per class.
pub const CLASS_NAMES: [&str; 10] = ["fox", "owl", "elk", "yak", "ram", "cod", "eel", "bat", "ant", "bee"];

/// What distinguishes classes visually.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassCue {
    /// Five colors times circle or square.
    ColorShape,
    /// Evenly spaced hues; the shape is random.
    Hue,
}

/// Visual content of class `c` under the color-and-shape cue.
pub fn class_appearance(c: usize) -> (Color, Shape) {
    (Color::ALL[c / 2 % 5], [Shape::Circle, Shape::Square][c % 2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousDatasetSpec {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub labeled_fraction: f64,
    pub test_per_class: usize,
    /// Fraction of the training set held out for validation.
    pub val_fraction: f64,
    /// Label box origin (row, column); the label sits in the top-left corner.
    pub label_origin: (usize, usize),
    pub label_scale: usize,
    pub label_color: [u8; 3],
    pub label_background: Option<[u8; 3]>,
    pub scene: SceneParams,
    pub cue: ClassCue,
    /// Upper bound on distractor elements per image.
    pub max_distractors: usize,
    pub seed: u64,
}

impl Default for SpuriousDatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            train_per_class: 1000,
            labeled_fraction: 0.5,
            test_per_class: 100,
            val_fraction: 0.1,
            label_origin: (0, 0),
            label_scale: 1,
            label_color: [255, 255, 255],
            label_background: Some([0, 0, 0]),
            scene: SceneParams {
                min_radius: 4.0,
                max_radius: 7.0,
                hue_jitter: 12.0,
                pixel_noise: 20.0,
                ..SceneParams::default()
            },
            cue: ClassCue::Hue,
            max_distractors: 1,
            seed: 0,
        }
    }
}

impl SpuriousDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        ensure((2..=CLASS_NAMES.len()).contains(&self.n_classes), || {
            format!("n_classes must be in 2..={}", CLASS_NAMES.len())
        })?;
        ensure((0.0..=1.0).contains(&self.labeled_fraction), || "labeled_fraction must lie in [0, 1]".into())?;
        ensure((0.0..1.0).contains(&self.val_fraction), || "val_fraction must lie in [0, 1)".into())?;
        ensure(self.label_scale > 0, || "label_scale must be positive".into())?;
        let (th, tw) = crate::world::text_extent("www", self.label_scale);
        ensure(
            self.label_origin.0 + th <= self.scene.size && self.label_origin.1 + tw <= self.scene.size,
            || "text label does not fit in the image".into(),
        )
    }

    fn label(&self, text: &str) -> Element {
        Element::Text {
            text: text.into(),
            y0: self.label_origin.0,
            x0: self.label_origin.1,
            scale: self.label_scale,
            color: self.label_color,
            background: self.label_background,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
    pub class: usize,
    pub class_name: String,
    pub rendered_text: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SpuriousDataset {
    pub spec: SpuriousDatasetSpec,
    pub class_names: Vec<String>,
    pub train: LabeledSet,
    pub val: LabeledSet,
    /// Every test image carries a uniformly drawn class-name label.
    pub test: LabeledSet,
    pub manifest: Vec<ManifestEntry>,
}


fn render_image(spec: &SpuriousDatasetSpec, class: usize, text: Option<&str>, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut elements = Vec::new();
    let n = spec.scene.size;
    for _ in 0..rng.random_range(0..=spec.max_distractors) {
        match spec.cue {
            ClassCue::ColorShape => {
                let c = *Color::ALL.choose(rng).expect("colors");
                elements.push(random_shape(rng, &spec.scene, Shape::Triangle, c));
            }
            ClassCue::Hue => {
                let (h, w) = (rng.random_range(n / 4..=n / 2), rng.random_range(n / 4..=n / 2));
                elements.push(Element::Stripes {
                    orientation: *[Orientation::Horizontal, Orientation::Vertical].choose(rng).expect("two"),
                    y0: rng.random_range(0..=n - h),
                    x0: rng.random_range(0..=n - w),
                    h,
                    w,
                    period: rng.random_range(2..=3),
                });
            }
        }
    }
    let main = match spec.cue {
        ClassCue::ColorShape => {
            let (color, shape) = class_appearance(class);
            random_shape(rng, &spec.scene, shape, color)
        }
        ClassCue::Hue => {
            let shape = *Shape::ALL.choose(rng).expect("shapes");
            let mut e = random_shape(rng, &spec.scene, shape, Color::Red);
            if let Element::Shape { hue_shift, .. } = &mut e {
                *hue_shift += 360.0 * class as f32 / spec.n_classes as f32;
            }
            e
        }
    };
    elements.push(main);
    if let Some(t) = text {
        elements.push(spec.label(t));
    }
    Scene {
        size: spec.scene.size,
        background: Scene::random_background(rng),
        noise_seed: rng.random(),
        pixel_noise: spec.scene.pixel_noise,
        elements,
    }
    .render()
}

/// Deterministic train/val/test splits for a spec.
pub fn gen_spurious_dataset(spec: &SpuriousDatasetSpec) -> Result<SpuriousDataset> {
    spec.validate()?;
    let names: Vec<String> = CLASS_NAMES[..spec.n_classes].iter().map(|s| s.to_string()).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labeled_per_class = (spec.labeled_fraction * spec.train_per_class as f64).round() as usize;
    let mut train_items = Vec::new();
    for class in 0..spec.n_classes {
        let mut flags: Vec<bool> = (0..spec.train_per_class).map(|i| i < labeled_per_class).collect();
        flags.shuffle(&mut order_rng);
        train_items.extend(flags.into_iter().map(|f| (class, f.then(|| names[class].clone()))));
    }
    train_items.shuffle(&mut order_rng);
    let n_val = (spec.val_fraction * train_items.len() as f64).floor() as usize;
    let mut test_items = Vec::new();
    for class in 0..spec.n_classes {
        for _ in 0..spec.test_per_class {
            let shown = order_rng.random_range(0..spec.n_classes);
            test_items.push((class, Some(names[shown].clone())));
        }
    }
    let mut out = SpuriousDataset {
        spec: spec.clone(),
        class_names: names.clone(),
        train: LabeledSet::default(),
        val: LabeledSet::default(),
        test: LabeledSet::default(),
        manifest: Vec::new(),
    };
    let all = train_items
        .iter()
        .enumerate()
        .map(|(i, it)| (if i < n_val { Split::Val } else { Split::Train }, it))
        .chain(test_items.iter().map(|it| (Split::Test, it)));
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for (stream, (split, (class, text))) in all.enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream as u64 + 1);
        let image = render_image(spec, *class, text.as_deref(), &mut rng);
        let split_name = match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        let idx = counts.entry(split_name).or_default();
        out.manifest.push(ManifestEntry {
            path: format!("{split_name}/{idx:05}.png"),
            split,
            class: *class,
            class_name: names[*class].clone(),
            rendered_text: text.clone(),
        });
        *idx += 1;
        match split {
            Split::Train => out.train.push(image, *class),
            Split::Val => out.val.push(image, *class),
            Split::Test => out.test.push(image, *class),
        }
    }
    Ok(out)
}

impl SpuriousDataset {
    /// Write every image as PNG plus `manifest.json` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        for sub in ["train", "val", "test"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let images = self.train.images.iter().chain(&self.val.images).chain(&self.test.images);
        let mut by_split = self.manifest.iter().filter(|m| m.split == Split::Train)
            .chain(self.manifest.iter().filter(|m| m.split == Split::Val))
            .chain(self.manifest.iter().filter(|m| m.split == Split::Test));
        for image in images {
            let entry = by_split.next().expect("manifest covers every image");
            image.save_png(&dir.join(&entry.path))?;
        }
        let p = dir.join("manifest.json");
        let body = serde_json::json!({ "spec": self.spec, "classes": self.class_names, "images": self.manifest });
        fs::write(&p, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&p, e))
    }
}

#[derive(Deserialize)]
struct ManifestFile {
    images: Vec<ManifestEntry>,
}

/// Read one split of a dataset written by [`SpuriousDataset::write_to`].
pub fn load_split(dir: &Path, split: Split) -> Result<LabeledSet> {
    let p = dir.join("manifest.json");
    let raw = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let m: ManifestFile = serde_json::from_slice(&raw).map_err(|e| Error::format(p.display().to_string(), e.to_string()))?;
    let mut set = LabeledSet::default();
    for e in m.images.iter().filter(|e| e.split == split) {
        set.push(RgbImage::load_png(&dir.join(&e.path))?, e.class);
    }
    Ok(set)
}

/// Units whose description has a token matching `keywords`, sorted by layer then unit.
pub fn keyword_neurons(rows: &[DescriptionRow], keywords: &KeywordSet) -> Vec<NeuronRef> {
    let mut out: Vec<NeuronRef> = rows.iter().filter(|r| keywords.matches(&r.description)).map(DescriptionRow::neuron).collect();
    out.sort_by(|a, b| (&a.model_id, &a.layer_id, a.unit).cmp(&(&b.model_id, &b.layer_id, b.unit)));
    out.dedup();
    out
}

const VAL: &str = "validation";
const TEST: &str = "adversarial-test";

/// Drop in validation accuracy when `unit` joins the session's zeroed set.
pub fn unit_importance(model: &dyn Classifier, session: &mut AblationSession, unit: &UnitId, val: &LabeledSet) -> Result<f64> {
    let base = session.zeroed().clone();
    let mut with = base.clone();
    with.insert(unit.clone());
    Ok(session.accuracy_with(model, VAL, val, &base)? - session.accuracy_with(model, VAL, val, &with)?)
}

/// Importance of every unit, evaluated on worker threads and recorded in the session cache.
pub fn importance_scores(
    model: &dyn Classifier,
    session: &mut AblationSession,
    units: &[UnitId],
    val: &LabeledSet,
) -> Result<Vec<f64>> {
    let all: UnitSet = units.iter().cloned().collect();
    model.validate_units(&all)?;
    let base = session.zeroed().clone();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(units.len().max(1));
    let chunk = units.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<(UnitSet, f64)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = units
            .chunks(chunk)
            .map(|part| {
                let base = &base;
                s.spawn(move || {
                    part.iter()
                        .map(|u| {
                            let mut set = base.clone();
                            set.insert(u.clone());
                            Ok((set.clone(), accuracy(model, val, &set)?))
                        })
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("importance worker panicked")).collect()
    });
    let base_acc = session.accuracy_with(model, VAL, val, &base)?;
    let mut out = Vec::with_capacity(units.len());
    for r in results {
        for (set, acc) in r? {
            session.record(VAL, set, acc);
            out.push(base_acc - acc);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub candidates: Vec<UnitId>,
    /// Importance per entry of `order`.
    pub importance: Vec<f64>,
    /// Candidates by ascending importance, ties by unit.
    pub order: Vec<UnitId>,
    pub stop_index: Option<usize>,
}

impl EditPlan {
    pub fn new(candidates: Vec<UnitId>, importance: Vec<f64>) -> Result<Self> {
        ensure(candidates.len() == importance.len(), || "one importance score per candidate".into())?;
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        idx.sort_by(|&a, &b| importance[a].total_cmp(&importance[b]).then_with(|| candidates[a].cmp(&candidates[b])));
        Ok(Self {
            order: idx.iter().map(|&i| candidates[i].clone()).collect(),
            importance: idx.iter().map(|&i| importance[i]).collect(),
            candidates,
            stop_index: None,
        })
    }

    /// Units zeroed after `n` steps.
    pub fn units_at(&self, n: usize) -> UnitSet {
        self.order[..n.min(self.order.len())].iter().cloned().collect()
    }
}

/// Score candidates and order them ascending by importance.
pub fn plan_edit(model: &dyn Classifier, session: &mut AblationSession, candidates: Vec<UnitId>, val: &LabeledSet) -> Result<EditPlan> {
    let importance = importance_scores(model, session, &candidates, val)?;
    EditPlan::new(candidates, importance)
}

/// Last step `i` with `val[i] ≥ max(val[..=i]) − τ` and `val[j] < val[i]` for every `j > i`.
pub fn stop_index(val: &[f64], tau: f64) -> usize {
    let mut best = 0;
    let mut running = f64::NEG_INFINITY;
    for (i, &v) in val.iter().enumerate() {
        running = running.max(v);
        if v >= running - tau && val[i + 1..].iter().all(|&w| w < v) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditStep {
    pub n_ablated: usize,
    pub unit: Option<UnitId>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditCurve {
    pub steps: Vec<EditStep>,
    pub stop_index: usize,
    pub tau: f64,
}

impl EditCurve {
    pub fn base_test(&self) -> f64 {
        self.steps[0].test_accuracy
    }

    pub fn stop_test(&self) -> f64 {
        self.steps[self.stop_index].test_accuracy
    }

    /// Adversarial accuracy gained at the chosen stop.
    pub fn improvement(&self) -> f64 {
        self.stop_test() - self.base_test()
    }
}

/// Zero one planned unit per step on top of the session's set, then pick the
/// stop from validation accuracy alone. Leaves the session unchanged.
pub fn incremental_edit(
    model: &dyn Classifier,
    session: &mut AblationSession,
    plan: &mut EditPlan,
    val: &LabeledSet,
    test: &LabeledSet,
    tau: f64,
) -> Result<EditCurve> {
    let mut units = session.zeroed().clone();
    let mut steps = Vec::with_capacity(plan.order.len() + 1);
    for n in 0..=plan.order.len() {
        let unit = n.checked_sub(1).map(|i| plan.order[i].clone());
        if let Some(u) = &unit {
            units.insert(u.clone());
        }
        steps.push(EditStep {
            n_ablated: n,
            unit,
            val_accuracy: session.accuracy_with(model, VAL, val, &units)?,
            test_accuracy: session.accuracy_with(model, TEST, test, &units)?,
        });
    }
    let vals: Vec<f64> = steps.iter().map(|s| s.val_accuracy).collect();
    let stop = stop_index(&vals, tau);
    plan.stop_index = Some(stop);
    Ok(EditCurve {
        steps,
        stop_index: stop,
        tau,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditExperimentConfig {
    pub dataset: SpuriousDatasetSpec,
    pub cnn: CnnConfig,
    pub train: CnnTrainConfig,
    /// Recipe for the captioner and language model that describe the classifier's units.
    pub describer: SynthDescribeConfig,
    pub probe_size: usize,
    pub k: usize,
    pub quantile: f64,
    pub lambda_pmi: f64,
    pub keywords: Vec<String>,
    pub tau: f64,
    pub seeds: Vec<u64>,
}

impl EditExperimentConfig {
    pub fn desk() -> Self {
        Self {
            dataset: SpuriousDatasetSpec {
                train_per_class: 500,
                ..SpuriousDatasetSpec::default()
            },
            cnn: CnnConfig {
                input_size: 32,
                conv1_channels: 8,
                conv2_channels: 64,
                classes: 10,
            },
            train: CnnTrainConfig::default(),
            describer: SynthDescribeConfig::desk(0),
            probe_size: 600,
            k: DEFAULT_K,
            quantile: DEFAULT_QUANTILE,
            lambda_pmi: DEFAULT_LAMBDA,
            keywords: TEXT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            tau: 0.0,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRun {
    pub plan: EditPlan,
    pub curve: EditCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEditResult {
    pub seed: u64,
    pub model_id: String,
    pub training: Vec<CnnEpoch>,
    pub descriptions: Vec<DescriptionRow>,
    pub keyword_units: Vec<UnitId>,
    pub keyword: EditRun,
    /// Every unit sorted by importance: the control ordering.
    pub control: EditRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub config: EditExperimentConfig,
    pub seeds: Vec<SeedEditResult>,
    pub seeds_improved: usize,
    pub mean_keyword_improvement: f64,
    pub mean_control_improvement: f64,
}

impl EditReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&raw).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }
}

/// Dissect every ablatable unit on a probe set and describe it.
pub fn describe_units(
    model: &SmallCnn,
    probe: &InMemoryProbe,
    describer: &Describer,
    cfg: &DescribeConfig,
    k: usize,
    q: f64,
    exemplar_root: Option<&Path>,
) -> Result<Vec<DescriptionRow>> {
    let backbone = FilterBankBackbone::new(model.config.input_size);
    let mut rows = Vec::new();
    for layer in model.ablatable_layers() {
        let store = record_activations(model, &layer.id, probe, Retention::FullMaps)?;
        for unit in 0..layer.channels {
            let neuron = NeuronRef::new(&model.model_id, &layer.id, unit);
            let set = extract_exemplars(model, &store, probe, &neuron, k, q)?;
            if let Some(root) = exemplar_root {
                save_exemplars(&set, root)?;
            }
            let ranked = describe_neuron(&set, &backbone, &describer.captioner, &describer.lm, cfg)?;
            rows.push(DescriptionRow::from_ranked(&neuron, &ranked, 3)?);
        }
    }
    Ok(rows)
}

/// One seed of the editing experiment. With `out`, writes the dataset,
/// classifier checkpoint, exemplars and description table beneath it.
pub fn run_edit_seed(cfg: &EditExperimentConfig, seed: u64, describer: &Describer, out: Option<&Path>) -> Result<SeedEditResult> {
    let spec = SpuriousDatasetSpec {
        seed,
        ..cfg.dataset.clone()
    };
    let data = gen_spurious_dataset(&spec)?;
    let model_id = format!("spurious-cnn-{seed}");
    let mut model = SmallCnn::new(&model_id, cfg.cnn.clone(), seed)?;
    let training = train_cnn(&mut model, &data.train, &data.val, &CnnTrainConfig { seed, ..cfg.train.clone() })?;
    tracing::info!(seed, epochs = training.len(), "classifier trained");
    let probe = probe_scenes(cfg.probe_size, seed, &SceneParams::default());
    let dcfg = DescribeConfig {
        lambda_pmi: cfg.lambda_pmi,
        beam_size: cfg.describer.beam_size,
        max_steps: cfg.describer.decoder.max_steps,
    };
    let exemplar_root = out.map(|o| o.join("exemplars"));
    let descriptions = describe_units(&model, &probe, describer, &dcfg, cfg.k, cfg.quantile, exemplar_root.as_deref())?;
    tracing::info!(seed, units = descriptions.len(), "units described");
    let keywords = KeywordSet::new(&cfg.keywords);
    let keyword_units: Vec<UnitId> = keyword_neurons(&descriptions, &keywords).iter().map(UnitId::from).collect();
    let mut session = AblationSession::new(&model_id);
    let run = |candidates: Vec<UnitId>, session: &mut AblationSession| -> Result<EditRun> {
        let mut plan = plan_edit(&model, session, candidates, &data.val)?;
        let curve = incremental_edit(&model, session, &mut plan, &data.val, &data.test, cfg.tau)?;
        Ok(EditRun { plan, curve })
    };
    let keyword = run(keyword_units.clone(), &mut session)?;
    let control = run(model.all_units(), &mut session)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        data.write_to(&dir.join("dataset"))?;
        model.save(&dir.join("classifier.json"))?;
        write_description_table(&dir.join("descriptions.jsonl"), &descriptions)?;
    }
    tracing::info!(
        seed,
        units = keyword_units.len(),
        keyword = keyword.curve.improvement(),
        control = control.curve.improvement(),
        "edit seed finished"
    );
    Ok(SeedEditResult {
        seed,
        model_id,
        training,
        descriptions,
        keyword_units,
        keyword,
        control,
    })
}

/// Train the describer once, then run every seed.
pub fn run_edit_experiment(cfg: &EditExperimentConfig, out: Option<&Path>) -> Result<EditReport> {
    ensure(!cfg.seeds.is_empty(), || "at least one seed is required".into())?;
    let corpus = synth_corpus(cfg.describer.n_train, cfg.describer.seed)?;
    let describer = train_describer(&corpus.neurons, &cfg.describer)?;
    tracing::info!("describer trained");
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| run_edit_seed(cfg, s, &describer, out.map(|o| o.join(format!("seed_{s}"))).as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let n = seeds.len() as f64;
    let report = EditReport {
        config: cfg.clone(),
        seeds_improved: seeds.iter().filter(|s| s.keyword.curve.improvement() > 0.0).count(),
        mean_keyword_improvement: seeds.iter().map(|s| s.keyword.curve.improvement()).sum::<f64>() / n,
        mean_control_improvement: seeds.iter().map(|s| s.control.curve.improvement()).sum::<f64>() / n,
        seeds,
    };
    if let Some(dir) = out {
        report.save(&dir.join("edit_report.json"))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec(seed: u64) -> SpuriousDatasetSpec {
        SpuriousDatasetSpec {
            n_classes: 4,
            train_per_class: 20,
            test_per_class: 10,
            seed,
            ..SpuriousDatasetSpec::default()
        }
    }

    #[test]
    fn dataset_layout() {
        let d = gen_spurious_dataset(&small_spec(3)).unwrap();
        assert_eq!(d.train.len() + d.val.len(), 80);
        assert_eq!(d.val.len(), 8);
        assert_eq!(d.test.len(), 40);
        let labeled: Vec<&ManifestEntry> = d.manifest.iter().filter(|m| m.split != Split::Test && m.rendered_text.is_some()).collect();
        assert_eq!(labeled.len(), 40);
        assert!(labeled.iter().all(|m| m.rendered_text.as_deref() == Some(m.class_name.as_str())));
        for c in 0..4 {
            let n = labeled.iter().filter(|m| m.class == c).count();
            assert_eq!(n, 10);
        }
        assert!(d.manifest.iter().filter(|m| m.split == Split::Test).all(|m| m.rendered_text.is_some()));
        let again = gen_spurious_dataset(&small_spec(3)).unwrap();
        assert_eq!(again.manifest, d.manifest);
        assert_eq!(again.test.images, d.test.images);
        assert_ne!(gen_spurious_dataset(&small_spec(4)).unwrap().train.images, d.train.images);
    }

    #[test]
    fn unlabeled_spec_renders_no_text() {
        let spec = SpuriousDatasetSpec {
            labeled_fraction: 0.0,
            ..small_spec(1)
        };
        let d = gen_spurious_dataset(&spec).unwrap();
        assert!(d.manifest.iter().filter(|m| m.split != Split::Test).all(|m| m.rendered_text.is_none()));
        assert!(gen_spurious_dataset(&SpuriousDatasetSpec { labeled_fraction: 1.5, ..spec.clone() }).is_err());
        assert!(gen_spurious_dataset(&SpuriousDatasetSpec { n_classes: 11, ..spec }).is_err());
    }

    #[test]
    fn adversarial_labels_match_at_chance() {
        let spec = SpuriousDatasetSpec {
            train_per_class: 1,
            labeled_fraction: 0.0,
            ..SpuriousDatasetSpec::default()
        };
        let d = gen_spurious_dataset(&spec).unwrap();
        let test: Vec<&ManifestEntry> = d.manifest.iter().filter(|m| m.split == Split::Test).collect();
        assert_eq!(test.len(), 1000);
        let hits = test.iter().filter(|m| m.rendered_text.as_deref() == Some(m.class_name.as_str())).count();
        let p = hits as f64 / 1000.0;
        let sigma = (0.1f64 * 0.9 / 1000.0).sqrt();
        assert!((p - 0.1).abs() <= 3.0 * sigma, "match rate {p}");
    }

    #[test]
    fn manifest_on_disk() {
        let d = gen_spurious_dataset(&small_spec(0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write_to(dir.path()).unwrap();
        let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["images"].as_array().unwrap().len(), 120);
        let first = &d.manifest[0];
        let img = RgbImage::load_png(&dir.path().join(&first.path)).unwrap();
        let set = match first.split {
            Split::Train => &d.train,
            Split::Val => &d.val,
            Split::Test => &d.test,
        };
        assert_eq!(&img, &set.images[0]);
        let test = load_split(dir.path(), Split::Test).unwrap();
        assert_eq!(test.images, d.test.images);
        assert_eq!(test.labels, d.test.labels);
    }

    fn row(layer: &str, unit: usize, d: &str) -> DescriptionRow {
        DescriptionRow {
            model_id: "m".into(),
            layer_id: layer.into(),
            unit,
            description: d.into(),
            logp_cond: 0.0,
            logp_lm: 0.0,
            wpmi: 0.0,
            runner_ups: vec![],
        }
    }

    #[test]
    fn keyword_selection() {
        let rows = vec![
            row("conv2", 4, "words on signs"),
            row("conv1", 9, "lettuce in bowls"),
            row("conv1", 2, "white text"),
            row("conv1", 1, "red circles"),
        ];
        let got: Vec<(String, usize)> = keyword_neurons(&rows, &KeywordSet::text()).into_iter().map(|n| (n.layer_id, n.unit)).collect();
        assert_eq!(got, vec![("conv1".into(), 2), ("conv2".into(), 4)]);
    }

    #[test]
    fn plan_orders_ascending_with_unit_ties() {
        let c = vec![UnitId::new("b", 0), UnitId::new("a", 2), UnitId::new("a", 1), UnitId::new("a", 0)];
        let p = EditPlan::new(c.clone(), vec![0.1, -0.2, 0.0, 0.0]).unwrap();
        assert_eq!(p.order, vec![UnitId::new("a", 2), UnitId::new("a", 0), UnitId::new("a", 1), UnitId::new("b", 0)]);
        assert_eq!(p.importance, vec![-0.2, 0.0, 0.0, 0.1]);
        assert_eq!(p.units_at(2).len(), 2);
        assert!(EditPlan::new(c, vec![0.0]).is_err());
    }

    #[test]
    fn stop_rule_examples() {
        assert_eq!(stop_index(&[0.5, 0.6, 0.55, 0.6, 0.4], 0.0), 3);
        assert_eq!(stop_index(&[0.5, 0.5, 0.5], 0.0), 2);
        assert_eq!(stop_index(&[0.9, 0.8, 0.85], 0.0), 0);
        assert_eq!(stop_index(&[0.9, 0.8, 0.85], 0.1), 2);
        assert_eq!(stop_index(&[0.7], 0.0), 0);
    }

    proptest! {
        #[test]
        fn zero_tolerance_stop_is_last_maximum(vals in prop::collection::vec(0u8..20, 1..30)) {
            let v: Vec<f64> = vals.iter().map(|x| *x as f64 / 20.0).collect();
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let last = v.iter().rposition(|x| *x == max).unwrap();
            prop_assert_eq!(stop_index(&v, 0.0), last);
        }

        #[test]
        fn stop_satisfies_its_definition(vals in prop::collection::vec(0u8..20, 1..30), tau in 0.0f64..0.3) {
            let v: Vec<f64> = vals.iter().map(|x| *x as f64 / 20.0).collect();
            let i = stop_index(&v, tau);
            let run = v[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v[i] >= run - tau);
            prop_assert!(v[i + 1..].iter().all(|w| *w < v[i]));
            for j in i + 1..v.len() {
                let rj = v[..=j].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(!(v[j] >= rj - tau && v[j + 1..].iter().all(|w| *w < v[j])));
            }
        }
    }
}
