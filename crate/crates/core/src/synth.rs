//! Procedural annotation corpora with known ground-truth descriptions.
//!
//! Each synthetic neuron is selective for one visual concept. Its exemplar set
//! holds scenes containing that concept among distractors, masked to the
//! concept's region, and its three captions paraphrase the concept template.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_corpus, AnnotationRecord};
use crate::dissect::{save_exemplars, ExemplarSet, InMemoryProbe, DEFAULT_K, DEFAULT_QUANTILE};
use crate::error::{Error, Result};
use crate::featpool::{encode_set, write_bundle_cache, FeatureBundle, FilterBankBackbone};
use crate::neuron::NeuronRef;
use crate::world::{random_shape, Color, Element, Orientation, Scene, SceneParams, Shape};

pub const SYNTH_MODEL: &str = "synth";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Concept {
    ColorShape(Color, Shape),
    Stripes(Orientation),
    Text,
}

impl Concept {
    pub fn all() -> Vec<Concept> {
        let mut v: Vec<Concept> = Color::ALL
            .iter()
            .flat_map(|c| Shape::ALL.iter().map(move |s| Concept::ColorShape(*c, *s)))
            .collect();
        v.push(Concept::Stripes(Orientation::Horizontal));
        v.push(Concept::Stripes(Orientation::Vertical));
        v.push(Concept::Text);
        v
    }

    /// The canonical description.
    pub fn template(self) -> String {
        match self {
            Concept::ColorShape(c, s) => format!("{} {}s", c.name(), s.name()),
            Concept::Stripes(o) => format!("{} stripes", orientation_name(o)),
            Concept::Text => "white text".into(),
        }
    }

    fn specific_paraphrase(self) -> String {
        match self {
            Concept::ColorShape(c, s) => {
                let alt = match s {
                    Shape::Circle => "round shapes",
                    Shape::Square => "square shapes",
                    Shape::Triangle => "triangular shapes",
                };
                format!("{} {alt}", c.name())
            }
            Concept::Stripes(o) => format!("{} lines", orientation_name(o)),
            Concept::Text => "white letters".into(),
        }
    }

    fn generic_paraphrases(self) -> &'static [&'static str] {
        match self {
            Concept::ColorShape(..) => &["colorful shapes", "bright objects", "shapes"],
            Concept::Stripes(_) => &["striped patterns", "stripes", "lines"],
            Concept::Text => &["words", "letters", "text"],
        }
    }

    /// Three captions: the template, the template or a specific paraphrase,
    /// and one of the concept family's generic paraphrases.
    pub fn captions<R: Rng>(self, rng: &mut R) -> [String; 3] {
        let second = if rng.random_bool(0.5) { self.template() } else { self.specific_paraphrase() };
        let generic = self.generic_paraphrases().choose(rng).expect("non-empty");
        [self.template(), second, generic.to_string()]
    }

    /// A scene element realizing the concept.
    pub fn element<R: Rng>(self, rng: &mut R, params: &SceneParams) -> Element {
        let n = params.size;
        match self {
            Concept::ColorShape(c, s) => random_shape(rng, params, s, c),
            Concept::Stripes(orientation) => {
                let h = rng.random_range(n / 3..=n / 2);
                let w = rng.random_range(n / 3..=n / 2);
                Element::Stripes {
                    orientation,
                    y0: rng.random_range(0..=n - h),
                    x0: rng.random_range(0..=n - w),
                    h,
                    w,
                    period: rng.random_range(2..=3),
                }
            }
            Concept::Text => {
                let len = rng.random_range(2..=4);
                let text: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
                let (th, tw) = crate::world::text_extent(&text, 1);
                Element::Text {
                    text,
                    y0: rng.random_range(0..=n - th),
                    x0: rng.random_range(0..=n - tw),
                    scale: 1,
                    color: [255, 255, 255],
                    background: Some([0, 0, 0]),
                }
            }
        }
    }
}

pub fn orientation_name(o: Orientation) -> &'static str {
    match o {
        Orientation::Horizontal => "horizontal",
        Orientation::Vertical => "vertical",
    }
}

#[derive(Debug, Clone)]
pub struct SynthNeuron {
    pub concept: Concept,
    pub template: String,
    pub record: AnnotationRecord,
    pub exemplars: ExemplarSet,
    pub bundle: FeatureBundle,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub seed: u64,
    pub neurons: Vec<SynthNeuron>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub k: usize,
    pub scene: SceneParams,
    pub max_distractors: usize,
    pub mask_pad: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            scene: SceneParams::default(),
            max_distractors: 2,
            mask_pad: 1,
        }
    }
}

fn neuron_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Synthesize neuron `index` of the corpus for `seed`. Neurons are generated
/// independently, so a larger corpus extends a smaller one.
pub fn synth_neuron(seed: u64, index: usize, params: &SynthParams, backbone: &FilterBankBackbone) -> Result<SynthNeuron> {
    let mut rng = neuron_rng(seed, index);
    let concepts = Concept::all();
    let concept = *concepts.choose(&mut rng).expect("non-empty concept list");
    let layer = format!("layer{}", index % 3 + 1);
    let neuron = NeuronRef::new(SYNTH_MODEL, &layer, index);
    let mut images = Vec::with_capacity(params.k);
    let mut masks = Vec::with_capacity(params.k);
    let mut refs = Vec::with_capacity(params.k);
    for j in 0..params.k {
        let mut elements = Vec::new();
        for _ in 0..rng.random_range(0..=params.max_distractors) {
            let other = *concepts.choose(&mut rng).expect("non-empty");
            if other != concept {
                elements.push(other.element(&mut rng, &params.scene));
            }
        }
        elements.push(concept.element(&mut rng, &params.scene));
        let scene = Scene {
            size: params.scene.size,
            background: Scene::random_background(&mut rng),
            noise_seed: rng.random(),
            pixel_noise: params.scene.pixel_noise,
            elements,
        };
        masks.push(scene.element_mask(scene.elements.len() - 1, params.mask_pad));
        images.push(scene.render());
        refs.push(format!("synth/{seed}/{index}/{j}"));
    }
    let exemplars = ExemplarSet {
        neuron: neuron.clone(),
        k: params.k,
        image_refs: refs,
        positions: (0..params.k).collect(),
        images,
        masks,
        threshold: 0.0,
        quantile: DEFAULT_QUANTILE,
        scores: vec![1.0; params.k],
        probe_dataset_id: format!("synth-{seed}"),
    };
    let bundle = encode_set(backbone, &exemplars)?;
    let captions = concept.captions(&mut rng);
    let record = AnnotationRecord {
        model: SYNTH_MODEL.into(),
        layer,
        unit: index,
        exemplar_ref: format!("{SYNTH_MODEL}/{}/{}", neuron.layer_id, neuron.unit_dir()),
        annotations: captions.to_vec(),
    };
    Ok(SynthNeuron {
        concept,
        template: concept.template(),
        record,
        exemplars,
        bundle,
    })
}

pub fn synth_corpus(n_neurons: usize, seed: u64) -> Result<SynthCorpus> {
    synth_corpus_with(n_neurons, seed, &SynthParams::default())
}

pub fn synth_corpus_with(n_neurons: usize, seed: u64, params: &SynthParams) -> Result<SynthCorpus> {
    if n_neurons == 0 {
        return Err(Error::Argument("synthetic corpus needs at least one neuron".into()));
    }
    let backbone = FilterBankBackbone::new(params.scene.size);
    let neurons = (0..n_neurons)
        .map(|i| synth_neuron(seed, i, params, &backbone))
        .collect::<Result<_>>()?;
    Ok(SynthCorpus { seed, neurons })
}

/// Probe images of random scenes with one to three concept elements each.
pub fn probe_scenes(n: usize, seed: u64, scene: &SceneParams) -> InMemoryProbe {
    let concepts = Concept::all();
    let images = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u64::MAX - i as u64);
            let elements = (0..rng.random_range(1..=3))
                .map(|_| concepts.choose(&mut rng).expect("non-empty").element(&mut rng, scene))
                .collect();
            let scene = Scene {
                size: scene.size,
                background: Scene::random_background(&mut rng),
                noise_seed: rng.random(),
                pixel_noise: scene.pixel_noise,
                elements,
            };
            (format!("probe/{seed}/{i}"), scene.render())
        })
        .collect();
    InMemoryProbe {
        id: format!("synth-probe-{seed}"),
        images,
    }
}

#[derive(Serialize)]
struct TruthRow<'a> {
    model: &'a str,
    layer: &'a str,
    unit: usize,
    template: &'a str,
}

impl SynthCorpus {
    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.neurons.iter().map(|n| n.record.clone()).collect()
    }

    pub fn bundles(&self) -> Vec<FeatureBundle> {
        self.neurons.iter().map(|n| n.bundle.clone()).collect()
    }

    /// Writes `corpus.jsonl`, `truth.jsonl`, `bundles.bin` and exemplar
    /// directories under `exemplars/`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_corpus(&dir.join("corpus.jsonl"), &self.records())?;
        let mut truth = String::new();
        for n in &self.neurons {
            truth.push_str(&serde_json::to_string(&TruthRow {
                model: &n.record.model,
                layer: &n.record.layer,
                unit: n.record.unit,
                template: &n.template,
            })?);
            truth.push('\n');
        }
        let tp = dir.join("truth.jsonl");
        fs::write(&tp, truth).map_err(|e| Error::io(&tp, e))?;
        write_bundle_cache(&dir.join("bundles.bin"), &self.bundles())?;
        let ex = dir.join("exemplars");
        for n in &self.neurons {
            save_exemplars(&n.exemplars, &ex)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, Vocabulary};

    #[test]
    fn captions_paraphrase_the_template() {
        let c = synth_corpus_with(30, 7, &SynthParams { k: 3, ..SynthParams::default() }).unwrap();
        for n in &c.neurons {
            assert_eq!(n.record.annotations[0], n.template);
            assert_eq!(n.record.annotations.len(), 3);
            assert_eq!(n.bundle.k(), 3);
            assert!(n.exemplars.masks.iter().all(|m| m.count_ones() > 0));
        }
    }

    #[test]
    fn vocabulary_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let texts: Vec<String> = Concept::all()
            .into_iter()
            .flat_map(|c| {
                let mut v = vec![c.template(), c.specific_paraphrase()];
                v.extend(c.generic_paraphrases().iter().map(|g| g.to_string()));
                v.extend(c.captions(&mut rng));
                v
            })
            .collect();
        let vocab = Vocabulary::build(texts.iter().map(String::as_str), 1);
        assert!(vocab.len() - 4 <= 60, "{}", vocab.len());
        assert!(texts.iter().all(|t| tokenize(t).len() <= 3));
    }

    #[test]
    fn larger_corpus_extends_smaller_and_bytes_repeat() {
        let p = SynthParams { k: 2, ..SynthParams::default() };
        let a = synth_corpus_with(5, 3, &p).unwrap();
        let b = synth_corpus_with(8, 3, &p).unwrap();
        for (x, y) in a.neurons.iter().zip(&b.neurons) {
            assert_eq!(x.record, y.record);
            assert_eq!(x.bundle, y.bundle);
        }
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        a.write_to(d1.path()).unwrap();
        synth_corpus_with(5, 3, &p).unwrap().write_to(d2.path()).unwrap();
        for f in ["corpus.jsonl", "truth.jsonl", "bundles.bin"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap());
        }
        assert!(synth_corpus(0, 1).is_err());
    }
}
