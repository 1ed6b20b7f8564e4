//! Annotation corpora: loading, statistics, inter-annotator agreement and
//! generalization splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::{Pos, Tagger};
use crate::neuron::NeuronRef;
use crate::text::tokenize;

pub const ANNOTATIONS_PER_RECORD: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub model: String,
    pub layer: String,
    pub unit: usize,
    pub exemplar_ref: String,
    pub annotations: Vec<String>,
}

impl AnnotationRecord {
    pub fn neuron(&self) -> NeuronRef {
        NeuronRef::new(&self.model, &self.layer, self.unit)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.annotations.len() != ANNOTATIONS_PER_RECORD {
            return Err(format!(
                "expected {ANNOTATIONS_PER_RECORD} annotations, found {}",
                self.annotations.len()
            ));
        }
        if let Some(i) = self.annotations.iter().position(|a| a.trim().is_empty()) {
            return Err(format!("annotation {i} is empty"));
        }
        if self.exemplar_ref.trim().is_empty() {
            return Err("exemplar_ref is empty".into());
        }
        Ok(())
    }
}

pub fn load_corpus(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("{}:{}", path.display(), i + 1);
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::format(loc(), e.to_string()))?;
        rec.validate().map_err(|m| Error::format(loc(), m))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Records that name an exemplar directory not present under `root`.
pub fn unresolved_exemplars<'a>(records: &'a [AnnotationRecord], root: &Path) -> Vec<&'a AnnotationRecord> {
    records.iter().filter(|r| !root.join(&r.exemplar_ref).exists()).collect()
}

/// Record counts per (model, layer).
pub fn group_counts(records: &[AnnotationRecord]) -> BTreeMap<(String, String), usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry((r.model.clone(), r.layer.clone())).or_default() += 1;
    }
    m
}

/// Mergeable accumulator behind one statistics row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatsAccumulator {
    pub units: usize,
    pub captions: usize,
    pub tokens: usize,
    pub nouns: usize,
    pub adjectives: usize,
    pub prepositions: usize,
    pub skipped_captions: usize,
    pub words: BTreeSet<String>,
}

impl StatsAccumulator {
    pub fn merge(&mut self, other: &StatsAccumulator) {
        self.units += other.units;
        self.captions += other.captions;
        self.tokens += other.tokens;
        self.nouns += other.nouns;
        self.adjectives += other.adjectives;
        self.prepositions += other.prepositions;
        self.skipped_captions += other.skipped_captions;
        self.words.extend(other.words.iter().cloned());
    }

    fn row(&self, model: &str, layer: &str) -> StatsRow {
        let pct = |c: usize| if self.tokens == 0 { 0.0 } else { 100.0 * c as f64 / self.tokens as f64 };
        StatsRow {
            model: model.into(),
            layer: layer.into(),
            units: self.units,
            unique_words: self.words.len(),
            mean_length: if self.captions == 0 { 0.0 } else { self.tokens as f64 / self.captions as f64 },
            pct_noun: pct(self.nouns),
            pct_adjective: pct(self.adjectives),
            pct_preposition: pct(self.prepositions),
            skipped_captions: self.skipped_captions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub model: String,
    /// `"*"` for a per-model row; both fields `"*"` for the total.
    pub layer: String,
    pub units: usize,
    pub unique_words: usize,
    pub mean_length: f64,
    pub pct_noun: f64,
    pub pct_adjective: f64,
    pub pct_preposition: f64,
    pub skipped_captions: usize,
}

pub const ALL: &str = "*";

/// Per-layer rows, then per-model rows, then the total; empty input yields no rows.
pub fn corpus_stats(records: &[AnnotationRecord], tagger: &dyn Tagger) -> Vec<StatsRow> {
    let mut groups: BTreeMap<(String, String), StatsAccumulator> = BTreeMap::new();
    for r in records {
        let acc = groups.entry((r.model.clone(), r.layer.clone())).or_default();
        acc.units += 1;
        for a in &r.annotations {
            let toks = tokenize(a);
            match tagger.tag(&toks) {
                Ok(tags) if tags.len() == toks.len() => {
                    acc.captions += 1;
                    acc.tokens += toks.len();
                    acc.nouns += tags.iter().filter(|t| **t == Pos::Noun).count();
                    acc.adjectives += tags.iter().filter(|t| **t == Pos::Adjective).count();
                    acc.prepositions += tags.iter().filter(|t| **t == Pos::Preposition).count();
                    acc.words.extend(toks);
                }
                _ => acc.skipped_captions += 1,
            }
        }
    }
    if groups.is_empty() {
        return Vec::new();
    }
    let mut rows: Vec<StatsRow> = groups.iter().map(|((m, l), a)| a.row(m, l)).collect();
    let mut models: BTreeMap<&str, StatsAccumulator> = BTreeMap::new();
    let mut total = StatsAccumulator::default();
    for ((m, _), a) in &groups {
        models.entry(m.as_str()).or_default().merge(a);
        total.merge(a);
    }
    rows.extend(models.iter().map(|(m, a)| a.row(m, ALL)));
    rows.push(total.row(ALL, ALL));
    rows
}

/// Similarity of a candidate caption to a set of references, in [0, 1].
pub trait TextScorer: Sync {
    fn score(&self, candidate: &str, references: &[&str]) -> f64;
}

/// Multiset token F1 against each reference, maximized over references.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenF1;

impl TokenF1 {
    pub fn f1(a: &str, b: &str) -> f64 {
        let (ta, tb) = (tokenize(a), tokenize(b));
        if ta.is_empty() && tb.is_empty() {
            return 1.0;
        }
        let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
        for t in &tb {
            *counts.entry(t).or_default() += 1;
        }
        let mut overlap = 0usize;
        for t in &ta {
            if let Some(c) = counts.get_mut(t.as_str()) {
                if *c > 0 {
                    *c -= 1;
                    overlap += 1;
                }
            }
        }
        if overlap == 0 {
            return 0.0;
        }
        let p = overlap as f64 / ta.len() as f64;
        let r = overlap as f64 / tb.len() as f64;
        2.0 * p * r / (p + r)
    }
}

impl TextScorer for TokenF1 {
    fn score(&self, candidate: &str, references: &[&str]) -> f64 {
        references.iter().map(|r| Self::f1(candidate, r)).fold(0.0, f64::max)
    }
}

/// Mean leave-one-out score of each annotation against the others.
pub fn record_agreement(record: &AnnotationRecord, scorer: &dyn TextScorer) -> f64 {
    let n = record.annotations.len();
    let total: f64 = (0..n)
        .map(|i| {
            let others: Vec<&str> = (0..n).filter(|j| *j != i).map(|j| record.annotations[j].as_str()).collect();
            scorer.score(&record.annotations[i], &others)
        })
        .sum();
    total / n as f64
}

/// Mean record agreement per model.
pub fn inter_annotator_agreement(records: &[AnnotationRecord], scorer: &dyn TextScorer) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.model.clone()).or_default();
        e.0 += record_agreement(r, scorer);
        e.1 += 1;
    }
    acc.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    WithinNetwork,
    AcrossArch,
    AcrossDataset,
    AcrossTask,
    LeaveOneNetworkOut,
}

impl SplitKind {
    pub const ALL: [SplitKind; 5] = [
        SplitKind::WithinNetwork,
        SplitKind::AcrossArch,
        SplitKind::AcrossDataset,
        SplitKind::AcrossTask,
        SplitKind::LeaveOneNetworkOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::WithinNetwork => "within-network",
            SplitKind::AcrossArch => "across-arch",
            SplitKind::AcrossDataset => "across-dataset",
            SplitKind::AcrossTask => "across-task",
            SplitKind::LeaveOneNetworkOut => "leave-one-network-out",
        }
    }
}

impl FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown split kind {s:?}")))
    }
}

/// A named train/test partition, as indices into the record list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub disjoint: bool,
}

impl SplitSpec {
    pub fn train_records<'a>(&self, records: &'a [AnnotationRecord]) -> Vec<&'a AnnotationRecord> {
        self.train.iter().map(|&i| &records[i]).collect()
    }

    pub fn test_records<'a>(&self, records: &'a [AnnotationRecord]) -> Vec<&'a AnnotationRecord> {
        self.test.iter().map(|&i| &records[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    AlexNet,
    ResNet,
    BigGan,
    Dino,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    ImageNet,
    Places,
    Unknown,
}

/// Architecture family and training dataset, inferred from a model id such as
/// `"alexnet-imagenet"` or `"biggan/places365"`.
pub fn model_traits(model: &str) -> (Family, Dataset) {
    let m = model.to_lowercase();
    let family = if m.contains("alexnet") {
        Family::AlexNet
    } else if m.contains("resnet") {
        Family::ResNet
    } else if m.contains("biggan") {
        Family::BigGan
    } else if m.contains("dino") || m.contains("vit") {
        Family::Dino
    } else {
        Family::Other
    };
    let dataset = if m.contains("places") {
        Dataset::Places
    } else if m.contains("imagenet") {
        Dataset::ImageNet
    } else {
        Dataset::Unknown
    };
    (family, dataset)
}

fn is_cnn(f: Family) -> bool {
    matches!(f, Family::AlexNet | Family::ResNet | Family::BigGan)
}

fn is_classifier(f: Family) -> bool {
    matches!(f, Family::AlexNet | Family::ResNet)
}

fn predicate_split(
    records: &[AnnotationRecord],
    name: &str,
    train: impl Fn(Family, Dataset) -> bool,
    test: impl Fn(Family, Dataset) -> bool,
) -> Option<SplitSpec> {
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        let (f, d) = model_traits(&r.model);
        if test(f, d) {
            te.push(i);
        } else if train(f, d) {
            tr.push(i);
        }
    }
    (!tr.is_empty() && !te.is_empty()).then(|| SplitSpec {
        name: name.into(),
        train: tr,
        test: te,
        disjoint: true,
    })
}

fn model_seed(seed: u64, model: &str) -> u64 {
    model.bytes().fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Generalization splits. Within-network yields one 90/10 split per model
/// (test size `floor(0.1·n)` over distinct neurons); the others follow the
/// cross-architecture, cross-dataset and cross-task definitions and omit any
/// split with an empty side.
pub fn make_splits(records: &[AnnotationRecord], kind: SplitKind, seed: u64) -> Result<Vec<SplitSpec>> {
    let models: BTreeSet<&str> = records.iter().map(|r| r.model.as_str()).collect();
    let mut out = Vec::new();
    match kind {
        SplitKind::WithinNetwork => {
            for m in &models {
                let mut by_neuron: BTreeMap<NeuronRef, Vec<usize>> = BTreeMap::new();
                for (i, r) in records.iter().enumerate().filter(|(_, r)| r.model == *m) {
                    by_neuron.entry(r.neuron()).or_default().push(i);
                }
                let mut neurons: Vec<&NeuronRef> = by_neuron.keys().collect();
                neurons.shuffle(&mut ChaCha8Rng::seed_from_u64(model_seed(seed, m)));
                let n_test = neurons.len() / 10;
                let mut test: Vec<usize> = neurons[..n_test].iter().flat_map(|n| by_neuron[*n].clone()).collect();
                let mut train: Vec<usize> = neurons[n_test..].iter().flat_map(|n| by_neuron[*n].clone()).collect();
                test.sort_unstable();
                train.sort_unstable();
                out.push(SplitSpec {
                    name: format!("within-network/{m}"),
                    train,
                    test,
                    disjoint: true,
                });
            }
        }
        SplitKind::AcrossArch => {
            out.extend(predicate_split(records, "across-arch/alexnet->resnet", |f, _| f == Family::AlexNet, |f, _| f == Family::ResNet));
            out.extend(predicate_split(records, "across-arch/resnet->alexnet", |f, _| f == Family::ResNet, |f, _| f == Family::AlexNet));
            out.extend(predicate_split(records, "across-arch/cnn->vit", |f, _| is_cnn(f), |f, _| f == Family::Dino));
        }
        SplitKind::AcrossDataset => {
            let cnn_on = |d: Dataset| move |f: Family, dd: Dataset| is_cnn(f) && dd == d;
            out.extend(predicate_split(records, "across-dataset/imagenet->places", cnn_on(Dataset::ImageNet), cnn_on(Dataset::Places)));
            out.extend(predicate_split(records, "across-dataset/places->imagenet", cnn_on(Dataset::Places), cnn_on(Dataset::ImageNet)));
        }
        SplitKind::AcrossTask => {
            out.extend(predicate_split(records, "across-task/classifiers->biggan", |f, _| is_classifier(f), |f, _| f == Family::BigGan));
            out.extend(predicate_split(records, "across-task/biggan->classifiers", |f, _| f == Family::BigGan, |f, _| is_classifier(f)));
        }
        SplitKind::LeaveOneNetworkOut => {
            for m in &models {
                let (test, train): (Vec<usize>, Vec<usize>) = (0..records.len()).partition(|&i| records[i].model == *m);
                if !train.is_empty() {
                    out.push(SplitSpec {
                        name: format!("leave-one-network-out/{m}"),
                        train,
                        test,
                        disjoint: true,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::LexiconTagger;
    use proptest::prelude::*;

    pub(crate) fn rec(model: &str, layer: &str, unit: usize, caps: [&str; 3]) -> AnnotationRecord {
        AnnotationRecord {
            model: model.into(),
            layer: layer.into(),
            unit,
            exemplar_ref: format!("{model}/{layer}/unit_{unit:04}"),
            annotations: caps.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn loader_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let rs = vec![rec("m", "l1", 0, ["a", "b", "c"]), rec("m", "l2", 4, ["dogs", "cats", "red things"])];
        write_corpus(&p, &rs).unwrap();
        assert_eq!(load_corpus(&p).unwrap(), rs);
        let bad = r#"{"model":"m","layer":"l","unit":1,"exemplar_ref":"x","annotations":["a","b"]}"#;
        std::fs::write(&p, format!("{}\n{bad}\n", serde_json::to_string(&rs[0]).unwrap())).unwrap();
        let e = load_corpus(&p).unwrap_err().to_string();
        assert!(e.contains(":2") && e.contains("annotations"), "{e}");
        let extra = r#"{"model":"m","layer":"l","unit":1,"exemplar_ref":"x","annotations":["a","b","c"],"x":1}"#;
        std::fs::write(&p, extra).unwrap();
        assert!(load_corpus(&p).unwrap_err().to_string().contains(":1"));
    }

    #[test]
    fn stats_rows_and_additivity() {
        assert!(corpus_stats(&[], &LexiconTagger).is_empty());
        let rows = corpus_stats(&[rec("m", "l", 0, ["a b c", "a b c", "a b c"])], &LexiconTagger);
        assert_eq!(rows[0].mean_length, 3.0);
        let rs = vec![
            rec("m", "l1", 0, ["red dogs", "dogs on grass", "blue sky"]),
            rec("m", "l2", 0, ["text", "white letters", "words on signs"]),
            rec("n", "l1", 0, ["cats", "a cat", "the cat"]),
        ];
        let rows = corpus_stats(&rs, &LexiconTagger);
        let total = rows.last().unwrap();
        assert_eq!((total.model.as_str(), total.layer.as_str()), (ALL, ALL));
        let layer_units: usize = rows.iter().filter(|r| r.layer != ALL).map(|r| r.units).sum();
        let model_units: usize = rows.iter().filter(|r| r.layer == ALL && r.model != ALL).map(|r| r.units).sum();
        assert_eq!((layer_units, model_units, total.units), (3, 3, 3));
        let m_row = rows.iter().find(|r| r.model == "m" && r.layer == ALL).unwrap();
        assert!((m_row.mean_length - 13.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn agreement_identity_and_disjoint() {
        let same = rec("m", "l", 0, ["red dogs", "red dogs", "red dogs"]);
        let disjoint = rec("m", "l", 1, ["red dogs", "blue sky", "white text"]);
        assert_eq!(record_agreement(&same, &TokenF1), 1.0);
        assert_eq!(record_agreement(&disjoint, &TokenF1), 0.0);
        let per_model = inter_annotator_agreement(&[same, disjoint], &TokenF1);
        assert_eq!(per_model["m"], 0.5);
        assert!((TokenF1::f1("a b", "a c") - 0.5).abs() < 1e-12);
    }

    #[test]
    fn within_network_sizes_follow_floor() {
        let caps = ["x", "y", "z"];
        for (n, expect) in [(1152, 115), (1376, 137), (3904, 390), (3744, 374), (4992, 499)] {
            let rs: Vec<_> = (0..n).map(|u| rec("alexnet-imagenet", "conv1", u, caps)).collect();
            let s = make_splits(&rs, SplitKind::WithinNetwork, 0).unwrap();
            assert_eq!(s.len(), 1);
            assert_eq!(s[0].test.len(), expect);
            assert_eq!(s[0].train.len() + s[0].test.len(), n);
        }
    }

    fn zoo() -> Vec<AnnotationRecord> {
        let mut rs = Vec::new();
        for (m, n) in [
            ("alexnet-imagenet", 6),
            ("alexnet-places365", 5),
            ("resnet152-imagenet", 7),
            ("resnet152-places365", 7),
            ("biggan-imagenet", 4),
            ("biggan-places365", 3),
            ("dino-imagenet", 2),
        ] {
            for u in 0..n {
                rs.push(rec(m, "layer", u, ["a", "b", "c"]));
            }
        }
        rs
    }

    #[test]
    fn cross_splits_follow_definitions() {
        let rs = zoo();
        let arch = make_splits(&rs, SplitKind::AcrossArch, 0).unwrap();
        assert_eq!(arch.len(), 3);
        assert_eq!((arch[0].train.len(), arch[0].test.len()), (11, 14));
        assert_eq!((arch[2].train.len(), arch[2].test.len()), (32, 2));
        let ds = make_splits(&rs, SplitKind::AcrossDataset, 0).unwrap();
        assert_eq!((ds[0].train.len(), ds[0].test.len()), (17, 15));
        assert_eq!(ds[1].test.len(), 17);
        let task = make_splits(&rs, SplitKind::AcrossTask, 0).unwrap();
        assert_eq!((task[0].train.len(), task[0].test.len()), (25, 7));
        let lono = make_splits(&rs, SplitKind::LeaveOneNetworkOut, 0).unwrap();
        assert_eq!(lono.len(), 7);
        for s in &lono {
            let held = &rs[s.test[0]].model;
            assert!(s.train.iter().all(|&i| &rs[i].model != held));
        }
        assert!("sideways".parse::<SplitKind>().is_err());
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_cover(seed in 0u64..1000, kind_ix in 0usize..5) {
            let rs = zoo();
            let kind = SplitKind::ALL[kind_ix];
            for s in make_splits(&rs, kind, seed).unwrap() {
                let tr: BTreeSet<NeuronRef> = s.train.iter().map(|&i| rs[i].neuron()).collect();
                let te: BTreeSet<NeuronRef> = s.test.iter().map(|&i| rs[i].neuron()).collect();
                prop_assert!(tr.is_disjoint(&te));
                if kind == SplitKind::WithinNetwork || kind == SplitKind::LeaveOneNetworkOut {
                    let models: BTreeSet<&str> = s.train.iter().chain(&s.test).map(|&i| rs[i].model.as_str()).collect();
                    let covered = rs.iter().filter(|r| models.contains(r.model.as_str())).count();
                    prop_assert_eq!(s.train.len() + s.test.len(), covered);
                }
            }
        }

        #[test]
        fn agreement_in_unit_interval(a in "[a-d ]{0,12}", b in "[a-d ]{0,12}", c in "[a-d ]{1,12}") {
            let r = AnnotationRecord { model: "m".into(), layer: "l".into(), unit: 0, exemplar_ref: "x".into(), annotations: vec![a, b, c] };
            let s = record_agreement(&r, &TokenF1);
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
