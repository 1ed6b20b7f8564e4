//! Description-driven ablation analysis: score units by properties of their
//! descriptions, zero them in score order and track accuracy.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::describe::DescriptionRow;
use crate::error::{ensure, Error, Result};
use crate::language::{DependencyParser, Pos, Tagger, WordVectors};
use crate::model::{accuracy, Classifier, LabeledSet};
use crate::neuron::{UnitId, UnitSet};
use crate::text::tokenize;

/// Number of random orderings reported for the random baseline.
pub const RANDOM_TRIALS: usize = 5;
/// Default fraction of the unit pool ablated per curve step.
pub const DEFAULT_STEP_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Nouns,
    Verbs,
    Prepositions,
    Adjectives,
    Length,
    ParseDepth,
    MaxWordDiff,
    Random,
}

impl Criterion {
    pub const ALL: [Criterion; 8] = [
        Criterion::Nouns,
        Criterion::Verbs,
        Criterion::Prepositions,
        Criterion::Adjectives,
        Criterion::Length,
        Criterion::ParseDepth,
        Criterion::MaxWordDiff,
        Criterion::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Nouns => "nouns",
            Criterion::Verbs => "verbs",
            Criterion::Prepositions => "prepositions",
            Criterion::Adjectives => "adjectives",
            Criterion::Length => "length",
            Criterion::ParseDepth => "parse_depth",
            Criterion::MaxWordDiff => "max_word_diff",
            Criterion::Random => "random",
        }
    }

    fn pos(self) -> Option<Pos> {
        match self {
            Criterion::Nouns => Some(Pos::Noun),
            Criterion::Verbs => Some(Pos::Verb),
            Criterion::Prepositions => Some(Pos::Preposition),
            Criterion::Adjectives => Some(Pos::Adjective),
            _ => None,
        }
    }

    /// Count criteria binarize at score ≥ 1; the others at the top decile.
    pub fn is_count(self) -> bool {
        self.pos().is_some()
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown criterion {s:?}")))
    }
}

/// Language tools a criterion may need.
#[derive(Clone, Copy, Default)]
pub struct Providers<'a> {
    pub tagger: Option<&'a dyn Tagger>,
    pub parser: Option<&'a dyn DependencyParser>,
    pub vectors: Option<&'a dyn WordVectors>,
}

fn missing(what: &str, c: Criterion) -> Error {
    Error::Config(format!("criterion {c} requires a {what}"))
}

pub fn criterion_score(description: &str, criterion: Criterion, providers: &Providers) -> Result<f64> {
    let tokens = tokenize(description);
    if let Some(pos) = criterion.pos() {
        let tagger = providers.tagger.ok_or_else(|| missing("tagger", criterion))?;
        let tags = tagger.tag(&tokens)?;
        return Ok(tags.iter().filter(|t| **t == pos).count() as f64);
    }
    match criterion {
        Criterion::Length => Ok(tokens.len() as f64),
        Criterion::ParseDepth => {
            let tagger = providers.tagger.ok_or_else(|| missing("tagger", criterion))?;
            let parser = providers.parser.ok_or_else(|| missing("dependency parser", criterion))?;
            let tags = tagger.tag(&tokens)?;
            Ok(parser.depth(&tokens, &tags)? as f64)
        }
        Criterion::MaxWordDiff => {
            let wv = providers.vectors.ok_or_else(|| missing("word-vector table", criterion))?;
            let vecs: Vec<Vec<f32>> = tokens.iter().map(|t| wv.vector(t)).collect();
            let mut best = 0.0f64;
            for i in 0..vecs.len() {
                for j in i + 1..vecs.len() {
                    let d: f64 = vecs[i]
                        .iter()
                        .zip(&vecs[j])
                        .map(|(a, b)| ((a - b) as f64).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    best = best.max(d);
                }
            }
            Ok(best)
        }
        Criterion::Random => Err(Error::Argument("the random criterion has no per-description score".into())),
        _ => unreachable!("count criteria handled above"),
    }
}

/// Units in ablation order: descending score with ties in input order, or a
/// seeded shuffle for `Random`.
pub fn criterion_order(rows: &[DescriptionRow], criterion: Criterion, providers: &Providers, seed: u64) -> Result<Vec<UnitId>> {
    let units: Vec<UnitId> = rows.iter().map(|r| UnitId::new(r.layer_id.clone(), r.unit)).collect();
    if criterion == Criterion::Random {
        let mut units = units;
        units.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        return Ok(units);
    }
    let scores = rows
        .iter()
        .map(|r| criterion_score(&r.description, criterion, providers))
        .collect::<Result<Vec<_>>>()?;
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(idx.into_iter().map(|i| units[i].clone()).collect())
}

/// A zeroed-unit set over a base classifier plus a cache of evaluations.
/// The model is passed per call, so the session never owns or mutates weights.
#[derive(Debug, Clone, Default)]
pub struct AblationSession {
    pub model_id: String,
    zeroed: UnitSet,
    cache: HashMap<(String, UnitSet), f64>,
}

impl AblationSession {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            ..Self::default()
        }
    }

    pub fn zeroed(&self) -> &UnitSet {
        &self.zeroed
    }

    fn check_model(&self, model: &dyn Classifier) -> Result<()> {
        ensure(model.model_id() == self.model_id, || {
            format!("session belongs to {}, not {}", self.model_id, model.model_id())
        })
    }

    /// Union `units` into the zeroed set; nothing changes if any unit is invalid.
    pub fn ablate<I: IntoIterator<Item = UnitId>>(&mut self, model: &dyn Classifier, units: I) -> Result<()> {
        self.check_model(model)?;
        let units: UnitSet = units.into_iter().collect();
        model.validate_units(&units)?;
        self.zeroed.extend(units);
        Ok(())
    }

    pub fn reset(&mut self) {
        self.zeroed.clear();
    }

    /// Accuracy on `set` (named `eval_id` for caching) under an explicit unit set.
    pub fn accuracy_with(&mut self, model: &dyn Classifier, eval_id: &str, set: &LabeledSet, units: &UnitSet) -> Result<f64> {
        self.check_model(model)?;
        let key = (eval_id.to_string(), units.clone());
        if let Some(v) = self.cache.get(&key) {
            return Ok(*v);
        }
        let v = accuracy(model, set, units)?;
        self.cache.insert(key, v);
        Ok(v)
    }

    /// Accuracy under the current zeroed set.
    pub fn accuracy(&mut self, model: &dyn Classifier, eval_id: &str, set: &LabeledSet) -> Result<f64> {
        let units = self.zeroed.clone();
        self.accuracy_with(model, eval_id, set, &units)
    }

    /// Store an evaluation computed elsewhere on the same model.
    pub fn record(&mut self, eval_id: &str, units: UnitSet, accuracy: f64) {
        self.cache.insert((eval_id.to_string(), units), accuracy);
    }

    pub fn cached_evaluations(&self) -> usize {
        self.cache.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_ablated: usize,
    pub accuracy: f64,
}

/// Units per step for a pool: `ceil(step_fraction · pool)`.
pub fn step_size(pool: usize, step_fraction: f64) -> Result<usize> {
    ensure(step_fraction > 0.0 && step_fraction <= 1.0, || "step fraction must lie in (0, 1]".into())?;
    Ok(((step_fraction * pool as f64).ceil() as usize).max(1))
}

/// Ablation counts visited by a curve: 0, s, 2s, … and finally the whole pool.
pub fn step_schedule(pool: usize, step_fraction: f64) -> Result<Vec<usize>> {
    let s = step_size(pool, step_fraction)?;
    let mut out: Vec<usize> = (0..pool).step_by(s).collect();
    out.push(pool);
    if pool == 0 {
        out.truncate(1);
    }
    Ok(out)
}

/// Cumulatively zero `ordering` and evaluate after each step.
pub fn ablation_curve(
    model: &dyn Classifier,
    session: &mut AblationSession,
    ordering: &[UnitId],
    step_fraction: f64,
    eval_id: &str,
    eval: &LabeledSet,
) -> Result<Vec<CurvePoint>> {
    ensure(!eval.is_empty(), || "empty evaluation set".into())?;
    let all: UnitSet = ordering.iter().cloned().collect();
    ensure(all.len() == ordering.len(), || "ordering repeats a unit".into())?;
    model.validate_units(&all)?;
    let mut out = Vec::new();
    let mut units = UnitSet::new();
    let mut taken = 0;
    for n in step_schedule(ordering.len(), step_fraction)? {
        units.extend(ordering[taken..n].iter().cloned());
        taken = n;
        out.push(CurvePoint {
            n_ablated: n,
            accuracy: session.accuracy_with(model, eval_id, eval, &units)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub criterion: Criterion,
    /// Set for random orderings only.
    pub seed: Option<u64>,
    pub n_ablated: usize,
    pub accuracy: f64,
}

/// Curves for every criterion; `Random` runs with seeds `seed..seed + RANDOM_TRIALS`.
pub fn run_analysis(
    model: &dyn Classifier,
    rows: &[DescriptionRow],
    criteria: &[Criterion],
    providers: &Providers,
    step_fraction: f64,
    eval: &LabeledSet,
    seed: u64,
) -> Result<Vec<CurveRow>> {
    let mut session = AblationSession::new(model.model_id());
    let mut out = Vec::new();
    for &c in criteria {
        let seeds: Vec<Option<u64>> = if c == Criterion::Random {
            (0..RANDOM_TRIALS as u64).map(|i| Some(seed + i)).collect()
        } else {
            vec![None]
        };
        for s in seeds {
            let order = criterion_order(rows, c, providers, s.unwrap_or(seed))?;
            for p in ablation_curve(model, &mut session, &order, step_fraction, "eval", eval)? {
                out.push(CurveRow {
                    criterion: c,
                    seed: s,
                    n_ablated: p.n_ablated,
                    accuracy: p.accuracy,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadPoint {
    pub n_ablated: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub trials: usize,
}

/// Mean and range across seeds of one criterion's curves.
pub fn curve_spread(rows: &[CurveRow], criterion: Criterion) -> Vec<SpreadPoint> {
    let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.criterion == criterion) {
        by_n.entry(r.n_ablated).or_default().push(r.accuracy);
    }
    by_n.into_iter()
        .map(|(n, v)| SpreadPoint {
            n_ablated: n,
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().cloned().fold(f64::INFINITY, f64::min),
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            trials: v.len(),
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(mut w: W, rows: &[CurveRow]) -> std::io::Result<()> {
    writeln!(w, "criterion,seed,n_ablated,accuracy")?;
    for r in rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.criterion, seed, r.n_ablated, r.accuracy)?;
    }
    Ok(())
}

pub fn save_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_curve_csv(std::io::BufWriter::new(f), rows).map_err(|e| Error::io(path, e))
}

/// Per layer, the fraction of units whose description meets the criterion:
/// score ≥ 1 for counts, at or above the network-wide nearest-rank 90th
/// percentile otherwise.
pub fn layer_distribution(rows: &[DescriptionRow], criterion: Criterion, providers: &Providers) -> Result<BTreeMap<String, f64>> {
    let scores = rows
        .iter()
        .map(|r| criterion_score(&r.description, criterion, providers))
        .collect::<Result<Vec<_>>>()?;
    let cut = if criterion.is_count() {
        1.0
    } else {
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = ((0.9 * sorted.len() as f64).ceil() as usize).max(1);
        sorted.get(rank - 1).copied().unwrap_or(f64::INFINITY)
    };
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (r, s) in rows.iter().zip(&scores) {
        let e = tally.entry(r.layer_id.clone()).or_default();
        e.1 += 1;
        if *s >= cut {
            e.0 += 1;
        }
    }
    Ok(tally.into_iter().map(|(l, (hit, n))| (l, hit as f64 / n as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::{HashedWordVectors, HeadRuleParser, LexiconTagger};

    fn providers() -> (LexiconTagger, HeadRuleParser, HashedWordVectors) {
        (LexiconTagger, HeadRuleParser, HashedWordVectors::default())
    }

    fn row(layer: &str, unit: usize, d: &str) -> DescriptionRow {
        DescriptionRow {
            model_id: "m".into(),
            layer_id: layer.into(),
            unit,
            description: d.into(),
            logp_cond: -1.0,
            logp_lm: -1.0,
            wpmi: -0.8,
            runner_ups: vec![],
        }
    }

    #[test]
    fn scores() {
        let (t, p, v) = providers();
        let pr = Providers {
            tagger: Some(&t),
            parser: Some(&p),
            vectors: Some(&v),
        };
        assert_eq!(criterion_score("a b c", Criterion::Length, &pr).unwrap(), 3.0);
        assert_eq!(criterion_score("dog dog dog", Criterion::MaxWordDiff, &pr).unwrap(), 0.0);
        assert_eq!(criterion_score("dog", Criterion::MaxWordDiff, &pr).unwrap(), 0.0);
        assert_eq!(criterion_score("blue dog", Criterion::Adjectives, &pr).unwrap(), 1.0);
        assert_eq!(criterion_score("dogs on the grass", Criterion::Prepositions, &pr).unwrap(), 1.0);
        assert!(criterion_score("cat dog", Criterion::MaxWordDiff, &pr).unwrap() > 0.0);
        let none = Providers::default();
        assert!(matches!(criterion_score("dog", Criterion::Nouns, &none), Err(Error::Config(_))));
        assert!(matches!(criterion_score("dog", Criterion::MaxWordDiff, &none), Err(Error::Config(_))));
        assert!(criterion_score("dog", Criterion::Length, &none).is_ok());
    }

    #[test]
    fn schedule_uses_ceiling() {
        assert_eq!(step_size(512, 0.02).unwrap(), 11);
        let s = step_schedule(512, 0.02).unwrap();
        assert_eq!(&s[..3], &[0, 11, 22]);
        assert_eq!(*s.last().unwrap(), 512);
        assert_eq!(s[s.len() - 2], 506);
        assert_eq!(step_schedule(48, 1.0).unwrap(), vec![0, 48]);
        assert!(step_size(10, 0.0).is_err());
        assert!(step_size(10, 1.5).is_err());
    }

    #[test]
    fn ties_keep_input_order() {
        let (t, _, _) = providers();
        let pr = Providers {
            tagger: Some(&t),
            ..Providers::default()
        };
        let rows = vec![row("l1", 0, "dog"), row("l1", 1, "red dog"), row("l1", 2, "cat"), row("l2", 0, "blue cat")];
        let order = criterion_order(&rows, Criterion::Adjectives, &pr, 0).unwrap();
        let units: Vec<(String, usize)> = order.into_iter().map(|u| (u.layer, u.unit)).collect();
        assert_eq!(
            units,
            vec![("l1".into(), 1), ("l2".into(), 0), ("l1".into(), 0), ("l1".into(), 2)]
        );
        let r1 = criterion_order(&rows, Criterion::Random, &pr, 3).unwrap();
        assert_eq!(r1, criterion_order(&rows, Criterion::Random, &pr, 3).unwrap());
    }

    #[test]
    fn layer_fractions() {
        let (t, p, v) = providers();
        let pr = Providers {
            tagger: Some(&t),
            parser: Some(&p),
            vectors: Some(&v),
        };
        let same: Vec<DescriptionRow> = (0..6).map(|i| row(["a", "b"][i % 2], i, "red dogs")).collect();
        let d = layer_distribution(&same, Criterion::Adjectives, &pr).unwrap();
        assert_eq!(d["a"], d["b"]);
        assert_eq!(d["a"], 1.0);
        let one: Vec<DescriptionRow> = (0..20).map(|i| row("a", i, &"dog ".repeat(i + 1))).collect();
        let d = layer_distribution(&one, Criterion::Length, &pr).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d["a"] - 0.15).abs() < 1e-12);
    }
}
