//! Weighted-PMI reranking of beam candidates into neuron descriptions.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::captioner::{sort_candidates, CandidateDescription, Captioner};
use crate::dissect::ExemplarSet;
use crate::error::{ensure, Error, Result};
use crate::featpool::{encode_set, Backbone, FeatureBundle};
use crate::lm::LanguageModel;
use crate::neuron::NeuronRef;
use crate::text::Vocabulary;

pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_BEAM: usize = 50;
pub const DEFAULT_MAX_STEPS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeConfig {
    pub lambda_pmi: f64,
    pub beam_size: usize,
    pub max_steps: usize,
}

impl Default for DescribeConfig {
    fn default() -> Self {
        Self {
            lambda_pmi: DEFAULT_LAMBDA,
            beam_size: DEFAULT_BEAM,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

impl DescribeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.lambda_pmi >= 0.0 && self.lambda_pmi.is_finite(), || "λ must be finite and ≥ 0".into())?;
        ensure(self.beam_size >= 1, || "beam size must be at least 1".into())
    }
}

/// p(d | E): scores and proposes descriptions for a feature bundle.
pub trait ConditionalScorer: Sync {
    fn vocabulary(&self) -> &Vocabulary;
    fn score_conditional(&self, bundle: &FeatureBundle, tokens: &[usize]) -> Result<f64>;
    fn candidates(&self, bundle: &FeatureBundle, beam_size: usize, max_steps: usize) -> Result<Vec<CandidateDescription>>;
}

/// p(d): the description prior.
pub trait DescriptionPrior: Sync {
    fn vocabulary(&self) -> &Vocabulary;
    fn score_prior(&self, tokens: &[usize]) -> Result<f64>;
}

impl ConditionalScorer for Captioner {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }
    fn score_conditional(&self, bundle: &FeatureBundle, tokens: &[usize]) -> Result<f64> {
        Ok(self.score_sequence(bundle, tokens)?.0)
    }
    fn candidates(&self, bundle: &FeatureBundle, beam_size: usize, max_steps: usize) -> Result<Vec<CandidateDescription>> {
        self.beam_candidates(bundle, beam_size, max_steps)
    }
}

impl DescriptionPrior for LanguageModel {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }
    fn score_prior(&self, tokens: &[usize]) -> Result<f64> {
        self.score(tokens)
    }
}

pub fn wpmi_score(logp_cond: f64, logp_lm: f64, lambda: f64) -> f64 {
    logp_cond - lambda * logp_lm
}

/// Deduplicate (keeping the max `logp_cond`), recompute wPMI and sort by it
/// descending, ties broken by token sequence.
pub fn rerank(mut candidates: Vec<CandidateDescription>, lambda: f64) -> Vec<CandidateDescription> {
    sort_candidates(&mut candidates, |c| c.logp_cond);
    let mut seen = HashMap::new();
    candidates.retain(|c| seen.insert(c.tokens.clone(), ()).is_none());
    for c in &mut candidates {
        c.wpmi = wpmi_score(c.logp_cond, c.logp_lm, lambda);
    }
    sort_candidates(&mut candidates, |c| c.wpmi);
    candidates
}

fn check_vocab(cap: &dyn ConditionalScorer, lm: &dyn DescriptionPrior) -> Result<()> {
    if cap.vocabulary().tokens() != lm.vocabulary().tokens() {
        return Err(Error::Config("captioner and language model use different vocabularies".into()));
    }
    Ok(())
}

/// Ranked candidates for one bundle; the first is the description.
pub fn describe_bundle(
    bundle: &FeatureBundle,
    captioner: &dyn ConditionalScorer,
    lm: &dyn DescriptionPrior,
    cfg: &DescribeConfig,
) -> Result<Vec<CandidateDescription>> {
    cfg.validate()?;
    check_vocab(captioner, lm)?;
    let mut cands = captioner.candidates(bundle, cfg.beam_size, cfg.max_steps)?;
    for c in &mut cands {
        c.logp_lm = lm.score_prior(&c.tokens)?;
    }
    Ok(rerank(cands, cfg.lambda_pmi))
}

/// Encode an exemplar set with `backbone` and describe it.
pub fn describe_neuron<B: Backbone + ?Sized>(
    set: &ExemplarSet,
    backbone: &B,
    captioner: &dyn ConditionalScorer,
    lm: &dyn DescriptionPrior,
    cfg: &DescribeConfig,
) -> Result<Vec<CandidateDescription>> {
    let bundle = encode_set(backbone, set)?;
    describe_bundle(&bundle, captioner, lm, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerUp {
    pub description: String,
    pub logp_cond: f64,
    pub logp_lm: f64,
    pub wpmi: f64,
}

/// One row of the description table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionRow {
    pub model_id: String,
    pub layer_id: String,
    pub unit: usize,
    pub description: String,
    pub logp_cond: f64,
    pub logp_lm: f64,
    pub wpmi: f64,
    #[serde(default)]
    pub runner_ups: Vec<RunnerUp>,
}

impl DescriptionRow {
    /// Row from ranked candidates, keeping up to `runner_ups` alternatives.
    pub fn from_ranked(neuron: &NeuronRef, ranked: &[CandidateDescription], runner_ups: usize) -> Result<Self> {
        let top = ranked
            .first()
            .ok_or_else(|| Error::Argument(format!("no candidates for {neuron}")))?;
        Ok(Self {
            model_id: neuron.model_id.clone(),
            layer_id: neuron.layer_id.clone(),
            unit: neuron.unit,
            description: top.text.clone(),
            logp_cond: top.logp_cond,
            logp_lm: top.logp_lm,
            wpmi: top.wpmi,
            runner_ups: ranked
                .iter()
                .skip(1)
                .take(runner_ups)
                .map(|c| RunnerUp {
                    description: c.text.clone(),
                    logp_cond: c.logp_cond,
                    logp_lm: c.logp_lm,
                    wpmi: c.wpmi,
                })
                .collect(),
        })
    }

    pub fn neuron(&self) -> NeuronRef {
        NeuronRef::new(&self.model_id, &self.layer_id, self.unit)
    }
}

pub fn write_description_table(path: &Path, rows: &[DescriptionRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_description_table(path: &Path) -> Result<Vec<DescriptionRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(tokens: Vec<usize>, logp_cond: f64, logp_lm: f64) -> CandidateDescription {
        CandidateDescription {
            text: format!("{tokens:?}"),
            tokens,
            logp_cond,
            logp_lm,
            wpmi: 0.0,
        }
    }

    #[test]
    fn wpmi_hand_values() {
        assert!((wpmi_score(-1.0, -2.0, 0.2) - (-0.6)).abs() < 1e-12);
        assert_eq!(wpmi_score(-3.5, -9.0, 0.0), -3.5);
    }

    #[test]
    fn prior_penalty_flips_equal_conditionals() {
        let ranked = rerank(vec![cand(vec![1, 4, 2], -2.0, -1.0), cand(vec![1, 5, 2], -2.0, -3.0)], 0.2);
        assert_eq!(ranked[0].tokens, vec![1, 5, 2]);
        assert!((ranked[0].wpmi - (-1.4)).abs() < 1e-12);
        let single = rerank(vec![cand(vec![1, 4, 2], -5.0, -0.1)], 7.0);
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn duplicates_keep_max_conditional() {
        let ranked = rerank(vec![cand(vec![1, 4, 2], -3.0, -1.0), cand(vec![1, 4, 2], -1.0, -1.0)], 0.2);
        assert_eq!(ranked.len(), 1);
        assert_eq!(ranked[0].logp_cond, -1.0);
    }

    #[test]
    fn table_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let n = NeuronRef::new("m", "l", 3);
        let ranked = rerank(vec![cand(vec![1, 4, 2], -1.0, -2.0), cand(vec![1, 5, 2], -2.0, -2.0)], 0.2);
        let row = DescriptionRow::from_ranked(&n, &ranked, 5).unwrap();
        assert_eq!(row.runner_ups.len(), 1);
        write_description_table(&p, &[row.clone(), row.clone()]).unwrap();
        assert_eq!(read_description_table(&p).unwrap(), vec![row.clone(), row]);
        std::fs::write(&p, "{\"model_id\":1}\n").unwrap();
        let err = read_description_table(&p).unwrap_err().to_string();
        assert!(err.contains(":1"), "{err}");
    }

    fn arb_cands() -> impl Strategy<Value = Vec<CandidateDescription>> {
        prop::collection::vec((0usize..6, 0usize..6, -20.0f64..0.0, -20.0f64..0.0), 1..12).prop_map(|v| {
            v.into_iter().map(|(a, b, c, l)| cand(vec![1, 4 + a, 4 + b, 2], c, l)).collect()
        })
    }

    proptest! {
        #[test]
        fn lambda_zero_orders_by_conditional(c in arb_cands()) {
            let r = rerank(c, 0.0);
            for w in r.windows(2) {
                prop_assert!(w[0].logp_cond >= w[1].logp_cond);
            }
        }

        #[test]
        fn winner_prior_non_increasing_in_lambda(c in arb_cands(), l1 in 0.0f64..2.0, dl in 0.0f64..2.0) {
            let a = rerank(c.clone(), l1);
            let b = rerank(c, l1 + dl);
            prop_assert!(b[0].logp_lm <= a[0].logp_lm + 1e-12);
        }

        #[test]
        fn adding_candidate_preserves_relative_order(c in arb_cands(), extra in (0usize..6, 0usize..6, -20.0f64..0.0, -20.0f64..0.0), lam in 0.0f64..1.0) {
            let base = rerank(c.clone(), lam);
            let mut more = c;
            let e = cand(vec![1, 4 + extra.0, 4 + extra.1, 2], extra.2, extra.3);
            let new_tokens = e.tokens.clone();
            more.push(e);
            let grown = rerank(more, lam);
            if base.iter().all(|b| b.tokens != new_tokens) {
                let kept: Vec<_> = grown.iter().filter(|g| g.tokens != new_tokens).map(|g| g.tokens.clone()).collect();
                let orig: Vec<_> = base.iter().map(|b| b.tokens.clone()).collect();
                prop_assert_eq!(kept, orig);
            }
        }
    }
}
