//! Desk-scale end-to-end description experiment on a synthetic corpus.

use serde::{Deserialize, Serialize};

use crate::captioner::{train_captioner, CaptionExample, Captioner, DecoderConfig, TrainReport};
use crate::describe::{describe_bundle, DescribeConfig};
use crate::error::Result;
use crate::lm::{train_lm, LanguageModel, LmConfig, LmReport};
use crate::synth::{synth_corpus, SynthNeuron};
use crate::text::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDescribeConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub decoder: DecoderConfig,
    pub lm: LmConfig,
    pub beam_size: usize,
    pub lambdas: Vec<f64>,
}

impl SynthDescribeConfig {
    /// Scaled-down recipe that trains in minutes on one core.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_train: 200,
            n_test: 20,
            seed,
            decoder: DecoderConfig {
                embed_dim: 32,
                hidden_dim: 64,
                attention_dim: 64,
                dropout: 0.2,
                batch_size: 8,
                seed,
                ..DecoderConfig::default()
            },
            lm: LmConfig {
                embed_dim: 32,
                hidden_dim: 64,
                dropout: 0.2,
                batch_size: 8,
                seed,
                ..LmConfig::default()
            },
            beam_size: 10,
            lambdas: vec![0.0, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaOutcome {
    pub lambda: f64,
    pub matches: usize,
    pub total: usize,
    pub match_rate: f64,
    pub descriptions: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDescribeReport {
    pub seed: u64,
    pub captioner: TrainReport,
    pub lm: LmReport,
    pub outcomes: Vec<LambdaOutcome>,
}

/// Trained description models.
pub struct Describer {
    pub captioner: Captioner,
    pub lm: LanguageModel,
    pub captioner_report: TrainReport,
    pub lm_report: LmReport,
}

/// Train a captioner and language model on synthetic neurons.
pub fn train_describer(train: &[SynthNeuron], cfg: &SynthDescribeConfig) -> Result<Describer> {
    let texts: Vec<String> = train.iter().flat_map(|n| n.record.annotations.clone()).collect();
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), 1);
    let examples: Vec<CaptionExample> = train
        .iter()
        .map(|n| CaptionExample {
            bundle: n.bundle.clone(),
            captions: n.record.annotations.clone(),
        })
        .collect();
    let (captioner, captioner_report) = train_captioner(&examples, vocab.clone(), cfg.decoder.clone())?;
    let (lm, lm_report) = train_lm(&texts, vocab, cfg.lm.clone())?;
    Ok(Describer {
        captioner,
        lm,
        captioner_report,
        lm_report,
    })
}

/// Train on the first `n_train` synthetic neurons and describe the next `n_test`.
pub fn run_synth_describe(cfg: &SynthDescribeConfig) -> Result<SynthDescribeReport> {
    let corpus = synth_corpus(cfg.n_train + cfg.n_test, cfg.seed)?;
    let (train, test) = corpus.neurons.split_at(cfg.n_train);
    let Describer {
        captioner,
        lm,
        captioner_report: cap_report,
        lm_report,
    } = train_describer(train, cfg)?;
    let mut outcomes = Vec::new();
    for &lambda in &cfg.lambdas {
        let dcfg = DescribeConfig {
            lambda_pmi: lambda,
            beam_size: cfg.beam_size,
            max_steps: cfg.decoder.max_steps,
        };
        let mut descriptions = Vec::new();
        for n in test {
            let ranked = describe_bundle(&n.bundle, &captioner, &lm, &dcfg)?;
            descriptions.push((n.template.clone(), ranked[0].text.clone()));
        }
        let matches = descriptions.iter().filter(|(t, d)| t == d).count();
        outcomes.push(LambdaOutcome {
            lambda,
            matches,
            total: test.len(),
            match_rate: matches as f64 / test.len().max(1) as f64,
            descriptions,
        });
    }
    Ok(SynthDescribeReport {
        seed: cfg.seed,
        captioner: cap_report,
        lm: lm_report,
        outcomes,
    })
}
