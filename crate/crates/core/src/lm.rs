//! Unconditional description prior p(d): a stacked LSTM language model.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::holdout_split;
use crate::error::{ensure, Error, Result};
use crate::nn::{
    add_outer, clip_global_norm, dropout_mask, log_softmax, lstm_backward, lstm_forward, uniform, AdamW, LstmCache,
    LstmIdx, Params, StoredTensor,
};
use crate::text::{scored_targets, Vocabulary, BOS, UNK};

pub const LM_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub holdout_fraction: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            embed_dim: 128,
            hidden_dim: 512,
            dropout: 0.5,
            max_steps: 15,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            batch_size: 64,
            patience: 4,
            max_epochs: 100,
            holdout_fraction: 0.1,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.layers >= 1, || "the language model needs at least one layer".into())?;
        ensure(self.embed_dim > 0 && self.hidden_dim > 0 && self.max_steps > 0, || {
            "language model dimensions must be positive".into()
        })?;
        ensure((0.0..1.0).contains(&self.dropout), || "dropout must be in [0, 1)".into())?;
        ensure((0.0..1.0).contains(&self.holdout_fraction), || "holdout fraction must be in [0, 1)".into())?;
        ensure(self.batch_size > 0 && self.max_epochs > 0, || "batch size and epochs must be positive".into())
    }
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub vocab: Vocabulary,
    pub(crate) params: Params,
    embed: usize,
    cells: Vec<LstmIdx>,
    out: usize,
    out_b: usize,
}

struct LmStep {
    prev: usize,
    drops: Vec<Array1<f64>>,
    cells: Vec<LstmCache>,
    probs: Array1<f64>,
    log_probs: Array1<f64>,
}

impl LanguageModel {
    pub fn new(config: LmConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = Params::new();
        let v = vocab.len();
        let embed = p.push("embed", uniform(&mut rng, v, config.embed_dim, 0.1));
        let cells = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.embed_dim } else { config.hidden_dim };
                LstmIdx::register(&mut p, &mut rng, &format!("lstm{l}"), input, config.hidden_dim)
            })
            .collect();
        let out = p.push("out", uniform(&mut rng, config.hidden_dim, v, 1.0 / (config.hidden_dim as f64).sqrt()));
        let out_b = p.push("out.b", Array2::zeros((1, v)));
        Ok(Self {
            config,
            vocab,
            params: p,
            embed,
            cells,
            out,
            out_b,
        })
    }

    fn zero_state(&self) -> Vec<(Array1<f64>, Array1<f64>)> {
        let h = self.config.hidden_dim;
        vec![(Array1::zeros(h), Array1::zeros(h)); self.config.layers]
    }

    fn forward_step(
        &self,
        state: &mut [(Array1<f64>, Array1<f64>)],
        prev: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> LmStep {
        let p = &self.params;
        let mut drops = Vec::with_capacity(self.config.layers + 1);
        let mut cells = Vec::with_capacity(self.config.layers);
        let emb = p.values[self.embed].row(prev).to_owned();
        let d0 = dropout_mask(emb.len(), self.config.dropout, rng.as_deref_mut());
        let mut x = &emb * &d0;
        drops.push(d0);
        for (l, idx) in self.cells.iter().enumerate() {
            let (h, c) = state[l].clone();
            let cache = lstm_forward(p, *idx, x, h, c);
            state[l] = (cache.h.clone(), cache.c.clone());
            let d = dropout_mask(self.config.hidden_dim, self.config.dropout, rng.as_deref_mut());
            x = &cache.h * &d;
            drops.push(d);
            cells.push(cache);
        }
        let logits = x.dot(&p.values[self.out]) + p.bias(self.out_b);
        let log_probs = log_softmax(&logits);
        LmStep {
            prev,
            drops,
            cells,
            probs: log_probs.mapv(f64::exp),
            log_probs,
        }
    }

    fn clamp(&self, t: usize) -> usize {
        if t < self.vocab.len() {
            t
        } else {
            UNK
        }
    }

    /// Teacher-forced `Σ_t log p(w_t | w_<t)` over every token after BOS,
    /// EOS included. Dropout off.
    pub fn score(&self, tokens: &[usize]) -> Result<f64> {
        let targets = scored_targets(tokens, self.config.max_steps)?;
        let mut state = self.zero_state();
        let mut prev = BOS;
        let mut total = 0.0;
        for &y in targets {
            let y = self.clamp(y);
            total += self.forward_step(&mut state, prev, None).log_probs[y];
            prev = y;
        }
        Ok(total)
    }

    /// Cross-entropy sum of one sequence; optionally accumulates `weight · ∂CE`.
    fn sequence_loss(
        &self,
        tokens: &[usize],
        weight: f64,
        mut rng: Option<&mut ChaCha8Rng>,
        grads: Option<&mut Params>,
    ) -> Result<f64> {
        let targets = scored_targets(tokens, self.config.max_steps)?;
        let mut state = self.zero_state();
        let mut prev = BOS;
        let mut steps = Vec::with_capacity(targets.len());
        let mut ce = 0.0;
        for &y in targets {
            let y = self.clamp(y);
            let s = self.forward_step(&mut state, prev, rng.as_deref_mut());
            ce -= s.log_probs[y];
            steps.push(s);
            prev = y;
        }
        let Some(g) = grads else { return Ok(ce) };
        let p = &self.params;
        let layers = self.config.layers;
        let hidden = self.config.hidden_dim;
        let mut dh = vec![Array1::<f64>::zeros(hidden); layers];
        let mut dc = vec![Array1::<f64>::zeros(hidden); layers];
        for (t, s) in steps.iter().enumerate().rev() {
            let y = self.clamp(targets[t]);
            let mut dlogits = &s.probs * weight;
            dlogits[y] -= weight;
            let top = &s.cells[layers - 1].h * &s.drops[layers];
            add_outer(&mut g.values[self.out], &top.view(), &dlogits.view());
            g.values[self.out_b].row_mut(0).scaled_add(1.0, &dlogits);
            let mut dx_above = p.values[self.out].dot(&dlogits) * &s.drops[layers];
            for l in (0..layers).rev() {
                let dh_total = &dh[l] + &dx_above;
                let (dx, dh_prev, dc_prev) = lstm_backward(p, g, self.cells[l], &s.cells[l], &dh_total, &dc[l]);
                dh[l] = dh_prev;
                dc[l] = dc_prev;
                dx_above = dx * &s.drops[l];
            }
            g.values[self.embed].row_mut(s.prev).scaled_add(1.0, &dx_above);
        }
        Ok(ce)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = LmCheckpoint {
            format_version: LM_CHECKPOINT_VERSION,
            kind: "lm".into(),
            config: self.config.clone(),
            vocabulary: self.vocab.tokens().to_vec(),
            params: self.params.to_stored(),
        };
        fs::write(path, serde_json::to_vec(&ck)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: LmCheckpoint =
            serde_json::from_slice(&raw).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        if ck.format_version != LM_CHECKPOINT_VERSION || ck.kind != "lm" {
            return Err(Error::format(path.display().to_string(), "not a language model checkpoint of a supported version"));
        }
        let vocab = Vocabulary::from_words(ck.vocabulary.into_iter().skip(4));
        let mut lm = LanguageModel::new(ck.config, vocab)?;
        lm.params.load_stored(ck.params)?;
        Ok(lm)
    }
}

#[derive(Serialize, Deserialize)]
struct LmCheckpoint {
    format_version: u32,
    kind: String,
    config: LmConfig,
    vocabulary: Vec<String>,
    params: Vec<StoredTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub epochs: Vec<LmEpoch>,
    pub best_epoch: usize,
}

impl LmReport {
    /// Held-out per-token perplexity at the best epoch.
    pub fn best_holdout_perplexity(&self) -> Option<f64> {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .and_then(|e| e.holdout_loss)
            .map(f64::exp)
    }
}

/// Train on one sequence per text; early-stopped on held-out per-token loss.
pub fn train_lm(texts: &[String], vocab: Vocabulary, config: LmConfig) -> Result<(LanguageModel, LmReport)> {
    ensure(!texts.is_empty(), || "empty language model corpus".into())?;
    let mut lm = LanguageModel::new(config.clone(), vocab)?;
    let seqs: Vec<Vec<usize>> = texts.iter().map(|t| lm.vocab.encode(t, config.max_steps)).collect();
    let (train_idx, hold_idx) = holdout_split(seqs.len(), config.holdout_fraction, config.seed.wrapping_add(1));
    let hold_tokens: usize = hold_idx.iter().map(|&i| seqs[i].len() - 1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(29));
    let mut opt = AdamW::new(&lm.params, config.learning_rate, config.weight_decay);
    let mut grads = lm.params.zeros_like();
    let mut order = train_idx.clone();
    let mut best: Option<(f64, Params, usize)> = None;
    let mut stale = 0;
    let mut epochs = Vec::new();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut tok_sum) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let tokens: usize = batch.iter().map(|&i| seqs[i].len() - 1).sum();
            let w = 1.0 / tokens as f64;
            grads.fill_zero();
            for &i in batch {
                ce_sum += lm.sequence_loss(&seqs[i], w, Some(&mut rng), Some(&mut grads))?;
            }
            tok_sum += tokens;
            if !ce_sum.is_finite() || !grads.is_finite() {
                return Err(Error::Training(format!("non-finite language model loss at epoch {epoch}")));
            }
            clip_global_norm(&mut grads, config.grad_clip);
            opt.step(&mut lm.params, &grads);
        }
        let holdout_loss = if hold_idx.is_empty() {
            None
        } else {
            let mut s = 0.0;
            for &i in &hold_idx {
                s -= lm.score(&seqs[i])?;
            }
            Some(s / hold_tokens as f64)
        };
        epochs.push(LmEpoch {
            epoch,
            train_loss: ce_sum / tok_sum.max(1) as f64,
            holdout_loss,
        });
        tracing::debug!(epoch, ?holdout_loss, "lm epoch");
        match holdout_loss {
            Some(loss) => {
                if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
                    best = Some((loss, lm.params.clone(), epoch));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.patience {
                        break;
                    }
                }
            }
            None => best = Some((0.0, lm.params.clone(), epoch)),
        }
    }
    let (_, params, best_epoch) = best.expect("at least one epoch");
    lm.params = params;
    Ok((lm, LmReport { epochs, best_epoch }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::tests::{enumerate_sequences, micro_vocab};
    use crate::text::EOS;

    fn micro(seed: u64) -> LanguageModel {
        let cfg = LmConfig {
            embed_dim: 3,
            hidden_dim: 4,
            dropout: 0.0,
            max_steps: 3,
            seed,
            ..LmConfig::default()
        };
        LanguageModel::new(cfg, micro_vocab()).unwrap()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut lm = micro(5);
        lm.params.values.iter_mut().for_each(|v| v.mapv_inplace(|x| x * 3.0));
        let tokens = [BOS, 4, 5, 4, EOS];
        lm.config.max_steps = 4;
        let mut grads = lm.params.zeros_like();
        lm.sequence_loss(&tokens, 0.5, None, Some(&mut grads)).unwrap();
        for t in 0..lm.params.values.len() {
            for j in 0..lm.params.values[t].len() {
                let h = 1e-5;
                let mut plus = lm.clone();
                plus.params.values[t].as_slice_mut().unwrap()[j] += h;
                let mut minus = lm.clone();
                minus.params.values[t].as_slice_mut().unwrap()[j] -= h;
                let fd = 0.5 * (plus.sequence_loss(&tokens, 0.5, None, None).unwrap()
                    - minus.sequence_loss(&tokens, 0.5, None, None).unwrap())
                    / (2.0 * h);
                let an = grads.values[t].as_slice().unwrap()[j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(rel < 1e-4, "{}[{j}] fd={fd} an={an}", lm.params.names[t]);
            }
        }
    }

    #[test]
    fn probability_mass_is_at_most_one() {
        for seed in 0..3 {
            let lm = micro(seed);
            let seqs = enumerate_sequences(lm.vocab.len(), 3);
            let mass: f64 = seqs.iter().map(|s| lm.score(s).unwrap().exp()).sum();
            assert!(mass <= 1.0 + 1e-12 && mass > 0.0, "mass {mass}");
            // Enumeration oracle: prefix-chained step probabilities equal the teacher-forced score.
            for s in &seqs {
                let mut state = lm.zero_state();
                let mut manual = 0.0;
                for w in s.windows(2) {
                    manual += lm.forward_step(&mut state, w[0], None).log_probs[w[1]];
                }
                assert!((manual - lm.score(s).unwrap()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_model_and_order_sensitivity() {
        let mut lm = micro(1);
        let too_long = lm.score(&[BOS, 5, 4, 4, 5, EOS]).is_err();
        assert!(too_long, "four words exceed max_steps 3");
        let a = lm.score(&[BOS, 4, 5, 5, EOS]).unwrap();
        let b = lm.score(&[BOS, 5, 5, 4, EOS]).unwrap();
        assert!(a <= 0.0 && (a - b).abs() > 1e-9);
        let (o, ob) = (lm.out, lm.out_b);
        lm.params.values[o].fill(0.0);
        lm.params.values[ob].fill(0.0);
        let v = lm.vocab.len() as f64;
        assert!((lm.score(&[BOS, 4, 5, EOS]).unwrap() - 3.0 * (1.0 / v).ln()).abs() < 1e-12);
    }

    #[test]
    fn memorizes_a_repeated_sentence() {
        let texts = vec!["a b a".to_string(); 40];
        let cfg = LmConfig {
            embed_dim: 8,
            hidden_dim: 16,
            dropout: 0.0,
            max_steps: 5,
            learning_rate: 1e-2,
            batch_size: 8,
            max_epochs: 40,
            patience: 40,
            seed: 3,
            ..LmConfig::default()
        };
        let (_, report) = train_lm(&texts, micro_vocab(), cfg).unwrap();
        let ppl = report.best_holdout_perplexity().unwrap();
        assert!((ppl - 1.0).abs() < 0.05, "perplexity {ppl}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let lm = micro(2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.json");
        lm.save(&p).unwrap();
        let back = LanguageModel::load(&p).unwrap();
        assert_eq!(back.params, lm.params);
        assert!(train_lm(&[], micro_vocab(), LmConfig::default()).is_err());
    }
}
