//! Conditional description model p(d | E): an additive-attention LSTM decoder
//! over the k pooled exemplar vectors of a neuron.
//!
//! The decoder state is initialized from affine maps of the mean exemplar
//! vector. At each step it attends over the exemplar vectors with the previous
//! hidden state, gates the attended context, and feeds `[embedding; context]`
//! to an LSTM cell whose (dropped-out) hidden state predicts the next token.
//! Training minimizes token cross-entropy plus the doubly stochastic attention
//! penalty `λ_att · Σ_j (1 − Σ_t α_tj)²`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bleu::corpus_bleu;
use crate::error::{ensure, Error, Result};
use crate::featpool::FeatureBundle;
use crate::nn::{
    add_outer, clip_global_norm, dropout_mask, log_softmax, lstm_backward, lstm_forward, sigmoid, softmax, uniform,
    AdamW, LstmCache, LstmIdx, Params, StoredTensor,
};
use crate::text::{scored_targets, Vocabulary, BOS, EOS};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub max_steps: usize,
    pub dropout: f64,
    pub attn_reg_weight: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub holdout_fraction: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            hidden_dim: 512,
            attention_dim: 512,
            max_steps: 15,
            dropout: 0.5,
            attn_reg_weight: 1.0,
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

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(
            self.embed_dim > 0 && self.hidden_dim > 0 && self.attention_dim > 0 && self.max_steps > 0,
            || "decoder dimensions and max_steps must be positive".into(),
        )?;
        ensure(self.batch_size > 0 && self.max_epochs > 0, || "batch size and epochs must be positive".into())?;
        ensure(self.patience <= self.max_epochs, || "patience exceeds max_epochs".into())?;
        ensure((0.0..1.0).contains(&self.dropout), || "dropout must be in [0, 1)".into())?;
        ensure((0.0..1.0).contains(&self.holdout_fraction), || "holdout fraction must be in [0, 1)".into())?;
        ensure(self.learning_rate > 0.0 && self.attn_reg_weight >= 0.0, || "bad learning rate or λ_att".into())
    }
}

/// Attention weights over exemplar vectors, one row per decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub alpha: Array2<f64>,
}

impl AttentionTrace {
    /// `Σ_j (1 − Σ_t α_tj)²`.
    pub fn doubly_stochastic_penalty(&self) -> f64 {
        self.alpha.sum_axis(Axis(0)).iter().map(|s| (1.0 - s).powi(2)).sum()
    }
}

/// A candidate description with its scores (natural log).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDescription {
    pub tokens: Vec<usize>,
    pub text: String,
    pub logp_cond: f64,
    pub logp_lm: f64,
    pub wpmi: f64,
}

#[derive(Debug, Clone, Copy)]
struct Idx {
    embed: usize,
    init_h: usize,
    init_h_b: usize,
    init_c: usize,
    init_c_b: usize,
    enc_att: usize,
    enc_att_b: usize,
    dec_att: usize,
    dec_att_b: usize,
    att_v: usize,
    gate: usize,
    gate_b: usize,
    lstm: LstmIdx,
    out: usize,
    out_b: usize,
}

#[derive(Debug, Clone)]
pub struct Captioner {
    pub config: DecoderConfig,
    pub vocab: Vocabulary,
    pub backbone_id: String,
    pub feature_dim: usize,
    pub(crate) params: Params,
    idx: Idx,
}

/// Per-step forward values kept for backpropagation.
struct StepCache {
    prev_token: usize,
    h_prev: Array1<f64>,
    u: Array2<f64>,
    alpha: Array1<f64>,
    context: Array1<f64>,
    gate: Array1<f64>,
    lstm: LstmCache,
    drop: Array1<f64>,
    probs: Array1<f64>,
    log_probs: Array1<f64>,
}

/// Decoder state between steps.
#[derive(Debug, Clone)]
pub struct DecoderState {
    h: Array1<f64>,
    c: Array1<f64>,
}

/// Features prepared once per bundle.
pub struct Encoded {
    feats: Array2<f64>,
    mean: Array1<f64>,
    proj: Array2<f64>,
}

impl Captioner {
    pub fn new(config: DecoderConfig, vocab: Vocabulary, feature_dim: usize, backbone_id: impl Into<String>) -> Result<Self> {
        config.validate()?;
        ensure(feature_dim > 0, || "feature dimension must be positive".into())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (e, h, a, d, v) = (config.embed_dim, config.hidden_dim, config.attention_dim, feature_dim, vocab.len());
        let mut p = Params::new();
        let sd = 1.0 / (d as f64).sqrt();
        let sh = 1.0 / (h as f64).sqrt();
        let sa = 1.0 / (a as f64).sqrt();
        let idx = Idx {
            embed: p.push("embed", uniform(&mut rng, v, e, 0.1)),
            init_h: p.push("init_h", uniform(&mut rng, d, h, sd)),
            init_h_b: p.push("init_h.b", Array2::zeros((1, h))),
            init_c: p.push("init_c", uniform(&mut rng, d, h, sd)),
            init_c_b: p.push("init_c.b", Array2::zeros((1, h))),
            enc_att: p.push("enc_att", uniform(&mut rng, d, a, sd)),
            enc_att_b: p.push("enc_att.b", Array2::zeros((1, a))),
            dec_att: p.push("dec_att", uniform(&mut rng, h, a, sh)),
            dec_att_b: p.push("dec_att.b", Array2::zeros((1, a))),
            att_v: p.push("att_v", uniform(&mut rng, a, 1, sa)),
            gate: p.push("gate", uniform(&mut rng, h, d, sh)),
            gate_b: p.push("gate.b", Array2::zeros((1, d))),
            lstm: LstmIdx::register(&mut p, &mut rng, "lstm", e + d, h),
            out: p.push("out", uniform(&mut rng, h, v, sh)),
            out_b: p.push("out.b", Array2::zeros((1, v))),
        };
        Ok(Self {
            config,
            vocab,
            backbone_id: backbone_id.into(),
            feature_dim,
            params: p,
            idx,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn encode(&self, bundle: &FeatureBundle) -> Result<Encoded> {
        ensure(bundle.dim() == self.feature_dim, || {
            format!("bundle dim {} != captioner feature dim {}", bundle.dim(), self.feature_dim)
        })?;
        let k = bundle.k();
        let feats = Array2::from_shape_fn((k, self.feature_dim), |(j, c)| bundle.vectors[j][c] as f64);
        Ok(self.encode_matrix(feats))
    }

    fn encode_matrix(&self, feats: Array2<f64>) -> Encoded {
        let p = &self.params;
        let mean = feats.mean_axis(Axis(0)).expect("non-empty bundle");
        let proj = feats.dot(&p.values[self.idx.enc_att]) + &p.values[self.idx.enc_att_b];
        Encoded { feats, mean, proj }
    }

    pub fn initial_state(&self, enc: &Encoded) -> DecoderState {
        let p = &self.params;
        DecoderState {
            h: enc.mean.dot(&p.values[self.idx.init_h]) + p.bias(self.idx.init_h_b),
            c: enc.mean.dot(&p.values[self.idx.init_c]) + p.bias(self.idx.init_c_b),
        }
    }

    fn step_cached(&self, enc: &Encoded, state: &DecoderState, prev_token: usize, drop: Array1<f64>) -> StepCache {
        let p = &self.params;
        let ix = self.idx;
        let q = state.h.dot(&p.values[ix.dec_att]) + p.bias(ix.dec_att_b);
        let u = (&enc.proj + &q.view().insert_axis(Axis(0))).mapv(f64::tanh);
        let scores = u.dot(&p.values[ix.att_v]).column(0).to_owned();
        let alpha = softmax(&scores);
        let context = enc.feats.t().dot(&alpha);
        let gate = (state.h.dot(&p.values[ix.gate]) + p.bias(ix.gate_b)).mapv(sigmoid);
        let z = &gate * &context;
        let emb = p.values[ix.embed].row(prev_token);
        let mut x = Array1::zeros(emb.len() + z.len());
        x.slice_mut(ndarray::s![..emb.len()]).assign(&emb);
        x.slice_mut(ndarray::s![emb.len()..]).assign(&z);
        let lstm = lstm_forward(p, ix.lstm, x, state.h.clone(), state.c.clone());
        let hd = &lstm.h * &drop;
        let logits = hd.dot(&p.values[ix.out]) + p.bias(ix.out_b);
        let log_probs = log_softmax(&logits);
        StepCache {
            prev_token,
            h_prev: state.h.clone(),
            u,
            alpha,
            context,
            gate,
            probs: log_probs.mapv(f64::exp),
            log_probs,
            lstm,
            drop,
        }
    }

    /// One inference step: next-token log-probabilities, new state and attention.
    pub fn step(&self, enc: &Encoded, state: &DecoderState, prev_token: usize) -> (Array1<f64>, DecoderState, Array1<f64>) {
        let c = self.step_cached(enc, state, prev_token, Array1::ones(self.config.hidden_dim));
        let next = DecoderState {
            h: c.lstm.h.clone(),
            c: c.lstm.c.clone(),
        };
        (c.log_probs, next, c.alpha)
    }

    /// Teacher-forced log p(tokens | E) and the attention trace. Dropout off.
    pub fn score_sequence(&self, bundle: &FeatureBundle, tokens: &[usize]) -> Result<(f64, AttentionTrace)> {
        let enc = self.encode(bundle)?;
        self.score_encoded(&enc, tokens)
    }

    fn score_encoded(&self, enc: &Encoded, tokens: &[usize]) -> Result<(f64, AttentionTrace)> {
        let targets = scored_targets(tokens, self.config.max_steps)?;
        let mut state = self.initial_state(enc);
        let mut prev = BOS;
        let mut total = 0.0;
        let mut alpha = Array2::zeros((targets.len(), enc.feats.nrows()));
        for (t, &y) in targets.iter().enumerate() {
            let y = self.clamp_token(y);
            let (lp, next, a) = self.step(enc, &state, prev);
            total += lp[y];
            alpha.row_mut(t).assign(&a);
            state = next;
            prev = y;
        }
        Ok((total, AttentionTrace { alpha }))
    }

    fn clamp_token(&self, t: usize) -> usize {
        if t < self.vocab.len() {
            t
        } else {
            crate::text::UNK
        }
    }

    /// Argmax decoding over emittable tokens, ties to the lowest index.
    pub fn greedy(&self, bundle: &FeatureBundle, max_steps: usize) -> Result<Vec<usize>> {
        let enc = self.encode(bundle)?;
        Ok(self.greedy_encoded(&enc, max_steps))
    }

    fn greedy_encoded(&self, enc: &Encoded, max_steps: usize) -> Vec<usize> {
        let mut state = self.initial_state(enc);
        let mut tokens = vec![BOS];
        for _ in 0..max_steps {
            let (lp, next, _) = self.step(enc, &state, *tokens.last().unwrap());
            let best = (0..lp.len())
                .filter(|i| Vocabulary::is_emittable(*i))
                .fold(None::<usize>, |acc, i| match acc {
                    Some(b) if lp[b] >= lp[i] => Some(b),
                    _ => Some(i),
                })
                .unwrap_or(EOS);
            tokens.push(best);
            state = next;
            if best == EOS {
                return tokens;
            }
        }
        tokens.push(EOS);
        tokens
    }

    /// Length-unnormalized beam search; returns every hypothesis of the final
    /// beam (early-finished ones included), EOS-terminated, exactly rescored,
    /// deduplicated and sorted by `logp_cond` descending (ties lexicographic).
    pub fn beam_candidates(&self, bundle: &FeatureBundle, beam_size: usize, max_steps: usize) -> Result<Vec<CandidateDescription>> {
        ensure(beam_size >= 1, || "beam size must be at least 1".into())?;
        ensure(max_steps <= self.config.max_steps, || {
            format!("max_steps {max_steps} exceeds the model's {}", self.config.max_steps)
        })?;
        let enc = self.encode(bundle)?;
        struct Hyp {
            tokens: Vec<usize>,
            score: f64,
            state: Option<DecoderState>,
        }
        let mut beam = vec![Hyp {
            tokens: vec![BOS],
            score: 0.0,
            state: Some(self.initial_state(&enc)),
        }];
        for _ in 0..max_steps {
            if beam.iter().all(|h| h.state.is_none()) {
                break;
            }
            let mut next: Vec<Hyp> = Vec::new();
            for hyp in beam {
                let Some(state) = hyp.state else {
                    next.push(hyp);
                    continue;
                };
                let (lp, new_state, _) = self.step(&enc, &state, *hyp.tokens.last().unwrap());
                for w in (0..lp.len()).filter(|i| Vocabulary::is_emittable(*i)) {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(w);
                    next.push(Hyp {
                        tokens,
                        score: hyp.score + lp[w],
                        state: (w != EOS).then(|| new_state.clone()),
                    });
                }
            }
            next.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
            next.dedup_by(|a, b| a.tokens == b.tokens);
            next.truncate(beam_size);
            beam = next;
        }
        let mut out = Vec::with_capacity(beam.len());
        for mut hyp in beam {
            if hyp.tokens.last() != Some(&EOS) {
                hyp.tokens.push(EOS);
            }
            let (logp, _) = self.score_encoded(&enc, &hyp.tokens)?;
            out.push(CandidateDescription {
                text: self.vocab.decode(&hyp.tokens),
                tokens: hyp.tokens,
                logp_cond: logp,
                logp_lm: 0.0,
                wpmi: logp,
            });
        }
        sort_candidates(&mut out, |c| c.logp_cond);
        out.dedup_by(|a, b| a.tokens == b.tokens);
        Ok(out)
    }

    /// Loss of one sequence and, optionally, its gradient accumulated into `grads`.
    ///
    /// `loss = ce_weight · Σ_t CE_t + pen_weight · Σ_j (1 − Σ_t α_tj)²`.
    /// Returns `(Σ_t CE_t, penalty)` unweighted.
    fn sequence_loss(
        &self,
        enc: &Encoded,
        tokens: &[usize],
        ce_weight: f64,
        pen_weight: f64,
        rng: Option<&mut ChaCha8Rng>,
        grads: Option<&mut Params>,
    ) -> Result<(f64, f64)> {
        let targets = scored_targets(tokens, self.config.max_steps)?;
        let hidden = self.config.hidden_dim;
        let mut rng = rng;
        let mut state = self.initial_state(enc);
        let mut prev = BOS;
        let mut caches = Vec::with_capacity(targets.len());
        let mut ce = 0.0;
        for &y in targets {
            let y = self.clamp_token(y);
            let drop = dropout_mask(hidden, self.config.dropout, rng.as_deref_mut());
            let c = self.step_cached(enc, &state, prev, drop);
            ce -= c.log_probs[y];
            state = DecoderState {
                h: c.lstm.h.clone(),
                c: c.lstm.c.clone(),
            };
            caches.push(c);
            prev = y;
        }
        let k = enc.feats.nrows();
        let mut mass = Array1::<f64>::zeros(k);
        for c in &caches {
            mass += &c.alpha;
        }
        let penalty: f64 = mass.iter().map(|s| (1.0 - s).powi(2)).sum();
        let Some(g) = grads else {
            return Ok((ce, penalty));
        };

        let p = &self.params;
        let ix = self.idx;
        let e = self.config.embed_dim;
        let dalpha_pen = mass.mapv(|s| -2.0 * pen_weight * (1.0 - s));
        let mut dproj = Array2::<f64>::zeros(enc.proj.raw_dim());
        let mut dh = Array1::<f64>::zeros(hidden);
        let mut dc = Array1::<f64>::zeros(hidden);
        for (t, c) in caches.iter().enumerate().rev() {
            let y = self.clamp_token(targets[t]);
            let mut dlogits = c.probs.clone() * ce_weight;
            dlogits[y] -= ce_weight;
            let hd = &c.lstm.h * &c.drop;
            add_outer(&mut g.values[ix.out], &hd.view(), &dlogits.view());
            g.values[ix.out_b].row_mut(0).scaled_add(1.0, &dlogits);
            dh += &(p.values[ix.out].dot(&dlogits) * &c.drop);

            let (dx, mut dh_prev, dc_prev) = lstm_backward(p, g, ix.lstm, &c.lstm, &dh, &dc);
            let demb = dx.slice(ndarray::s![..e]);
            g.values[ix.embed].row_mut(c.prev_token).scaled_add(1.0, &demb);
            let dz = dx.slice(ndarray::s![e..]).to_owned();

            // z = gate ⊙ context
            let dgate = &dz * &c.context;
            let dcontext = &dz * &c.gate;
            let dgate_pre = &dgate * &c.gate.mapv(|s| s * (1.0 - s));
            add_outer(&mut g.values[ix.gate], &c.h_prev.view(), &dgate_pre.view());
            g.values[ix.gate_b].row_mut(0).scaled_add(1.0, &dgate_pre);
            dh_prev += &p.values[ix.gate].dot(&dgate_pre);

            // context = Σ_j α_j v_j, plus the penalty term.
            let dalpha = enc.feats.dot(&dcontext) + &dalpha_pen;
            let inner = c.alpha.dot(&dalpha);
            let dscore = &c.alpha * &(dalpha - inner);
            // score_j = u_j · w_v, u = tanh(proj + q)
            let dv = c.u.t().dot(&dscore);
            g.values[ix.att_v].column_mut(0).scaled_add(1.0, &dv);
            let wv = p.values[ix.att_v].column(0);
            let mut dpre = c.u.mapv(|u| 1.0 - u * u);
            for (j, mut row) in dpre.rows_mut().into_iter().enumerate() {
                row.mapv_inplace(|v| v * dscore[j]);
                row *= &wv;
            }
            dproj += &dpre;
            let dq = dpre.sum_axis(Axis(0));
            add_outer(&mut g.values[ix.dec_att], &c.h_prev.view(), &dq.view());
            g.values[ix.dec_att_b].row_mut(0).scaled_add(1.0, &dq);
            dh_prev += &p.values[ix.dec_att].dot(&dq);

            dh = dh_prev;
            dc = dc_prev;
        }
        add_outer(&mut g.values[ix.init_h], &enc.mean.view(), &dh.view());
        g.values[ix.init_h_b].row_mut(0).scaled_add(1.0, &dh);
        add_outer(&mut g.values[ix.init_c], &enc.mean.view(), &dc.view());
        g.values[ix.init_c_b].row_mut(0).scaled_add(1.0, &dc);
        g.values[ix.enc_att] += &enc.feats.t().dot(&dproj);
        g.values[ix.enc_att_b].row_mut(0).scaled_add(1.0, &dproj.sum_axis(Axis(0)));
        Ok((ce, penalty))
    }

    /// Multiply every parameter by `factor`.
    pub fn scale_parameters(&mut self, factor: f64) {
        self.params.values.iter_mut().for_each(|v| v.mapv_inplace(|x| x * factor));
    }

    /// Worst relative error between the analytic gradient of the training
    /// loss (token-averaged cross-entropy plus penalty averaged over k) on one
    /// sequence and central differences with step `h`, dropout off.
    pub fn gradient_check(&self, bundle: &FeatureBundle, tokens: &[usize], h: f64) -> Result<f64> {
        let enc = self.encode(bundle)?;
        let targets = scored_targets(tokens, self.config.max_steps)?.len();
        let (ce_w, pen_w) = (1.0 / targets as f64, 1.0 / bundle.vectors.len() as f64);
        let mut grads = self.params.zeros_like();
        self.sequence_loss(&enc, tokens, ce_w, pen_w, None, Some(&mut grads))?;
        let loss = |m: &Captioner| -> Result<f64> {
            let enc = m.encode(bundle)?;
            let (ce, pen) = m.sequence_loss(&enc, tokens, ce_w, pen_w, None, None)?;
            Ok(ce_w * ce + pen_w * pen)
        };
        let mut worst = 0.0f64;
        let mut probe = self.clone();
        for t in 0..self.params.values.len() {
            for j in 0..self.params.values[t].len() {
                let orig = self.params.values[t].as_slice().expect("contiguous")[j];
                probe.params.values[t].as_slice_mut().expect("contiguous")[j] = orig + h;
                let up = loss(&probe)?;
                probe.params.values[t].as_slice_mut().expect("contiguous")[j] = orig - h;
                let down = loss(&probe)?;
                probe.params.values[t].as_slice_mut().expect("contiguous")[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.values[t].as_slice().expect("contiguous")[j];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
            }
        }
        Ok(worst)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = CaptionerCheckpoint {
            format_version: CHECKPOINT_VERSION,
            kind: "captioner".into(),
            config: self.config.clone(),
            vocabulary: self.vocab.tokens().to_vec(),
            backbone_id: self.backbone_id.clone(),
            feature_dim: self.feature_dim,
            params: self.params.to_stored(),
        };
        fs::write(path, serde_json::to_vec(&ck)?).map_err(|e| Error::io(path, e))
    }

    /// Load a checkpoint, refusing one trained on a different backbone.
    pub fn load(path: &Path, expected_backbone: Option<&str>) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: CaptionerCheckpoint =
            serde_json::from_slice(&raw).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION || ck.kind != "captioner" {
            return Err(Error::format(path.display().to_string(), "not a captioner checkpoint of a supported version"));
        }
        if let Some(b) = expected_backbone {
            if b != ck.backbone_id {
                return Err(Error::Config(format!(
                    "checkpoint was trained on backbone {} but {b} was requested",
                    ck.backbone_id
                )));
            }
        }
        let vocab = Vocabulary::from_words(ck.vocabulary.into_iter().skip(4));
        let mut model = Captioner::new(ck.config, vocab, ck.feature_dim, ck.backbone_id)?;
        model.params.load_stored(ck.params)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CaptionerCheckpoint {
    format_version: u32,
    kind: String,
    config: DecoderConfig,
    vocabulary: Vec<String>,
    backbone_id: String,
    feature_dim: usize,
    params: Vec<StoredTensor>,
}

/// Sort descending by `key`, ties broken by ascending token sequence.
pub fn sort_candidates(c: &mut [CandidateDescription], key: impl Fn(&CandidateDescription) -> f64) {
    c.sort_by(|a, b| key(b).total_cmp(&key(a)).then_with(|| a.tokens.cmp(&b.tokens)));
}

/// One neuron's training material: its bundle and reference captions.
#[derive(Debug, Clone)]
pub struct CaptionExample {
    pub bundle: FeatureBundle,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training cross-entropy per token (nats), dropout active.
    pub train_loss: f64,
    pub train_penalty: f64,
    pub holdout_bleu: Option<f64>,
    /// Mean held-out cross-entropy per token, dropout off.
    pub holdout_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Held-out (BLEU, loss) ordering: higher BLEU wins; equal BLEU falls back to lower loss.
fn improves(new: (f64, f64), best: (f64, f64)) -> bool {
    const TIE: f64 = 1e-12;
    new.0 > best.0 + TIE || ((new.0 - best.0).abs() <= TIE && new.1 < best.1)
}

/// Seeded split of `n` items into (train, holdout) index sets.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001));
    let h = ((n as f64) * fraction).floor() as usize;
    let h = if fraction > 0.0 && n > 1 { h.max(1) } else { h };
    let mut hold = idx[..h].to_vec();
    let mut train = idx[h..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    (train, hold)
}

/// Train a captioner. A fraction of examples is held out; training stops when
/// held-out BLEU-4 has not improved for `patience` epochs and the best
/// checkpoint is returned. Equal BLEU counts as an improvement only when
/// held-out cross-entropy drops. Without a holdout, all `max_epochs` run.
pub fn train_captioner(
    examples: &[CaptionExample],
    vocab: Vocabulary,
    config: DecoderConfig,
) -> Result<(Captioner, TrainReport)> {
    ensure(!examples.is_empty(), || "empty training corpus".into())?;
    let dim = examples[0].bundle.dim();
    let backbone = examples[0].bundle.backbone_id.clone();
    ensure(examples.iter().all(|e| e.bundle.dim() == dim && !e.captions.is_empty()), || {
        "all examples need captions and equal feature dims".into()
    })?;
    let mut model = Captioner::new(config.clone(), vocab, dim, backbone)?;
    let (train_idx, hold_idx) = holdout_split(examples.len(), config.holdout_fraction, config.seed);
    let max_words = config.max_steps;
    let items: Vec<(usize, Vec<usize>)> = train_idx
        .iter()
        .flat_map(|&i| examples[i].captions.iter().map(move |c| (i, c)))
        .map(|(i, c)| (i, model.vocab.encode(c, max_words)))
        .collect();
    let hold_refs: Vec<Vec<Vec<usize>>> = hold_idx
        .iter()
        .map(|&i| {
            examples[i]
                .captions
                .iter()
                .map(|c| {
                    let t = model.vocab.encode(c, max_words);
                    t[1..t.len() - 1].to_vec()
                })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(17));
    let mut opt = AdamW::new(&model.params, config.learning_rate, config.weight_decay);
    let mut grads = model.params.zeros_like();
    let mut best: Option<((f64, f64), Params, usize)> = None;
    let mut stale = 0;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut tok_sum, mut pen_sum) = (0.0, 0usize, 0.0);
        for batch in order.chunks(config.batch_size) {
            let tokens_in_batch: usize = batch.iter().map(|&b| items[b].1.len() - 1).sum();
            let k = examples[items[batch[0]].0].bundle.k().max(1);
            let ce_w = 1.0 / tokens_in_batch as f64;
            let pen_w = config.attn_reg_weight / (batch.len() * k) as f64;
            grads.fill_zero();
            for &b in batch {
                let (ex, tokens) = (&examples[items[b].0], &items[b].1);
                let enc = model.encode(&ex.bundle)?;
                let (ce, pen) = model.sequence_loss(&enc, tokens, ce_w, pen_w, Some(&mut rng), Some(&mut grads))?;
                ce_sum += ce;
                pen_sum += pen;
            }
            tok_sum += tokens_in_batch;
            if !ce_sum.is_finite() || !grads.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite captioner loss at epoch {epoch} (cross-entropy sum {ce_sum})"
                )));
            }
            clip_global_norm(&mut grads, config.grad_clip);
            opt.step(&mut model.params, &grads);
        }
        let holdout = if hold_idx.is_empty() {
            None
        } else {
            let (mut hyps, mut ce, mut toks) = (Vec::with_capacity(hold_idx.len()), 0.0, 0usize);
            for &i in &hold_idx {
                let enc = model.encode(&examples[i].bundle)?;
                let t = model.greedy_encoded(&enc, config.max_steps);
                hyps.push(t[1..t.len() - 1].to_vec());
                for c in &examples[i].captions {
                    let seq = model.vocab.encode(c, max_words);
                    ce -= model.score_encoded(&enc, &seq)?.0;
                    toks += seq.len() - 1;
                }
            }
            Some((corpus_bleu(&hyps, &hold_refs), ce / toks.max(1) as f64))
        };
        let stats = EpochStats {
            epoch,
            train_loss: ce_sum / tok_sum.max(1) as f64,
            train_penalty: pen_sum / items.len().max(1) as f64,
            holdout_bleu: holdout.map(|h| h.0),
            holdout_loss: holdout.map(|h| h.1),
        };
        tracing::debug!(?stats, "captioner epoch");
        epochs.push(stats);
        match holdout {
            Some(score) => {
                if best.as_ref().is_none_or(|(b, _, _)| improves(score, *b)) {
                    best = Some((score, model.params.clone(), epoch));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.patience {
                        break;
                    }
                }
            }
            None => best = Some(((0.0, 0.0), model.params.clone(), epoch)),
        }
    }
    let (_, params, best_epoch) = best.expect("at least one epoch");
    model.params = params;
    Ok((model, TrainReport { epochs, best_epoch }))
}
