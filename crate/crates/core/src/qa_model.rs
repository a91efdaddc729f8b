//! The main extractive QA model: a single-interaction attention encoder
//! over word embeddings, with start/end heads and a learned mixing-weight
//! readout, plus span decoding and the cross-entropy helper.
//!
//! Per context token `i` the hidden layer sees
//!
//! ```text
//! [ emb(c_i) ; W_q · mean_j emb(q_j) ; Σ_j α_ij emb(q_j) ; match(i-R) .. match(i+R) ]
//! ```
//!
//! where `α_i` is a softmax over scaled dot products `emb(c_i)·emb(q_j)/√D`
//! and `match(k)` is 1 when context token `k` also occurs in the question.
//! The match window (radius `R`) is the only positional signal; with
//! `R = 0` the model is equivariant under permutations of the context.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::biased_models::TokenDistribution;
use crate::corpus::QAExample;
use crate::debias::{head_loss, BiasLogits, Method};
use crate::error::{Error, Result};
use crate::nn::{axpy, dot, log_floor, matvec, matvec_t_acc, outer_acc, sigmoid, softmax, softplus};
use crate::params::{read_checkpoint, write_checkpoint, ParamSet, Tensor};
use crate::text::Token;

/// Gradients share the parameter layout.
pub type GradientSet = ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Radius of the question-match window around each context token.
    pub match_window: usize,
    pub max_context_len: usize,
    pub max_vocab: usize,
    /// Added to the softplus output of the mixing-weight readout.
    pub g_floor: f64,
}

impl Default for QaModelConfig {
    fn default() -> Self {
        QaModelConfig {
            embed_dim: 64,
            hidden_dim: 64,
            match_window: 3,
            max_context_len: 512,
            max_vocab: 50_000,
            g_floor: 0.0,
        }
    }
}

impl QaModelConfig {
    fn feature_dim(&self) -> usize {
        3 * self.embed_dim + 2 * self.match_window + 1
    }
}

pub const UNK: &str = "<unk>";

/// Case-folded word vocabulary; index 0 is reserved for unknown words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, index }
    }

    /// Most frequent words first (ties broken alphabetically), capped at
    /// `max_size` entries including the unknown symbol.
    pub fn build(examples: &[QAExample], max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_contexts = std::collections::HashSet::new();
        for ex in examples {
            let ctx_ptr = std::sync::Arc::as_ptr(&ex.context);
            if seen_contexts.insert(ctx_ptr) {
                for t in &ex.context.tokens {
                    *counts.entry(t.folded()).or_insert(0) += 1;
                }
            }
            for t in &ex.question.tokens {
                *counts.entry(t.folded()).or_insert(0) += 1;
            }
        }
        counts.remove(UNK);
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut words = vec![UNK.to_string()];
        words.extend(ranked.into_iter().take(max_size.saturating_sub(1)).map(|(w, _)| w));
        Vocabulary::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, token: &Token) -> usize {
        self.index.get(&token.folded()).copied().unwrap_or(0)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// An example mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub context: Vec<usize>,
    pub question: Vec<usize>,
    pub matches: Vec<f64>,
    pub gold: (usize, usize),
}

// Parameter slots, in checkpoint order.
const EMB: usize = 0;
const W_Q: usize = 1;
const W1: usize = 2;
const B1: usize = 3;
const W_START: usize = 4;
const W_END: usize = 5;
const W_G: usize = 6;
const B_G: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct QaModel {
    pub config: QaModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet,
    pub seed: u64,
    /// Hash of the training configuration; empty when built directly.
    pub config_hash: String,
}

struct Forward {
    n: usize,
    m: usize,
    c_emb: Vec<f64>,
    q_emb: Vec<f64>,
    q_mean: Vec<f64>,
    c_mean: Vec<f64>,
    attn: Vec<f64>,
    features: Vec<f64>,
    hidden: Vec<f64>,
    start: Vec<f64>,
    end: Vec<f64>,
    g_pre: f64,
    g: f64,
}

#[derive(Serialize, Deserialize)]
struct QaHeader {
    kind: String,
    config: QaModelConfig,
    seed: u64,
    #[serde(default)]
    config_hash: String,
    vocab: Vec<String>,
}

const QA_KIND: &str = "qa_model";

fn expected_layout(cfg: &QaModelConfig, vocab_len: usize) -> Vec<(&'static str, Vec<usize>)> {
    let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
    vec![
        ("emb", vec![vocab_len, d]),
        ("w_q", vec![d, d]),
        ("w1", vec![h, cfg.feature_dim()]),
        ("b1", vec![h]),
        ("w_start", vec![h]),
        ("w_end", vec![h]),
        ("w_g", vec![2 * d]),
        ("b_g", vec![1]),
    ]
}

impl QaModel {
    /// Random embeddings and hidden weights; zero output heads (uniform
    /// predictions) and a zero mixing-weight readout (`g = ln 2 + g_floor`).
    pub fn init<R: Rng>(config: QaModelConfig, vocab: Vocabulary, seed: u64, rng: &mut R) -> Self {
        let d = config.embed_dim;
        let mut params = ParamSet::new();
        for (name, shape) in expected_layout(&config, vocab.len()) {
            let scale = match name {
                "emb" => (3.0 / d as f64).sqrt(),
                "w_q" => (3.0 / d as f64).sqrt(),
                "w1" => (3.0 / config.feature_dim() as f64).sqrt(),
                _ => 0.0,
            };
            let n: usize = shape.iter().product();
            let data = if scale > 0.0 {
                (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
            } else {
                vec![0.0; n]
            };
            params.push(name, Tensor::from_vec(&shape, data).expect("layout is consistent"));
        }
        QaModel {
            config,
            vocab,
            params,
            seed,
            config_hash: String::new(),
        }
    }

    /// Maps an example to ids. Fails when the context is too long.
    pub fn encode(&self, ex: &QAExample) -> Result<EncodedExample> {
        let n = ex.context.len();
        if n > self.config.max_context_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_context_len,
            });
        }
        if n == 0 {
            return Err(Error::Shape(format!("example `{}` has an empty context", ex.id)));
        }
        let mask = ex.overlap_mask();
        Ok(EncodedExample {
            context: ex.context.tokens.iter().map(|t| self.vocab.id(t)).collect(),
            question: ex.question.tokens.iter().map(|t| self.vocab.id(t)).collect(),
            matches: mask.into_iter().map(|m| if m { 1.0 } else { 0.0 }).collect(),
            gold: ex.gold_spans.first().copied().unwrap_or((0, 0)),
        })
    }

    fn forward(&self, ex: &EncodedExample) -> Forward {
        let cfg = &self.config;
        let (d, h, r) = (cfg.embed_dim, cfg.hidden_dim, cfg.match_window);
        let f = cfg.feature_dim();
        let n = ex.context.len();
        let m = ex.question.len();
        let emb = self.params.data(EMB);

        let gather = |ids: &[usize]| -> Vec<f64> {
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                out.extend_from_slice(&emb[id * d..(id + 1) * d]);
            }
            out
        };
        let c_emb = gather(&ex.context);
        let q_emb = gather(&ex.question);

        let mean = |rows: &[f64], count: usize| -> Vec<f64> {
            let mut acc = vec![0.0; d];
            for row in rows.chunks_exact(d) {
                axpy(&mut acc, 1.0, row);
            }
            if count > 0 {
                acc.iter_mut().for_each(|v| *v /= count as f64);
            }
            acc
        };
        let q_mean = mean(&q_emb, m);
        let c_mean = mean(&c_emb, n);
        let mut summary = vec![0.0; d];
        matvec(self.params.data(W_Q), d, d, &q_mean, &mut summary);

        let scale = 1.0 / (d as f64).sqrt();
        let mut attn = vec![0.0; n * m];
        let mut features = vec![0.0; n * f];
        for i in 0..n {
            let ci = &c_emb[i * d..(i + 1) * d];
            let row = &mut features[i * f..(i + 1) * f];
            row[..d].copy_from_slice(ci);
            row[d..2 * d].copy_from_slice(&summary);
            if m > 0 {
                let scores: Vec<f64> = q_emb.chunks_exact(d).map(|qj| dot(ci, qj) * scale).collect();
                let a = softmax(&scores);
                for (j, qj) in q_emb.chunks_exact(d).enumerate() {
                    axpy(&mut row[2 * d..3 * d], a[j], qj);
                }
                attn[i * m..(i + 1) * m].copy_from_slice(&a);
            }
            for k in 0..=2 * r {
                let pos = i as isize + k as isize - r as isize;
                if pos >= 0 && (pos as usize) < n {
                    row[3 * d + k] = ex.matches[pos as usize];
                }
            }
        }

        let w1 = self.params.data(W1);
        let b1 = self.params.data(B1);
        let mut hidden = vec![0.0; n * h];
        let mut start = vec![0.0; n];
        let mut end = vec![0.0; n];
        for i in 0..n {
            let hi = &mut hidden[i * h..(i + 1) * h];
            matvec(w1, h, f, &features[i * f..(i + 1) * f], hi);
            for (v, b) in hi.iter_mut().zip(b1) {
                *v = (*v + b).tanh();
            }
            start[i] = dot(self.params.data(W_START), hi);
            end[i] = dot(self.params.data(W_END), hi);
        }

        let w_g = self.params.data(W_G);
        let g_pre = dot(&w_g[..d], &q_mean) + dot(&w_g[d..], &c_mean) + self.params.data(B_G)[0];
        let g = softplus(g_pre) + cfg.g_floor;

        Forward {
            n,
            m,
            c_emb,
            q_emb,
            q_mean,
            c_mean,
            attn,
            features,
            hidden,
            start,
            end,
            g_pre,
            g,
        }
    }

    /// Start and end logits.
    pub fn logits(&self, ex: &EncodedExample) -> (Vec<f64>, Vec<f64>) {
        let fw = self.forward(ex);
        (fw.start, fw.end)
    }

    pub fn distribution(&self, ex: &EncodedExample) -> TokenDistribution {
        let fw = self.forward(ex);
        TokenDistribution::from_logits(&fw.start, &fw.end)
    }

    /// The mixing weight `g(c, q) >= g_floor`.
    pub fn mixing_weight(&self, ex: &EncodedExample) -> f64 {
        self.forward(ex).g
    }

    /// Loss of `method` on one example; gradients are added into `grads`.
    /// Returns `(loss, g)`.
    pub fn accumulate_gradients(
        &self,
        ex: &EncodedExample,
        method: Method,
        bias: Option<&BiasLogits>,
        grads: &mut GradientSet,
    ) -> (f64, f64) {
        let fw = self.forward(ex);
        let (weight, bias) = match (method, bias) {
            (Method::Standard, _) | (_, None) => (0.0, None),
            (Method::BiasProduct, Some(b)) => (1.0, Some(b)),
            (Method::LearnedMixin, Some(b)) => (fw.g, Some(b)),
        };
        let start = head_loss(&fw.start, ex.gold.0, bias.map(|b| (b.start.as_slice(), weight)));
        let end = head_loss(&fw.end, ex.gold.1, bias.map(|b| (b.end.as_slice(), weight)));
        let dg = if method == Method::LearnedMixin && bias.is_some() {
            start.dweight + end.dweight
        } else {
            0.0
        };
        self.backward_from(&fw, ex, &start.dlogits, &end.dlogits, dg, grads);
        (start.loss + end.loss, fw.g)
    }

    fn backward_from(
        &self,
        fw: &Forward,
        ex: &EncodedExample,
        dstart: &[f64],
        dend: &[f64],
        dg: f64,
        grads: &mut GradientSet,
    ) {
        let cfg = &self.config;
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
        let f = cfg.feature_dim();
        let (n, m) = (fw.n, fw.m);
        let w_start = self.params.data(W_START);
        let w_end = self.params.data(W_END);
        let w1 = self.params.data(W1);
        let scale = 1.0 / (d as f64).sqrt();

        let mut d_c = vec![0.0; n * d];
        let mut d_q = vec![0.0; m * d];
        let mut d_summary = vec![0.0; d];
        let mut d_q_mean = vec![0.0; d];
        let mut d_c_mean = vec![0.0; d];

        for i in 0..n {
            let hi = &fw.hidden[i * h..(i + 1) * h];
            axpy(grads.data_mut(W_START), dstart[i], hi);
            axpy(grads.data_mut(W_END), dend[i], hi);
            let da: Vec<f64> = (0..h)
                .map(|k| (dstart[i] * w_start[k] + dend[i] * w_end[k]) * (1.0 - hi[k] * hi[k]))
                .collect();
            let xi = &fw.features[i * f..(i + 1) * f];
            outer_acc(grads.data_mut(W1), h, f, &da, xi);
            axpy(grads.data_mut(B1), 1.0, &da);
            let mut dx = vec![0.0; f];
            matvec_t_acc(w1, h, f, &da, &mut dx);

            axpy(&mut d_c[i * d..(i + 1) * d], 1.0, &dx[..d]);
            axpy(&mut d_summary, 1.0, &dx[d..2 * d]);
            if m > 0 {
                let d_att = &dx[2 * d..3 * d];
                let a = &fw.attn[i * m..(i + 1) * m];
                let ci = &fw.c_emb[i * d..(i + 1) * d];
                let da_att: Vec<f64> = fw.q_emb.chunks_exact(d).map(|qj| dot(d_att, qj)).collect();
                let weighted: f64 = a.iter().zip(&da_att).map(|(x, y)| x * y).sum();
                for j in 0..m {
                    let qj = &fw.q_emb[j * d..(j + 1) * d];
                    axpy(&mut d_q[j * d..(j + 1) * d], a[j], d_att);
                    let ds = a[j] * (da_att[j] - weighted) * scale;
                    if ds != 0.0 {
                        axpy(&mut d_c[i * d..(i + 1) * d], ds, qj);
                        axpy(&mut d_q[j * d..(j + 1) * d], ds, ci);
                    }
                }
            }
        }

        outer_acc(grads.data_mut(W_Q), d, d, &d_summary, &fw.q_mean);
        matvec_t_acc(self.params.data(W_Q), d, d, &d_summary, &mut d_q_mean);

        if dg != 0.0 {
            let d_pre = dg * sigmoid(fw.g_pre);
            let w_g = self.params.data(W_G).to_vec();
            let gw = grads.data_mut(W_G);
            axpy(&mut gw[..d], d_pre, &fw.q_mean);
            axpy(&mut gw[d..], d_pre, &fw.c_mean);
            grads.data_mut(B_G)[0] += d_pre;
            axpy(&mut d_q_mean, d_pre, &w_g[..d]);
            axpy(&mut d_c_mean, d_pre, &w_g[d..]);
        }

        let demb = grads.data_mut(EMB);
        for (i, &id) in ex.context.iter().enumerate() {
            let row = &mut demb[id * d..(id + 1) * d];
            axpy(row, 1.0, &d_c[i * d..(i + 1) * d]);
            axpy(row, 1.0 / n as f64, &d_c_mean);
        }
        for (j, &id) in ex.question.iter().enumerate() {
            let row = &mut demb[id * d..(id + 1) * d];
            axpy(row, 1.0, &d_q[j * d..(j + 1) * d]);
            axpy(row, 1.0 / m as f64, &d_q_mean);
        }
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = QaHeader {
            kind: QA_KIND.into(),
            config: self.config.clone(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            vocab: self.vocab.words().to_vec(),
        };
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &header, &self.params).expect("writing to a Vec cannot fail");
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, params): (QaHeader, ParamSet) = read_checkpoint(bytes)?;
        if header.kind != QA_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a `{QA_KIND}` checkpoint, found `{}`",
                header.kind
            )));
        }
        let layout = expected_layout(&header.config, header.vocab.len());
        let matches = params.len() == layout.len()
            && params
                .iter()
                .zip(&layout)
                .all(|((name, t), (en, es))| name == *en && &t.shape == es);
        if !matches {
            return Err(Error::Checkpoint("tensor layout does not match the stored config".into()));
        }
        Ok(QaModel {
            config: header.config,
            vocab: Vocabulary::from_words(header.vocab),
            params,
            seed: header.seed,
            config_hash: header.config_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Start/end distributions of the main model for one example.
pub fn encode_and_score(model: &QaModel, ex: &QAExample) -> Result<TokenDistribution> {
    Ok(model.distribution(&model.encode(ex)?))
}

/// Exact reverse-mode gradients of the configured loss for one example.
pub fn backward(
    model: &QaModel,
    ex: &QAExample,
    method: Method,
    bias: Option<&BiasLogits>,
) -> Result<(f64, GradientSet)> {
    let enc = model.encode(ex)?;
    let mut grads = model.params.zeros_like();
    let (loss, _) = model.accumulate_gradients(&enc, method, bias, &mut grads);
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient { name: name.to_string() });
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Best `(s, e)` with `s <= e < s + max_len` by `start[s] * end[e]`;
/// ties go to the smaller start, then the smaller end.
pub fn span_decode(dist: &TokenDistribution, max_len: usize) -> SpanPrediction {
    let n = dist.len();
    let max_len = max_len.max(1);
    let mut best = SpanPrediction {
        start: 0,
        end: 0,
        score: f64::NEG_INFINITY,
    };
    for s in 0..n {
        let ps = dist.start_probs[s];
        for e in s..n.min(s + max_len) {
            let score = ps * dist.end_probs[e];
            if score > best.score {
                best = SpanPrediction { start: s, end: e, score };
            }
        }
    }
    best
}

/// `-log p_start[s] - log p_end[e]` with a floor inside each log.
pub fn cross_entropy(dist: &TokenDistribution, gold: (usize, usize)) -> f64 {
    -log_floor(dist.start_probs[gold.0]) - log_floor(dist.end_probs[gold.1])
}
