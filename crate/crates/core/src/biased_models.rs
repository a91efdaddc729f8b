//! Bias-only predictors: the closed-form answer prior and the trainable
//! position-only model that sees nothing but the overlap indicator sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SubsetCondition;
use crate::debias::head_loss;
use crate::error::{Error, Result};
use crate::nn::{matvec, matvec_t_acc, outer_acc, softmax};
use crate::params::{read_checkpoint, write_checkpoint, ParamSet, Tensor};

/// Start/end probability vectors over context tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn uniform(n: usize) -> Self {
        let p = vec![1.0 / n as f64; n];
        TokenDistribution {
            start_probs: p.clone(),
            end_probs: p,
        }
    }

    pub fn from_logits(start: &[f64], end: &[f64]) -> Self {
        TokenDistribution {
            start_probs: softmax(start),
            end_probs: softmax(end),
        }
    }

    pub fn len(&self) -> usize {
        self.start_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start_probs.is_empty()
    }

    /// Both heads non-negative and summing to one within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let ok = |v: &[f64]| {
            !v.is_empty()
                && v.iter().all(|&p| p >= 0.0 && p.is_finite())
                && (v.iter().sum::<f64>() - 1.0).abs() <= tol
        };
        self.start_probs.len() == self.end_probs.len() && ok(&self.start_probs) && ok(&self.end_probs)
    }
}

/// Which of the four biased conditions an answer prior encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnsPriorSpec {
    condition: SubsetCondition,
}

impl AnsPriorSpec {
    pub fn new(condition: SubsetCondition) -> Result<Self> {
        if condition == SubsetCondition::All {
            return Err(Error::AnsPriorCondition);
        }
        Ok(AnsPriorSpec { condition })
    }

    pub fn condition(&self) -> SubsetCondition {
        self.condition
    }
}

/// Equal mass on every qualifying position; uniform when none qualifies.
///
/// Qualifying positions per condition: `d<=-1` next token overlaps,
/// `|d|=1` next or previous token overlaps, `d=0` the token itself
/// overlaps, `d>=1` previous token overlaps. The same vector is used for
/// both heads.
pub fn ans_prior(spec: &AnsPriorSpec, mask: &[bool]) -> TokenDistribution {
    let n = mask.len();
    let at = |j: Option<usize>| j.is_some_and(|j| j < n && mask[j]);
    let qualifies: Vec<bool> = (0..n)
        .map(|i| {
            let next = at(Some(i + 1));
            let prev = at(i.checked_sub(1));
            match spec.condition {
                SubsetCondition::DLeqMinus1 => next,
                SubsetCondition::AbsDEq1 => next || prev,
                SubsetCondition::DEq0 => mask[i],
                SubsetCondition::DGeq1 => prev,
                SubsetCondition::All => unreachable!("rejected by AnsPriorSpec::new"),
            }
        })
        .collect();
    let z = qualifies.iter().filter(|&&q| q).count();
    if z == 0 {
        return TokenDistribution::uniform(n);
    }
    let p: Vec<f64> = qualifies
        .iter()
        .map(|&q| if q { 1.0 / z as f64 } else { 0.0 })
        .collect();
    TokenDistribution {
        start_probs: p.clone(),
        end_probs: p,
    }
}

/// The position-only model's entire input: 1 where the context token
/// overlaps with the question.
pub fn posonly_featurize(mask: &[bool]) -> Vec<u8> {
    mask.iter().map(|&m| u8::from(m)).collect()
}

const PAD: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosOnlyConfig {
    /// Positions `i-window ..= i+window` feed position `i`.
    pub window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
}

impl Default for PosOnlyConfig {
    fn default() -> Self {
        PosOnlyConfig {
            window: 5,
            embed_dim: 8,
            hidden_dim: 32,
            max_len: 512,
        }
    }
}

impl PosOnlyConfig {
    fn slots(&self) -> usize {
        2 * self.window + 1
    }

    fn input_dim(&self) -> usize {
        self.slots() * 2 * self.embed_dim
    }
}

// Parameter slots, in checkpoint order.
const VALUE_EMB: usize = 0;
const OFFSET_EMB: usize = 1;
const W1: usize = 2;
const B1: usize = 3;
const W_START: usize = 4;
const W_END: usize = 5;

/// Local-window encoder over the binary overlap sequence.
///
/// Every position is described by the symbols inside its window (0, 1 or a
/// padding symbol past the borders), each embedded and concatenated with an
/// embedding of its offset inside the window. One tanh layer and two linear
/// heads produce start/end logits. There is no absolute-position input.
#[derive(Debug, Clone, PartialEq)]
pub struct PosOnlyModel {
    pub config: PosOnlyConfig,
    pub params: ParamSet,
    pub seed: u64,
    /// Hash of the training configuration; empty when built directly.
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct PosOnlyHeader {
    kind: String,
    config: PosOnlyConfig,
    seed: u64,
    #[serde(default)]
    config_hash: String,
}

const POSONLY_KIND: &str = "posonly";

struct PosOnlyCache {
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    symbols: Vec<Vec<usize>>,
    start: Vec<f64>,
    end: Vec<f64>,
}

impl PosOnlyModel {
    /// Small random embeddings and hidden weights; zero output heads, so an
    /// untrained model is uniform.
    pub fn init<R: Rng>(config: PosOnlyConfig, seed: u64, rng: &mut R) -> Self {
        let e = config.embed_dim;
        let h = config.hidden_dim;
        let fan_in = config.input_dim();
        let mut uniform = |shape: &[usize], scale: f64| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
            Tensor::from_vec(shape, data).expect("shape matches data")
        };
        let mut params = ParamSet::new();
        params.push("value_emb", uniform(&[3, e], 0.5));
        params.push("offset_emb", uniform(&[config.slots(), e], 0.5));
        params.push("w1", uniform(&[h, fan_in], (3.0 / fan_in as f64).sqrt()));
        params.push("b1", Tensor::zeros(&[h]));
        params.push("w_start", Tensor::zeros(&[h]));
        params.push("w_end", Tensor::zeros(&[h]));
        PosOnlyModel {
            config,
            params,
            seed,
            config_hash: String::new(),
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    fn forward_cached(&self, seq: &[u8]) -> PosOnlyCache {
        let cfg = &self.config;
        let (e, h, w) = (cfg.embed_dim, cfg.hidden_dim, cfg.window);
        let fan_in = cfg.input_dim();
        let value_emb = self.params.data(VALUE_EMB);
        let offset_emb = self.params.data(OFFSET_EMB);
        let w1 = self.params.data(W1);
        let b1 = self.params.data(B1);
        let n = seq.len();

        let mut cache = PosOnlyCache {
            inputs: Vec::with_capacity(n),
            hidden: Vec::with_capacity(n),
            symbols: Vec::with_capacity(n),
            start: vec![0.0; n],
            end: vec![0.0; n],
        };
        for i in 0..n {
            let mut x = Vec::with_capacity(fan_in);
            let mut syms = Vec::with_capacity(cfg.slots());
            for k in 0..cfg.slots() {
                let pos = i as isize + k as isize - w as isize;
                let sym = if pos < 0 || pos >= n as isize {
                    PAD
                } else {
                    seq[pos as usize].min(1) as usize
                };
                syms.push(sym);
                x.extend_from_slice(&value_emb[sym * e..(sym + 1) * e]);
                x.extend_from_slice(&offset_emb[k * e..(k + 1) * e]);
            }
            let mut a = vec![0.0; h];
            matvec(w1, h, fan_in, &x, &mut a);
            let hid: Vec<f64> = a.iter().zip(b1).map(|(v, b)| (v + b).tanh()).collect();
            cache.start[i] = crate::nn::dot(self.params.data(W_START), &hid);
            cache.end[i] = crate::nn::dot(self.params.data(W_END), &hid);
            cache.inputs.push(x);
            cache.hidden.push(hid);
            cache.symbols.push(syms);
        }
        cache
    }

    /// Start and end logits for a binary sequence.
    pub fn logits(&self, seq: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_len(seq.len())?;
        let c = self.forward_cached(seq);
        Ok((c.start, c.end))
    }

    /// Cross-entropy of the gold span, accumulating parameter gradients into
    /// `grads`. Returns the loss.
    pub fn accumulate_gradients(
        &self,
        seq: &[u8],
        gold: (usize, usize),
        grads: &mut ParamSet,
    ) -> Result<f64> {
        self.check_len(seq.len())?;
        let cfg = &self.config;
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
        let fan_in = cfg.input_dim();
        let cache = self.forward_cached(seq);
        let start = head_loss(&cache.start, gold.0, None);
        let end = head_loss(&cache.end, gold.1, None);

        let w_start = self.params.data(W_START).to_vec();
        let w_end = self.params.data(W_END).to_vec();
        let w1 = self.params.data(W1).to_vec();
        for i in 0..seq.len() {
            let (ds, de) = (start.dlogits[i], end.dlogits[i]);
            let hid = &cache.hidden[i];
            crate::nn::axpy(grads.data_mut(W_START), ds, hid);
            crate::nn::axpy(grads.data_mut(W_END), de, hid);
            let da: Vec<f64> = (0..h)
                .map(|k| (ds * w_start[k] + de * w_end[k]) * (1.0 - hid[k] * hid[k]))
                .collect();
            outer_acc(grads.data_mut(W1), h, fan_in, &da, &cache.inputs[i]);
            crate::nn::axpy(grads.data_mut(B1), 1.0, &da);
            let mut dx = vec![0.0; fan_in];
            matvec_t_acc(&w1, h, fan_in, &da, &mut dx);
            for (k, &sym) in cache.symbols[i].iter().enumerate() {
                let base = k * 2 * e;
                crate::nn::axpy(
                    &mut grads.data_mut(VALUE_EMB)[sym * e..(sym + 1) * e],
                    1.0,
                    &dx[base..base + e],
                );
                crate::nn::axpy(
                    &mut grads.data_mut(OFFSET_EMB)[k * e..(k + 1) * e],
                    1.0,
                    &dx[base + e..base + 2 * e],
                );
            }
        }
        Ok(start.loss + end.loss)
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = PosOnlyHeader {
            kind: POSONLY_KIND.into(),
            config: self.config.clone(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
        };
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &header, &self.params).expect("writing to a Vec cannot fail");
        bytes
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, params): (PosOnlyHeader, ParamSet) = read_checkpoint(bytes)?;
        if header.kind != POSONLY_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a `{POSONLY_KIND}` checkpoint, found `{}`",
                header.kind
            )));
        }
        if !layout_matches(&header.config, &params) {
            return Err(Error::Checkpoint("tensor layout does not match the stored config".into()));
        }
        Ok(PosOnlyModel {
            config: header.config,
            params,
            seed: header.seed,
            config_hash: header.config_hash,
        })
    }
}

fn layout_matches(cfg: &PosOnlyConfig, params: &ParamSet) -> bool {
    let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
    let expected: [(&str, Vec<usize>); 6] = [
        ("value_emb", vec![3, e]),
        ("offset_emb", vec![cfg.slots(), e]),
        ("w1", vec![h, cfg.input_dim()]),
        ("b1", vec![h]),
        ("w_start", vec![h]),
        ("w_end", vec![h]),
    ];
    params.len() == expected.len()
        && params
            .iter()
            .zip(expected.iter())
            .all(|((name, t), (en, es))| name == *en && &t.shape == es)
}

/// Start/end distributions predicted from the overlap sequence alone.
pub fn posonly_forward(model: &PosOnlyModel, seq: &[u8]) -> Result<TokenDistribution> {
    let (s, e) = model.logits(seq)?;
    Ok(TokenDistribution::from_logits(&s, &e))
}
