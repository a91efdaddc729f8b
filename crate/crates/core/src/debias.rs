//! Product-of-experts objectives and the two-stage training driver.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biased_models::{
    ans_prior, posonly_featurize, posonly_forward, AnsPriorSpec, PosOnlyConfig, PosOnlyModel,
    TokenDistribution,
};
use crate::corpus::{QAExample, SubsetCondition};
use crate::error::{Error, Result};
use crate::eval::{exact_match, token_f1};
use crate::nn::{log_floor, logsumexp, softmax};
use crate::params::{adam_step, config_hash, AdamState, ParamSet};
use crate::qa_model::{cross_entropy, span_decode, EncodedExample, QaModel, QaModelConfig, Vocabulary};

/// Cross-entropy of one softmax head, optionally combined with a frozen
/// log-bias scaled by `weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLoss {
    pub loss: f64,
    /// Gradient of the loss with respect to the head's logits.
    pub dlogits: Vec<f64>,
    /// Gradient of the loss with respect to the bias weight.
    pub dweight: f64,
    /// The combined distribution.
    pub probs: Vec<f64>,
}

pub fn head_loss(logits: &[f64], gold: usize, bias: Option<(&[f64], f64)>) -> HeadLoss {
    let combined: Vec<f64> = match bias {
        None => logits.to_vec(),
        Some((log_b, w)) => logits.iter().zip(log_b).map(|(l, b)| l + w * b).collect(),
    };
    let lse = logsumexp(&combined);
    let probs: Vec<f64> = combined.iter().map(|c| (c - lse).exp()).collect();
    let mut dlogits = probs.clone();
    dlogits[gold] -= 1.0;
    let dweight = match bias {
        None => 0.0,
        Some((log_b, _)) => dlogits.iter().zip(log_b).map(|(d, b)| d * b).sum(),
    };
    HeadLoss {
        loss: lse - combined[gold],
        dlogits,
        dweight,
        probs,
    }
}

/// Floored log-probabilities of a frozen biased model, shifted so the
/// maximum is zero (a constant shift leaves every softmax unchanged).
#[derive(Debug, Clone, PartialEq)]
pub struct BiasLogits {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl BiasLogits {
    pub fn from_distribution(b: &TokenDistribution) -> Self {
        let centered = |probs: &[f64]| {
            let logs: Vec<f64> = probs.iter().map(|&p| log_floor(p)).collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            logs.into_iter().map(|l| l - max).collect()
        };
        BiasLogits {
            start: centered(&b.start_probs),
            end: centered(&b.end_probs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub p_hat: TokenDistribution,
    /// Weight on the biased model (1 for the plain product).
    pub g_value: f64,
}

fn mix(p: &[f64], b: &[f64], g: f64) -> Vec<f64> {
    let logits: Vec<f64> = p
        .iter()
        .zip(b)
        .map(|(&pi, &bi)| log_floor(pi) + g * log_floor(bi))
        .collect();
    softmax(&logits)
}

/// `softmax(log p + log b)` per head.
pub fn bias_product(p: &TokenDistribution, b: &TokenDistribution) -> EnsembleOutput {
    learned_mixin(p, b, 1.0)
}

/// `softmax(log p + g log b)` per head.
pub fn learned_mixin(p: &TokenDistribution, b: &TokenDistribution, g: f64) -> EnsembleOutput {
    EnsembleOutput {
        p_hat: TokenDistribution {
            start_probs: mix(&p.start_probs, &b.start_probs, g),
            end_probs: mix(&p.end_probs, &b.end_probs, g),
        },
        g_value: g,
    }
}

/// The learned mixing weight of the main model for one example.
pub fn compute_g(model: &QaModel, ex: &QAExample) -> Result<f64> {
    Ok(model.mixing_weight(&model.encode(ex)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Standard,
    BiasProduct,
    LearnedMixin,
}

impl Method {
    pub fn key(self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::BiasProduct => "bias_product",
            Method::LearnedMixin => "learned_mixin",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Method::Standard => "Standard",
            Method::BiasProduct => "BiasProduct",
            Method::LearnedMixin => "LearnedMixin",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Method::Standard),
            "bias_product" => Ok(Method::BiasProduct),
            "learned_mixin" => Ok(Method::LearnedMixin),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected standard, bias_product or learned_mixin)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    LinearToZero,
    Constant,
}

impl LrSchedule {
    /// Rate for update `step` (0-based) out of `total`.
    pub fn rate(self, lr_start: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr_start,
            LrSchedule::LinearToZero => lr_start * (1.0 - step as f64 / total.max(1) as f64),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::LinearToZero => "linear_to_zero",
            LrSchedule::Constant => "constant",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_to_zero" => Ok(LrSchedule::LinearToZero),
            "constant" => Ok(LrSchedule::Constant),
            other => Err(Error::Config(format!(
                "unknown lr_schedule `{other}` (expected linear_to_zero or constant)"
            ))),
        }
    }
}

/// Which frozen expert the main model is trained against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BiasedModelSpec {
    None,
    AnsPrior(SubsetCondition),
    /// Path to a trained position-only checkpoint.
    PosOnly(PathBuf),
}

impl fmt::Display for BiasedModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BiasedModelSpec::None => f.write_str("none"),
            BiasedModelSpec::AnsPrior(c) => write!(f, "ans_prior:{c}"),
            BiasedModelSpec::PosOnly(p) => write!(f, "posonly:{}", p.display()),
        }
    }
}

impl FromStr for BiasedModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(BiasedModelSpec::None);
        }
        if let Some(cond) = s.strip_prefix("ans_prior:") {
            return Ok(BiasedModelSpec::AnsPrior(cond.parse()?));
        }
        if let Some(path) = s.strip_prefix("posonly:") {
            if path.is_empty() {
                return Err(Error::Config("posonly needs a checkpoint path".into()));
            }
            return Ok(BiasedModelSpec::PosOnly(PathBuf::from(path)));
        }
        Err(Error::Config(format!(
            "unknown biased_model `{s}` (expected none, ans_prior:<cond> or posonly:<path>)"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebiasConfig {
    pub method: Method,
    pub biased_model: BiasedModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub max_answer_len: usize,
    pub g_floor: f64,
    pub model: QaModelConfig,
    pub posonly: PosOnlyConfig,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl DebiasConfig {
    /// Defaults sized for a CPU-only small encoder.
    pub fn desk_default() -> Self {
        DebiasConfig {
            method: Method::Standard,
            biased_model: BiasedModelSpec::None,
            epochs: 20,
            batch_size: 32,
            lr_start: 1e-3,
            lr_schedule: LrSchedule::LinearToZero,
            seed: 0,
            max_answer_len: 30,
            g_floor: 0.0,
            model: QaModelConfig::default(),
            posonly: PosOnlyConfig::default(),
        }
    }

    /// The fine-tuning values used with a pretrained encoder, kept for
    /// reference. They are far too small a budget for a model trained from
    /// scratch.
    pub fn bert_preset() -> Self {
        DebiasConfig {
            epochs: 2,
            batch_size: 32,
            lr_start: 3e-5,
            lr_schedule: LrSchedule::LinearToZero,
            ..Self::desk_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > 0.0 && self.lr_start.is_finite()) {
            return Err(Error::Config(format!("lr_start must be positive, got {}", self.lr_start)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_answer_len == 0 {
            return Err(Error::Config("max_answer_len must be at least 1".into()));
        }
        if !(self.g_floor >= 0.0 && self.g_floor.is_finite()) {
            return Err(Error::Config(format!("g_floor must be non-negative, got {}", self.g_floor)));
        }
        let m = &self.model;
        if m.embed_dim == 0 || m.hidden_dim == 0 || m.max_context_len == 0 || m.max_vocab < 2 {
            return Err(Error::Config("model dimensions must be positive (max_vocab >= 2)".into()));
        }
        let p = &self.posonly;
        if p.embed_dim == 0 || p.hidden_dim == 0 || p.max_len == 0 {
            return Err(Error::Config("posonly dimensions must be positive".into()));
        }
        if self.method != Method::Standard && self.biased_model == BiasedModelSpec::None {
            return Err(Error::Config(format!("method {} needs a biased_model", self.method)));
        }
        Ok(())
    }

    /// Architecture of the main model, including the mixing-weight floor.
    pub fn model_config(&self) -> QaModelConfig {
        QaModelConfig {
            g_floor: self.g_floor,
            ..self.model.clone()
        }
    }

    /// Flat `key = value` lines in a fixed order.
    pub fn render(&self) -> String {
        let m = &self.model;
        let p = &self.posonly;
        let pairs: Vec<(&str, String)> = vec![
            ("method", self.method.to_string()),
            ("biased_model", self.biased_model.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_start", format!("{:e}", self.lr_start)),
            ("lr_schedule", self.lr_schedule.to_string()),
            ("seed", self.seed.to_string()),
            ("max_answer_len", self.max_answer_len.to_string()),
            ("g_floor", format!("{:e}", self.g_floor)),
            ("embed_dim", m.embed_dim.to_string()),
            ("hidden_dim", m.hidden_dim.to_string()),
            ("match_window", m.match_window.to_string()),
            ("max_context_len", m.max_context_len.to_string()),
            ("max_vocab", m.max_vocab.to_string()),
            ("posonly_window", p.window.to_string()),
            ("posonly_embed_dim", p.embed_dim.to_string()),
            ("posonly_hidden_dim", p.hidden_dim.to_string()),
            ("posonly_max_len", p.max_len.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Short hash of the rendered config.
    pub fn hash(&self) -> String {
        config_hash(&self.render())
    }

    /// Applies `key = value` lines on top of the desk defaults. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk_default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "method" => self.method = value.parse()?,
            "biased_model" => self.biased_model = value.parse()?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr_start" => self.lr_start = num(key, value)?,
            "lr_schedule" => self.lr_schedule = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "max_answer_len" => self.max_answer_len = num(key, value)?,
            "g_floor" => self.g_floor = num(key, value)?,
            "embed_dim" => self.model.embed_dim = num(key, value)?,
            "hidden_dim" => self.model.hidden_dim = num(key, value)?,
            "match_window" => self.model.match_window = num(key, value)?,
            "max_context_len" => self.model.max_context_len = num(key, value)?,
            "max_vocab" => self.model.max_vocab = num(key, value)?,
            "posonly_window" => self.posonly.window = num(key, value)?,
            "posonly_embed_dim" => self.posonly.embed_dim = num(key, value)?,
            "posonly_hidden_dim" => self.posonly.hidden_dim = num(key, value)?,
            "posonly_max_len" => self.posonly.max_len = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

/// A loaded, frozen biased model.
#[derive(Debug, Clone, PartialEq)]
pub enum BiasedModel {
    None,
    AnsPrior(AnsPriorSpec),
    PosOnly(PosOnlyModel),
}

impl BiasedModel {
    pub fn resolve(spec: &BiasedModelSpec) -> Result<Self> {
        Ok(match spec {
            BiasedModelSpec::None => BiasedModel::None,
            BiasedModelSpec::AnsPrior(c) => BiasedModel::AnsPrior(AnsPriorSpec::new(*c)?),
            BiasedModelSpec::PosOnly(path) => BiasedModel::PosOnly(PosOnlyModel::load(path)?),
        })
    }

    /// `b` for one example, or `None` when there is no biased model.
    pub fn distribution(&self, ex: &QAExample) -> Result<Option<TokenDistribution>> {
        let mask = ex.overlap_mask();
        Ok(match self {
            BiasedModel::None => None,
            BiasedModel::AnsPrior(spec) => Some(ans_prior(spec, &mask)),
            BiasedModel::PosOnly(m) => Some(posonly_forward(m, &posonly_featurize(&mask))?),
        })
    }

    /// Hash of everything that determines the model's outputs.
    pub fn fingerprint(&self) -> String {
        match self {
            BiasedModel::None => config_hash("none"),
            BiasedModel::AnsPrior(spec) => config_hash(&format!("ans_prior:{}", spec.condition())),
            BiasedModel::PosOnly(m) => m.fingerprint(),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub f1: Option<f64>,
    pub em: Option<f64>,
    pub g_mean: Option<f64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    /// Examples left out because their context exceeded the length limit.
    pub skipped_too_long: usize,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: QaModel,
    pub log: TrainLog,
}

struct Prepared {
    encoded: Vec<EncodedExample>,
    bias: Vec<Option<BiasLogits>>,
    skipped: usize,
}

fn prepare(model: &QaModel, examples: &[QAExample], biased: Option<&BiasedModel>) -> Result<Prepared> {
    let mut out = Prepared {
        encoded: Vec::with_capacity(examples.len()),
        bias: Vec::with_capacity(examples.len()),
        skipped: 0,
    };
    for ex in examples {
        match model.encode(ex) {
            Ok(enc) => {
                let b = match biased {
                    Some(bm) => bm.distribution(ex)?.map(|d| BiasLogits::from_distribution(&d)),
                    None => None,
                };
                out.encoded.push(enc);
                out.bias.push(b);
            }
            Err(Error::SequenceTooLong { .. }) => out.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Mean cross-entropy, F1 and EM (percent) of the main model alone.
fn dev_metrics(model: &QaModel, examples: &[QAExample], max_answer_len: usize) -> Result<Option<(f64, f64, f64)>> {
    let (mut loss, mut f1, mut em, mut n) = (0.0, 0.0, 0.0, 0usize);
    for ex in examples {
        let enc = match model.encode(ex) {
            Ok(enc) => enc,
            Err(Error::SequenceTooLong { .. }) => continue,
            Err(e) => return Err(e),
        };
        let dist = model.distribution(&enc);
        loss += cross_entropy(&dist, enc.gold);
        let pred = span_decode(&dist, max_answer_len);
        let text = ex.context.span_text(pred.start, pred.end);
        f1 += token_f1(&text, &ex.gold_texts);
        em += exact_match(&text, &ex.gold_texts);
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    let n = n as f64;
    Ok(Some((loss / n, 100.0 * f1 / n, 100.0 * em / n)))
}

/// Trains the main model against a frozen biased model.
///
/// All randomness comes from one generator seeded with `config.seed`:
/// parameter initialization first, then one shuffle per epoch.
pub fn train(
    config: &DebiasConfig,
    biased: &BiasedModel,
    train_set: &[QAExample],
    dev_set: &[QAExample],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    if config.method != Method::Standard && matches!(biased, BiasedModel::None) {
        return Err(Error::Config(format!("method {} needs a biased model", config.method)));
    }
    let hash = config.hash();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = Vocabulary::build(train_set, config.model.max_vocab);
    let mut model = QaModel::init(config.model_config(), vocab, config.seed, &mut rng);
    model.config_hash = hash.clone();

    let expert = (config.method != Method::Standard).then_some(biased);
    let data = prepare(&model, train_set, expert)?;
    if data.skipped > 0 {
        log::warn!("skipped {} training examples longer than the context limit", data.skipped);
    }
    if data.encoded.is_empty() {
        return Err(Error::EmptyTrainSet);
    }

    let n = data.encoded.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut adam = AdamState::new(&model.params);
    let mut grads = model.params.zeros_like();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog {
        records: Vec::new(),
        skipped_too_long: data.skipped,
    };
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut g_sum) = (0.0, 0.0);
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            grads.fill_zero();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, g) = model.accumulate_gradients(
                    &data.encoded[i],
                    config.method,
                    data.bias[i].as_ref(),
                    &mut grads,
                );
                batch_loss += loss;
                g_sum += g;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += batch_loss;
            grads.scale(1.0 / batch.len() as f64);
            if let Some(name) = grads.first_non_finite() {
                return Err(Error::NonFiniteGradient { name: name.to_string() });
            }
            let lr = config.lr_schedule.rate(config.lr_start, step, total_steps);
            adam_step(&mut model.params, &grads, &mut adam, lr)?;
            step += 1;
        }
        log.records.push(TrainRecord {
            epoch,
            split: "train".into(),
            loss: epoch_loss / n as f64,
            f1: None,
            em: None,
            g_mean: (config.method == Method::LearnedMixin).then(|| g_sum / n as f64),
            config_hash: hash.clone(),
        });
        if let Some((loss, f1, em)) = dev_metrics(&model, dev_set, config.max_answer_len)? {
            log::info!("epoch {epoch}: dev loss {loss:.4} F1 {f1:.2} EM {em:.2}");
            log.records.push(TrainRecord {
                epoch,
                split: "dev".into(),
                loss,
                f1: Some(f1),
                em: Some(em),
                g_mean: None,
                config_hash: hash.clone(),
            });
        }
    }
    Ok(TrainOutcome { model, log })
}

/// Trains the position-only model with plain cross-entropy on the overlap
/// sequences of `train_set`, using the schedule and seed of `config`.
pub fn train_posonly(config: &DebiasConfig, train_set: &[QAExample]) -> Result<(PosOnlyModel, TrainLog)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let hash = config.hash();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = PosOnlyModel::init(config.posonly.clone(), config.seed, &mut rng);
    model.config_hash = hash.clone();
    let mut data = Vec::with_capacity(train_set.len());
    let mut skipped = 0;
    for ex in train_set {
        if ex.context.len() > config.posonly.max_len || ex.context.is_empty() {
            skipped += 1;
            continue;
        }
        data.push((posonly_featurize(&ex.overlap_mask()), ex.first_span()));
    }
    if data.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let n = data.len();
    let total_steps = config.epochs * n.div_ceil(config.batch_size);
    let mut adam = AdamState::new(&model.params);
    let mut grads: ParamSet = model.params.zeros_like();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog {
        records: Vec::new(),
        skipped_too_long: skipped,
    };
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            grads.fill_zero();
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += model.accumulate_gradients(&data[i].0, data[i].1, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += batch_loss;
            grads.scale(1.0 / batch.len() as f64);
            if let Some(name) = grads.first_non_finite() {
                return Err(Error::NonFiniteGradient { name: name.to_string() });
            }
            let lr = config.lr_schedule.rate(config.lr_start, step, total_steps);
            adam_step(&mut model.params, &grads, &mut adam, lr)?;
            step += 1;
        }
        log.records.push(TrainRecord {
            epoch,
            split: "train".into(),
            loss: epoch_loss / n as f64,
            f1: None,
            em: None,
            g_mean: None,
            config_hash: hash.clone(),
        });
    }
    Ok((model, log))
}
