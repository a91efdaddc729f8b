//! Generated corpora with a controllable relative position.
//!
//! Each question names a type and one cue word. The context holds filler
//! words, the cue exactly once, the single word of the asked type (the
//! answer) at distance `d` from the cue, and words of other types as
//! distractors. One distractor always sits at the mirror position, on the
//! other side of the cue, so a reader that only looks at the offset from
//! the cue picks it instead of the answer. A few more sit on the answer's
//! side at the other small distances, so "any item word near the cue" is
//! not enough either; only the type named in the question identifies the
//! answer.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::corpus::QAExample;
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_types: usize,
    pub words_per_type: usize,
    pub n_cues: usize,
    pub n_fillers: usize,
    pub n_question_words: usize,
    pub min_context: usize,
    pub max_context: usize,
    /// Other-type words placed on the answer's side of the cue, at other
    /// distances within the range of `d_values`.
    pub near_distractors: usize,
    /// Other-type words anywhere else.
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Relative positions to draw from, uniformly.
    pub d_values: Vec<i64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_types: 8,
            words_per_type: 8,
            n_cues: 40,
            n_fillers: 80,
            n_question_words: 8,
            min_context: 20,
            max_context: 40,
            near_distractors: 2,
            min_distractors: 2,
            max_distractors: 5,
            d_values: vec![-3, -2, -1, 1, 2, 3],
        }
    }
}

impl SyntheticConfig {
    /// Every word the generator can emit.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words = Vec::new();
        words.extend((0..self.n_types).map(type_word));
        for t in 0..self.n_types {
            words.extend((0..self.words_per_type).map(|k| answer_word(t, k)));
        }
        words.extend((0..self.n_cues).map(|k| format!("cue{k}")));
        words.extend((0..self.n_fillers).map(|k| format!("filler{k}")));
        words.extend((0..self.n_question_words).map(|k| format!("ask{k}")));
        words
    }
}

fn type_word(t: usize) -> String {
    format!("kind{t}")
}

fn answer_word(t: usize, k: usize) -> String {
    format!("item{t}x{k}")
}

/// One example whose gold answer sits at relative position `d`
/// (`d != 0`, `|d|` small enough for the context).
pub fn generate_one<R: Rng>(cfg: &SyntheticConfig, rng: &mut R, id: String, d: i64) -> QAExample {
    assert!(d != 0, "the answer never overlaps the question");
    let reach = cfg
        .d_values
        .iter()
        .map(|v| v.unsigned_abs() as usize)
        .max()
        .unwrap_or(1)
        .max(d.unsigned_abs() as usize);
    let len = rng.gen_range(cfg.min_context.max(2 * reach + 1)..=cfg.max_context.max(2 * reach + 1));
    let mut words: Vec<String> = (0..len)
        .map(|_| format!("filler{}", rng.gen_range(0..cfg.n_fillers)))
        .collect();

    // d = j - s when the cue j follows the answer s, and j - e otherwise.
    let cue_pos = rng.gen_range(reach..len - reach);
    let answer_pos = (cue_pos as i64 - d) as usize;
    let mirror_pos = (cue_pos as i64 + d) as usize;
    let cue = format!("cue{}", rng.gen_range(0..cfg.n_cues));
    let asked = rng.gen_range(0..cfg.n_types);
    let other_type = |rng: &mut R| loop {
        let t = rng.gen_range(0..cfg.n_types);
        if t != asked {
            break t;
        }
    };

    words[cue_pos] = cue.clone();
    words[answer_pos] = answer_word(asked, rng.gen_range(0..cfg.words_per_type));
    let t = other_type(rng);
    words[mirror_pos] = answer_word(t, rng.gen_range(0..cfg.words_per_type));
    let mut taken = vec![cue_pos, answer_pos, mirror_pos];

    let mut near: Vec<usize> = (1..=reach as i64)
        .filter(|&k| k != d.abs())
        .map(|k| (cue_pos as i64 - d.signum() * k) as usize)
        .collect();
    near.shuffle(rng);
    for &pos in near.iter().take(cfg.near_distractors) {
        let t = other_type(rng);
        words[pos] = answer_word(t, rng.gen_range(0..cfg.words_per_type));
        taken.push(pos);
    }

    let mut free: Vec<usize> = (0..len)
        .filter(|i| !taken.contains(i))
        .collect();
    free.shuffle(rng);
    let extra = rng.gen_range(cfg.min_distractors..=cfg.max_distractors).min(free.len());
    for &pos in &free[..extra] {
        let t = other_type(rng);
        words[pos] = answer_word(t, rng.gen_range(0..cfg.words_per_type));
    }

    let question = format!(
        "ask{} {} {}",
        rng.gen_range(0..cfg.n_question_words),
        type_word(asked),
        cue
    );
    let context = Arc::new(tokenize(&words.join(" ")));
    let answer = words[answer_pos].clone();
    QAExample::new(
        id,
        context,
        tokenize(&question),
        vec![(answer_pos, answer_pos)],
        vec![answer],
    )
}

/// `n` examples with `d` drawn uniformly from `cfg.d_values`.
pub fn generate(cfg: &SyntheticConfig, n: usize, seed: u64, prefix: &str) -> Vec<QAExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let d = *cfg.d_values.choose(&mut rng).expect("d_values is not empty");
            generate_one(cfg, &mut rng, format!("{prefix}-{i}"), d)
        })
        .collect()
}

/// Examples in the reading-comprehension JSON layout accepted by
/// [`crate::corpus::load_squad`], one paragraph per example.
pub fn to_squad_json(examples: &[QAExample]) -> Value {
    let paragraphs: Vec<Value> = examples
        .iter()
        .map(|ex| {
            let answers: Vec<Value> = ex
                .gold_spans
                .iter()
                .zip(&ex.gold_texts)
                .map(|(&(s, _), text)| {
                    json!({"text": text, "answer_start": ex.context.tokens[s].char_start})
                })
                .collect();
            json!({
                "context": ex.context.raw,
                "qas": [{"id": ex.id, "question": ex.question.raw, "answers": answers}],
            })
        })
        .collect();
    json!({"version": "1.1", "data": [{"title": "synthetic", "paragraphs": paragraphs}]})
}
