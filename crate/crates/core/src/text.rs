//! Word-level tokenization and character-offset answer alignment.
//!
//! Text is split on whitespace; inside each whitespace-delimited chunk, every
//! maximal run of letters/digits and every maximal run of other
//! (punctuation or symbol) characters becomes its own token. Offsets are in
//! Unicode scalar values ("characters"), which is what SQuAD's
//! `answer_start` counts.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// One token with its half-open character range in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub char_start: usize,
    pub char_end: usize,
}

impl Token {
    /// True when the token contains no letter or digit.
    pub fn is_punctuation(&self) -> bool {
        !self.surface.chars().any(char::is_alphanumeric)
    }

    /// Case-folded surface used for overlap matching and vocabulary lookup.
    pub fn folded(&self) -> String {
        self.surface.to_lowercase()
    }
}

/// A text together with its token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub raw: String,
    pub tokens: Vec<Token>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.surface.as_str())
    }

    /// Joins the surfaces of tokens `start..=end` with single spaces.
    ///
    /// Used to turn a predicted token span into answer text for scoring.
    pub fn span_text(&self, start: usize, end: usize) -> String {
        if start > end || end >= self.tokens.len() {
            return String::new();
        }
        self.tokens[start..=end]
            .iter()
            .map(|t| t.surface.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Checks that every token's character range slices `raw` to its surface.
    pub fn is_consistent(&self) -> bool {
        let chars: Vec<char> = self.raw.chars().collect();
        let mut prev_end = 0;
        for t in &self.tokens {
            if t.char_start >= t.char_end || t.char_start < prev_end || t.char_end > chars.len() {
                return false;
            }
            let slice: String = chars[t.char_start..t.char_end].iter().collect();
            if slice != t.surface {
                return false;
            }
            prev_end = t.char_end;
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Space,
    Word,
    Symbol,
}

fn classify(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphanumeric() {
        CharClass::Word
    } else {
        CharClass::Symbol
    }
}

/// Splits `text` into word and punctuation-run tokens.
pub fn tokenize(text: &str) -> TokenizedText {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut current_class = CharClass::Space;
    let mut start = 0;

    for (idx, c) in text.chars().enumerate() {
        let class = classify(c);
        if class != current_class {
            if current_class != CharClass::Space {
                tokens.push(Token {
                    surface: std::mem::take(&mut current),
                    char_start: start,
                    char_end: idx,
                });
            }
            current_class = class;
            start = idx;
        }
        if class != CharClass::Space {
            current.push(c);
        }
    }
    if current_class != CharClass::Space {
        let end = start + current.chars().count();
        tokens.push(Token {
            surface: current,
            char_start: start,
            char_end: end,
        });
    }

    TokenizedText {
        raw: text.to_string(),
        tokens,
    }
}

/// The answer's character range could not be mapped onto any token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unalignable;

impl fmt::Display for Unalignable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("answer span does not align with any context token")
    }
}

impl std::error::Error for Unalignable {}

/// Maps a character-offset answer onto the minimal covering token range.
///
/// Returns inclusive token indices `(s, e)`.
pub fn align_answer(
    ctx: &TokenizedText,
    answer_text: &str,
    answer_char_start: usize,
) -> Result<(usize, usize), Unalignable> {
    let answer_len = answer_text.chars().count();
    let answer_end = answer_char_start + answer_len;
    let text_len = ctx.raw.chars().count();
    if answer_len == 0 || answer_end > text_len {
        return Err(Unalignable);
    }

    let first = ctx
        .tokens
        .iter()
        .position(|t| t.char_end > answer_char_start && t.char_start < answer_end);
    let last = ctx
        .tokens
        .iter()
        .rposition(|t| t.char_start < answer_end && t.char_end > answer_char_start);

    match (first, last) {
        (Some(s), Some(e)) if s <= e => Ok((s, e)),
        _ => Err(Unalignable),
    }
}

/// Knobs for overlap detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[derive(Default)]
pub struct OverlapOptions {
    /// When false, punctuation-only tokens never count as overlapping words.
    pub punctuation_matches: bool,
}


/// Marks every context token whose case-folded surface also occurs in the
/// question.
pub fn overlap_mask(ctx: &TokenizedText, question: &TokenizedText) -> Vec<bool> {
    overlap_mask_with(ctx, question, OverlapOptions::default())
}

pub fn overlap_mask_with(
    ctx: &TokenizedText,
    question: &TokenizedText,
    opts: OverlapOptions,
) -> Vec<bool> {
    let keep = |t: &Token| opts.punctuation_matches || !t.is_punctuation();
    let question_words: HashSet<String> = question
        .tokens
        .iter()
        .filter(|t| keep(t))
        .map(Token::folded)
        .collect();
    ctx.tokens
        .iter()
        .map(|t| keep(t) && question_words.contains(&t.folded()))
        .collect()
}
