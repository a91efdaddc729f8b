//! SQuAD v1.1 ingestion, relative-position annotation, biased subsets and
//! the line-delimited subset format.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relpos::{relative_position, RelPosLabel};
use crate::text::{align_answer, overlap_mask, tokenize, TokenizedText};

/// One question with its context, gold spans and relative-position label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub context: Arc<TokenizedText>,
    pub question: TokenizedText,
    pub gold_spans: Vec<(usize, usize)>,
    pub gold_texts: Vec<String>,
    /// Label of the first gold span.
    pub relpos: RelPosLabel,
}

impl QAExample {
    /// Builds an example and computes its label from the first gold span.
    pub fn new(
        id: impl Into<String>,
        context: Arc<TokenizedText>,
        question: TokenizedText,
        gold_spans: Vec<(usize, usize)>,
        gold_texts: Vec<String>,
    ) -> Self {
        let mut ex = QAExample {
            id: id.into(),
            context,
            question,
            gold_spans,
            gold_texts,
            relpos: RelPosLabel::NoOverlap,
        };
        ex.relpos = ex.span_labels().first().copied().unwrap_or(RelPosLabel::NoOverlap);
        ex
    }

    pub fn overlap_mask(&self) -> Vec<bool> {
        overlap_mask(&self.context, &self.question)
    }

    /// Labels for every gold span, in gold order.
    pub fn span_labels(&self) -> Vec<RelPosLabel> {
        let mask = self.overlap_mask();
        self.gold_spans
            .iter()
            .map(|&(s, e)| relative_position(&mask, s, e))
            .collect()
    }

    pub fn first_span(&self) -> (usize, usize) {
        self.gold_spans[0]
    }
}

/// Training-subset filters, named after the relative-position conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubsetCondition {
    DLeqMinus1,
    AbsDEq1,
    DEq0,
    DGeq1,
    All,
}

impl SubsetCondition {
    pub const BIASED: [SubsetCondition; 4] = [
        SubsetCondition::DLeqMinus1,
        SubsetCondition::AbsDEq1,
        SubsetCondition::DEq0,
        SubsetCondition::DGeq1,
    ];

    /// Membership test. Ambiguous and no-overlap labels never qualify.
    pub fn matches(self, label: RelPosLabel) -> bool {
        let RelPosLabel::Value(d) = label else {
            return false;
        };
        match self {
            SubsetCondition::DLeqMinus1 => d <= -1,
            SubsetCondition::AbsDEq1 => d.abs() == 1,
            SubsetCondition::DEq0 => d == 0,
            SubsetCondition::DGeq1 => d >= 1,
            SubsetCondition::All => true,
        }
    }

    pub fn literal(self) -> &'static str {
        match self {
            SubsetCondition::DLeqMinus1 => "d<=-1",
            SubsetCondition::AbsDEq1 => "|d|=1",
            SubsetCondition::DEq0 => "d=0",
            SubsetCondition::DGeq1 => "d>=1",
            SubsetCondition::All => "all",
        }
    }
}

impl fmt::Display for SubsetCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.literal())
    }
}

impl FromStr for SubsetCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let cleaned: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        match cleaned.to_ascii_lowercase().as_str() {
            "d<=-1" => Ok(SubsetCondition::DLeqMinus1),
            "|d|=1" => Ok(SubsetCondition::AbsDEq1),
            "d=0" => Ok(SubsetCondition::DEq0),
            "d>=1" => Ok(SubsetCondition::DGeq1),
            "all" => Ok(SubsetCondition::All),
            _ => Err(Error::Config(format!(
                "unknown subset condition `{s}` (expected d<=-1, |d|=1, d=0, d>=1 or all)"
            ))),
        }
    }
}

/// Counters collected while reading a SQuAD file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    /// Every `qas` entry seen, before any exclusion.
    pub raw_entries: usize,
    pub missing_fields: usize,
    pub unalignable_answers: usize,
    /// Entries dropped because none of their answers aligned.
    pub unalignable_entries: usize,
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub examples: Vec<QAExample>,
    pub stats: LoadStats,
}

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<SquadArticle>,
}

#[derive(Deserialize)]
struct SquadArticle {
    paragraphs: Option<Vec<SquadParagraph>>,
}

#[derive(Deserialize)]
struct SquadParagraph {
    context: Option<String>,
    qas: Option<Vec<SquadQa>>,
}

#[derive(Deserialize)]
struct SquadQa {
    id: Option<String>,
    question: Option<String>,
    answers: Option<Vec<SquadAnswer>>,
}

#[derive(Deserialize)]
struct SquadAnswer {
    text: Option<String>,
    answer_start: Option<usize>,
}

/// Reads a SQuAD v1.1 file. Example order follows the file.
pub fn load_squad(path: impl AsRef<Path>) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corpus = parse_squad(&raw).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let loaded = squad_to_examples(corpus);
    info!(
        "{}: {} entries, {} kept, {} missing fields, {} unalignable answers ({} entries dropped)",
        path.display(),
        loaded.stats.raw_entries,
        loaded.examples.len(),
        loaded.stats.missing_fields,
        loaded.stats.unalignable_answers,
        loaded.stats.unalignable_entries,
    );
    Ok(loaded)
}

fn parse_squad(raw: &str) -> serde_json::Result<SquadFile> {
    serde_json::from_str(raw)
}

/// Parses SQuAD JSON already held in memory.
pub fn load_squad_str(raw: &str) -> Result<LoadedCorpus> {
    let corpus = parse_squad(raw).map_err(|e| Error::Json {
        path: "<memory>".into(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Ok(squad_to_examples(corpus))
}

fn squad_to_examples(file: SquadFile) -> LoadedCorpus {
    let mut stats = LoadStats::default();
    let mut examples = Vec::new();

    for paragraph in file.data.into_iter().flat_map(|a| a.paragraphs.unwrap_or_default()) {
        let qas = paragraph.qas.unwrap_or_default();
        stats.raw_entries += qas.len();
        let Some(context_raw) = paragraph.context else {
            stats.missing_fields += qas.len();
            continue;
        };
        let context = Arc::new(tokenize(&context_raw));

        for qa in qas {
            let (Some(id), Some(question), Some(answers)) = (qa.id, qa.question, qa.answers) else {
                stats.missing_fields += 1;
                continue;
            };
            if answers.is_empty() {
                stats.missing_fields += 1;
                continue;
            }
            let mut spans = Vec::new();
            let mut texts = Vec::new();
            let mut incomplete = false;
            for answer in answers {
                let (Some(text), Some(start)) = (answer.text, answer.answer_start) else {
                    incomplete = true;
                    continue;
                };
                match align_answer(&context, &text, start) {
                    Ok(span) => {
                        spans.push(span);
                        texts.push(text);
                    }
                    Err(_) => stats.unalignable_answers += 1,
                }
            }
            if spans.is_empty() {
                if incomplete {
                    stats.missing_fields += 1;
                } else {
                    stats.unalignable_entries += 1;
                }
                continue;
            }
            examples.push(QAExample::new(
                id,
                Arc::clone(&context),
                tokenize(&question),
                spans,
                texts,
            ));
        }
    }

    LoadedCorpus { examples, stats }
}

/// Keeps the examples whose label satisfies `cond`.
pub fn filter_subset(examples: &[QAExample], cond: SubsetCondition) -> Vec<QAExample> {
    examples
        .iter()
        .filter(|ex| cond.matches(ex.relpos))
        .cloned()
        .collect()
}

/// Distribution of labels over a set of examples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: BTreeMap<i64, usize>,
    pub ambiguous_count: usize,
    pub no_overlap_count: usize,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum::<usize>() + self.ambiguous_count + self.no_overlap_count
    }

    /// Most frequent `d`; ties go to the smaller value.
    pub fn mode(&self) -> Option<i64> {
        let mut best: Option<(i64, usize)> = None;
        for (&d, &c) in &self.counts {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((d, c));
            }
        }
        best.map(|(d, _)| d)
    }

    /// Two-column `d<TAB>count` text followed by the exclusion counters.
    pub fn write_tsv<W: Write>(&self, mut out: W, config_hash: &str) -> std::io::Result<()> {
        writeln!(out, "# config_hash\t{config_hash}")?;
        writeln!(out, "d\tcount")?;
        for (d, c) in &self.counts {
            writeln!(out, "{d}\t{c}")?;
        }
        writeln!(out, "# ambiguous\t{}", self.ambiguous_count)?;
        writeln!(out, "# no_overlap\t{}", self.no_overlap_count)?;
        Ok(())
    }
}

pub fn histogram(examples: &[QAExample]) -> Histogram {
    let mut h = Histogram::default();
    for ex in examples {
        match ex.relpos {
            RelPosLabel::Value(d) => *h.counts.entry(d).or_insert(0) += 1,
            RelPosLabel::Ambiguous => h.ambiguous_count += 1,
            RelPosLabel::NoOverlap => h.no_overlap_count += 1,
        }
    }
    h
}

/// Splits into (question and context share a word, no shared word).
pub fn split_by_overlap(examples: &[QAExample]) -> (Vec<QAExample>, Vec<QAExample>) {
    examples
        .iter()
        .cloned()
        .partition(|ex| ex.relpos != RelPosLabel::NoOverlap)
}

pub const SUBSET_FORMAT: &str = "relpos-example";
pub const SUBSET_VERSION: &str = "1.0";

#[derive(Serialize)]
struct RecordOut<'a> {
    format: &'static str,
    version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<&'a str>,
    #[serde(flatten)]
    example: &'a QAExample,
}

#[derive(Deserialize)]
struct RecordIn {
    #[serde(flatten)]
    example: QAExample,
}

/// Writes one JSON record per line. An empty slice produces an empty file.
pub fn save_subset(path: impl AsRef<Path>, examples: &[QAExample]) -> Result<()> {
    save_subset_tagged(path, examples, None)
}

/// Like [`save_subset`], stamping every record with `config_hash`.
pub fn save_subset_tagged(path: impl AsRef<Path>, examples: &[QAExample], config_hash: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_subset(&mut out, examples, config_hash).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_subset<W: Write>(mut out: W, examples: &[QAExample], config_hash: Option<&str>) -> std::io::Result<()> {
    for ex in examples {
        let record = RecordOut {
            format: SUBSET_FORMAT,
            version: SUBSET_VERSION,
            config_hash,
            example: ex,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_subset(path: impl AsRef<Path>) -> Result<Vec<QAExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let supported_major = major(SUBSET_VERSION);
    let mut examples = Vec::new();

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| record_err(e.to_string()))?;
        let version = value
            .get("version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| record_err("missing `version` tag".into()))?;
        if major(version) != supported_major {
            return Err(Error::Version {
                found: version.to_string(),
                supported: SUBSET_VERSION.to_string(),
            });
        }
        if value.get("format").and_then(|v| v.as_str()) != Some(SUBSET_FORMAT) {
            return Err(record_err(format!("not a `{SUBSET_FORMAT}` record")));
        }
        let record: RecordIn =
            serde_json::from_value(value).map_err(|e| record_err(e.to_string()))?;
        let ex = record.example;
        if !ex.context.is_consistent() || !ex.question.is_consistent() {
            return Err(record_err("token offsets disagree with raw text".into()));
        }
        if ex.gold_spans.iter().any(|&(s, e)| s > e || e >= ex.context.len()) {
            return Err(record_err("gold span out of range".into()));
        }
        examples.push(ex);
    }
    Ok(examples)
}

fn major(version: &str) -> &str {
    version.split('.').next().unwrap_or(version)
}

/// Loads either a SQuAD `.json` file or a `.jsonl` subset file.
pub fn load_any(path: impl AsRef<Path>) -> Result<Vec<QAExample>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => load_subset(path),
        _ => load_squad(path).map(|c| c.examples),
    }
}
