//! Answer-string metrics and reports stratified by relative position and
//! by question/context overlap.

use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::QAExample;
use crate::error::{Error, Result};
use crate::qa_model::{encode_and_score, span_decode, QaModel};
use crate::relpos::{Bucket, RelPosLabel};

fn articles() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("valid pattern"))
}

/// Lowercase, drop ASCII punctuation and the articles a/an/the, and collapse
/// whitespace.
pub fn normalize(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = articles().replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn f1_single(prediction: &str, gold: &str) -> f64 {
    let pred = normalize(prediction);
    let gold = normalize(gold);
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut remaining: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for t in &g {
        *remaining.entry(t).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = remaining.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best bag-of-tokens F1 against any gold answer, in `[0, 1]`.
pub fn token_f1(prediction: &str, gold_texts: &[String]) -> f64 {
    gold_texts
        .iter()
        .map(|g| f1_single(prediction, g))
        .fold(0.0, f64::max)
}

/// 1 when the normalized prediction equals some normalized gold answer.
pub fn exact_match(prediction: &str, gold_texts: &[String]) -> f64 {
    let pred = normalize(prediction);
    if gold_texts.iter().any(|g| normalize(g) == pred) {
        1.0
    } else {
        0.0
    }
}

/// Sums for one row of a report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub label: String,
    pub count: usize,
    pub f1_sum: f64,
    pub em_sum: f64,
}

impl Stratum {
    fn new(label: &str) -> Self {
        Stratum {
            label: label.to_string(),
            ..Default::default()
        }
    }

    fn add(&mut self, f1: f64, em: f64) {
        self.count += 1;
        self.f1_sum += f1;
        self.em_sum += em;
    }

    /// Mean F1 in percent; `None` when empty.
    pub fn f1(&self) -> Option<f64> {
        (self.count > 0).then(|| 100.0 * self.f1_sum / self.count as f64)
    }

    pub fn em(&self) -> Option<f64> {
        (self.count > 0).then(|| 100.0 * self.em_sum / self.count as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seed: u64,
    pub dataset: String,
}

pub const OVERLAP_LABEL: &str = "overlap";
pub const NO_OVERLAP_LABEL: &str = "no_overlap";
pub const OVERALL_LABEL: &str = "overall";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub meta: ReportMeta,
    /// One row per bucket, in bucket order.
    pub buckets: Vec<Stratum>,
    pub overlap: Stratum,
    pub no_overlap: Stratum,
    pub overall: Stratum,
    /// Scored but left out of bucket rows.
    pub ambiguous: usize,
    /// Not scored because the context was too long for the model.
    pub skipped_too_long: usize,
}

impl StratifiedReport {
    pub fn bucket(&self, b: Bucket) -> &Stratum {
        let idx = Bucket::ALL.iter().position(|x| *x == b).expect("bucket is listed");
        &self.buckets[idx]
    }

    /// Several buckets merged into one row.
    pub fn pooled(&self, buckets: &[Bucket]) -> Stratum {
        let mut out = Stratum::new(&buckets.iter().map(|b| b.label()).collect::<Vec<_>>().join("|"));
        for &b in buckets {
            let s = self.bucket(b);
            out.count += s.count;
            out.f1_sum += s.f1_sum;
            out.em_sum += s.em_sum;
        }
        out
    }

    pub fn rows(&self) -> impl Iterator<Item = &Stratum> {
        self.buckets
            .iter()
            .chain([&self.overlap, &self.no_overlap, &self.overall])
    }
}

/// Per-example score used to build reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleScore {
    pub label: RelPosLabel,
    pub f1: f64,
    pub em: f64,
}

/// Folds per-example scores into a report, in the given order.
pub fn aggregate(scores: &[ExampleScore], skipped_too_long: usize, meta: ReportMeta) -> StratifiedReport {
    let mut report = StratifiedReport {
        meta,
        buckets: Bucket::ALL.iter().map(|b| Stratum::new(b.label())).collect(),
        overlap: Stratum::new(OVERLAP_LABEL),
        no_overlap: Stratum::new(NO_OVERLAP_LABEL),
        overall: Stratum::new(OVERALL_LABEL),
        ambiguous: 0,
        skipped_too_long,
    };
    for s in scores {
        match s.label {
            RelPosLabel::Value(d) => {
                let idx = Bucket::ALL
                    .iter()
                    .position(|b| *b == Bucket::from_value(d))
                    .expect("bucket is listed");
                report.buckets[idx].add(s.f1, s.em);
                report.overlap.add(s.f1, s.em);
            }
            RelPosLabel::Ambiguous => {
                report.ambiguous += 1;
                report.overlap.add(s.f1, s.em);
            }
            RelPosLabel::NoOverlap => report.no_overlap.add(s.f1, s.em),
        }
        report.overall.add(s.f1, s.em);
    }
    report
}

/// Scores every example with `predict`, which returns the predicted answer
/// text. Examples it rejects as too long are counted and skipped.
pub fn evaluate_with<F>(examples: &[QAExample], meta: ReportMeta, predict: F) -> Result<StratifiedReport>
where
    F: Fn(&QAExample) -> Result<String> + Sync,
{
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(examples.len().max(1));
    let chunk = examples.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<Option<ExampleScore>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = examples
            .chunks(chunk)
            .map(|part| {
                let predict = &predict;
                scope.spawn(move || {
                    part.iter()
                        .map(|ex| match predict(ex) {
                            Ok(text) => Ok(Some(ExampleScore {
                                label: ex.relpos,
                                f1: token_f1(&text, &ex.gold_texts),
                                em: exact_match(&text, &ex.gold_texts),
                            })),
                            Err(Error::SequenceTooLong { .. }) => Ok(None),
                            Err(e) => Err(e),
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut scores = Vec::with_capacity(examples.len());
    let mut skipped = 0;
    for part in results {
        for s in part? {
            match s {
                Some(s) => scores.push(s),
                None => skipped += 1,
            }
        }
    }
    Ok(aggregate(&scores, skipped, meta))
}

/// Decodes with the main model alone and aggregates the scores.
pub fn evaluate_stratified(
    model: &QaModel,
    dev: &[QAExample],
    max_answer_len: usize,
    meta: ReportMeta,
) -> Result<StratifiedReport> {
    evaluate_with(dev, meta, |ex| {
        let dist = encode_and_score(model, ex)?;
        let pred = span_decode(&dist, max_answer_len);
        Ok(ex.context.span_text(pred.start, pred.end))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Aligned, human-readable columns.
    Table,
    /// Tab-separated, one row per (stratum, metric).
    Delimited,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

pub fn render_report(report: &StratifiedReport, format: ReportFormat) -> String {
    let m = &report.meta;
    let mut out = String::new();
    match format {
        ReportFormat::Table => {
            writeln!(out, "# config_hash {}  seed {}  dataset {}", m.config_hash, m.seed, m.dataset).unwrap();
            writeln!(out, "{:<12} {:>7} {:>7} {:>7}", "stratum", "count", "F1", "EM").unwrap();
            for s in report.rows() {
                writeln!(out, "{:<12} {:>7} {:>7} {:>7}", s.label, s.count, cell(s.f1()), cell(s.em())).unwrap();
            }
            writeln!(out, "# ambiguous {}  skipped_too_long {}", report.ambiguous, report.skipped_too_long).unwrap();
        }
        ReportFormat::Delimited => {
            writeln!(out, "# config_hash\t{}", m.config_hash).unwrap();
            writeln!(out, "# seed\t{}", m.seed).unwrap();
            writeln!(out, "# dataset\t{}", m.dataset).unwrap();
            writeln!(out, "stratum\tmetric\tvalue").unwrap();
            for s in report.rows() {
                writeln!(out, "{}\tcount\t{}", s.label, s.count).unwrap();
                writeln!(out, "{}\tf1\t{}", s.label, cell(s.f1())).unwrap();
                writeln!(out, "{}\tem\t{}", s.label, cell(s.em())).unwrap();
            }
            writeln!(out, "# ambiguous\t{}", report.ambiguous).unwrap();
            writeln!(out, "# skipped_too_long\t{}", report.skipped_too_long).unwrap();
        }
    }
    out
}

/// One trained model in an experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub trained_on: String,
    pub model: String,
    pub report: StratifiedReport,
}

/// F1 per bucket and per overlap split, one line per trained model.
pub fn render_grid(rows: &[GridRow], format: ReportFormat) -> String {
    let mut header = vec!["trained_on".to_string(), "model".to_string()];
    header.extend(Bucket::ALL.iter().map(|b| b.label().to_string()));
    header.extend([OVERLAP_LABEL, NO_OVERLAP_LABEL, OVERALL_LABEL, "config_hash"].map(String::from));
    let lines: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cols = vec![r.trained_on.clone(), r.model.clone()];
            cols.extend(r.report.rows().map(|s| cell(s.f1())));
            cols.push(r.report.meta.config_hash.clone());
            cols
        })
        .collect();
    let mut out = String::new();
    match format {
        ReportFormat::Delimited => {
            for cols in std::iter::once(&header).chain(&lines) {
                writeln!(out, "{}", cols.join("\t")).unwrap();
            }
        }
        ReportFormat::Table => {
            let widths: Vec<usize> = (0..header.len())
                .map(|i| {
                    std::iter::once(&header)
                        .chain(&lines)
                        .map(|c| c[i].chars().count())
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            for cols in std::iter::once(&header).chain(&lines) {
                let padded: Vec<String> = cols
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                    .collect();
                writeln!(out, "{}", padded.join("  ").trim_end()).unwrap();
            }
        }
    }
    out
}
