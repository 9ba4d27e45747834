//! Four-choice question benchmark over the full pipeline.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::ExecutionOptions;
use crate::graph::NodeId;
use crate::llm::LlmRole;
use crate::par::Workers;
use crate::pipeline::{investigate, Services};
use crate::reporter::prompt_evidence;
use crate::timefmt::{format_utc, serde_utc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    C,
    D,
}

impl Choice {
    pub const ALL: [Choice; 4] = [Choice::A, Choice::B, Choice::C, Choice::D];

    fn from_letter(c: char) -> Option<Choice> {
        match c.to_ascii_uppercase() {
            'A' => Some(Choice::A),
            'B' => Some(Choice::B),
            'C' => Some(Choice::C),
            'D' => Some(Choice::D),
            _ => None,
        }
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    StockMarket,
    RateChanges,
    MonetaryPolicy,
    IndustryDevelopments,
}

impl Category {
    pub const ALL: [Category; 4] =
        [Category::StockMarket, Category::RateChanges, Category::MonetaryPolicy, Category::IndustryDevelopments];

    pub fn name(self) -> &'static str {
        match self {
            Category::StockMarket => "stock_market",
            Category::RateChanges => "rate_changes",
            Category::MonetaryPolicy => "monetary_policy",
            Category::IndustryDevelopments => "industry_developments",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkQuestion {
    pub id: String,
    /// The moment the question is asked; the pipeline treats it as now.
    #[serde(with = "serde_utc")]
    pub timestamp: DateTime<Utc>,
    pub stem: String,
    pub choices: BTreeMap<Choice, String>,
    pub answer_key: Choice,
    pub category: Category,
}

impl BenchmarkQuestion {
    pub fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.stem.trim().is_empty() {
            return Err("empty stem".into());
        }
        if self.choices.len() != 4 {
            return Err(format!("expected 4 choices A-D, found {}", self.choices.len()));
        }
        if let Some((c, _)) = self.choices.iter().find(|(_, text)| text.trim().is_empty()) {
            return Err(format!("choice {c} is empty"));
        }
        Ok(())
    }

    pub fn choices_block(&self) -> String {
        self.choices.iter().map(|(c, text)| format!("{c}) {text}")).collect::<Vec<_>>().join("\n")
    }

    /// The text handed to the pipeline as the user query.
    pub fn user_query(&self) -> String {
        format!("{}\n{}", self.stem.trim(), self.choices_block())
    }
}

#[derive(Debug, Error)]
pub enum QuestionParseError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{} malformed question line(s):\n{}", .0.len(), .0.iter().map(|(l, m)| format!("  line {l}: {m}")).collect::<Vec<_>>().join("\n"))]
    Lines(Vec<(usize, String)>),
}

pub fn parse_questions(text: &str) -> Result<Vec<BenchmarkQuestion>, QuestionParseError> {
    let mut questions = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<BenchmarkQuestion>(line) {
            Ok(q) => match q.check() {
                Ok(()) => questions.push(q),
                Err(m) => bad.push((i + 1, m)),
            },
            Err(e) => bad.push((i + 1, e.to_string())),
        }
    }
    if bad.is_empty() {
        Ok(questions)
    } else {
        Err(QuestionParseError::Lines(bad))
    }
}

/// Reads a JSONL question file, reporting every malformed line at once.
pub fn load_questions(path: &Path) -> Result<Vec<BenchmarkQuestion>, QuestionParseError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| QuestionParseError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_questions(&text)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no answer letter found")]
pub struct NoChoiceFound;

fn marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)answer:").expect("marker regex compiles"))
}

fn letter_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b[A-D]\b").expect("letter regex compiles"))
}

/// The letter after the last `ANSWER:` marker, else the last standalone
/// capital A-D.
pub fn extract_choice(text: &str) -> Result<Choice, NoChoiceFound> {
    if let Some(m) = marker_regex().find_iter(text).last() {
        let rest = text[m.end()..].trim_start_matches(|c: char| c.is_whitespace() || "*(\"'[".contains(c));
        let mut chars = rest.chars();
        if let Some(choice) = chars.next().and_then(Choice::from_letter) {
            if !chars.next().is_some_and(|c| c.is_alphanumeric()) {
                return Ok(choice);
            }
        }
    }
    letter_regex()
        .find_iter(text)
        .last()
        .and_then(|m| m.as_str().chars().next())
        .and_then(Choice::from_letter)
        .ok_or(NoChoiceFound)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub category: Category,
    pub answer_key: Choice,
    pub predicted: Option<Choice>,
    pub correct: bool,
    /// The answer text carried no recognizable letter.
    pub unparsed: bool,
    pub error: Option<String>,
    pub seconds: f64,
    /// Executor trace lines for ablation comparisons.
    pub trace: Vec<String>,
    pub final_queries: BTreeMap<NodeId, String>,
    pub rewriter_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: Category,
    pub n: usize,
    pub correct: usize,
    pub accuracy_pct: f64,
    pub std_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub n: usize,
    pub correct: usize,
    pub unparsed: usize,
    pub failed: usize,
    pub accuracy_pct: f64,
    pub std_pct: f64,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub per_category: Vec<CategoryScore>,
    pub options_used: ExecutionOptions,
    pub records: Vec<QuestionRecord>,
}

/// Binomial standard error of an accuracy, in percentage points.
pub fn binomial_std_pct(correct: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = correct as f64 / n as f64;
    100.0 * (p * (1.0 - p) / n as f64).sqrt()
}

fn accuracy_pct(correct: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * correct as f64 / n as f64
    }
}

/// Mean and sample standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Aggregates per-question records.
pub fn score(records: Vec<QuestionRecord>, options_used: ExecutionOptions) -> BenchmarkResult {
    let n = records.len();
    let correct = records.iter().filter(|r| r.correct).count();
    let per_category = Category::ALL
        .iter()
        .filter_map(|&category| {
            let in_cat: Vec<&QuestionRecord> = records.iter().filter(|r| r.category == category).collect();
            if in_cat.is_empty() {
                return None;
            }
            let c = in_cat.iter().filter(|r| r.correct).count();
            Some(CategoryScore {
                category,
                n: in_cat.len(),
                correct: c,
                accuracy_pct: accuracy_pct(c, in_cat.len()),
                std_pct: binomial_std_pct(c, in_cat.len()),
            })
        })
        .collect();
    let seconds: Vec<f64> = records.iter().map(|r| r.seconds).collect();
    let (mean_seconds, std_seconds) = mean_std(&seconds);
    BenchmarkResult {
        n,
        correct,
        unparsed: records.iter().filter(|r| r.unparsed).count(),
        failed: records.iter().filter(|r| r.error.is_some()).count(),
        accuracy_pct: accuracy_pct(correct, n),
        std_pct: binomial_std_pct(correct, n),
        mean_seconds,
        std_seconds,
        per_category,
        options_used,
        records,
    }
}

fn answer_one(q: &BenchmarkQuestion, services: &Services, opts: &ExecutionOptions) -> QuestionRecord {
    let started = Instant::now();
    let mut record = QuestionRecord {
        id: q.id.clone(),
        category: q.category,
        answer_key: q.answer_key,
        predicted: None,
        correct: false,
        unparsed: false,
        error: None,
        seconds: 0.0,
        trace: Vec::new(),
        final_queries: BTreeMap::new(),
        rewriter_calls: 0,
    };
    let answer = investigate(&q.user_query(), q.timestamp, services, opts).and_then(|inv| {
        record.trace = inv.log.trace();
        record.rewriter_calls = inv.log.count(crate::executor::EventKind::RewriteCall);
        record.final_queries = inv.graph.nodes().map(|n| (n.id.clone(), n.query.clone())).collect();
        let now_iso = format_utc(&q.timestamp);
        let evidence = prompt_evidence(&inv.evidence);
        let choices = q.choices_block();
        let prompt = services.templates.answerer.render(&[
            ("now_iso", now_iso.as_str()),
            ("question", q.stem.as_str()),
            ("choices_block", choices.as_str()),
            ("evidence_block", evidence.as_str()),
        ]).map_err(crate::reporter::ReportError::from)?;
        let text = services.llm.complete(LlmRole::Answerer, prompt).map_err(crate::reporter::ReportError::from)?.text;
        Ok(text)
    });
    match answer {
        Ok(text) => match extract_choice(&text) {
            Ok(c) => {
                record.predicted = Some(c);
                record.correct = c == q.answer_key;
            }
            Err(_) => record.unparsed = true,
        },
        Err(e) => {
            tracing::warn!(question = %q.id, error = %e, "question failed, scored incorrect");
            record.error = Some(e.to_string());
        }
    }
    record.seconds = started.elapsed().as_secs_f64();
    record
}

/// Runs every question through the pipeline with the question's timestamp
/// as the current time. Scripted services run strictly in order; live
/// services run up to `jobs` questions at once.
pub fn evaluate(questions: &[BenchmarkQuestion], services: &Services, opts: &ExecutionOptions, jobs: usize) -> BenchmarkResult {
    let workers = if services.llm.is_scripted() { Workers::sequential() } else { Workers::new(jobs) };
    let records = workers.map(questions, |q| answer_one(q, services, opts));
    score(records, *opts)
}

const SCOPE_WIDTH: usize = 22;

fn row(out: &mut String, scope: &str, n: usize, acc: f64, acc_std: f64, secs: Option<(f64, f64)>) {
    let secs = secs.map(|(m, s)| format!("{m:.2} ± {s:.2}")).unwrap_or_else(|| "-".into());
    let _ = writeln!(out, "{scope:<SCOPE_WIDTH$} | {n:>5} | {:>14} | {secs}", format!("{acc:.2} ± {acc_std:.2}"));
}

/// Fixed-width table: accuracy ± std and seconds per answer, then one row
/// per non-empty category.
pub fn format_result(result: &BenchmarkResult) -> String {
    if result.n == 0 {
        return "no questions\n".to_string();
    }
    let mut out = String::new();
    let _ = writeln!(out, "{:<SCOPE_WIDTH$} | {:>5} | {:>14} | seconds/answer", "scope", "n", "accuracy %");
    row(&mut out, "overall", result.n, result.accuracy_pct, result.std_pct, Some((result.mean_seconds, result.std_seconds)));
    for c in &result.per_category {
        row(&mut out, c.category.name(), c.n, c.accuracy_pct, c.std_pct, None);
    }
    let _ = writeln!(out, "unparsed answers: {}, failed questions: {}", result.unparsed, result.failed);
    out
}
