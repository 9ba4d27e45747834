//! Evidence aggregation, deduplication and cited report synthesis.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::{Evidence, EvidencePayload, OhlcBar};
use crate::graph::{NodeId, SearchGraph};
use crate::llm::{LlmError, LlmRole, LlmRouter};
use crate::prompts::{PromptTemplates, TemplateError};
use crate::timefmt::{format_utc, serde_utc, serde_utc_opt};

pub const NO_EVIDENCE_NARRATIVE: &str = "No timely information was found for this query.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedEvidence {
    pub evidence: Evidence,
    pub weight: f64,
    pub origin_node: NodeId,
    /// Position of the item inside its node's response.
    pub item_index: usize,
    pub citation_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub index: usize,
    pub source_name: String,
    pub source_url: String,
    #[serde(default, with = "serde_utc_opt", skip_serializing_if = "Option::is_none")]
    pub published_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSeries {
    pub symbol: String,
    pub title: String,
    pub bars: Vec<OhlcBar>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub query: String,
    pub narrative: String,
    pub sources: Vec<SourceRef>,
    pub charts: Vec<ChartSeries>,
    #[serde(with = "serde_utc")]
    pub generated_at: DateTime<Utc>,
    /// Sub-queries that returned nothing, listed so partial reports say so.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gaps: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("generator returned an empty report twice")]
    GenerationEmpty,
    #[error("invalid chart series: {0}")]
    InvalidSeries(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: std::io::Error) -> ReportError {
    ReportError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Sorts by weight (descending), then origin node and item position, and
/// renumbers citations from 1. The order depends only on the items, never
/// on their incoming order.
pub fn sort_weighted(mut items: Vec<WeightedEvidence>) -> Vec<WeightedEvidence> {
    items.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then_with(|| a.origin_node.cmp(&b.origin_node))
            .then_with(|| a.item_index.cmp(&b.item_index))
    });
    renumber(items)
}

fn renumber(mut items: Vec<WeightedEvidence>) -> Vec<WeightedEvidence> {
    for (i, item) in items.iter_mut().enumerate() {
        item.citation_index = i + 1;
    }
    items
}

/// Flattens every node's evidence. Item weights fall back to the node
/// weight; zero-weight items stay, at the tail.
pub fn aggregate(graph: &SearchGraph) -> Vec<WeightedEvidence> {
    let items = graph
        .nodes()
        .flat_map(|node| {
            node.response.iter().flatten().enumerate().map(move |(i, e)| WeightedEvidence {
                weight: e.weight.or(node.weight).unwrap_or(0.0),
                evidence: e.clone(),
                origin_node: node.id.clone(),
                item_index: i,
                citation_index: 0,
            })
        })
        .collect();
    sort_weighted(items)
}

/// Case-folded, punctuation stripped, whitespace collapsed.
pub fn normalize_content(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Keeps one item per normalized content: the heaviest (first on ties),
/// placed where its class first appeared.
pub fn dedup(items: Vec<WeightedEvidence>) -> Vec<WeightedEvidence> {
    let mut slot_of: HashMap<String, usize> = HashMap::new();
    let mut kept: Vec<WeightedEvidence> = Vec::new();
    for item in items {
        let key = normalize_content(&item.evidence.content);
        match slot_of.get(&key) {
            Some(&slot) => {
                if item.weight > kept[slot].weight {
                    kept[slot] = item;
                }
            }
            None => {
                slot_of.insert(key, kept.len());
                kept.push(item);
            }
        }
    }
    renumber(kept)
}

fn marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[(\d+)\]").expect("marker regex compiles"))
}

fn strip_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[ \t]?\[(\d+)\]").expect("marker regex compiles"))
}

/// Citation numbers appearing as `[n]` markers.
pub fn citation_markers(text: &str) -> BTreeSet<usize> {
    marker_regex()
        .captures_iter(text)
        .filter_map(|c| c[1].parse::<usize>().ok())
        .collect()
}

/// Removes markers that cite no source (repeating until none remain, since
/// a removal can splice a new marker together) and returns the cleaned text
/// with the number of markers removed.
pub fn strip_invalid_citations(text: &str, source_count: usize) -> (String, usize) {
    let valid = |m: &str| m.parse::<usize>().is_ok_and(|n| (1..=source_count).contains(&n));
    let mut current = text.to_string();
    let mut removed = 0;
    loop {
        let mut changed = false;
        // an invalid marker takes one leading space with it
        let next = strip_regex()
            .replace_all(&current, |c: &regex::Captures<'_>| {
                if valid(&c[1]) {
                    c[0].to_string()
                } else {
                    removed += 1;
                    changed = true;
                    String::new()
                }
            })
            .into_owned();
        current = next;
        if !changed {
            return (current, removed);
        }
    }
}

fn evidence_block(items: &[WeightedEvidence]) -> String {
    items
        .iter()
        .map(|w| {
            let when = w.evidence.published_at.map(|p| format_utc(&p)).unwrap_or_else(|| "undated".into());
            format!(
                "[{}] weight {:.3} | {} | {} | {}",
                w.citation_index, w.weight, when, w.evidence.source_name, w.evidence.content
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub(crate) fn prompt_evidence(items: &[WeightedEvidence]) -> String {
    if items.is_empty() {
        "(no evidence)".to_string()
    } else {
        evidence_block(items)
    }
}

/// Builds a report from deduplicated items. The narrative may only cite
/// numbers present in `items`; any other marker is stripped and the source
/// list is exactly the set of cited items.
pub fn generate_report(
    query: &str,
    items: &[WeightedEvidence],
    charts: Vec<ChartSeries>,
    llm: &LlmRouter,
    templates: &PromptTemplates,
    now: DateTime<Utc>,
) -> Result<Report, ReportError> {
    if items.is_empty() {
        return Ok(Report {
            query: query.to_string(),
            narrative: NO_EVIDENCE_NARRATIVE.to_string(),
            sources: Vec::new(),
            charts,
            generated_at: now,
            gaps: Vec::new(),
        });
    }
    let now_iso = format_utc(&now);
    let block = evidence_block(items);
    let prompt = templates.generator.render(&[
        ("now_iso", now_iso.as_str()),
        ("user_query", query),
        ("evidence_block", block.as_str()),
    ])?;
    let mut text = llm.complete(LlmRole::Generator, prompt.clone())?.text;
    if text.trim().is_empty() {
        tracing::warn!("generator returned nothing, retrying once");
        text = llm.complete(LlmRole::Generator, prompt)?.text;
        if text.trim().is_empty() {
            return Err(ReportError::GenerationEmpty);
        }
    }
    Ok(finalize_report(query, text.trim(), items, charts, now))
}

/// Enforces citation integrity on generated text.
pub fn finalize_report(
    query: &str,
    text: &str,
    items: &[WeightedEvidence],
    charts: Vec<ChartSeries>,
    now: DateTime<Utc>,
) -> Report {
    // items are contiguously numbered, so any index within 1..=len exists
    let (narrative, removed) = strip_invalid_citations(text, items.len());
    if removed > 0 {
        tracing::warn!(removed, "stripped citations that reference no source");
    }
    let cited = citation_markers(&narrative);
    let sources = items
        .iter()
        .filter(|w| cited.contains(&w.citation_index))
        .map(|w| SourceRef {
            index: w.citation_index,
            source_name: w.evidence.source_name.clone(),
            source_url: w.evidence.source_url.clone(),
            published_at: w.evidence.published_at,
        })
        .collect();
    Report { query: query.to_string(), narrative, sources, charts, generated_at: now, gaps: Vec::new() }
}

/// One series per symbol, taken from the first finance item that carries
/// bars, in node order.
pub fn charts_from_graph(graph: &SearchGraph) -> Vec<ChartSeries> {
    let mut out: Vec<ChartSeries> = Vec::new();
    for e in graph.nodes().flat_map(|n| n.response.iter().flatten()) {
        if let Some(EvidencePayload::Ohlc { symbol, interval, bars }) = &e.payload {
            if !bars.is_empty() && !out.iter().any(|c| &c.symbol == symbol) {
                out.push(ChartSeries { symbol: symbol.clone(), title: format!("{symbol} {interval} k-line"), bars: bars.clone() });
            }
        }
    }
    out
}

#[derive(Serialize)]
struct SidecarBar {
    t: String,
    o: f64,
    h: f64,
    l: f64,
    c: f64,
    v: Option<u64>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    symbol: &'a str,
    title: &'a str,
    bars: Vec<SidecarBar>,
}

pub fn chart_sidecar_json(series: &ChartSeries) -> Result<String, ReportError> {
    if series.bars.is_empty() {
        return Err(ReportError::InvalidSeries(format!("{} has no bars", series.symbol)));
    }
    if series.bars.windows(2).any(|w| w[0].time >= w[1].time) {
        return Err(ReportError::InvalidSeries(format!("{} bars are not ascending", series.symbol)));
    }
    let sidecar = Sidecar {
        symbol: &series.symbol,
        title: &series.title,
        bars: series
            .bars
            .iter()
            .map(|b| SidecarBar { t: format_utc(&b.time), o: b.open, h: b.high, l: b.low, c: b.close, v: b.volume })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n")
}

/// Writes the chart-data sidecar for one series.
pub fn render_kline(series: &ChartSeries, path: &Path) -> Result<(), ReportError> {
    let body = chart_sidecar_json(series)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}

pub fn chart_file_name(symbol: &str) -> String {
    let safe: String = symbol
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.json")
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut md = format!("# {}\n\n_Generated {}_\n\n{}\n", self.query.trim(), format_utc(&self.generated_at), self.narrative);
        if !self.charts.is_empty() {
            md.push_str("\n## Charts\n\n");
            for c in &self.charts {
                md.push_str(&format!("- {} (charts/{})\n", c.title, chart_file_name(&c.symbol)));
            }
        }
        if !self.gaps.is_empty() {
            md.push_str("\n## Gaps\n\n");
            for g in &self.gaps {
                md.push_str(&format!("- {g}\n"));
            }
        }
        md.push_str("\n## Sources\n\n");
        if self.sources.is_empty() {
            md.push_str("None.\n");
        }
        for s in &self.sources {
            let when = s.published_at.map(|p| format!(", published {}", format_utc(&p))).unwrap_or_default();
            md.push_str(&format!("[{}] {} <{}>{}\n", s.index, s.source_name, s.source_url, when));
        }
        md
    }

    /// Writes `report.md` and `charts/<symbol>.json` under `out_dir`,
    /// returning the report path.
    pub fn write_to(&self, out_dir: &Path) -> Result<PathBuf, ReportError> {
        std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
        for c in &self.charts {
            render_kline(c, &out_dir.join("charts").join(chart_file_name(&c.symbol)))?;
        }
        let path = out_dir.join("report.md");
        std::fs::write(&path, self.to_markdown()).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}
