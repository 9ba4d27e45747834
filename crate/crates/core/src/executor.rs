//! Graph traversal: executes each ready node against its data source and,
//! after every execution, lets the rewriter revise the queries of the
//! node's pending children before any of them start.

use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::connectors::{ConnectorError, DataSources, TimeWindow};
use crate::evidence::{BarInterval, Evidence, EvidencePayload, OhlcBar};
use crate::graph::{ApiKind, NodeId, SearchGraph, SearchNode, Violation};
use crate::llm::{LlmRole, LlmRouter};
use crate::par::Workers;
use crate::planner::json_body;
use crate::prompts::PromptTemplates;
use crate::timefmt::{format_utc, start_of_day};

/// Characters of a finished node's results shown to the rewriter.
pub const REWRITE_SUMMARY_CHARS: usize = 1_500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOptions {
    pub enable_rewriter: bool,
    pub enable_temporal_weighting: bool,
    pub max_parallel_nodes: usize,
}

impl Default for ExecutionOptions {
    fn default() -> Self {
        ExecutionOptions { enable_rewriter: true, enable_temporal_weighting: true, max_parallel_nodes: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewriteAction {
    Keep,
    Replace(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteDecision {
    pub child_id: NodeId,
    pub action: RewriteAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    NodeStart,
    NodeFinish,
    RewriteCall,
    Rewrite,
    RewriteError,
}

/// One line of the execution event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecEvent {
    pub seq: u64,
    pub event: EventKind,
    pub node_id: NodeId,
    /// Seconds since the log was created.
    pub t_wall: f64,
    pub detail: Value,
}

/// Append-only, thread-safe event log. `seq` is assigned under the lock, so
/// it totally orders events across worker threads.
#[derive(Debug)]
pub struct EventLog {
    origin: Instant,
    events: Mutex<Vec<ExecEvent>>,
}

impl Default for EventLog {
    fn default() -> Self {
        EventLog { origin: Instant::now(), events: Mutex::new(Vec::new()) }
    }
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, event: EventKind, node_id: &NodeId, detail: Value) {
        let mut events = self.events.lock().expect("event log lock");
        let seq = events.len() as u64;
        events.push(ExecEvent {
            seq,
            event,
            node_id: node_id.clone(),
            t_wall: self.origin.elapsed().as_secs_f64(),
            detail,
        });
    }

    pub fn events(&self) -> Vec<ExecEvent> {
        self.events.lock().expect("event log lock").clone()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.lock().expect("event log lock").iter().filter(|e| e.event == kind).count()
    }

    pub fn to_jsonl(&self) -> String {
        self.events()
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
            .collect()
    }

    /// Timing-free rendering, e.g. `start n002` or `rewrite n003 by n002`.
    pub fn trace(&self) -> Vec<String> {
        self.events()
            .iter()
            .map(|e| match e.event {
                EventKind::NodeStart => format!("start {}", e.node_id),
                EventKind::NodeFinish => format!("finish {} {}", e.node_id, e.detail["status"].as_str().unwrap_or("")),
                EventKind::RewriteCall => format!("rewrite_call {}", e.node_id),
                EventKind::Rewrite => format!(
                    "rewrite {} by {} {}",
                    e.node_id,
                    e.detail["parent"].as_str().unwrap_or(""),
                    e.detail["action"].as_str().unwrap_or("")
                ),
                EventKind::RewriteError => format!("rewrite_error {}", e.node_id),
            })
            .collect()
    }
}

/// What the executor sends upstream for one node.
#[derive(Debug, Clone, PartialEq)]
pub enum ApiCall {
    /// Structural root without a data source.
    Anchor,
    News { query: String, window: TimeWindow },
    Web { query: String },
    Finance { symbol: String, range: TimeWindow, interval: BarInterval },
}

fn iso_date_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b\d{4}-\d{2}-\d{2}\b").expect("date regex compiles"))
}

fn dates_in(query: &str) -> Vec<NaiveDate> {
    iso_date_regex()
        .find_iter(query)
        .filter_map(|m| NaiveDate::parse_from_str(m.as_str(), "%Y-%m-%d").ok())
        .collect()
}

fn without_dates(query: &str) -> String {
    iso_date_regex().replace_all(query, " ").split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `[first, last]` when two or more dates are present, the whole day for a
/// single date, `fallback` otherwise.
fn window_from_dates(dates: &[NaiveDate], fallback: TimeWindow) -> TimeWindow {
    match (dates.iter().min(), dates.iter().max()) {
        (Some(lo), Some(hi)) if lo != hi => TimeWindow::new(start_of_day(*lo), start_of_day(*hi)),
        (Some(d), _) => TimeWindow::new(start_of_day(*d), start_of_day(*d) + Duration::days(1)),
        _ => fallback,
    }
}

impl ApiCall {
    /// Derives call parameters from a node's query text. Dates written as
    /// `YYYY-MM-DD` bound the news window or price range; finance queries
    /// name their ticker in capitals and may ask for `1m` bars.
    pub fn for_node(node: &SearchNode, now: DateTime<Utc>) -> Result<ApiCall, String> {
        let query = node.query.trim();
        match node.api {
            None => Ok(ApiCall::Anchor),
            Some(ApiKind::WebSearch) => Ok(ApiCall::Web { query: query.to_string() }),
            Some(ApiKind::News) => {
                let window = window_from_dates(&dates_in(query), TimeWindow::new(now - Duration::days(7), now));
                let text = without_dates(query);
                let text = if text.is_empty() { query.to_string() } else { text };
                Ok(ApiCall::News { query: text, window })
            }
            Some(ApiKind::Finance) => {
                let tokens: Vec<&str> = query.split_whitespace().collect();
                let symbol = tokens
                    .iter()
                    .map(|t| t.trim_start_matches('$').trim_end_matches([',', ';', ':', '.']))
                    .find(|t| {
                        (1..=12).contains(&t.len())
                            && t.chars().any(|c| c.is_ascii_uppercase())
                            && t.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || ".^-".contains(c))
                    })
                    .ok_or_else(|| format!("no ticker symbol in finance query `{query}`"))?;
                let minute = tokens.iter().any(|t| {
                    let t = t.to_ascii_lowercase();
                    t == "1m" || t == "1min" || t == "minute" || t == "intraday"
                });
                let interval = if minute { BarInterval::OneMinute } else { BarInterval::OneDay };
                let today = start_of_day(now.date_naive());
                let fallback = match interval {
                    BarInterval::OneMinute => TimeWindow::new(now - Duration::days(1), now),
                    BarInterval::OneDay => TimeWindow::new(today - Duration::days(30), today),
                };
                let range = window_from_dates(&dates_in(query), fallback);
                Ok(ApiCall::Finance { symbol: symbol.to_string(), range, interval })
            }
        }
    }
}

fn bars_summary(symbol: &str, interval: BarInterval, bars: &[OhlcBar]) -> String {
    let (first, last) = (&bars[0], &bars[bars.len() - 1]);
    let high = bars.iter().map(|b| b.high).fold(f64::MIN, f64::max);
    let low = bars.iter().map(|b| b.low).fold(f64::MAX, f64::min);
    let change = (last.close / first.open - 1.0) * 100.0;
    format!(
        "{symbol} {interval} prices {} to {}: open {:.2}, close {:.2}, high {:.2}, low {:.2}, change {:+.2}% over {} bars",
        format_utc(&first.time),
        format_utc(&last.time),
        first.open,
        last.close,
        high,
        low,
        change,
        bars.len()
    )
}

fn newest_publication(items: &[Evidence]) -> Option<DateTime<Utc>> {
    items.iter().filter_map(|e| e.published_at).max()
}

/// Runs one node's sub-query. Failures are recorded on the returned node
/// rather than propagated.
pub fn execute_node(node: &SearchNode, sources: &dyn DataSources, now: DateTime<Utc>) -> SearchNode {
    let mut out = node.clone();
    let call = match ApiCall::for_node(node, now) {
        Ok(call) => call,
        Err(why) => {
            out.mark_failed(why);
            return out;
        }
    };
    let result: Result<(Vec<Evidence>, Option<DateTime<Utc>>), ConnectorError> = match call {
        ApiCall::Anchor => Ok((Vec::new(), None)),
        ApiCall::News { query, window } => sources
            .fetch_news(&query, &window)
            .map(|r| { let t = newest_publication(&r.items).or(Some(r.retrieved_at)); (r.items, t) }),
        ApiCall::Web { query } => sources
            .fetch_web(&query)
            .map(|r| { let t = newest_publication(&r.items).or(Some(r.retrieved_at)); (r.items, t) }),
        ApiCall::Finance { symbol, range, interval } => sources.fetch_finance(&symbol, &range, interval).map(|r| {
            if r.items.is_empty() {
                return (Vec::new(), Some(r.retrieved_at));
            }
            let last = r.items[r.items.len() - 1].time;
            let evidence = Evidence {
                content: bars_summary(&symbol, interval, &r.items),
                source_name: "Market data".into(),
                source_url: format!("https://finance.yahoo.com/quote/{symbol}/history"),
                published_at: Some(last.min(r.retrieved_at)),
                retrieved_at: r.retrieved_at,
                weight: None,
                payload: Some(EvidencePayload::Ohlc { symbol: symbol.clone(), interval, bars: r.items }),
            };
            (vec![evidence], Some(last))
        }),
    };
    match result {
        Ok((items, info_time)) => out.mark_executed(items, info_time),
        Err(e) => out.mark_failed(e.to_string()),
    }
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum ExecError {
    #[error("graph is not valid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidGraph(Vec<Violation>),
    #[error("node {0} is not pending")]
    NotPending(NodeId),
}

/// Borrowed services the executor needs.
#[derive(Clone, Copy)]
pub struct ExecServices<'a> {
    pub sources: &'a dyn DataSources,
    pub llm: &'a LlmRouter,
    pub templates: &'a PromptTemplates,
}

#[derive(Deserialize)]
struct RewriterReply {
    decisions: Vec<RewriterItem>,
}

#[derive(Deserialize)]
struct RewriterItem {
    child_id: NodeId,
    action: String,
    #[serde(default)]
    query: Option<String>,
}

/// Parses a rewriter reply into one decision per child, in `children`
/// order. Children the reply does not mention are kept.
pub fn parse_rewrite_reply(text: &str, graph: &SearchGraph, children: &[NodeId]) -> Result<Vec<RewriteDecision>, String> {
    let keep_all = || children.iter().map(|c| RewriteDecision { child_id: c.clone(), action: RewriteAction::Keep }).collect();
    if text.trim().trim_matches('"').eq_ignore_ascii_case("keep") {
        return Ok(keep_all());
    }
    let reply: RewriterReply = serde_json::from_str(json_body(text)).map_err(|e| e.to_string())?;
    let mut decisions: Vec<RewriteDecision> = keep_all();
    for item in reply.decisions {
        let Some(slot) = decisions.iter_mut().find(|d| d.child_id == item.child_id) else {
            tracing::warn!(child = %item.child_id, "rewriter named a node that is not a pending child");
            continue;
        };
        match item.action.to_ascii_lowercase().as_str() {
            "keep" => {}
            "replace" => {
                let query = item.query.unwrap_or_default().trim().to_string();
                let current = graph.node(&item.child_id).map(|n| n.query.as_str()).unwrap_or("");
                if !query.is_empty() && query != current {
                    slot.action = RewriteAction::Replace(query);
                }
            }
            other => return Err(format!("unknown rewrite action `{other}`")),
        }
    }
    Ok(decisions)
}

fn response_summary(node: &SearchNode) -> String {
    let text = match (&node.error, node.response.as_deref()) {
        (Some(err), _) => format!("(search failed: {err})"),
        (None, Some([])) | (None, None) => "(no results)".to_string(),
        (None, Some(items)) => items
            .iter()
            .map(|e| match e.published_at {
                Some(p) => format!("- [{}] {} ({})", e.source_name, e.content, format_utc(&p)),
                None => format!("- [{}] {}", e.source_name, e.content),
            })
            .collect::<Vec<_>>()
            .join("\n"),
    };
    text.chars().take(REWRITE_SUMMARY_CHARS).collect()
}

/// Graph JSON without responses, for prompts.
fn graph_outline(graph: &SearchGraph) -> String {
    let mut doc = graph.to_document();
    for n in &mut doc.nodes {
        n.response = None;
    }
    serde_json::to_string(&doc).expect("graph serializes")
}

/// Asks the rewriter to revise the pending children of `executed` and
/// applies any replacements. Only child query text ever changes. Rewriter
/// failures keep every child as it is.
pub fn rewrite_children(graph: &mut SearchGraph, executed: &NodeId, services: ExecServices<'_>, log: &EventLog) -> Vec<RewriteDecision> {
    let Some(parent) = graph.node(executed).cloned() else {
        return Vec::new();
    };
    let children: Vec<NodeId> = graph
        .successors(executed)
        .filter(|c| graph.node(c).is_some_and(SearchNode::is_pending))
        .cloned()
        .collect();
    if parent.is_pending() || children.is_empty() {
        return Vec::new();
    }

    let child_blocks = children
        .iter()
        .map(|c| format!("- {c}: {}", graph.node(c).expect("child exists").query))
        .collect::<Vec<_>>()
        .join("\n");
    let summary = response_summary(&parent);
    let outline = graph_outline(graph);
    let prompt = services.templates.rewriter.render(&[
        ("parent_id", parent.id.as_str()),
        ("parent_query", parent.query.as_str()),
        ("parent_response", summary.as_str()),
        ("child_blocks", child_blocks.as_str()),
        ("graph_json", outline.as_str()),
    ]);

    log.record(EventKind::RewriteCall, executed, json!({"children": children}));
    let reply = prompt
        .map_err(|e| e.to_string())
        .and_then(|p| services.llm.complete(LlmRole::Rewriter, p).map_err(|e| e.to_string()));
    let decisions = match reply.and_then(|r| parse_rewrite_reply(&r.text, graph, &children)) {
        Ok(d) => d,
        Err(why) => {
            tracing::warn!(node = %executed, %why, "rewriter failed; keeping child queries");
            log.record(EventKind::RewriteError, executed, json!({"error": why}));
            children.iter().map(|c| RewriteDecision { child_id: c.clone(), action: RewriteAction::Keep }).collect()
        }
    };
    for d in &decisions {
        let detail = match &d.action {
            RewriteAction::Keep => json!({"parent": executed, "action": "keep"}),
            RewriteAction::Replace(q) => {
                graph.node_mut(&d.child_id).expect("child exists").set_query(q.clone());
                json!({"parent": executed, "action": "replace", "query": q})
            }
        };
        log.record(EventKind::Rewrite, &d.child_id, detail);
    }
    decisions
}

/// Executes the whole graph in dependency order. Up to
/// `max_parallel_nodes` ready nodes run at once; results are applied and
/// rewrites issued in id order once the batch completes, so every rewrite
/// of a node happens before that node starts. With a width of 1 the
/// execution order is exactly the graph's topological order.
pub fn run(
    mut graph: SearchGraph,
    services: ExecServices<'_>,
    opts: &ExecutionOptions,
    now: DateTime<Utc>,
    log: &EventLog,
) -> Result<SearchGraph, ExecError> {
    let violations = graph.validate();
    if !violations.is_empty() {
        return Err(ExecError::InvalidGraph(violations));
    }
    if let Some(n) = graph.nodes().find(|n| !n.is_pending()) {
        return Err(ExecError::NotPending(n.id.clone()));
    }

    let workers = Workers::new(opts.max_parallel_nodes);
    loop {
        let ready = graph.ready_set();
        if ready.is_empty() {
            break;
        }
        let batch: Vec<SearchNode> = ready
            .iter()
            .take(workers.width())
            .map(|id| graph.node(id).expect("ready id exists").clone())
            .collect();

        let outcomes = workers.map(&batch, |node| {
            log.record(EventKind::NodeStart, &node.id, json!({"api": node.api, "query": node.query}));
            let done = execute_node(node, services.sources, now);
            log.record(
                EventKind::NodeFinish,
                &done.id,
                json!({"status": done.status, "items": done.response.as_ref().map_or(0, Vec::len), "error": done.error}),
            );
            done
        });
        for outcome in &outcomes {
            graph.node_mut(&outcome.id).expect("batch id exists").apply_outcome(outcome);
        }
        if opts.enable_rewriter {
            for outcome in &outcomes {
                // a data-less anchor gives the rewriter nothing to act on
                if outcome.api.is_some() {
                    rewrite_children(&mut graph, &outcome.id, services, log);
                }
            }
        }
    }
    Ok(graph)
}
