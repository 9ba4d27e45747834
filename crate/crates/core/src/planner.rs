//! Turns a user query into a validated search graph: relative dates are
//! resolved locally, then a single planner LLM call (plus at most one
//! repair call) emits the graph JSON.

use std::sync::OnceLock;

use chrono::{DateTime, Datelike, Duration, NaiveDate, Utc, Weekday};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ApiKind, GraphDocument, GraphError, NodeId, SearchGraph, Violation};
use crate::llm::{LlmError, LlmRole, LlmRouter};
use crate::prompts::{PromptTemplates, TemplateError};
use crate::timefmt::format_utc;

pub const MAX_PLAN_NODES: usize = 12;

/// How far past `now` an absolute date in a query may lie.
pub const MAX_FUTURE_DAYS: i64 = 7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedDate {
    pub surface_form: String,
    pub resolved: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryContext {
    pub user_query: String,
    pub now: DateTime<Utc>,
    pub resolved_dates: Vec<ResolvedDate>,
}

impl QueryContext {
    pub fn new(user_query: impl Into<String>, now: DateTime<Utc>) -> Self {
        QueryContext { user_query: user_query.into(), now, resolved_dates: Vec::new() }
    }

    /// Timestamp temporal weights are measured from: `now`, or the end of
    /// the latest date the query anchors to, whichever is earlier.
    pub fn reference_time(&self) -> DateTime<Utc> {
        self.resolved_dates
            .iter()
            .map(|d| d.resolved)
            .max()
            .and_then(|d| d.and_hms_opt(23, 59, 59))
            .map(|t| t.and_utc().min(self.now))
            .unwrap_or(self.now)
    }
}

/// The outcome of one planning attempt before it is accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanDraft {
    pub raw_llm_text: String,
    pub parsed: Option<SearchGraph>,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("unresolvable date expression `{0}`")]
    UnresolvableDateExpr(String),
    #[error("date `{surface}` resolves to {date}, more than {MAX_FUTURE_DAYS} days after the query time")]
    DateOutOfRange { surface: String, date: NaiveDate },
    #[error("user query is empty")]
    EmptyQuery,
    #[error("plan parse error: {0}")]
    Parse(String),
    #[error("plan invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

fn weekday_named(name: &str) -> Option<Weekday> {
    name.parse::<Weekday>().ok()
}

fn count_word(word: &str) -> Option<i64> {
    const WORDS: [&str; 11] = ["a", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];
    word.parse::<i64>()
        .ok()
        .or_else(|| WORDS.iter().position(|w| *w == word).map(|i| i.max(1) as i64))
}

/// Resolves one date expression against `now`.
///
/// Supported forms: `today`, `yesterday`, `N days ago`, `last <weekday>`
/// (the most recent strictly earlier occurrence), `last week` (its Monday),
/// `last month` (its first day), `this week` (its Monday), `this quarter`
/// (its first day), and absolute `YYYY-MM-DD`.
pub fn resolve_relative_date(expr: &str, now: DateTime<Utc>) -> Result<NaiveDate, PlanError> {
    let norm = expr.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let today = now.date_naive();
    let unresolvable = || PlanError::UnresolvableDateExpr(expr.to_string());
    let words: Vec<&str> = norm.split(' ').collect();
    let monday_of = |d: NaiveDate| d - Duration::days(d.weekday().num_days_from_monday() as i64);

    let date = match words.as_slice() {
        ["today"] => today,
        ["yesterday"] => today - Duration::days(1),
        [n, "day" | "days", "ago"] => {
            let n = count_word(n).ok_or_else(unresolvable)?;
            if !(0..=36_500).contains(&n) {
                return Err(unresolvable());
            }
            today - Duration::days(n)
        }
        ["last", "week"] => monday_of(today) - Duration::days(7),
        ["last", "month"] => {
            let first = today.with_day(1).expect("day 1 exists");
            (first - Duration::days(1)).with_day(1).expect("day 1 exists")
        }
        ["this", "week"] => monday_of(today),
        ["this", "quarter"] => {
            let month = (today.month0() / 3) * 3 + 1;
            NaiveDate::from_ymd_opt(today.year(), month, 1).expect("quarter start exists")
        }
        ["last", day] => {
            let target = weekday_named(day).ok_or_else(unresolvable)?;
            let back = (today.weekday().num_days_from_monday() as i64 - target.num_days_from_monday() as i64)
                .rem_euclid(7);
            today - Duration::days(if back == 0 { 7 } else { back })
        }
        [single] => NaiveDate::parse_from_str(single, "%Y-%m-%d").map_err(|_| unresolvable())?,
        _ => return Err(unresolvable()),
    };
    Ok(date)
}

fn date_expr_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\b(today|yesterday|(?:\d+|a|one|two|three|four|five|six|seven|eight|nine|ten)\s+days?\s+ago|last\s+(?:monday|tuesday|wednesday|thursday|friday|saturday|sunday|week|month)|this\s+(?:week|quarter)|\d{4}-\d{2}-\d{2})\b",
        )
        .expect("date regex compiles")
    })
}

/// Scans the query for supported date expressions and records their
/// resolutions. Entities and events are left for the planning prompt.
pub fn extract_semantics(mut ctx: QueryContext) -> Result<QueryContext, PlanError> {
    if ctx.user_query.trim().is_empty() {
        return Err(PlanError::EmptyQuery);
    }
    let limit = ctx.now.date_naive() + Duration::days(MAX_FUTURE_DAYS);
    let mut resolved = Vec::new();
    for m in date_expr_regex().find_iter(&ctx.user_query) {
        let surface = m.as_str().to_string();
        let date = match resolve_relative_date(&surface, ctx.now) {
            Ok(d) => d,
            // e.g. 2024-13-45: left in the text untouched
            Err(PlanError::UnresolvableDateExpr(_)) => continue,
            Err(e) => return Err(e),
        };
        if date > limit {
            return Err(PlanError::DateOutOfRange { surface, date });
        }
        if !resolved.iter().any(|r: &ResolvedDate| r.surface_form == surface) {
            resolved.push(ResolvedDate { surface_form: surface, resolved: date });
        }
    }
    ctx.resolved_dates = resolved;
    Ok(ctx)
}

pub fn api_catalog() -> String {
    [
        "- News: recent news articles matching keywords, optionally limited to a date range (YYYY-MM-DD YYYY-MM-DD).",
        "- WebSearch: general web search for background and market context.",
        "- Finance: OHLC price history; query as \"<TICKER> <1d|1m> <from YYYY-MM-DD> <to YYYY-MM-DD>\".",
    ]
    .join("\n")
}

fn resolved_block(ctx: &QueryContext) -> String {
    if ctx.resolved_dates.is_empty() {
        return "(none)".to_string();
    }
    ctx.resolved_dates
        .iter()
        .map(|d| format!("- \"{}\" = {}", d.surface_form, d.resolved))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Strips Markdown fences and any prose around the outermost JSON object.
pub(crate) fn json_body(text: &str) -> &str {
    let t = text.trim();
    match (t.find('{'), t.rfind('}')) {
        (Some(a), Some(b)) if a < b => &t[a..=b],
        _ => t,
    }
}

/// Parses planner output in the graph interchange format. Schema problems
/// are `Parse` errors naming the offending path; structural problems
/// (cycles, reachability, size) are `Invalid`.
pub fn parse_plan_json(text: &str) -> Result<SearchGraph, PlanError> {
    let de = &mut serde_json::Deserializer::from_str(json_body(text));
    let doc: GraphDocument = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        PlanError::Parse(format!("{}: {}", path, e.into_inner()))
    })?;

    let mut violations = Vec::new();
    let mut graph = SearchGraph::new();
    for (i, node) in doc.nodes.iter().enumerate() {
        let id = node.id.clone();
        if id.as_str().trim().is_empty() {
            return Err(PlanError::Parse(format!("nodes[{i}].id: empty node id")));
        }
        let fields = [
            ("weight", node.weight.is_some()),
            ("info_time", node.info_time.is_some()),
            ("response", node.response.is_some()),
            ("error", node.error.is_some()),
            ("status", !node.is_pending()),
        ];
        for (field, present) in fields {
            if present {
                violations.push(Violation::PlanningFieldPresent { node: id.clone(), field: field.into() });
            }
        }
        if let Err(GraphError::DuplicateNodeId(dup)) = graph.add_node(node.clone()) {
            return Err(PlanError::Parse(format!("nodes[{i}].id: duplicate node id {dup}")));
        }
    }
    if graph.set_root(&doc.root).is_err() {
        return Err(PlanError::Parse(format!("root: unknown node {}", doc.root)));
    }
    for (i, (from, to)) in doc.edges.iter().enumerate() {
        match graph.add_edge(from, to) {
            Ok(()) => {}
            Err(GraphError::UnknownNode(n)) => {
                return Err(PlanError::Parse(format!("edges[{i}]: unknown node {n}")));
            }
            Err(e) => violations.push(e.into()),
        }
    }

    violations.extend(graph.validate());
    if graph.len() > MAX_PLAN_NODES {
        violations.push(Violation::TooManyNodes { count: graph.len(), max: MAX_PLAN_NODES });
    }
    for node in graph.nodes() {
        if node.query.trim().is_empty() {
            violations.push(Violation::EmptyQuery(node.id.clone()));
        }
        if node.api.is_none() && Some(&node.id) != graph.root() {
            violations.push(Violation::MissingApi(node.id.clone()));
        }
    }
    if violations.is_empty() {
        Ok(graph)
    } else {
        Err(PlanError::Invalid(violations))
    }
}

/// Parses one LLM reply into a draft. Parse failures are returned as
/// errors; structural failures become the draft's violation list.
pub fn draft_from_text(text: &str) -> Result<PlanDraft, PlanError> {
    match parse_plan_json(text) {
        Ok(graph) => Ok(PlanDraft { raw_llm_text: text.to_string(), parsed: Some(graph), violations: Vec::new() }),
        Err(PlanError::Invalid(v)) => Ok(PlanDraft { raw_llm_text: text.to_string(), parsed: None, violations: v }),
        Err(e) => Err(e),
    }
}

/// Plans `ctx` (semantics already extracted) into a validated graph whose
/// root carries the user query.
pub fn build_plan(ctx: &QueryContext, llm: &LlmRouter, templates: &PromptTemplates) -> Result<SearchGraph, PlanError> {
    let now_iso = format_utc(&ctx.now);
    let resolved = resolved_block(ctx);
    let catalog = api_catalog();
    let prompt = templates.planner.render(&[
        ("user_query", ctx.user_query.as_str()),
        ("now_iso", now_iso.as_str()),
        ("resolved_dates_block", resolved.as_str()),
        ("api_catalog", catalog.as_str()),
    ])?;
    let first = llm.complete(LlmRole::Planner, prompt)?.text;
    let draft = match draft_from_text(&first) {
        Ok(d) => d,
        Err(PlanError::Parse(err)) => {
            tracing::warn!(error = %err, "planner output unparseable, requesting repair");
            let repair = templates.planner_repair.render(&[("error", err.as_str()), ("previous", first.as_str())])?;
            let second = llm.complete(LlmRole::Planner, repair)?.text;
            draft_from_text(&second)?
        }
        Err(e) => return Err(e),
    };
    let mut graph = match draft.parsed {
        Some(g) => g,
        None => return Err(PlanError::Invalid(draft.violations)),
    };
    let root: NodeId = graph.root().cloned().expect("validated graph has a root");
    graph.node_mut(&root).expect("root exists").set_query(ctx.user_query.clone());
    Ok(graph)
}

/// Api kinds referenced by a plan, for diagnostics.
pub fn plan_apis(graph: &SearchGraph) -> Vec<ApiKind> {
    let mut apis: Vec<ApiKind> = graph.nodes().filter_map(|n| n.api).collect();
    apis.sort();
    apis.dedup();
    apis
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{LlmScript, ScriptEntry, ScriptedBackend};
    use crate::timefmt::parse_utc;
    use std::sync::Arc;

    fn now() -> DateTime<Utc> {
        parse_utc("2024-10-15T12:00:00Z").unwrap()
    }

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn scripted(planner_replies: &[&str]) -> (LlmRouter, Arc<ScriptedBackend>) {
        let backend = Arc::new(ScriptedBackend::new(LlmScript {
            entries: planner_replies
                .iter()
                .map(|r| ScriptEntry { role: LlmRole::Planner, response: r.to_string() })
                .collect(),
        }));
        (LlmRouter::uniform(backend.clone()), backend)
    }

    /// Calendar oracle: walk back one day at a time until the weekday matches.
    fn previous_weekday(from: NaiveDate, target: Weekday) -> NaiveDate {
        let mut day = from - Duration::days(1);
        while day.weekday() != target {
            day -= Duration::days(1);
        }
        day
    }

    #[test]
    fn resolve_examples() {
        assert_eq!(resolve_relative_date("yesterday", now()).unwrap(), d("2024-10-14"));
        assert_eq!(now().weekday(), Weekday::Tue);
        let oracle = previous_weekday(d("2024-10-15"), Weekday::Fri);
        assert_eq!(oracle, d("2024-10-11"));
        assert_eq!(resolve_relative_date("last Friday", now()).unwrap(), oracle);
        assert_eq!(resolve_relative_date("2024-09-30", now()).unwrap(), d("2024-09-30"));
    }

    #[test]
    fn resolve_remaining_grammar() {
        assert_eq!(resolve_relative_date("today", now()).unwrap(), d("2024-10-15"));
        assert_eq!(resolve_relative_date("3 days ago", now()).unwrap(), d("2024-10-12"));
        assert_eq!(resolve_relative_date("two  days ago", now()).unwrap(), d("2024-10-13"));
        assert_eq!(resolve_relative_date("last Tuesday", now()).unwrap(), d("2024-10-08"));
        assert_eq!(resolve_relative_date("last week", now()).unwrap(), d("2024-10-07"));
        assert_eq!(resolve_relative_date("this week", now()).unwrap(), d("2024-10-14"));
        assert_eq!(resolve_relative_date("last month", now()).unwrap(), d("2024-09-01"));
        assert_eq!(resolve_relative_date("this quarter", now()).unwrap(), d("2024-10-01"));
        let jan = parse_utc("2024-01-10T00:00:00Z").unwrap();
        assert_eq!(resolve_relative_date("last month", jan).unwrap(), d("2023-12-01"));
    }

    #[test]
    fn unsupported_expressions_are_rejected() {
        for expr in ["next Friday", "the other day", "last fortnight", "2024-13-40"] {
            assert!(matches!(resolve_relative_date(expr, now()), Err(PlanError::UnresolvableDateExpr(_))), "{expr}");
        }
    }

    #[test]
    fn extract_semantics_examples() {
        let ctx = extract_semantics(QueryContext::new("How did NVDA move after last Friday's CPI print?", now())).unwrap();
        assert_eq!(ctx.resolved_dates, vec![ResolvedDate { surface_form: "last Friday".into(), resolved: d("2024-10-11") }]);

        let ctx = extract_semantics(QueryContext::new("What drives gold prices?", now())).unwrap();
        assert!(ctx.resolved_dates.is_empty());

        let ctx = extract_semantics(QueryContext::new("What happened on 2024-06-03?", now())).unwrap();
        assert_eq!(ctx.resolved_dates, vec![ResolvedDate { surface_form: "2024-06-03".into(), resolved: d("2024-06-03") }]);
    }

    #[test]
    fn far_future_dates_are_rejected() {
        let err = extract_semantics(QueryContext::new("Fed decision on 2024-12-18", now())).unwrap_err();
        assert!(matches!(err, PlanError::DateOutOfRange { .. }));
        assert!(extract_semantics(QueryContext::new("CPI on 2024-10-20", now())).is_ok());
        assert!(matches!(extract_semantics(QueryContext::new("  ", now())), Err(PlanError::EmptyQuery)));
    }

    #[test]
    fn reference_time_anchors_to_resolved_dates() {
        let ctx = extract_semantics(QueryContext::new("moves yesterday", now())).unwrap();
        assert_eq!(format_utc(&ctx.reference_time()), "2024-10-14T23:59:59Z");
        let ctx = extract_semantics(QueryContext::new("moves today", now())).unwrap();
        assert_eq!(ctx.reference_time(), now());
        assert_eq!(QueryContext::new("x", now()).reference_time(), now());
    }

    const FOUR_NODE_PLAN: &str = r#"{"root":"n001","nodes":[
        {"id":"n001","query":"placeholder"},
        {"id":"n002","query":"ACME 1d 2024-10-01 2024-10-15","api":"Finance"},
        {"id":"n003","query":"ACME earnings news","api":"News"},
        {"id":"n004","query":"semiconductor sector outlook","api":"WebSearch"}],
        "edges":[["n001","n002"],["n001","n003"],["n001","n004"]]}"#;

    #[test]
    fn build_plan_from_scripted_planner() {
        let (llm, backend) = scripted(&[FOUR_NODE_PLAN]);
        let ctx = QueryContext::new("How is ACME doing?", now());
        let g = build_plan(&ctx, &llm, &PromptTemplates::default()).unwrap();
        assert_eq!((g.len(), g.edge_count()), (4, 3));
        assert!(g.validate().is_empty());
        assert_eq!(g.root_node().unwrap().query, "How is ACME doing?");
        assert_eq!(plan_apis(&g), vec![ApiKind::News, ApiKind::WebSearch, ApiKind::Finance]);
        assert_eq!(backend.call_count(LlmRole::Planner), 1);
    }

    #[test]
    fn build_plan_repairs_once_then_gives_up() {
        let (llm, backend) = scripted(&["not json", "not json"]);
        let err = build_plan(&QueryContext::new("q", now()), &llm, &PromptTemplates::default()).unwrap_err();
        assert!(matches!(err, PlanError::Parse(_)));
        assert_eq!(backend.call_count(LlmRole::Planner), 2);
        assert!(backend.calls()[1].1.contains("Parser error"));

        let (llm, backend) = scripted(&["sorry", FOUR_NODE_PLAN]);
        assert!(build_plan(&QueryContext::new("q", now()), &llm, &PromptTemplates::default()).is_ok());
        assert_eq!(backend.call_count(LlmRole::Planner), 2);
    }

    #[test]
    fn build_plan_reports_cycles_as_invalid() {
        let cyclic = r#"{"root":"n001","nodes":[{"id":"n001","query":"q"},{"id":"n002","query":"a","api":"News"},
            {"id":"n003","query":"b","api":"News"}],"edges":[["n001","n002"],["n002","n003"],["n003","n002"]]}"#;
        let (llm, backend) = scripted(&[cyclic]);
        let err = build_plan(&QueryContext::new("q", now()), &llm, &PromptTemplates::default()).unwrap_err();
        match err {
            PlanError::Invalid(v) => assert!(v.iter().any(|v| matches!(v, Violation::CycleDetected { .. }))),
            other => panic!("expected PlanInvalid, got {other:?}"),
        }
        assert!(err_text_mentions_cycle(cyclic));
        assert_eq!(backend.call_count(LlmRole::Planner), 1);
    }

    fn err_text_mentions_cycle(plan: &str) -> bool {
        parse_plan_json(plan).unwrap_err().to_string().contains("CycleDetected")
    }

    #[test]
    fn parse_plan_json_cases() {
        let g = parse_plan_json(r#"{"root":"n001","nodes":[{"id":"n001","query":"q","api":"News","extra":1}],"edges":[]}"#)
            .unwrap();
        assert_eq!(g.len(), 1);

        let err = parse_plan_json(r#"{"root":"n001","nodes":[{"id":"n001","query":"q","api":"Weather"}],"edges":[]}"#)
            .unwrap_err();
        assert!(matches!(&err, PlanError::Parse(m) if m.contains("nodes[0].api") && m.contains("Weather")), "{err}");

        let err = parse_plan_json(
            r#"{"root":"n001","nodes":[{"id":"n001","query":"q"},{"id":"n001","query":"r","api":"News"}],"edges":[]}"#,
        )
        .unwrap_err();
        assert!(matches!(&err, PlanError::Parse(m) if m.contains("duplicate")), "{err}");
    }

    #[test]
    fn parse_plan_json_structural_checks() {
        let fenced = "```json\n{\"root\":\"n001\",\"nodes\":[{\"id\":\"n001\",\"query\":\"q\"}],\"edges\":[]}\n```";
        assert!(parse_plan_json(fenced).is_ok());

        let with_weight = r#"{"root":"n001","nodes":[{"id":"n001","query":"q","weight":1.0}],"edges":[]}"#;
        assert!(matches!(parse_plan_json(with_weight), Err(PlanError::Invalid(_))));

        let no_api = r#"{"root":"n001","nodes":[{"id":"n001","query":"q"},{"id":"n002","query":"x"}],"edges":[["n001","n002"]]}"#;
        assert!(matches!(parse_plan_json(no_api), Err(PlanError::Invalid(v)) if v == vec![Violation::MissingApi(NodeId::new("n002"))]));

        let nodes: Vec<String> = (1..=13).map(|i| format!(r#"{{"id":"n{i:03}","query":"q","api":"News"}}"#)).collect();
        let edges: Vec<String> = (2..=13).map(|i| format!(r#"["n001","n{i:03}"]"#)).collect();
        let big = format!(r#"{{"root":"n001","nodes":[{}],"edges":[{}]}}"#, nodes.join(","), edges.join(","));
        assert!(matches!(parse_plan_json(&big), Err(PlanError::Invalid(v)) if v.contains(&Violation::TooManyNodes { count: 13, max: 12 })));

        let bad_edge = r#"{"root":"n001","nodes":[{"id":"n001","query":"q"}],"edges":[["n001","n009"]]}"#;
        assert!(matches!(parse_plan_json(bad_edge), Err(PlanError::Parse(m)) if m.contains("edges[0]")));
    }
}
