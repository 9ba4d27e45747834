//! End-to-end query pipeline: plan, execute, weight, aggregate, report.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::connectors::DataSources;
use crate::executor::{self, EventLog, ExecError, ExecServices, ExecutionOptions};
use crate::graph::{NodeStatus, SearchGraph};
use crate::llm::LlmRouter;
use crate::planner::{build_plan, extract_semantics, PlanError, QueryContext};
use crate::prompts::PromptTemplates;
use crate::reporter::{aggregate, charts_from_graph, dedup, generate_report, Report, ReportError, WeightedEvidence};
use crate::temporal::{annotate_uniform, annotate_weights, TemporalParams};

/// Everything a pipeline run talks to.
#[derive(Clone)]
pub struct Services {
    pub llm: LlmRouter,
    pub sources: Arc<dyn DataSources>,
    pub templates: PromptTemplates,
    pub temporal: TemporalParams,
}

impl Services {
    pub fn exec(&self) -> ExecServices<'_> {
        ExecServices { sources: self.sources.as_ref(), llm: &self.llm, templates: &self.templates }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// A planned, executed and weighted graph with its evidence.
pub struct Investigation {
    pub context: QueryContext,
    pub graph: SearchGraph,
    pub evidence: Vec<WeightedEvidence>,
    pub log: EventLog,
}

/// Runs everything up to (not including) synthesis.
pub fn investigate(
    query: &str,
    now: DateTime<Utc>,
    services: &Services,
    opts: &ExecutionOptions,
) -> Result<Investigation, PipelineError> {
    let context = extract_semantics(QueryContext::new(query, now))?;
    let plan = build_plan(&context, &services.llm, &services.templates)?;
    let log = EventLog::new();
    let mut graph = executor::run(plan, services.exec(), opts, now, &log)?;
    if opts.enable_temporal_weighting {
        annotate_weights(&mut graph, &context.reference_time(), &services.temporal);
    } else {
        annotate_uniform(&mut graph);
    }
    let evidence = dedup(aggregate(&graph));
    Ok(Investigation { context, graph, evidence, log })
}

pub struct AskOutcome {
    pub investigation: Investigation,
    pub report: Report,
}

pub fn ask(query: &str, now: DateTime<Utc>, services: &Services, opts: &ExecutionOptions) -> Result<AskOutcome, PipelineError> {
    let investigation = investigate(query, now, services, opts)?;
    let charts = charts_from_graph(&investigation.graph);
    let mut report = generate_report(query, &investigation.evidence, charts, &services.llm, &services.templates, now)?;
    report.gaps = investigation
        .graph
        .nodes()
        .filter(|n| n.status == NodeStatus::Failed)
        .map(|n| format!("{} `{}` failed: {}", n.id, n.query, n.error.as_deref().unwrap_or("unknown error")))
        .collect();
    Ok(AskOutcome { investigation, report })
}

fn write(path: &Path, body: &str) -> Result<(), PipelineError> {
    std::fs::write(path, body).map_err(|e| PipelineError::Io { path: path.display().to_string(), message: e.to_string() })
}

impl AskOutcome {
    /// Writes `report.md`, chart sidecars, `graph.json` and `events.jsonl`
    /// under `out_dir`; returns the report path.
    pub fn write_to(&self, out_dir: &Path) -> Result<PathBuf, PipelineError> {
        let report_path = self.report.write_to(out_dir)?;
        write(&out_dir.join("graph.json"), &(self.investigation.graph.to_json() + "\n"))?;
        write(&out_dir.join("events.jsonl"), &self.investigation.log.to_jsonl())?;
        Ok(report_path)
    }
}
