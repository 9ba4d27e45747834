//! Financial search-agent engine.
//!
//! A user query is planned into a rooted DAG of sub-queries
//! ([`planner`]), executed against news, web and price sources with
//! adaptive rewriting of downstream queries ([`executor`],
//! [`connectors`]), weighted by recency ([`temporal`]) and synthesized
//! into a cited report with candlestick data ([`reporter`]). The
//! [`benchmark`] module scores the whole pipeline on timestamped
//! four-choice questions.

pub mod benchmark;
pub mod connectors;
pub mod evidence;
pub mod executor;
pub mod graph;
pub mod llm;
pub mod par;
pub mod pipeline;
pub mod planner;
pub mod prompts;
pub mod reporter;
pub mod retry;
pub mod temporal;
pub mod timefmt;

pub use evidence::{BarInterval, Evidence, OhlcBar};
pub use executor::{EventLog, ExecutionOptions};
pub use graph::{ApiKind, NodeId, NodeStatus, SearchGraph, SearchNode, Violation};
