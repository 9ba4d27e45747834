//! Time-decay relevance weights.
//!
//! A piece of information `Δ` hours away from the query time gets weight
//! `24 / max(Δ, 1)` inside a 72-hour window and 0 outside it. The 1-hour
//! floor bounds the weight at 24.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{NodeId, NodeStatus, SearchGraph};
use crate::timefmt::hours_between;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalParams {
    pub window_hours: f64,
    pub numerator_hours: f64,
    pub min_delta_hours: f64,
}

impl Default for TemporalParams {
    fn default() -> Self {
        TemporalParams { window_hours: 72.0, numerator_hours: 24.0, min_delta_hours: 1.0 }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid temporal parameters: {0}")]
pub struct TemporalParamsError(String);

impl TemporalParams {
    pub fn validate(&self) -> Result<(), TemporalParamsError> {
        let all = [self.window_hours, self.numerator_hours, self.min_delta_hours];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(TemporalParamsError("all values must be positive".into()));
        }
        if self.numerator_hours > self.window_hours {
            return Err(TemporalParamsError("numerator_hours exceeds window_hours".into()));
        }
        if self.min_delta_hours > self.numerator_hours {
            return Err(TemporalParamsError("min_delta_hours exceeds numerator_hours".into()));
        }
        Ok(())
    }

    pub fn max_weight(&self) -> f64 {
        self.numerator_hours / self.min_delta_hours
    }

    /// Weight for a distance already expressed in hours.
    pub fn weight_for_hours(&self, delta_hours: f64) -> f64 {
        let delta = delta_hours.abs();
        if delta >= self.window_hours {
            0.0
        } else {
            self.numerator_hours / delta.max(self.min_delta_hours)
        }
    }
}

pub fn weight(t_query: &DateTime<Utc>, t_info: &DateTime<Utc>, params: &TemporalParams) -> f64 {
    params.weight_for_hours(hours_between(t_query, t_info))
}

/// Sets every node's weight from its information time, and every evidence
/// item's weight from its own publication time (falling back to the node
/// weight). Failed nodes and nodes without an information time get 0.
pub fn annotate_weights(graph: &mut SearchGraph, t_query: &DateTime<Utc>, params: &TemporalParams) {
    let ids: Vec<NodeId> = graph.node_ids().cloned().collect();
    for id in ids {
        let mut node = graph.node_mut(&id).expect("id from graph");
        let node_weight = match (node.status, node.info_time) {
            (NodeStatus::Failed, _) | (_, None) => 0.0,
            (_, Some(t)) => weight(t_query, &t, params),
        };
        node.set_weight(Some(node_weight));
        if let Some(items) = node.response_mut() {
            for item in items {
                item.weight = Some(match item.published_at {
                    Some(p) => weight(t_query, &p, params),
                    None => node_weight,
                });
            }
        }
    }
}

/// Ablation baseline: weight 1 on every node and item.
pub fn annotate_uniform(graph: &mut SearchGraph) {
    let ids: Vec<NodeId> = graph.node_ids().cloned().collect();
    for id in ids {
        let mut node = graph.node_mut(&id).expect("id from graph");
        node.set_weight(Some(1.0));
        if let Some(items) = node.response_mut() {
            for item in items {
                item.weight = Some(1.0);
            }
        }
    }
}
