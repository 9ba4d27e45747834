//! The search graph: a rooted DAG of sub-query nodes.
//!
//! Every mutation goes through [`SearchGraph::add_node`] or
//! [`SearchGraph::add_edge`], which keep the edge relation acyclic. Root
//! and reachability are checked on demand by [`SearchGraph::validate`],
//! since a graph is legitimately incomplete while it is being built.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::Evidence;
use crate::timefmt::serde_utc_opt;

/// Stable, lexicographically ordered node identifier (`n001`, `n002`, ...).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    /// Zero-padded id for the `index`-th emitted node, starting at 1.
    pub fn numbered(index: usize) -> Self {
        NodeId(format!("n{index:03}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

/// The data source a node's sub-query is sent to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ApiKind {
    News,
    WebSearch,
    Finance,
}

impl ApiKind {
    pub const ALL: [ApiKind; 3] = [ApiKind::News, ApiKind::WebSearch, ApiKind::Finance];

    /// Short name used in fixture keys.
    pub fn key_name(self) -> &'static str {
        match self {
            ApiKind::News => "news",
            ApiKind::WebSearch => "web",
            ApiKind::Finance => "finance",
        }
    }
}

impl fmt::Display for ApiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NodeStatus {
    #[default]
    Pending,
    Executed,
    Failed,
}

/// One sub-query with its feature components: query text, source API,
/// temporal weight, information time and response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub id: NodeId,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api: Option<ApiKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default, with = "serde_utc_opt", skip_serializing_if = "Option::is_none")]
    pub info_time: Option<DateTime<Utc>>,
    #[serde(default)]
    pub status: NodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Vec<Evidence>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SearchNode {
    pub fn new(id: impl Into<NodeId>, query: impl Into<String>, api: Option<ApiKind>) -> Self {
        SearchNode {
            id: id.into(),
            query: query.into(),
            api,
            weight: None,
            info_time: None,
            status: NodeStatus::Pending,
            response: None,
            error: None,
        }
    }

    pub fn is_pending(&self) -> bool {
        self.status == NodeStatus::Pending
    }

    pub fn mark_executed(&mut self, response: Vec<Evidence>, info_time: Option<DateTime<Utc>>) {
        self.status = NodeStatus::Executed;
        self.response = Some(response);
        self.info_time = info_time;
        self.error = None;
    }

    pub fn mark_failed(&mut self, error: impl Into<String>) {
        self.status = NodeStatus::Failed;
        self.response = Some(Vec::new());
        self.info_time = None;
        self.error = Some(error.into());
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        NodeId(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("duplicate node id {0}")]
    DuplicateNodeId(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("self-loop on {0}")]
    SelfLoop(NodeId),
    #[error("edge {from} -> {to} would create a cycle")]
    CycleDetected { from: NodeId, to: NodeId },
}

/// A broken graph (or plan) invariant. Violations are data, not failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "violation", content = "detail")]
pub enum Violation {
    NoRoot,
    RootHasParent(NodeId),
    MultipleRoots(Vec<NodeId>),
    UnreachableNode(NodeId),
    CycleDetected { from: NodeId, to: NodeId },
    SelfLoop(NodeId),
    UnknownNode(NodeId),
    DuplicateNodeId(NodeId),
    StatusResponseMismatch(NodeId),
    InvalidWeight(NodeId),
    EmptyQuery(NodeId),
    MissingApi(NodeId),
    PlanningFieldPresent { node: NodeId, field: String },
    TooManyNodes { count: usize, max: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoRoot => write!(f, "graph has no root"),
            Violation::RootHasParent(id) => write!(f, "root {id} has a parent"),
            Violation::MultipleRoots(ids) => {
                let ids: Vec<_> = ids.iter().map(NodeId::as_str).collect();
                write!(f, "multiple roots: extra parentless nodes {}", ids.join(", "))
            }
            Violation::UnreachableNode(id) => write!(f, "node {id} is unreachable from the root"),
            Violation::CycleDetected { from, to } => write!(f, "CycleDetected: edge {from} -> {to} closes a cycle"),
            Violation::SelfLoop(id) => write!(f, "self-loop on {id}"),
            Violation::UnknownNode(id) => write!(f, "edge references unknown node {id}"),
            Violation::DuplicateNodeId(id) => write!(f, "duplicate node id {id}"),
            Violation::StatusResponseMismatch(id) => write!(f, "node {id}: status and response disagree"),
            Violation::InvalidWeight(id) => write!(f, "node {id}: weight is negative or not finite"),
            Violation::EmptyQuery(id) => write!(f, "node {id} has an empty query"),
            Violation::MissingApi(id) => write!(f, "node {id} has no api"),
            Violation::PlanningFieldPresent { node, field } => {
                write!(f, "node {node}: field `{field}` must be absent at planning time")
            }
            Violation::TooManyNodes { count, max } => write!(f, "plan has {count} nodes, maximum is {max}"),
        }
    }
}

impl From<GraphError> for Violation {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::DuplicateNodeId(id) => Violation::DuplicateNodeId(id),
            GraphError::UnknownNode(id) => Violation::UnknownNode(id),
            GraphError::SelfLoop(id) => Violation::SelfLoop(id),
            GraphError::CycleDetected { from, to } => Violation::CycleDetected { from, to },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchGraph {
    nodes: BTreeMap<NodeId, SearchNode>,
    edges: BTreeSet<(NodeId, NodeId)>,
    reverse: BTreeSet<(NodeId, NodeId)>,
    root: Option<NodeId>,
}

impl SearchGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a node. The first node added becomes the root unless
    /// [`SearchGraph::set_root`] says otherwise.
    pub fn add_node(&mut self, node: SearchNode) -> Result<(), GraphError> {
        if self.nodes.contains_key(&node.id) {
            return Err(GraphError::DuplicateNodeId(node.id));
        }
        if self.root.is_none() {
            self.root = Some(node.id.clone());
        }
        self.nodes.insert(node.id.clone(), node);
        Ok(())
    }

    /// Adds a dependency edge. Re-adding an existing edge is a no-op; a
    /// rejected edge leaves the graph untouched.
    pub fn add_edge(&mut self, from: &NodeId, to: &NodeId) -> Result<(), GraphError> {
        for id in [from, to] {
            if !self.nodes.contains_key(id) {
                return Err(GraphError::UnknownNode(id.clone()));
            }
        }
        if from == to {
            return Err(GraphError::SelfLoop(from.clone()));
        }
        let edge = (from.clone(), to.clone());
        if self.edges.contains(&edge) {
            return Ok(());
        }
        if self.reaches(to, from) {
            return Err(GraphError::CycleDetected { from: from.clone(), to: to.clone() });
        }
        self.reverse.insert((to.clone(), from.clone()));
        self.edges.insert(edge);
        Ok(())
    }

    pub fn set_root(&mut self, id: &NodeId) -> Result<(), GraphError> {
        if !self.nodes.contains_key(id) {
            return Err(GraphError::UnknownNode(id.clone()));
        }
        self.root = Some(id.clone());
        Ok(())
    }

    pub fn root(&self) -> Option<&NodeId> {
        self.root.as_ref()
    }

    pub fn root_node(&self) -> Option<&SearchNode> {
        self.root.as_ref().and_then(|r| self.nodes.get(r))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &NodeId) -> Option<&SearchNode> {
        self.nodes.get(id)
    }

    /// Mutable access to a node's features. Ids and edges cannot be changed
    /// through this handle.
    pub fn node_mut(&mut self, id: &NodeId) -> Option<NodeMut<'_>> {
        self.nodes.get_mut(id).map(NodeMut)
    }

    /// Nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = &SearchNode> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.keys()
    }

    /// Edges in ascending `(from, to)` order.
    pub fn edges(&self) -> impl Iterator<Item = &(NodeId, NodeId)> {
        self.edges.iter()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains_edge(&self, from: &NodeId, to: &NodeId) -> bool {
        self.edges.contains(&(from.clone(), to.clone()))
    }

    pub fn successors<'a>(&'a self, id: &'a NodeId) -> impl Iterator<Item = &'a NodeId> + 'a {
        adjacent(&self.edges, id)
    }

    pub fn predecessors<'a>(&'a self, id: &'a NodeId) -> impl Iterator<Item = &'a NodeId> + 'a {
        adjacent(&self.reverse, id)
    }

    fn reaches(&self, start: &NodeId, target: &NodeId) -> bool {
        let mut seen = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(id) = stack.pop() {
            if id == target {
                return true;
            }
            if seen.insert(id) {
                stack.extend(self.successors(id));
            }
        }
        false
    }

    /// Lists every broken invariant; empty iff the graph is a valid rooted
    /// DAG with consistent node state.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let Some(root) = self.root.as_ref() else {
            out.push(Violation::NoRoot);
            return out;
        };
        if self.predecessors(root).next().is_some() {
            out.push(Violation::RootHasParent(root.clone()));
        }
        if let Some((from, to)) = self.find_cycle_edge() {
            out.push(Violation::CycleDetected { from, to });
        }

        // Parentless nodes that fan out are competing roots; isolated ones
        // are simply unreachable.
        let extra_roots: Vec<NodeId> = self
            .nodes
            .keys()
            .filter(|id| *id != root)
            .filter(|id| self.predecessors(id).next().is_none() && self.successors(id).next().is_some())
            .cloned()
            .collect();

        let mut reached = BTreeSet::new();
        let mut queue = VecDeque::from([root]);
        while let Some(id) = queue.pop_front() {
            if reached.insert(id) {
                queue.extend(self.successors(id));
            }
        }
        if !extra_roots.is_empty() {
            out.push(Violation::MultipleRoots(extra_roots.clone()));
        }
        for id in self.nodes.keys() {
            if !reached.contains(id) && !extra_roots.contains(id) {
                out.push(Violation::UnreachableNode(id.clone()));
            }
        }

        for node in self.nodes.values() {
            let answered = node.status != NodeStatus::Pending;
            if answered != node.response.is_some() {
                out.push(Violation::StatusResponseMismatch(node.id.clone()));
            }
            if node.weight.is_some_and(|w| !w.is_finite() || w < 0.0) {
                out.push(Violation::InvalidWeight(node.id.clone()));
            }
        }
        out
    }

    fn find_cycle_edge(&self) -> Option<(NodeId, NodeId)> {
        if self.topological_order().len() == self.nodes.len() {
            return None;
        }
        self.edges.iter().find(|(u, v)| self.reaches(v, u)).cloned()
    }

    /// Pending nodes whose predecessors have all finished (Executed or
    /// Failed), ascending by id.
    pub fn ready_set(&self) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.is_pending())
            .filter(|n| {
                self.predecessors(&n.id)
                    .all(|p| self.nodes.get(p).is_some_and(|p| !p.is_pending()))
            })
            .map(|n| n.id.clone())
            .collect()
    }

    /// Kahn's algorithm, always taking the smallest available id, so the
    /// order is unique.
    pub fn topological_order(&self) -> Vec<NodeId> {
        let mut indegree: BTreeMap<&NodeId, usize> = self.nodes.keys().map(|id| (id, 0)).collect();
        for (_, to) in &self.edges {
            *indegree.get_mut(to).expect("edge endpoint exists") += 1;
        }
        let mut available: BTreeSet<&NodeId> =
            indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = available.pop_first() {
            order.push(id.clone());
            for succ in self.successors(id) {
                let d = indegree.get_mut(succ).expect("edge endpoint exists");
                *d -= 1;
                if *d == 0 {
                    available.insert(succ);
                }
            }
        }
        order
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            root: self.root.clone().unwrap_or_else(|| NodeId::new("")),
            nodes: self.nodes.values().cloned().collect(),
            edges: self.edges.iter().cloned().collect(),
        }
    }

    /// Builds a graph through the checked mutation path.
    pub fn from_document(doc: GraphDocument) -> Result<Self, GraphError> {
        let mut graph = SearchGraph::new();
        for node in doc.nodes {
            graph.add_node(node)?;
        }
        graph.set_root(&doc.root)?;
        for (from, to) in &doc.edges {
            graph.add_edge(from, to)?;
        }
        Ok(graph)
    }

    /// Pretty-printed interchange JSON. Output of this function parses back
    /// to an equal graph that re-serializes to identical bytes.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphLoadError> {
        let doc: GraphDocument = serde_json::from_str(text)?;
        Ok(Self::from_document(doc)?)
    }
}

fn adjacent<'a>(set: &'a BTreeSet<(NodeId, NodeId)>, id: &'a NodeId) -> impl Iterator<Item = &'a NodeId> + 'a {
    set.range((id.clone(), NodeId::new(""))..)
        .take_while(move |(a, _)| a == id)
        .map(|(_, b)| b)
}

/// Handle that exposes node features while keeping the id immutable.
pub struct NodeMut<'a>(&'a mut SearchNode);

impl std::ops::Deref for NodeMut<'_> {
    type Target = SearchNode;
    fn deref(&self) -> &SearchNode {
        self.0
    }
}

impl NodeMut<'_> {
    pub fn set_query(&mut self, query: impl Into<String>) {
        self.0.query = query.into();
    }
    pub fn set_weight(&mut self, weight: Option<f64>) {
        self.0.weight = weight;
    }
    pub fn response_mut(&mut self) -> Option<&mut Vec<Evidence>> {
        self.0.response.as_mut()
    }
    pub fn mark_executed(&mut self, response: Vec<Evidence>, info_time: Option<DateTime<Utc>>) {
        self.0.mark_executed(response, info_time);
    }
    pub fn mark_failed(&mut self, error: impl Into<String>) {
        self.0.mark_failed(error);
    }
    /// Replaces the node's execution state with `outcome`'s, keeping id and
    /// api.
    pub fn apply_outcome(&mut self, outcome: &SearchNode) {
        self.0.status = outcome.status;
        self.0.response = outcome.response.clone();
        self.0.info_time = outcome.info_time;
        self.0.error = outcome.error.clone();
    }
}

/// Serialized form: `{"root", "nodes": [...], "edges": [[from, to], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub root: NodeId,
    pub nodes: Vec<SearchNode>,
    #[serde(default)]
    pub edges: Vec<(NodeId, NodeId)>,
}

#[derive(Debug, Error)]
pub enum GraphLoadError {
    #[error("malformed graph JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
}
