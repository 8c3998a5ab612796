//! Workflow graphs made of generation and retrieval nodes.
//!
//! A [`RAGraph`] is built with [`RAGraph::add_generation`],
//! [`RAGraph::add_retrieval`] and [`RAGraph::add_edge`], checked with
//! [`RAGraph::validate`], and then driven per request with
//! [`RAGraph::advance`]. Runtime transformations (splitting, reordering,
//! speculative edges, rewiring) operate on a per-request [`GraphInstance`].

mod file;
mod instance;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::vector_index::Embedding;

pub use file::{template, template_names, WorkflowFile};
pub use instance::{GraphInstance, SnapshotId, Span, SpeculativeEdge, SubNode, SubNodeId};

/// Variables bound before the first node runs.
pub const INITIAL_VARS: [&str; 2] = ["input", "query"];

/// Default bound on how often a request may enter any single node.
pub const DEFAULT_MAX_LOOP_ITERS: u32 = 8;

/// Edge endpoint: a user node or one of the two sentinels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Start,
    End,
    Node(u32),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Start => f.write_str("START"),
            Endpoint::End => f.write_str("END"),
            Endpoint::Node(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for Endpoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Endpoint::Node(n) => s.serialize_u32(*n),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Endpoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(u32),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(n) => Ok(Endpoint::Node(n)),
            Raw::Name(s) if s == "START" => Ok(Endpoint::Start),
            Raw::Name(s) if s == "END" => Ok(Endpoint::End),
            Raw::Name(s) => Err(serde::de::Error::custom(format!("unknown endpoint {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Generation { prompt_template: String, output_var: String },
    Retrieval { topk: usize, query_var: String, output_var: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: u32,
    pub kind: NodeKind,
}

impl NodeSpec {
    pub fn output_var(&self) -> &str {
        match &self.kind {
            NodeKind::Generation { output_var, .. } | NodeKind::Retrieval { output_var, .. } => output_var,
        }
    }

    pub fn reads(&self) -> Vec<String> {
        match &self.kind {
            NodeKind::Generation { prompt_template, .. } => template_slots(prompt_template),
            NodeKind::Retrieval { query_var, .. } => vec![query_var.clone()],
        }
    }

    pub fn is_generation(&self) -> bool {
        matches!(self.kind, NodeKind::Generation { .. })
    }

    pub fn is_retrieval(&self) -> bool {
        matches!(self.kind, NodeKind::Retrieval { .. })
    }
}

/// Named edge conditions. Workflow files cannot carry arbitrary predicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Condition {
    Always,
    /// The variable is bound to non-empty text or a non-empty doc list.
    NonEmpty(String),
    /// The edge's source node has been entered fewer than `n` times.
    IterLt(u32),
}

impl Condition {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "always" {
            return Ok(Condition::Always);
        }
        let arg = |prefix: &str| {
            s.strip_prefix(prefix)
                .and_then(|r| r.strip_prefix('('))
                .and_then(|r| r.strip_suffix(')'))
                .map(str::trim)
        };
        if let Some(var) = arg("nonempty") {
            if is_identifier(var) {
                return Ok(Condition::NonEmpty(var.to_string()));
            }
        }
        if let Some(n) = arg("iter_lt") {
            if let Ok(n) = n.parse() {
                return Ok(Condition::IterLt(n));
            }
        }
        Err(invalid(format!("unknown condition {s:?}")))
    }

    fn holds(&self, from: Endpoint, state: &RequestState) -> bool {
        match self {
            Condition::Always => true,
            Condition::NonEmpty(var) => state.bindings.get(var).is_some_and(Value::is_nonempty),
            Condition::IterLt(n) => match from {
                Endpoint::Node(id) => state.visits(id) < *n,
                _ => 0 < *n,
            },
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Always => f.write_str("always"),
            Condition::NonEmpty(v) => write!(f, "nonempty({v})"),
            Condition::IterLt(n) => write!(f, "iter_lt({n})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub from: Endpoint,
    pub to: Endpoint,
    pub cond: Condition,
}

/// A bound variable. Generation outputs carry an embedding for downstream
/// retrievals; retrieval outputs carry the doc ids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Value {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub docs: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Embedding>,
}

impl Value {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }

    pub fn is_nonempty(&self) -> bool {
        match &self.docs {
            Some(d) => !d.is_empty(),
            None => !self.text.is_empty(),
        }
    }

    fn render(&self) -> String {
        match &self.docs {
            Some(d) => format!("{d:?}"),
            None => self.text.clone(),
        }
    }
}

pub type Bindings = BTreeMap<String, Value>;

/// Per-request control state: bindings, node visit counts and the node the
/// request last entered.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RequestState {
    pub bindings: Bindings,
    visits: BTreeMap<u32, u32>,
    position: Option<Endpoint>,
}

impl RequestState {
    pub fn new(input: Value) -> Self {
        let mut bindings = Bindings::new();
        for name in INITIAL_VARS {
            bindings.insert(name.to_string(), input.clone());
        }
        Self {
            bindings,
            visits: BTreeMap::new(),
            position: Some(Endpoint::Start),
        }
    }

    pub fn position(&self) -> Endpoint {
        self.position.unwrap_or(Endpoint::Start)
    }

    pub fn visits(&self, node: u32) -> u32 {
        self.visits.get(&node).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    NoStartEdge,
    EndUnreachable,
    UnknownEndpoint { edge: usize, endpoint: Endpoint },
    UnboundVariable { node: u32, var: String },
    DeadEnd { node: u32 },
    EdgeIntoStart { edge: usize },
    EdgeOutOfEnd { edge: usize },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::NoStartEdge => f.write_str("START has no outgoing edge"),
            Diagnostic::EndUnreachable => f.write_str("END unreachable"),
            Diagnostic::UnknownEndpoint { edge, endpoint } => {
                write!(f, "edge {edge} references unknown node {endpoint}")
            }
            Diagnostic::UnboundVariable { node, var } => {
                write!(f, "unbound variable `{var}` read by node {node}")
            }
            Diagnostic::DeadEnd { node } => write!(f, "node {node} has no outgoing edge"),
            Diagnostic::EdgeIntoStart { edge } => write!(f, "edge {edge} targets START"),
            Diagnostic::EdgeOutOfEnd { edge } => write!(f, "edge {edge} leaves END"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RAGraph {
    nodes: BTreeMap<u32, NodeSpec>,
    edges: Vec<Edge>,
    pub max_loop_iters: u32,
}

impl Default for RAGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl RAGraph {
    pub fn new() -> Self {
        Self {
            nodes: BTreeMap::new(),
            edges: Vec::new(),
            max_loop_iters: DEFAULT_MAX_LOOP_ITERS,
        }
    }

    fn insert(&mut self, spec: NodeSpec) -> Result<&mut Self> {
        if self.nodes.contains_key(&spec.id) {
            return Err(invalid(format!("duplicate node id {}", spec.id)));
        }
        self.nodes.insert(spec.id, spec);
        Ok(self)
    }

    pub fn add_generation(
        &mut self,
        node_id: u32,
        prompt_template: impl Into<String>,
        output_var: impl Into<String>,
    ) -> Result<&mut Self> {
        self.insert(NodeSpec {
            id: node_id,
            kind: NodeKind::Generation {
                prompt_template: prompt_template.into(),
                output_var: output_var.into(),
            },
        })
    }

    pub fn add_retrieval(
        &mut self,
        node_id: u32,
        topk: usize,
        query_var: impl Into<String>,
        output_var: impl Into<String>,
    ) -> Result<&mut Self> {
        if topk == 0 {
            return Err(invalid("retrieval topk must be >= 1"));
        }
        self.insert(NodeSpec {
            id: node_id,
            kind: NodeKind::Retrieval {
                topk,
                query_var: query_var.into(),
                output_var: output_var.into(),
            },
        })
    }

    /// Unconditional edge. Endpoints are checked by [`RAGraph::validate`].
    pub fn add_edge(&mut self, from: Endpoint, to: Endpoint) -> &mut Self {
        self.add_conditional_edge(from, Condition::Always, to)
    }

    /// Out-edges are tried in insertion order; the first whose condition
    /// holds wins.
    pub fn add_conditional_edge(&mut self, from: Endpoint, cond: Condition, to: Endpoint) -> &mut Self {
        self.edges.push(Edge { from, to, cond });
        self
    }

    pub fn node(&self, id: u32) -> Option<&NodeSpec> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.values()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    fn out_edges(&self, from: Endpoint) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.from == from)
    }

    /// Possible successors of `from`, ignoring conditions.
    pub fn successors(&self, from: Endpoint) -> Vec<Endpoint> {
        let mut out: Vec<Endpoint> = self.out_edges(from).map(|e| e.to).collect();
        out.dedup();
        out
    }

    fn exists(&self, e: Endpoint) -> bool {
        match e {
            Endpoint::Node(n) => self.nodes.contains_key(&n),
            _ => true,
        }
    }

    /// Checks the structural invariants and returns every violation found.
    pub fn validate(&self) -> std::result::Result<(), Vec<Diagnostic>> {
        let mut diags = Vec::new();
        for (i, e) in self.edges.iter().enumerate() {
            for ep in [e.from, e.to] {
                if !self.exists(ep) {
                    diags.push(Diagnostic::UnknownEndpoint { edge: i, endpoint: ep });
                }
            }
            if e.to == Endpoint::Start {
                diags.push(Diagnostic::EdgeIntoStart { edge: i });
            }
            if e.from == Endpoint::End {
                diags.push(Diagnostic::EdgeOutOfEnd { edge: i });
            }
        }
        if self.out_edges(Endpoint::Start).next().is_none() {
            diags.push(Diagnostic::NoStartEdge);
        }

        let reachable = self.reachable_from_start();
        if !reachable.contains(&Endpoint::End) {
            diags.push(Diagnostic::EndUnreachable);
        }
        for &ep in &reachable {
            if let Endpoint::Node(n) = ep {
                if self.exists(ep) && self.out_edges(ep).next().is_none() {
                    diags.push(Diagnostic::DeadEnd { node: n });
                }
            }
        }
        diags.extend(self.unbound_reads(&reachable));

        if diags.is_empty() {
            Ok(())
        } else {
            Err(diags)
        }
    }

    fn reachable_from_start(&self) -> BTreeSet<Endpoint> {
        let mut seen = BTreeSet::from([Endpoint::Start]);
        let mut queue = VecDeque::from([Endpoint::Start]);
        while let Some(at) = queue.pop_front() {
            for e in self.out_edges(at) {
                if self.exists(e.to) && seen.insert(e.to) {
                    queue.push_back(e.to);
                }
            }
        }
        seen
    }

    /// Must-defined variable analysis: a read is bound only if every path
    /// from START to the reader writes it first.
    fn unbound_reads(&self, reachable: &BTreeSet<Endpoint>) -> Vec<Diagnostic> {
        let mut universe: BTreeSet<String> = INITIAL_VARS.iter().map(|s| s.to_string()).collect();
        universe.extend(self.nodes.values().map(|n| n.output_var().to_string()));

        let mut out: BTreeMap<Endpoint, BTreeSet<String>> = reachable
            .iter()
            .map(|&ep| (ep, universe.clone()))
            .collect();
        out.insert(Endpoint::Start, INITIAL_VARS.iter().map(|s| s.to_string()).collect());

        let in_set = |out: &BTreeMap<Endpoint, BTreeSet<String>>, ep: Endpoint| {
            let mut acc: Option<BTreeSet<String>> = None;
            for e in self.edges.iter().filter(|e| e.to == ep && reachable.contains(&e.from)) {
                let o = &out[&e.from];
                acc = Some(match acc {
                    None => o.clone(),
                    Some(a) => a.intersection(o).cloned().collect(),
                });
            }
            acc.unwrap_or_default()
        };

        loop {
            let mut changed = false;
            for &ep in reachable {
                let Endpoint::Node(n) = ep else { continue };
                let Some(spec) = self.nodes.get(&n) else { continue };
                let mut next = in_set(&out, ep);
                next.insert(spec.output_var().to_string());
                if out[&ep] != next {
                    out.insert(ep, next);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        let mut diags = Vec::new();
        for &ep in reachable {
            let Endpoint::Node(n) = ep else { continue };
            let Some(spec) = self.nodes.get(&n) else { continue };
            let bound = in_set(&out, ep);
            for var in spec.reads() {
                if !bound.contains(&var) {
                    diags.push(Diagnostic::UnboundVariable { node: n, var });
                }
            }
        }
        diags
    }

    /// Moves the request along the first satisfied out-edge of its current
    /// position and returns the new position.
    pub fn advance(&self, state: &mut RequestState) -> Result<Endpoint> {
        let next = self.peek(state)?;
        if let Endpoint::Node(n) = next {
            let visits = state.visits(n);
            if visits >= self.max_loop_iters {
                return Err(Error::LoopGuard {
                    node: n,
                    limit: self.max_loop_iters,
                });
            }
            state.visits.insert(n, visits + 1);
        }
        state.position = Some(next);
        Ok(next)
    }

    /// The node [`RAGraph::advance`] would move to, without moving.
    pub fn peek(&self, state: &RequestState) -> Result<Endpoint> {
        let from = state.position();
        if from == Endpoint::End {
            return Err(Error::MalformedWorkflow("request already reached END".into()));
        }
        self.out_edges(from)
            .find(|e| e.cond.holds(from, state))
            .map(|e| e.to)
            .ok_or_else(|| Error::MalformedWorkflow(format!("no satisfied out-edge from {from}")))
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Variable names referenced as `{name}` in a prompt template.
pub fn template_slots(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        rest = &rest[open + 1..];
        let Some(close) = rest.find('}') else { break };
        let name = &rest[..close];
        if is_identifier(name) && !out.iter().any(|n| n == name) {
            out.push(name.to_string());
        }
        rest = &rest[close + 1..];
    }
    out
}

/// Fills `{name}` slots from the bindings.
pub fn render_prompt(template: &str, bindings: &Bindings) -> Result<String> {
    let mut out = template.to_string();
    for slot in template_slots(template) {
        let value = bindings
            .get(&slot)
            .ok_or_else(|| Error::InvalidState(format!("unbound variable `{slot}` at render time")))?;
        out = out.replace(&format!("{{{slot}}}"), &value.render());
    }
    Ok(out)
}
