use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Condition, Endpoint, NodeKind, RAGraph, DEFAULT_MAX_LOOP_ITERS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum NodeEntry {
    Generation {
        id: u32,
        prompt: String,
        #[serde(default = "default_answer")]
        output_var: String,
    },
    Retrieval {
        id: u32,
        topk: usize,
        query_var: String,
        output_var: String,
    },
}

fn default_answer() -> String {
    "answer".into()
}

fn default_loop() -> u32 {
    DEFAULT_MAX_LOOP_ITERS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeEntry {
    from: Endpoint,
    to: Endpoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cond: Option<String>,
}

/// JSON form of a workflow graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowFile {
    pub name: String,
    #[serde(default = "default_loop")]
    pub max_loop_iters: u32,
    nodes: Vec<NodeEntry>,
    edges: Vec<EdgeEntry>,
}

impl WorkflowFile {
    pub fn parse(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn from_graph(name: impl Into<String>, graph: &RAGraph) -> Self {
        let nodes = graph
            .nodes()
            .map(|n| match &n.kind {
                NodeKind::Generation {
                    prompt_template,
                    output_var,
                } => NodeEntry::Generation {
                    id: n.id,
                    prompt: prompt_template.clone(),
                    output_var: output_var.clone(),
                },
                NodeKind::Retrieval {
                    topk,
                    query_var,
                    output_var,
                } => NodeEntry::Retrieval {
                    id: n.id,
                    topk: *topk,
                    query_var: query_var.clone(),
                    output_var: output_var.clone(),
                },
            })
            .collect();
        let edges = graph
            .edges()
            .iter()
            .map(|e| EdgeEntry {
                from: e.from,
                to: e.to,
                cond: (e.cond != Condition::Always).then(|| e.cond.to_string()),
            })
            .collect();
        Self {
            name: name.into(),
            max_loop_iters: graph.max_loop_iters,
            nodes,
            edges,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("workflow files always serialize")
    }

    /// Builds and validates the graph.
    pub fn to_graph(&self) -> Result<RAGraph> {
        let mut g = RAGraph::new();
        g.max_loop_iters = self.max_loop_iters;
        for n in &self.nodes {
            match n {
                NodeEntry::Generation { id, prompt, output_var } => {
                    g.add_generation(*id, prompt.clone(), output_var.clone())?;
                }
                NodeEntry::Retrieval {
                    id,
                    topk,
                    query_var,
                    output_var,
                } => {
                    g.add_retrieval(*id, *topk, query_var.clone(), output_var.clone())?;
                }
            }
        }
        for e in &self.edges {
            let cond = match &e.cond {
                Some(c) => Condition::parse(c)?,
                None => Condition::Always,
            };
            g.add_conditional_edge(e.from, cond, e.to);
        }
        g.validate().map_err(|diags| {
            let text: Vec<String> = diags.iter().map(ToString::to_string).collect();
            Error::MalformedWorkflow(format!("{}: {}", self.name, text.join("; ")))
        })?;
        Ok(g)
    }
}

const TEMPLATES: [(&str, &str); 5] = [
    ("oneshot", include_str!("../../workflows/oneshot.json")),
    ("hyde", include_str!("../../workflows/hyde.json")),
    ("multistep", include_str!("../../workflows/multistep.json")),
    ("irg", include_str!("../../workflows/irg.json")),
    ("recomp", include_str!("../../workflows/recomp.json")),
];

pub fn template_names() -> Vec<&'static str> {
    TEMPLATES.iter().map(|(n, _)| *n).collect()
}

/// A shipped workflow by name, or a workflow file path.
pub fn template(name_or_path: &str) -> Result<RAGraph> {
    match TEMPLATES.iter().find(|(n, _)| *n == name_or_path) {
        Some((_, json)) => WorkflowFile::parse(json)?.to_graph(),
        None if Path::new(name_or_path).exists() => WorkflowFile::load(name_or_path)?.to_graph(),
        None => Err(Error::InvalidArgument(format!(
            "unknown workflow {name_or_path:?}; expected one of {:?} or a file path",
            template_names()
        ))),
    }
}
