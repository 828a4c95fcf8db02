//! Input graphs and their extended Levi form.

mod dependency;
mod jsonl;
mod levi;
mod penman;
mod vocab;

pub use dependency::{parse_dependency, parse_dependency_corpus};
pub use jsonl::{read_jsonl, write_jsonl, Example, JsonlError};
pub use levi::{to_extended_levi, ExtendedLeviGraph, LeviLayout, TypedEdges, GLOBAL_TOKEN};
pub use penman::{parse_penman, parse_penman_corpus};
pub use vocab::{build_vocab, Vocabulary, BOS, EOS, GNODE, PAD, UNK};

use std::fmt;

/// A directed graph of token-labeled nodes and relation-labeled edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledGraph {
    /// `(node id, token)`; ids are unique.
    pub nodes: Vec<(String, String)>,
    /// `(source index, relation label, target index)` into `nodes`.
    pub edges: Vec<(usize, String, usize)>,
    pub root: usize,
}

impl LabeledGraph {
    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.nodes.is_empty() {
            return Err(GraphError::Invalid("graph has no nodes".into()));
        }
        let mut ids: Vec<&str> = self.nodes.iter().map(|(id, _)| id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(GraphError::Invalid(format!("duplicate node id `{}`", w[0])));
        }
        let n = self.nodes.len();
        if self.root >= n {
            return Err(GraphError::Invalid(format!("root {} out of range", self.root)));
        }
        if let Some((s, l, t)) = self.edges.iter().find(|(s, _, t)| *s >= n || *t >= n) {
            return Err(GraphError::Invalid(format!("edge {s} -{l}-> {t} has a missing endpoint")));
        }
        Ok(())
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|(_, t)| t.as_str())
    }
}

/// Edge classes of the extended Levi graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeType {
    Default,
    Reverse,
    SelfLoop,
    Global,
    Forward,
    Backward,
}

impl EdgeType {
    pub const ALL: [EdgeType; 6] = [
        EdgeType::Default,
        EdgeType::Reverse,
        EdgeType::SelfLoop,
        EdgeType::Global,
        EdgeType::Forward,
        EdgeType::Backward,
    ];

    /// Edge types used for AMR graphs.
    pub const AMR: [EdgeType; 4] = [EdgeType::Default, EdgeType::Reverse, EdgeType::SelfLoop, EdgeType::Global];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn key(self) -> &'static str {
        match self {
            EdgeType::Default => "default",
            EdgeType::Reverse => "reverse",
            EdgeType::SelfLoop => "self",
            EdgeType::Global => "global",
            EdgeType::Forward => "forward",
            EdgeType::Backward => "backward",
        }
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Source graph family; decides whether sequential edges are added.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphKind {
    Amr,
    Dependency,
}

impl GraphKind {
    pub fn edge_type_count(self) -> usize {
        match self {
            GraphKind::Amr => 4,
            GraphKind::Dependency => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("empty corpus")]
    EmptyCorpus,
}

pub(crate) fn parse_error(line: usize, column: usize, message: impl Into<String>) -> GraphError {
    GraphError::Parse {
        line,
        column,
        message: message.into(),
    }
}

/// A parsed graph with its reference sentence, if the source carried one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphEntry {
    pub graph: LabeledGraph,
    pub target: Option<Vec<String>>,
}

/// Reads the target sentence from a `# ::snt ...` or `# target = ...` comment line.
pub(crate) fn target_from_comment(line: &str) -> Option<Vec<String>> {
    let body = line.trim_start().strip_prefix('#')?.trim_start();
    let text = body
        .strip_prefix("::snt")
        .or_else(|| body.strip_prefix("target =").or_else(|| body.strip_prefix("target=")))?;
    Some(text.split_whitespace().map(str::to_string).collect())
}
