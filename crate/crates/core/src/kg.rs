//! Typed knowledge graphs: synthetic generation, validation, and a
//! line-oriented JSON interchange format.
//!
//! Graphs are small and explicit: a sorted node list plus an ordered
//! edge list of `(head, relation, tail)` triples between nodes of
//! different types. The generator draws cross-type edges independently
//! at a configurable density, which gives cohort sampling something
//! with known ground truth to be scored against later.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("node type name must be non-empty")]
    EmptyTypeName,
    #[error("node type {name:?} listed twice")]
    DuplicateType { name: String },
    #[error("need at least two node types, got {got}")]
    TooFewTypes { got: usize },
    #[error("node count for type {name:?} must be at least 1")]
    EmptyType { name: String },
    #[error("edge density must be in (0, 1], got {got}")]
    BadDensity { got: f64 },
    #[error("bidirectional fraction must be in [0, 1], got {got}")]
    BadBidirectional { got: f64 },
    #[error("generated graph has no edges; raise density or node counts")]
    NoEdges,
    #[error("duplicate node code {code:?}")]
    DuplicateNode { code: String },
    #[error("edge endpoint {code:?} is not a declared node")]
    UnknownEndpoint { code: String },
    #[error("self-loop on {code:?}")]
    SelfLoop { code: String },
    #[error("duplicate edge ({head:?}, {relation:?}, {tail:?})")]
    DuplicateEdge {
        head: String,
        relation: String,
        tail: String,
    },
    #[error("node {code:?} appears with types {first:?} and {second:?}")]
    ConflictingNodeType {
        code: String,
        first: String,
        second: String,
    },
    #[error("node type {name:?} not in the allowed set")]
    UnknownNodeType { name: String },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Name of a node type, e.g. `diagnosis`. Non-empty by construction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeType(String);

impl NodeType {
    pub fn new(name: &str) -> Result<Self, KgError> {
        if name.is_empty() {
            return Err(KgError::EmptyTypeName);
        }
        Ok(NodeType(name.to_string()))
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

/// A typed node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub code: String,
    #[serde(rename = "type")]
    pub node_type: String,
}

/// A directed, labeled edge between two nodes of different types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub head_type: String,
    pub tail_type: String,
    /// Extraction confidence; absent on ground-truth graphs, written by
    /// the recovery pipeline.
    #[serde(rename = "match", skip_serializing_if = "Option::is_none")]
    pub match_score: Option<f64>,
}

/// A validated knowledge graph: unique nodes sorted by code, ordered
/// edges whose endpoints exist, no self-loops, no duplicate triples.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

impl KnowledgeGraph {
    /// Validates and normalizes: nodes are sorted by code, edge order
    /// is preserved.
    pub fn new(mut nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self, KgError> {
        nodes.sort_by(|a, b| a.code.cmp(&b.code));
        for pair in nodes.windows(2) {
            if pair[0].code == pair[1].code {
                return Err(KgError::DuplicateNode {
                    code: pair[0].code.clone(),
                });
            }
        }
        let types: BTreeMap<&str, &str> = nodes
            .iter()
            .map(|n| (n.code.as_str(), n.node_type.as_str()))
            .collect();
        let mut seen = BTreeSet::new();
        for edge in &edges {
            for (code, declared) in [
                (&edge.head, &edge.head_type),
                (&edge.tail, &edge.tail_type),
            ] {
                match types.get(code.as_str()) {
                    None => {
                        return Err(KgError::UnknownEndpoint { code: code.clone() });
                    }
                    Some(t) if *t != declared => {
                        return Err(KgError::ConflictingNodeType {
                            code: code.clone(),
                            first: (*t).to_string(),
                            second: declared.clone(),
                        });
                    }
                    Some(_) => {}
                }
            }
            if edge.head == edge.tail {
                return Err(KgError::SelfLoop {
                    code: edge.head.clone(),
                });
            }
            if !seen.insert((edge.head.clone(), edge.relation.clone(), edge.tail.clone())) {
                return Err(KgError::DuplicateEdge {
                    head: edge.head.clone(),
                    relation: edge.relation.clone(),
                    tail: edge.tail.clone(),
                });
            }
        }
        Ok(KnowledgeGraph { nodes, edges })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Codes of all nodes of one type, in sorted order.
    pub fn codes_of_type(&self, node_type: &str) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.node_type == node_type)
            .map(|n| n.code.as_str())
            .collect()
    }

    pub fn node_type_of(&self, code: &str) -> Option<&str> {
        self.nodes
            .iter()
            .find(|n| n.code == code)
            .map(|n| n.node_type.as_str())
    }

    /// Directed `(head, tail)` pairs, ignoring relation labels.
    pub fn edge_set(&self) -> BTreeSet<(String, String)> {
        self.edges
            .iter()
            .map(|e| (e.head.clone(), e.tail.clone()))
            .collect()
    }

    /// All relation labels recorded for a directed pair.
    pub fn relations_of(&self, head: &str, tail: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|e| e.head == head && e.tail == tail)
            .map(|e| e.relation.as_str())
            .collect()
    }

    /// Codes linked to `code` by an edge in either direction.
    pub fn neighbors(&self, code: &str) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        for e in &self.edges {
            if e.head == code {
                out.insert(e.tail.as_str());
            }
            if e.tail == code {
                out.insert(e.head.as_str());
            }
        }
        out
    }
}

/// Relation label used for generated (and directly recovered) edges
/// between two node types.
pub fn relation_label(head_type: &str, tail_type: &str) -> String {
    format!("{head_type}_to_{tail_type}")
}

/// Generates a random typed graph.
///
/// For every unordered pair of nodes of different types an edge is
/// drawn with probability `edge_density`, its direction chosen by a
/// fair coin; the reverse edge is added too with probability
/// `bidirectional_fraction`. Node codes are `"<type>_<index>"`. The
/// same seed always yields the same graph; an empty edge draw is an
/// error rather than a degenerate graph.
pub fn generate_synthetic_kg(
    nodes_per_type: &[(NodeType, usize)],
    edge_density: f64,
    bidirectional_fraction: f64,
    seed: u64,
) -> Result<KnowledgeGraph, KgError> {
    if nodes_per_type.len() < 2 {
        return Err(KgError::TooFewTypes {
            got: nodes_per_type.len(),
        });
    }
    let mut seen_types = BTreeSet::new();
    for (t, count) in nodes_per_type {
        if !seen_types.insert(t.name()) {
            return Err(KgError::DuplicateType {
                name: t.name().to_string(),
            });
        }
        if *count == 0 {
            return Err(KgError::EmptyType {
                name: t.name().to_string(),
            });
        }
    }
    if !(edge_density > 0.0 && edge_density <= 1.0) {
        return Err(KgError::BadDensity { got: edge_density });
    }
    if !(0.0..=1.0).contains(&bidirectional_fraction) {
        return Err(KgError::BadBidirectional {
            got: bidirectional_fraction,
        });
    }

    let mut nodes = Vec::new();
    let mut by_type: Vec<(String, Vec<String>)> = Vec::new();
    for (t, count) in nodes_per_type {
        let codes: Vec<String> = (0..*count)
            .map(|i| format!("{}_{:03}", t.name(), i))
            .collect();
        for code in &codes {
            nodes.push(Node {
                code: code.clone(),
                node_type: t.name().to_string(),
            });
        }
        by_type.push((t.name().to_string(), codes));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..by_type.len() {
        for j in (i + 1)..by_type.len() {
            let (type_a, codes_a) = &by_type[i];
            let (type_b, codes_b) = &by_type[j];
            for a in codes_a {
                for b in codes_b {
                    if !rng.gen_bool(edge_density) {
                        continue;
                    }
                    let a_is_head = rng.gen_bool(0.5);
                    let (head, head_type, tail, tail_type) = if a_is_head {
                        (a, type_a, b, type_b)
                    } else {
                        (b, type_b, a, type_a)
                    };
                    edges.push(Edge {
                        head: head.clone(),
                        relation: relation_label(head_type, tail_type),
                        tail: tail.clone(),
                        head_type: head_type.clone(),
                        tail_type: tail_type.clone(),
                        match_score: None,
                    });
                    if bidirectional_fraction > 0.0 && rng.gen_bool(bidirectional_fraction) {
                        edges.push(Edge {
                            head: tail.clone(),
                            relation: relation_label(tail_type, head_type),
                            tail: head.clone(),
                            head_type: tail_type.clone(),
                            tail_type: head_type.clone(),
                            match_score: None,
                        });
                    }
                }
            }
        }
    }
    if edges.is_empty() {
        return Err(KgError::NoEdges);
    }
    KnowledgeGraph::new(nodes, edges)
}

/// Header line listing every node, so isolated nodes survive the
/// round trip through the edge-per-line format.
const NODES_HEADER: &str = "#nodes ";

/// Writes one JSON edge per line, preceded by a `#nodes` header.
pub fn save_kg(graph: &KnowledgeGraph, path: &Path) -> Result<(), KgError> {
    let io_err = |source| KgError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    let nodes_json = serde_json::to_string(graph.nodes()).expect("nodes serialize");
    writeln!(out, "{NODES_HEADER}{nodes_json}").map_err(io_err)?;
    for edge in graph.edges() {
        let line = serde_json::to_string(edge).expect("edge serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    fs::write(path, out).map_err(io_err)
}

/// Reads a graph written by [`save_kg`] (or by the recovery pipeline,
/// whose lines carry an extra `match` field). Comment lines other
/// than the `#nodes` header are skipped; nodes mentioned only in edges
/// are declared implicitly by their edge types.
pub fn load_kg(path: &Path) -> Result<KnowledgeGraph, KgError> {
    let file = fs::File::open(path).map_err(|source| KgError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut declared: Vec<Node> = Vec::new();
    let mut edges: Vec<Edge> = Vec::new();
    let parse_err = |line: usize, message: String| KgError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| KgError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix(NODES_HEADER) {
            let nodes: Vec<Node> =
                serde_json::from_str(rest).map_err(|e| parse_err(lineno, e.to_string()))?;
            declared.extend(nodes);
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let edge: Edge =
            serde_json::from_str(trimmed).map_err(|e| parse_err(lineno, e.to_string()))?;
        edges.push(edge);
    }
    // Nodes implied by edges, for files without a header.
    let mut nodes: BTreeMap<String, String> = declared
        .into_iter()
        .map(|n| (n.code, n.node_type))
        .collect();
    for edge in &edges {
        for (code, node_type) in [
            (&edge.head, &edge.head_type),
            (&edge.tail, &edge.tail_type),
        ] {
            match nodes.get(code) {
                None => {
                    nodes.insert(code.clone(), node_type.clone());
                }
                Some(existing) if existing != node_type => {
                    return Err(KgError::ConflictingNodeType {
                        code: code.clone(),
                        first: existing.clone(),
                        second: node_type.clone(),
                    });
                }
                Some(_) => {}
            }
        }
    }
    let nodes = nodes
        .into_iter()
        .map(|(code, node_type)| Node { code, node_type })
        .collect();
    KnowledgeGraph::new(nodes, edges)
}

/// [`load_kg`] plus a schema check: every node type in the file must
/// belong to `allowed`.
pub fn load_kg_with_types(path: &Path, allowed: &[NodeType]) -> Result<KnowledgeGraph, KgError> {
    let graph = load_kg(path)?;
    let allowed: BTreeSet<&str> = allowed.iter().map(|t| t.name()).collect();
    for node in graph.nodes() {
        if !allowed.contains(node.node_type.as_str()) {
            return Err(KgError::UnknownNodeType {
                name: node.node_type.clone(),
            });
        }
    }
    Ok(graph)
}
