//! Knowledge-graph model: parsing, validation, and canonical serialization.
//!
//! Two input dialects are accepted. The list form keeps nodes as an array of
//! `{id, properties}` objects and edges as `{source, target, label}`. The map
//! form keys nodes by name (the key becomes the id, the value object becomes
//! the properties) and spells edges `{from, to, relationship}`. Both normalize
//! to the same canonical structure; only the list form is ever emitted.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt;

/// A graph entity. Property values are kept as strings verbatim — numeric
/// payloads like "6.28e+09 N/m^2" mix magnitude and unit, so no coercion
/// happens at this layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    #[serde(default)]
    pub properties: IndexMap<String, String>,
}

impl Node {
    pub fn new(id: impl Into<String>) -> Self {
        Node {
            id: id.into(),
            properties: IndexMap::new(),
        }
    }

    pub fn with_property(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.properties.insert(key.into(), value.into());
        self
    }
}

/// A directed, labeled relation between two nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub source: String,
    pub target: String,
    pub label: String,
}

impl Edge {
    pub fn new(
        source: impl Into<String>,
        target: impl Into<String>,
        label: impl Into<String>,
    ) -> Self {
        Edge {
            source: source.into(),
            target: target.into(),
            label: label.into(),
        }
    }
}

/// Canonical node/edge structure. Node and edge order is meaningful and
/// preserved through serialization; graphs are immutable by convention once
/// built (all operations here are pure).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl KnowledgeGraph {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }
}

/// Kinds of invariant violations a graph can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueCode {
    EmptyNodeId,
    DuplicateId,
    EmptyPropertyKey,
    DanglingEndpoint,
    EmptyEdgeLabel,
    DuplicateEdge,
}

impl fmt::Display for IssueCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            IssueCode::EmptyNodeId => "EMPTY_NODE_ID",
            IssueCode::DuplicateId => "DUPLICATE_ID",
            IssueCode::EmptyPropertyKey => "EMPTY_PROPERTY_KEY",
            IssueCode::DanglingEndpoint => "DANGLING_ENDPOINT",
            IssueCode::EmptyEdgeLabel => "EMPTY_EDGE_LABEL",
            IssueCode::DuplicateEdge => "DUPLICATE_EDGE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub code: IssueCode,
    pub severity: Severity,
    /// Location of the violation, e.g. `nodes[1]` or `edges[0].target`.
    pub path: String,
    pub message: String,
}

/// Outcome of [`validate`]. `valid` means free of error-level issues;
/// warning-level issues (duplicate edges) do not invalidate a graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues
            .iter()
            .filter(|i| i.severity == Severity::Error)
    }

    fn summary(&self) -> String {
        self.errors()
            .map(|i| format!("{} at {}: {}", i.code, i.path, i.message))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("invalid JSON: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("document matches neither graph dialect: {0}")]
    Schema(String),
    #[error("graph integrity violated: {}", report.summary())]
    Integrity { report: ValidationReport },
    #[error("graph failed validation: {}", report.summary())]
    InvalidGraph { report: ValidationReport },
}

/// Parse a JSON document in either dialect into a canonical graph.
///
/// Map-form nodes are normalized (key → id, value object → properties) in key
/// appearance order; `from`/`to`/`relationship` edge keys map to
/// `source`/`target`/`label`. Scalar property values are stringified; nested
/// objects and arrays are kept as their compact JSON text.
pub fn parse_graph(json_text: &str) -> Result<KnowledgeGraph, KgError> {
    let value: Value = serde_json::from_str(json_text)?;
    let root = value
        .as_object()
        .ok_or_else(|| KgError::Schema("top-level value is not an object".into()))?;
    let nodes_value = root
        .get("nodes")
        .ok_or_else(|| KgError::Schema("missing \"nodes\" key".into()))?;

    let nodes = match nodes_value {
        Value::Array(items) => parse_node_list(items)?,
        Value::Object(map) => parse_node_map(map)?,
        other => {
            return Err(KgError::Schema(format!(
                "\"nodes\" must be an array or object, got {}",
                json_type(other)
            )))
        }
    };

    let edges = match root.get("edges") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => parse_edge_list(items)?,
        Some(other) => {
            return Err(KgError::Schema(format!(
                "\"edges\" must be an array, got {}",
                json_type(other)
            )))
        }
    };

    let graph = KnowledgeGraph { nodes, edges };
    let report = validate(&graph);
    if !report.valid {
        return Err(KgError::Integrity { report });
    }
    Ok(graph)
}

fn parse_node_list(items: &[Value]) -> Result<Vec<Node>, KgError> {
    let mut nodes = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let obj = item
            .as_object()
            .ok_or_else(|| KgError::Schema(format!("nodes[{i}] is not an object")))?;
        let id = match obj.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(other) => {
                return Err(KgError::Schema(format!(
                    "nodes[{i}].id must be a string, got {}",
                    json_type(other)
                )))
            }
            None => return Err(KgError::Schema(format!("nodes[{i}] has no \"id\""))),
        };
        let properties = match obj.get("properties") {
            None | Some(Value::Null) => IndexMap::new(),
            Some(Value::Object(map)) => stringify_properties(map),
            Some(other) => {
                return Err(KgError::Schema(format!(
                    "nodes[{i}].properties must be an object, got {}",
                    json_type(other)
                )))
            }
        };
        nodes.push(Node { id, properties });
    }
    Ok(nodes)
}

fn parse_node_map(map: &serde_json::Map<String, Value>) -> Result<Vec<Node>, KgError> {
    let mut nodes = Vec::with_capacity(map.len());
    for (key, value) in map {
        let properties = match value {
            Value::Object(props) => stringify_properties(props),
            // A bare scalar as the node body becomes a single "value" property.
            scalar => {
                let mut props = IndexMap::new();
                props.insert("value".to_string(), stringify_value(scalar));
                props
            }
        };
        nodes.push(Node {
            id: key.clone(),
            properties,
        });
    }
    Ok(nodes)
}

fn parse_edge_list(items: &[Value]) -> Result<Vec<Edge>, KgError> {
    let mut edges = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let obj = item
            .as_object()
            .ok_or_else(|| KgError::Schema(format!("edges[{i}] is not an object")))?;
        let field = |canonical: &str, alias: &str| -> Result<String, KgError> {
            match obj.get(canonical).or_else(|| obj.get(alias)) {
                Some(Value::String(s)) => Ok(s.clone()),
                Some(other) => Err(KgError::Schema(format!(
                    "edges[{i}].{canonical} must be a string, got {}",
                    json_type(other)
                ))),
                None => Err(KgError::Schema(format!(
                    "edges[{i}] has neither \"{canonical}\" nor \"{alias}\""
                ))),
            }
        };
        edges.push(Edge {
            source: field("source", "from")?,
            target: field("target", "to")?,
            label: field("label", "relationship")?,
        });
    }
    Ok(edges)
}

fn stringify_properties(map: &serde_json::Map<String, Value>) -> IndexMap<String, String> {
    map.iter()
        .map(|(k, v)| (k.clone(), stringify_value(v)))
        .collect()
}

fn stringify_value(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Null => "null".to_string(),
        // Nested structures keep their compact JSON text.
        other => other.to_string(),
    }
}

fn json_type(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Report every invariant violation in the graph. Never mutates; violations
/// are data, not errors.
pub fn validate(graph: &KnowledgeGraph) -> ValidationReport {
    let mut issues = Vec::new();
    let mut seen_ids: Vec<&str> = Vec::new();

    for (i, node) in graph.nodes.iter().enumerate() {
        if node.id.is_empty() {
            issues.push(Issue {
                code: IssueCode::EmptyNodeId,
                severity: Severity::Error,
                path: format!("nodes[{i}]"),
                message: "node id is empty".into(),
            });
        } else if seen_ids.contains(&node.id.as_str()) {
            issues.push(Issue {
                code: IssueCode::DuplicateId,
                severity: Severity::Error,
                path: format!("nodes[{i}]"),
                message: format!("node id \"{}\" already used", node.id),
            });
        }
        seen_ids.push(node.id.as_str());
        for key in node.properties.keys() {
            if key.is_empty() {
                issues.push(Issue {
                    code: IssueCode::EmptyPropertyKey,
                    severity: Severity::Error,
                    path: format!("nodes[{i}].properties"),
                    message: "property key is empty".into(),
                });
            }
        }
    }

    let mut seen_edges: Vec<(&str, &str, &str)> = Vec::new();
    for (i, edge) in graph.edges.iter().enumerate() {
        for (endpoint, field) in [(&edge.source, "source"), (&edge.target, "target")] {
            if graph.node(endpoint).is_none() {
                issues.push(Issue {
                    code: IssueCode::DanglingEndpoint,
                    severity: Severity::Error,
                    path: format!("edges[{i}].{field}"),
                    message: format!("no node with id \"{endpoint}\""),
                });
            }
        }
        if edge.label.is_empty() {
            issues.push(Issue {
                code: IssueCode::EmptyEdgeLabel,
                severity: Severity::Error,
                path: format!("edges[{i}].label"),
                message: "edge label is empty".into(),
            });
        }
        let key = (
            edge.source.as_str(),
            edge.target.as_str(),
            edge.label.as_str(),
        );
        if seen_edges.contains(&key) {
            issues.push(Issue {
                code: IssueCode::DuplicateEdge,
                severity: Severity::Warning,
                path: format!("edges[{i}]"),
                message: format!(
                    "duplicate edge {} -[{}]-> {}",
                    edge.source, edge.label, edge.target
                ),
            });
        }
        seen_edges.push(key);
    }

    let valid = !issues.iter().any(|i| i.severity == Severity::Error);
    ValidationReport { valid, issues }
}

/// Serialize to the canonical list-form text: fixed key order (nodes before
/// edges; id before properties; source, target, label), two-space indentation,
/// property insertion order preserved. Byte-deterministic for equal graphs.
pub fn serialize_graph(graph: &KnowledgeGraph) -> Result<String, KgError> {
    let report = validate(graph);
    if !report.valid {
        return Err(KgError::InvalidGraph { report });
    }
    // Struct field declaration order and IndexMap insertion order give the
    // canonical key ordering directly.
    Ok(serde_json::to_string_pretty(graph).expect("graph serialization cannot fail"))
}

/// Per-node shape overview: property count and incident-edge degree, in node
/// order. Self-loops count twice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySummary {
    pub id: String,
    pub property_count: usize,
    pub degree: usize,
}

pub fn entity_summary(graph: &KnowledgeGraph) -> Vec<EntitySummary> {
    graph
        .nodes
        .iter()
        .map(|node| {
            let degree = graph
                .edges
                .iter()
                .map(|e| {
                    usize::from(e.source == node.id) + usize::from(e.target == node.id)
                })
                .sum();
            EntitySummary {
                id: node.id.clone(),
                property_count: node.properties.len(),
                degree,
            }
        })
        .collect()
}
