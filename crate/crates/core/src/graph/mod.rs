// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-position attribution graphs: nodes carry the relevance of a hidden
//! state to `Δℓ`, edges carry the relevance one state passes to another.

mod edges;
mod nodes;
mod prune;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use edges::{edge_matrix, edge_matrix_replicated, BatchPlan, InteractionMatrix};
pub use nodes::{node_pass, refine_subgraph, NodeRelevances, RefinedNode};
pub use prune::{
    prune_cumulative, prune_global, select, CumulativeCut, PruneConfig, PruneMode, DEFAULT_MASS, DEFAULT_NODE_THRESHOLD,
};

use crate::attribution::ContrastCase;
use crate::engine::{RuleSet, RuleVariant};
use crate::error::{Error, Result};
use crate::model::ModelBundle;

pub const GRAPH_SCHEMA_VERSION: u32 = 1;

/// `(layer, position)`; layer `-1` is the embedding output.
pub type NodeKey = (i32, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub layer: i32,
    pub pos: usize,
    pub relevance: f64,
}

impl GraphNode {
    pub fn key(&self) -> NodeKey {
        (self.layer, self.pos)
    }
}

/// Relevance `w` flowing from `(s, i)` into `(t, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub s: i32,
    pub i: usize,
    pub t: i32,
    pub j: usize,
    pub w: f64,
}

impl GraphEdge {
    pub fn source(&self) -> NodeKey {
        (self.s, self.i)
    }

    pub fn target(&self) -> NodeKey {
        (self.t, self.j)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphFlags {
    /// No edge survived pruning and extraction.
    pub empty: bool,
    /// The prediction node fell below the node threshold and was put back.
    pub target_reinstated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionGraph {
    pub schema_version: u32,
    pub case_id: String,
    pub rule_variant: RuleVariant,
    pub prune: PruneConfig,
    pub layer_pairs: Vec<(i32, i32)>,
    /// The prediction node with its unpruned relevance.
    pub target: GraphNode,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub flags: GraphFlags,
}

impl AttributionGraph {
    pub fn node(&self, key: NodeKey) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.key() == key)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let graph: AttributionGraph = serde_json::from_str(text)?;
        if graph.schema_version != GRAPH_SCHEMA_VERSION {
            return Err(Error::Parse(format!("unsupported graph schema version {}", graph.schema_version)));
        }
        Ok(graph)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `(-1, 0), (0, 1), …, (L-2, L-1)`.
pub fn consecutive_pairs(num_layers: usize) -> Vec<(i32, i32)> {
    (-1..num_layers as i32 - 1).map(|s| (s, s + 1)).collect()
}

pub fn validate_pairs(pairs: &[(i32, i32)], num_layers: usize) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::input("at least one layer pair is required"));
    }
    let last = num_layers as i32 - 1;
    for &(s, t) in pairs {
        if s >= t || s < -1 || t > last {
            return Err(Error::input(format!("layer pair ({s}, {t}) must satisfy -1 <= s < t <= {last}")));
        }
    }
    Ok(())
}

/// Per-pair accounting for one dense build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStats {
    pub source: i32,
    pub target: i32,
    pub targets: usize,
    pub batch_size: usize,
    pub backward_calls: usize,
}

/// Node relevances plus every unpruned interaction matrix; re-pruning
/// needs no further backward passes.
#[derive(Debug, Clone)]
pub struct DenseGraph {
    pub case_id: String,
    pub position: usize,
    pub rule_variant: RuleVariant,
    pub relevances: NodeRelevances,
    pub matrices: Vec<InteractionMatrix>,
}

impl DenseGraph {
    pub fn stats(&self, batch_size: usize) -> Vec<PairStats> {
        self.matrices
            .iter()
            .map(|m| PairStats {
                source: m.source,
                target: m.target,
                targets: m.n,
                batch_size,
                backward_calls: m.backward_calls,
            })
            .collect()
    }

    pub fn backward_calls(&self) -> usize {
        self.matrices.iter().map(|m| m.backward_calls).sum()
    }

    pub fn layer_pairs(&self) -> Vec<(i32, i32)> {
        self.matrices.iter().map(|m| (m.source, m.target)).collect()
    }

    /// Prediction node: last layer at the case position.
    pub fn target_node(&self) -> GraphNode {
        let layer = self.relevances.num_layers() as i32 - 1;
        GraphNode { layer, pos: self.position, relevance: self.relevances.relevance(layer, self.position) }
    }

    /// Prunes the cached matrices and extracts the subgraph connected to
    /// the prediction node.
    pub fn prune(&self, config: &PruneConfig) -> Result<AttributionGraph> {
        config.validate()?;
        let full = prune_dense(self, config);
        Ok(connected_subgraph(&full, self.target_node().key()))
    }
}

/// Node pass plus one interaction matrix per layer pair, each over all
/// target positions.
pub fn dense_graph(
    model: &ModelBundle,
    case: &ContrastCase,
    rules: &RuleSet,
    layer_pairs: &[(i32, i32)],
    plan: Option<BatchPlan>,
) -> Result<DenseGraph> {
    validate_pairs(layer_pairs, model.config().num_layers)?;
    let relevances = node_pass(model, case, rules)?;
    let n = case.len();
    let targets: Vec<usize> = (0..n).collect();
    let plan = plan.unwrap_or_else(|| BatchPlan::default_for(n));
    let matrices = layer_pairs
        .iter()
        .map(|&(s, t)| edge_matrix(model, relevances.states(), &relevances, s, t, &targets, &plan, rules))
        .collect::<Result<Vec<_>>>()?;
    Ok(DenseGraph {
        case_id: case.case_id.clone(),
        position: case.position,
        rule_variant: rules.variant(),
        relevances,
        matrices,
    })
}

/// Dense build, pruning and extraction in one call.
pub fn build_graph(
    model: &ModelBundle,
    case: &ContrastCase,
    rules: &RuleSet,
    layer_pairs: &[(i32, i32)],
    prune: &PruneConfig,
    plan: Option<BatchPlan>,
) -> Result<AttributionGraph> {
    prune.validate()?;
    dense_graph(model, case, rules, layer_pairs, plan)?.prune(prune)
}

/// Thresholded nodes and pruned edges, before connectivity extraction.
/// Pruning runs over each full matrix; an edge then survives only when both
/// endpoints survived the node threshold.
pub fn prune_dense(dense: &DenseGraph, config: &PruneConfig) -> AttributionGraph {
    let relev = &dense.relevances;
    let n = relev.seq_len();
    let layers: BTreeSet<i32> = dense.matrices.iter().flat_map(|m| [m.source, m.target]).collect();
    let nodes: Vec<GraphNode> = layers
        .iter()
        .flat_map(|&layer| (0..n).map(move |pos| (layer, pos)))
        .map(|(layer, pos)| GraphNode { layer, pos, relevance: relev.relevance(layer, pos) })
        .filter(|node| node.relevance.abs() > config.node_threshold)
        .collect();
    let kept: BTreeSet<NodeKey> = nodes.iter().map(GraphNode::key).collect();
    let mut edges = Vec::new();
    for m in &dense.matrices {
        for idx in select(&m.values, config.mode) {
            let (j, i) = (idx / m.n, idx % m.n);
            if kept.contains(&(m.source, i)) && kept.contains(&(m.target, j)) {
                edges.push(GraphEdge { s: m.source, i, t: m.target, j, w: m.values[idx] });
            }
        }
    }
    let flags = GraphFlags { empty: edges.is_empty(), target_reinstated: false };
    AttributionGraph {
        schema_version: GRAPH_SCHEMA_VERSION,
        case_id: dense.case_id.clone(),
        rule_variant: dense.rule_variant,
        prune: *config,
        layer_pairs: dense.layer_pairs(),
        target: dense.target_node(),
        nodes,
        edges,
        flags,
    }
}

/// Keeps the nodes and edges lying on some directed path into `target`.
/// A target missing from `graph.nodes` is reinstated from `graph.target`
/// when the keys agree, otherwise with zero relevance, and flagged.
pub fn connected_subgraph(graph: &AttributionGraph, target: NodeKey) -> AttributionGraph {
    let mut incoming: BTreeMap<NodeKey, Vec<usize>> = BTreeMap::new();
    for (idx, e) in graph.edges.iter().enumerate() {
        incoming.entry(e.target()).or_default().push(idx);
    }
    let mut seen = BTreeSet::from([target]);
    let mut queue = VecDeque::from([target]);
    while let Some(key) = queue.pop_front() {
        for &idx in incoming.get(&key).map(Vec::as_slice).unwrap_or(&[]) {
            let src = graph.edges[idx].source();
            if seen.insert(src) {
                queue.push_back(src);
            }
        }
    }
    let mut nodes: Vec<GraphNode> = graph.nodes.iter().filter(|n| seen.contains(&n.key())).copied().collect();
    let mut flags = graph.flags;
    if !nodes.iter().any(|n| n.key() == target) {
        let relevance = if graph.target.key() == target { graph.target.relevance } else { 0.0 };
        nodes.push(GraphNode { layer: target.0, pos: target.1, relevance });
        nodes.sort_by_key(GraphNode::key);
        flags.target_reinstated = true;
    }
    let edges: Vec<GraphEdge> = graph.edges.iter().filter(|e| seen.contains(&e.target())).copied().collect();
    flags.empty = edges.is_empty();
    AttributionGraph { nodes, edges, flags, ..graph.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(layer: i32, pos: usize) -> GraphNode {
        GraphNode { layer, pos, relevance: 1.0 }
    }

    fn edge(s: i32, i: usize, t: i32, j: usize) -> GraphEdge {
        GraphEdge { s, i, t, j, w: 1.0 }
    }

    fn graph(nodes: Vec<GraphNode>, edges: Vec<GraphEdge>) -> AttributionGraph {
        AttributionGraph {
            schema_version: GRAPH_SCHEMA_VERSION,
            case_id: "g".into(),
            rule_variant: RuleVariant::Attnlrp,
            prune: PruneConfig::default(),
            layer_pairs: vec![(-1, 0), (0, 1)],
            target: GraphNode { layer: 1, pos: 1, relevance: 0.5 },
            nodes,
            edges,
            flags: GraphFlags::default(),
        }
    }

    #[test]
    fn dangling_branch_is_dropped() {
        let g = graph(
            vec![node(-1, 0), node(-1, 1), node(0, 0), node(0, 1), node(1, 1)],
            vec![edge(-1, 0, 0, 0), edge(0, 0, 1, 1), edge(-1, 1, 0, 1)],
        );
        let sub = connected_subgraph(&g, (1, 1));
        let keys: Vec<NodeKey> = sub.nodes.iter().map(GraphNode::key).collect();
        assert_eq!(keys, vec![(-1, 0), (0, 0), (1, 1)]);
        assert_eq!(sub.edges.len(), 2);
        assert!(!sub.flags.target_reinstated);
    }

    #[test]
    fn missing_target_is_reinstated() {
        let sub = connected_subgraph(&graph(vec![node(-1, 0)], vec![]), (1, 1));
        assert_eq!(sub.nodes.len(), 1);
        assert_eq!(sub.nodes[0].relevance, 0.5);
        assert!(sub.flags.target_reinstated && sub.flags.empty);
    }

    #[test]
    fn pairs() {
        assert_eq!(consecutive_pairs(3), vec![(-1, 0), (0, 1), (1, 2)]);
        assert!(validate_pairs(&[(0, 0)], 3).is_err());
        assert!(validate_pairs(&[(-2, 0)], 3).is_err());
        assert!(validate_pairs(&[(1, 3)], 3).is_err());
        assert!(validate_pairs(&[(-1, 2)], 3).is_ok());
    }

    #[test]
    fn json_round_trip() {
        let g = graph(vec![node(0, 0)], vec![edge(-1, 0, 0, 0)]);
        let back = AttributionGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        let text = g.to_json().replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(AttributionGraph::from_json(&text).is_err());
    }
}
