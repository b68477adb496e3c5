// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attribution::{relevance_pass, ContrastCase, RelevancePass};
use crate::engine::{RuleSet, Tensor};
use crate::error::{Error, Result};
use crate::model::{slot_of, LayerStates, ModelBundle};

/// Per-layer, per-position relevance of `Δℓ`, with the gradients that
/// produced it.
#[derive(Debug, Clone)]
pub struct NodeRelevances {
    pass: RelevancePass,
    /// `[(L+1), n]`, slot 0 = embeddings.
    scalar: Tensor,
    refined: BTreeMap<(i32, usize), Vec<f64>>,
}

/// Unreduced relevance vector of one hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedNode {
    pub layer: i32,
    pub pos: usize,
    pub relevance: f64,
    pub vector: Vec<f64>,
}

impl NodeRelevances {
    pub fn from_pass(pass: RelevancePass) -> Self {
        let (slots, n, d) = (pass.states.num_slots(), pass.states.seq_len(), pass.states.hidden_dim());
        let h = pass.states.tensor().data();
        let g = pass.gradients.data();
        let scalar: Vec<f64> = (0..slots * n)
            .map(|row| {
                let r = row * d..(row + 1) * d;
                h[r.clone()].iter().zip(&g[r]).map(|(a, b)| a * b).sum()
            })
            .collect();
        let scalar = Tensor::new(vec![slots, n], scalar).expect("slots * n values");
        Self { pass, scalar, refined: BTreeMap::new() }
    }

    pub fn states(&self) -> &LayerStates {
        &self.pass.states
    }

    pub fn delta_logit(&self) -> f64 {
        self.pass.delta_logit
    }

    pub fn num_layers(&self) -> usize {
        self.states().num_slots() - 1
    }

    pub fn seq_len(&self) -> usize {
        self.states().seq_len()
    }

    /// `[(L+1), n]` scalar relevances.
    pub fn scalar(&self) -> &Tensor {
        &self.scalar
    }

    /// `R_pos^(layer)`.
    pub fn relevance(&self, layer: i32, pos: usize) -> f64 {
        self.scalar.data()[slot_of(layer) * self.seq_len() + pos]
    }

    /// All positions of one layer.
    pub fn layer_relevances(&self, layer: i32) -> &[f64] {
        let n = self.seq_len();
        &self.scalar.data()[slot_of(layer) * n..(slot_of(layer) + 1) * n]
    }

    /// Cached gradient `g_layer^(pos)`.
    pub fn gradient(&self, layer: i32, pos: usize) -> &[f64] {
        self.pass.gradient(layer, pos)
    }

    pub fn contains(&self, layer: i32, pos: usize) -> bool {
        layer >= -1 && (layer as i64) < self.num_layers() as i64 && pos < self.seq_len()
    }

    /// `h ⊙ g` without the dimension sum for each requested node; results
    /// are also kept on `self`.
    pub fn refine(&mut self, nodes: &[(i32, usize)]) -> Result<Vec<RefinedNode>> {
        if let Some(&(l, p)) = nodes.iter().find(|&&(l, p)| !self.contains(l, p)) {
            return Err(Error::input(format!("unknown node (layer {l}, pos {p})")));
        }
        let out: Vec<RefinedNode> = nodes
            .iter()
            .map(|&(layer, pos)| {
                let h = self.states().state(layer, pos);
                let g = self.gradient(layer, pos);
                let vector: Vec<f64> = h.iter().zip(g).map(|(a, b)| a * b).collect();
                RefinedNode { layer, pos, relevance: self.relevance(layer, pos), vector }
            })
            .collect();
        for node in &out {
            self.refined.insert((node.layer, node.pos), node.vector.clone());
        }
        Ok(out)
    }

    pub fn refined(&self, layer: i32, pos: usize) -> Option<&[f64]> {
        self.refined.get(&(layer, pos)).map(Vec::as_slice)
    }
}

/// One forward and one backward from `Δℓ`; caches every `g_l^(i)` and the
/// scalar relevance `Σ_k h ⊙ g`.
pub fn node_pass(model: &ModelBundle, case: &ContrastCase, rules: &RuleSet) -> Result<NodeRelevances> {
    Ok(NodeRelevances::from_pass(relevance_pass(model, case, rules)?))
}

/// Per-dimension relevance vectors for the requested nodes.
pub fn refine_subgraph(
    model: &ModelBundle,
    case: &ContrastCase,
    rules: &RuleSet,
    nodes: &[(i32, usize)],
) -> Result<Vec<RefinedNode>> {
    node_pass(model, case, rules)?.refine(nodes)
}
