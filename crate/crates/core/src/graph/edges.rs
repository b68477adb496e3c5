// SPDX-License-Identifier: MIT OR Apache-2.0

//! Batch-packed multi-target backpropagation.
//!
//! Row `j` of the interaction matrix `A^(s→t)` is the gradient×input read
//! at `H^(s)` after backpropagating `⟨h_t^(j), g_t^(j)⟩` through the blocks
//! between `s` and `t`. A chunk of `B` targets shares one forward over
//! `H^(s)` and one backward call whose seed holds `g_t^(j_b)` at row `j_b`
//! of batch element `b` and zeros elsewhere.

use serde::{Deserialize, Serialize};

use super::nodes::NodeRelevances;
use crate::engine::{RuleSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{record_span, LayerStates, ModelBundle};

/// Number of targets packed into one backward call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    batch_size: usize,
}

impl BatchPlan {
    pub const DEFAULT_MAX: usize = 8;

    pub fn new(batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::input("batch size must be positive"));
        }
        Ok(Self { batch_size })
    }

    /// `min(8, target_count)`, at least 1.
    pub fn default_for(target_count: usize) -> Self {
        Self { batch_size: target_count.clamp(1, Self::DEFAULT_MAX) }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Consecutive chunks partitioning `targets`.
    pub fn chunks<'a>(&self, targets: &'a [usize]) -> std::slice::Chunks<'a, usize> {
        targets.chunks(self.batch_size)
    }

    /// `⌈targets / B⌉`.
    pub fn expected_calls(&self, target_count: usize) -> usize {
        target_count.div_ceil(self.batch_size)
    }
}

/// Dense `A^(s→t)`: `values[j * n + i]` is the relevance flowing from
/// `h_s^(i)` into `h_t^(j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionMatrix {
    pub source: i32,
    pub target: i32,
    pub n: usize,
    pub values: Vec<f64>,
    /// Backward calls spent building this matrix.
    pub backward_calls: usize,
}

impl InteractionMatrix {
    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.values[j * self.n + i]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.n..(j + 1) * self.n]
    }

    pub fn max_abs_diff(&self, other: &InteractionMatrix) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn check_pair(model: &ModelBundle, states: &LayerStates, s: i32, t: i32, targets: &[usize]) -> Result<()> {
    let last = model.config().num_layers as i32 - 1;
    if s >= t {
        return Err(Error::input(format!("source layer {s} must precede target layer {t}")));
    }
    if s < -1 || t > last {
        return Err(Error::input(format!("layer pair ({s}, {t}) outside [-1, {last}]")));
    }
    if let Some(&bad) = targets.iter().find(|&&j| j >= states.seq_len()) {
        return Err(Error::input(format!("target position {bad} outside sequence of {}", states.seq_len())));
    }
    Ok(())
}

/// Builds rows `targets` of `A^(s→t)`; other rows stay zero.
///
/// The `B` replicas of `H^(s)` in a chunk are identical, so the forward is
/// recorded once and the backward fans out over the `B` seeds.
#[allow(clippy::too_many_arguments)]
pub fn edge_matrix(
    model: &ModelBundle,
    states: &LayerStates,
    relev: &NodeRelevances,
    s: i32,
    t: i32,
    targets: &[usize],
    plan: &BatchPlan,
    rules: &RuleSet,
) -> Result<InteractionMatrix> {
    check_pair(model, states, s, t, targets)?;
    let (n, d) = (states.seq_len(), states.hidden_dim());
    let source = states.layer_tensor(s);
    let mut values = vec![0.0; n * n];
    let mut calls = 0;
    for chunk in plan.chunks(targets) {
        let mut tape = Tape::new();
        let x = tape.input(source.clone())?;
        let out = *record_span(&mut tape, model, s, t, x)?.last().expect("s < t");
        let seed = chunk_seed(relev, t, chunk, n, d);
        let grads = tape.backward(out, &seed, rules)?;
        calls += 1;
        if let Some(gx) = grads.get(x) {
            read_rows(source.data(), gx.data(), chunk, n, d, &mut values);
        }
    }
    Ok(InteractionMatrix { source: s, target: t, n, values, backward_calls: calls })
}

/// Same rows as [`edge_matrix`], but each chunk literally stacks `B` copies
/// of `H^(s)` and runs the forward on all of them.
#[allow(clippy::too_many_arguments)]
pub fn edge_matrix_replicated(
    model: &ModelBundle,
    states: &LayerStates,
    relev: &NodeRelevances,
    s: i32,
    t: i32,
    targets: &[usize],
    plan: &BatchPlan,
    rules: &RuleSet,
) -> Result<InteractionMatrix> {
    check_pair(model, states, s, t, targets)?;
    let (n, d) = (states.seq_len(), states.hidden_dim());
    let source = states.layer_tensor(s);
    let mut values = vec![0.0; n * n];
    let mut calls = 0;
    for chunk in plan.chunks(targets) {
        let b = chunk.len();
        let replicas = Tensor::new(vec![b, n, d], source.data().repeat(b))?;
        let mut tape = Tape::new();
        let x = tape.input(replicas)?;
        let out = *record_span(&mut tape, model, s, t, x)?.last().expect("s < t");
        let seed = chunk_seed(relev, t, chunk, n, d);
        let grads = tape.backward(out, &seed, rules)?;
        calls += 1;
        if let Some(gx) = grads.get(x) {
            read_rows(source.data(), gx.data(), chunk, n, d, &mut values);
        }
    }
    Ok(InteractionMatrix { source: s, target: t, n, values, backward_calls: calls })
}

fn chunk_seed(relev: &NodeRelevances, t: i32, chunk: &[usize], n: usize, d: usize) -> Tensor {
    let mut seed = Tensor::zeros(vec![chunk.len(), n, d]);
    for (b, &j) in chunk.iter().enumerate() {
        let start = (b * n + j) * d;
        seed.data_mut()[start..start + d].copy_from_slice(relev.gradient(t, j));
    }
    seed
}

/// `A[j_b, i] = Σ_k H[i, k] · grad[b, i, k]`.
fn read_rows(source: &[f64], grad: &[f64], chunk: &[usize], n: usize, d: usize, values: &mut [f64]) {
    for (b, &j) in chunk.iter().enumerate() {
        for i in 0..n {
            let h = &source[i * d..(i + 1) * d];
            let g = &grad[(b * n + i) * d..(b * n + i + 1) * d];
            values[j * n + i] = h.iter().zip(g).map(|(a, b)| a * b).sum();
        }
    }
}
