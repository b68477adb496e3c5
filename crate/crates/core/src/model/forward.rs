// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm decoder blocks recorded on a [`Tape`].
//!
//! Block `l` computes
//!
//! ```text
//! x = x + Wo · Attn(RoPE(Wq·n1(x)), RoPE(Wk·n1(x)), Wv·n1(x))
//! x = x + Wdown · (SiLU(Wgate·n2(x)) ⊙ Wup·n2(x))
//! ```
//!
//! and the last block additionally applies `final_norm`, so the final
//! hidden state feeds the unembedding directly.

use serde::{Deserialize, Serialize};

use super::weights::ModelBundle;
use crate::engine::{NodeId, ProductKind, Tape, Tensor};
use crate::error::{Error, Result};

/// Hidden states `[(L+1), n, d]`; slot 0 holds the embeddings (layer -1),
/// slot `l+1` the output of block `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStates {
    states: Tensor,
}

impl LayerStates {
    pub fn new(states: Tensor) -> Result<Self> {
        if states.rank() != 3 {
            return Err(Error::shape(format!("layer states must be rank 3, got {:?}", states.shape())));
        }
        Ok(Self { states })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.states
    }

    pub fn num_slots(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.states.shape()[2]
    }

    /// All positions of `layer` (`-1` = embeddings) as `[n * d]`.
    pub fn layer(&self, layer: i32) -> &[f64] {
        let slot = slot_of(layer);
        let width = self.seq_len() * self.hidden_dim();
        &self.states.data()[slot * width..(slot + 1) * width]
    }

    /// `h_layer^(pos)`.
    pub fn state(&self, layer: i32, pos: usize) -> &[f64] {
        let d = self.hidden_dim();
        &self.layer(layer)[pos * d..(pos + 1) * d]
    }

    /// Layer states as a `[1, n, d]` tensor.
    pub fn layer_tensor(&self, layer: i32) -> Tensor {
        Tensor::new(vec![1, self.seq_len(), self.hidden_dim()], self.layer(layer).to_vec())
            .expect("slice has n*d values")
    }
}

/// Next-token logits at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    /// Greedy token; ties go to the lower id.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (t, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = t;
            }
        }
        best as u32
    }
}

/// Tape of a full forward pass with the node of every layer state.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tape: Tape,
    /// `state_nodes[slot]`, slot 0 = embeddings.
    pub state_nodes: Vec<NodeId>,
}

pub(crate) fn slot_of(layer: i32) -> usize {
    debug_assert!(layer >= -1);
    (layer + 1) as usize
}

/// Embedding gather `W_E[tokens]` as `[1, n, d]`.
pub fn embed_tokens(model: &ModelBundle, tokens: &[u32]) -> Result<Tensor> {
    let cfg = model.config();
    if tokens.is_empty() {
        return Err(Error::input("empty token sequence"));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::input(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let d = cfg.hidden_dim;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        data.extend_from_slice(model.embed().row(t as usize));
    }
    Tensor::new(vec![1, tokens.len(), d], data)
}

/// Records block `layer` on `tape`, reading hidden states `x` of shape
/// `[batch, n, d]`.
pub fn record_block(tape: &mut Tape, model: &ModelBundle, layer: usize, x: NodeId) -> Result<NodeId> {
    let cfg = model.config();
    let w = model.layer(layer);
    let heads = cfg.num_heads;
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

    let n1 = tape.rms_norm(x, w.norm1.clone(), cfg.norm_epsilon)?;
    let q = tape.linear(n1, w.wq.clone(), None)?;
    let k = tape.linear(n1, w.wk.clone(), None)?;
    let v = tape.linear(n1, w.wv.clone(), None)?;
    let q = tape.split_heads(q, heads)?;
    let k = tape.split_heads(k, heads)?;
    let v = tape.split_heads(v, heads)?;
    let q = tape.rope(q, cfg.rope_base)?;
    let k = tape.rope(k, cfg.rope_base)?;
    let scores = tape.matmul(q, k, true, ProductKind::AttentionScores)?;
    let scores = tape.scale(scores, scale)?;
    let probs = tape.causal_softmax(scores)?;
    let mixed = tape.matmul(probs, v, false, ProductKind::AttentionValues)?;
    let mixed = tape.merge_heads(mixed)?;
    let attn_out = tape.linear(mixed, w.wo.clone(), None)?;
    let x = tape.add(x, attn_out)?;

    let n2 = tape.rms_norm(x, w.norm2.clone(), cfg.norm_epsilon)?;
    let gate = tape.linear(n2, w.gate.clone(), None)?;
    let gate = tape.silu(gate)?;
    let up = tape.linear(n2, w.up.clone(), None)?;
    let gated = tape.mul(gate, up)?;
    let mlp_out = tape.linear(gated, w.down.clone(), None)?;
    let mut out = tape.add(x, mlp_out)?;

    if layer + 1 == cfg.num_layers {
        out = tape.rms_norm(out, model.final_norm().clone(), cfg.norm_epsilon)?;
    }
    Ok(out)
}

/// Records blocks `from+1 ..= to` on top of `x` (layer indices, `-1` =
/// embeddings) and returns the node of every produced state.
pub fn record_span(tape: &mut Tape, model: &ModelBundle, from: i32, to: i32, x: NodeId) -> Result<Vec<NodeId>> {
    let last = model.config().num_layers as i32 - 1;
    if from < -1 || to > last || from >= to {
        return Err(Error::input(format!("invalid layer span ({from}, {to}) for {} layers", last + 1)));
    }
    let mut nodes = Vec::with_capacity((to - from) as usize);
    let mut cur = x;
    for layer in (from + 1)..=to {
        cur = record_block(tape, model, layer as usize, cur)?;
        nodes.push(cur);
    }
    Ok(nodes)
}

/// Full forward pass, keeping the tape for relevance backward.
pub fn forward_full(model: &ModelBundle, tokens: &[u32]) -> Result<(LayerStates, ForwardTrace)> {
    let cfg = model.config();
    let embeddings = embed_tokens(model, tokens)?;
    let mut tape = Tape::new();
    let h0 = tape.input(embeddings)?;
    let mut state_nodes = vec![h0];
    state_nodes.extend(record_span(&mut tape, model, -1, cfg.num_layers as i32 - 1, h0)?);

    let (n, d) = (tokens.len(), cfg.hidden_dim);
    let mut data = Vec::with_capacity(state_nodes.len() * n * d);
    for &node in &state_nodes {
        data.extend_from_slice(tape.value(node).data());
    }
    let states = LayerStates::new(Tensor::new(vec![state_nodes.len(), n, d], data)?)?;
    Ok((states, ForwardTrace { tape, state_nodes }))
}

/// `ℓ_{i+1} = h_{L-1}^{(i)} · W_U`.
pub fn logits_at(model: &ModelBundle, states: &LayerStates, position: usize) -> Result<Logits> {
    if position >= states.seq_len() {
        return Err(Error::input(format!("position {position} out of range for sequence of {}", states.seq_len())));
    }
    let cfg = model.config();
    let h = states.state(cfg.num_layers as i32 - 1, position);
    let v = cfg.vocab_size;
    let mut logits = vec![0.0; v];
    for (k, &hk) in h.iter().enumerate() {
        let row = &model.unembed().data()[k * v..(k + 1) * v];
        for (l, &u) in logits.iter_mut().zip(row) {
            *l += hk * u;
        }
    }
    Ok(Logits(logits))
}

/// Convenience: forward then logits at `position`.
pub fn next_token_logits(model: &ModelBundle, tokens: &[u32], position: usize) -> Result<Logits> {
    let (states, _) = forward_full(model, tokens)?;
    logits_at(model, &states, position)
}
