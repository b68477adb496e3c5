// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contrastive objective `Δℓ = ℓ(target) − ℓ(contrast)` and the input-level
//! views built on it: heatmaps, segment breakdowns, top-k alternatives,
//! pair validation and the masking faithfulness check.

mod case;
mod heatmap;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use case::{load_case_dir, ContrastCase, Segment};
pub use heatmap::{
    render_html, segment_breakdown, Heatmap, HeatmapDocument, SegmentBreakdown, SegmentSum, HEATMAP_SCHEMA_VERSION,
};
pub use synthetic::synthetic_cases;

use crate::engine::{RuleSet, Tensor};
use crate::error::{Error, Result};
use crate::model::{forward_full, logits_at, next_token_logits, LayerStates, ModelBundle};

/// Default logit-difference gate for accepting a contrast pair.
pub const DEFAULT_PAIR_THRESHOLD: f64 = 1.0;

/// `W_U[:, target] − W_U[:, contrast]`.
pub fn contrast_direction(model: &ModelBundle, target: u32, contrast: u32) -> Vec<f64> {
    let t = model.unembed_column(target);
    let c = model.unembed_column(contrast);
    t.iter().zip(&c).map(|(a, b)| a - b).collect()
}

/// `Δℓ` read from precomputed states.
pub fn delta_logit_from_states(model: &ModelBundle, states: &LayerStates, case: &ContrastCase) -> f64 {
    let h = states.state(model.config().num_layers as i32 - 1, case.position);
    let dir = contrast_direction(model, case.target, case.contrast);
    h.iter().zip(&dir).map(|(a, b)| a * b).sum()
}

/// Contrastive logit difference at the case's prediction position.
pub fn delta_logit(model: &ModelBundle, case: &ContrastCase) -> Result<f64> {
    case.check_against(model)?;
    let (states, _) = forward_full(model, &case.tokens)?;
    Ok(delta_logit_from_states(model, &states, case))
}

/// Result of one forward plus one patched backward from `Δℓ`.
#[derive(Debug, Clone)]
pub struct RelevancePass {
    pub states: LayerStates,
    /// Patched `∂Δℓ/∂h` for every slot, `[(L+1), n, d]`.
    pub gradients: Tensor,
    pub delta_logit: f64,
}

impl RelevancePass {
    /// Gradient at `h_layer^(pos)`.
    pub fn gradient(&self, layer: i32, pos: usize) -> &[f64] {
        let (n, d) = (self.states.seq_len(), self.states.hidden_dim());
        let slot = (layer + 1) as usize;
        let start = (slot * n + pos) * d;
        &self.gradients.data()[start..start + d]
    }
}

/// Forward the case, then backpropagate `Δℓ` with the given rules and keep
/// the gradient at every layer state.
pub fn relevance_pass(model: &ModelBundle, case: &ContrastCase, rules: &RuleSet) -> Result<RelevancePass> {
    case.check_against(model)?;
    let (states, trace) = forward_full(model, &case.tokens)?;
    let cfg = model.config();
    let (n, d) = (case.len(), cfg.hidden_dim);
    let dir = contrast_direction(model, case.target, case.contrast);
    let mut seed = Tensor::zeros(vec![1, n, d]);
    seed.data_mut()[case.position * d..(case.position + 1) * d].copy_from_slice(&dir);

    let output = *trace.state_nodes.last().expect("at least the embedding node");
    let grads = trace.tape.backward(output, &seed, rules)?;
    let mut data = Vec::with_capacity(trace.state_nodes.len() * n * d);
    for &node in &trace.state_nodes {
        match grads.get(node) {
            Some(g) => data.extend_from_slice(g.data()),
            None => data.extend(std::iter::repeat(0.0).take(n * d)),
        }
    }
    let gradients = Tensor::new(vec![trace.state_nodes.len(), n, d], data)?;
    let delta_logit = delta_logit_from_states(model, &states, case);
    Ok(RelevancePass { states, gradients, delta_logit })
}

/// Per-token relevance of `Δℓ` at the embedding layer, normalized over
/// non-special tokens. Positive values support the target token.
pub fn input_attribution(model: &ModelBundle, case: &ContrastCase, rules: &RuleSet) -> Result<Heatmap> {
    let pass = relevance_pass(model, case, rules)?;
    heatmap_from_pass(&pass, case)
}

pub fn heatmap_from_pass(pass: &RelevancePass, case: &ContrastCase) -> Result<Heatmap> {
    let raw = (0..case.len())
        .map(|p| {
            let h = pass.states.state(-1, p);
            let g = pass.gradient(-1, p);
            h.iter().zip(g).map(|(a, b)| a * b).sum()
        })
        .collect();
    Heatmap::from_raw(raw, &case.special_mask, pass.delta_logit)
}

/// `k` highest logits at `position`, descending; ties by ascending id.
/// `k` is clamped to the vocabulary size.
pub fn topk_alternatives(model: &ModelBundle, tokens: &[u32], position: usize, k: usize) -> Result<Vec<(u32, f64)>> {
    if k == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    let logits = next_token_logits(model, tokens, position)?;
    let mut ranked: Vec<(u32, f64)> = logits.0.iter().enumerate().map(|(t, &v)| (t as u32, v)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k.min(model.config().vocab_size));
    Ok(ranked)
}

/// Logit-gap verdict for a contrast pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub accepted: bool,
    pub delta_logit: f64,
    pub threshold: f64,
}

/// Strict `Δℓ > threshold`.
pub fn passes_threshold(delta_logit: f64, threshold: f64) -> bool {
    delta_logit > threshold
}

pub fn validate_pair(model: &ModelBundle, case: &ContrastCase, threshold: f64) -> Result<PairVerdict> {
    let delta_logit = delta_logit(model, case)?;
    Ok(PairVerdict { accepted: passes_threshold(delta_logit, threshold), delta_logit, threshold })
}

/// Outcome of masking top-attributed tokens until the greedy prediction
/// leaves the target token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationOutcome {
    pub tokens_masked: usize,
    pub fixed: bool,
    /// Positions masked, in masking order.
    pub masked_positions: Vec<usize>,
}

/// Masks non-special tokens in descending order of normalized relevance
/// (ties by position) with the case's mask id, re-running the model after
/// each step, until the greedy token at the prediction position is no
/// longer the target or `max_masked` tokens have been masked.
pub fn perturbation_fix(
    model: &ModelBundle,
    case: &ContrastCase,
    heatmap: &Heatmap,
    max_masked: usize,
) -> Result<PerturbationOutcome> {
    if max_masked == 0 {
        return Err(Error::input("max_masked must be at least 1"));
    }
    case.check_against(model)?;
    if heatmap.len() != case.len() {
        return Err(Error::shape("heatmap length differs from case length"));
    }
    let mut tokens = case.tokens.clone();
    let greedy = |tokens: &[u32]| -> Result<u32> { Ok(next_token_logits(model, tokens, case.position)?.argmax()) };
    if greedy(&tokens)? != case.target {
        return Ok(PerturbationOutcome { tokens_masked: 0, fixed: true, masked_positions: vec![] });
    }
    let mut candidates: Vec<usize> = case.non_special_positions().collect();
    if candidates.is_empty() {
        return Err(Error::input(format!("case {} has no non-special tokens to mask", case.case_id)));
    }
    candidates.sort_by(|&a, &b| heatmap.normalized[b].total_cmp(&heatmap.normalized[a]).then(a.cmp(&b)));

    let mut masked = Vec::new();
    for &pos in candidates.iter().take(max_masked) {
        tokens[pos] = case.mask_token;
        masked.push(pos);
        if greedy(&tokens)? != case.target {
            return Ok(PerturbationOutcome { tokens_masked: masked.len(), fixed: true, masked_positions: masked });
        }
    }
    Ok(PerturbationOutcome { tokens_masked: masked.len(), fixed: false, masked_positions: masked })
}

/// Greedy token at the case's prediction position.
pub fn greedy_token(model: &ModelBundle, case: &ContrastCase) -> Result<u32> {
    let (states, _) = forward_full(model, &case.tokens)?;
    Ok(logits_at(model, &states, case.position)?.argmax())
}
