// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Width of the gated MLP.
    pub intermediate_dim: usize,
    pub vocab_size: usize,
    pub norm_epsilon: f64,
    pub rope_base: f64,
    pub tied_unembedding: bool,
    /// BOS and formatting tokens; excluded from heatmap normalization.
    #[serde(default)]
    pub special_token_ids: BTreeSet<u32>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("intermediate_dim", self.intermediate_dim),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::input(format!("{name} must be at least 1")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::input(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if (self.hidden_dim / self.num_heads) % 2 != 0 {
            return Err(Error::input("head dimension must be even for rotary embeddings"));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.norm_epsilon) || !positive(self.rope_base) {
            return Err(Error::input("norm_epsilon and rope_base must be positive and finite"));
        }
        if let Some(bad) = self.special_token_ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::input(format!("special token {bad} outside vocabulary")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Number of hidden-state slots: the embedding layer plus one per block.
    pub fn num_slots(&self) -> usize {
        self.num_layers + 1
    }

    /// Layer indices `-1..=L-1`.
    pub fn layers(&self) -> impl Iterator<Item = i32> {
        -1..self.num_layers as i32
    }

    pub fn is_special(&self, token: u32) -> bool {
        self.special_token_ids.contains(&token)
    }
}
