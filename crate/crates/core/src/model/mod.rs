// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal decoder-only transformer: pre-norm RMS-norm blocks with rotary
//! multi-head causal attention and a SiLU-gated MLP.

mod config;
mod forward;
mod toy;
mod weights;

pub use config::ModelConfig;
pub(crate) use forward::slot_of;
pub use forward::{
    embed_tokens, forward_full, logits_at, next_token_logits, record_block, record_span, ForwardTrace, LayerStates,
    Logits,
};
pub use toy::{perturbed, random_model, toy_config, toy_model, TOY_BOS, TOY_MASK};
pub use weights::{load_model, LayerWeights, ModelBundle, MAGIC, VERSION};
