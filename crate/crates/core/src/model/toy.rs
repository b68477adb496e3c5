// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded toy models for tests, benchmarks and demos.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::weights::{LayerWeights, ModelBundle};
use crate::engine::Tensor;

pub const TOY_BOS: u32 = 0;
pub const TOY_MASK: u32 = 3;

/// Bundled toy configuration: 4 layers, width 32, 4 heads, 101 tokens.
/// Tokens 0..=2 are special (BOS and two formatting tokens); token 3 is
/// the conventional mask/pad id.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        hidden_dim: 32,
        num_heads: 4,
        intermediate_dim: 64,
        vocab_size: 101,
        norm_epsilon: 1e-6,
        rope_base: 10_000.0,
        tied_unembedding: false,
        special_token_ids: [0, 1, 2].into(),
    }
}

/// Deterministic toy model. Weights are `f32`-representable so a save/load
/// round trip is bit-exact.
pub fn toy_model(seed: u64) -> ModelBundle {
    random_model(toy_config(), seed)
}

/// Random weights for an arbitrary config.
pub fn random_model(config: ModelConfig, seed: u64) -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d, f) = (config.vocab_size, config.hidden_dim, config.intermediate_dim);
    let embed = uniform(&mut rng, vec![v, d], 1.0);
    let unembed = (!config.tied_unembedding).then(|| uniform(&mut rng, vec![d, v], 1.0 / (d as f64).sqrt()));
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            wq: Arc::new(uniform(&mut rng, vec![d, d], 1.0 / (d as f64).sqrt())),
            wk: Arc::new(uniform(&mut rng, vec![d, d], 1.0 / (d as f64).sqrt())),
            wv: Arc::new(uniform(&mut rng, vec![d, d], 1.0 / (d as f64).sqrt())),
            wo: Arc::new(uniform(&mut rng, vec![d, d], 1.0 / (d as f64).sqrt())),
            gate: Arc::new(uniform(&mut rng, vec![d, f], 1.0 / (d as f64).sqrt())),
            up: Arc::new(uniform(&mut rng, vec![d, f], 1.0 / (d as f64).sqrt())),
            down: Arc::new(uniform(&mut rng, vec![f, d], 1.0 / (f as f64).sqrt())),
            norm1: Arc::new(around_one(&mut rng, d)),
            norm2: Arc::new(around_one(&mut rng, d)),
        })
        .collect();
    let final_norm = around_one(&mut rng, d);
    ModelBundle::new(config, embed, unembed, layers, final_norm).expect("toy shapes are consistent")
}

/// Copy of `model` with every weight nudged by up to `scale` times its
/// init magnitude; stands in for a later checkpoint of the same model.
pub fn perturbed(model: &ModelBundle, seed: u64, scale: f64) -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nudge = |t: &Tensor| -> Tensor {
        let data =
            t.data().iter().map(|&x| f32_round(x + scale * rng.gen_range(-1.0..1.0) * x.abs().max(0.05))).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    };
    let cfg = model.config().clone();
    let embed = nudge(model.embed());
    let unembed = (!cfg.tied_unembedding).then(|| nudge(model.unembed()));
    let layers = model
        .layers()
        .iter()
        .map(|w| LayerWeights {
            wq: Arc::new(nudge(&w.wq)),
            wk: Arc::new(nudge(&w.wk)),
            wv: Arc::new(nudge(&w.wv)),
            wo: Arc::new(nudge(&w.wo)),
            gate: Arc::new(nudge(&w.gate)),
            up: Arc::new(nudge(&w.up)),
            down: Arc::new(nudge(&w.down)),
            norm1: Arc::new(nudge(&w.norm1)),
            norm2: Arc::new(nudge(&w.norm2)),
        })
        .collect();
    let final_norm = nudge(model.final_norm());
    ModelBundle::new(cfg, embed, unembed, layers, final_norm).expect("same shapes")
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let bound = std * 3f64.sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| f32_round(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("sized")
}

fn around_one(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    Tensor::vector((0..d).map(|_| f32_round(1.0 + rng.gen_range(-0.1..0.1))).collect())
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}
