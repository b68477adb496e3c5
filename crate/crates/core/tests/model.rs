// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use attrigraph_core::engine::Tensor;
use attrigraph_core::model::{
    forward_full, logits_at, next_token_logits, random_model, toy_config, toy_model, LayerStates, LayerWeights,
    ModelBundle, ModelConfig,
};
use attrigraph_core::{Error, LoadError};

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn matmul(x: &Mat, w: &Mat) -> Mat {
    x.iter().map(|row| (0..w[0].len()).map(|j| row.iter().zip(w).map(|(a, wr)| a * wr[j]).sum()).collect()).collect()
}

fn rms(x: &Mat, w: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.iter().zip(w).map(|(v, g)| v * inv * g).collect()
        })
        .collect()
}

fn rope(v: &mut [f64], pos: usize, base: f64) {
    let hd = v.len();
    let half = hd / 2;
    for p in 0..half {
        let theta = pos as f64 / base.powf(2.0 * p as f64 / hd as f64);
        let (a, b) = (v[p], v[p + half]);
        v[p] = a * theta.cos() - b * theta.sin();
        v[p + half] = b * theta.cos() + a * theta.sin();
    }
}

/// Tape-free forward: plain nested loops, one token row at a time.
fn straight_line(model: &ModelBundle, tokens: &[u32]) -> Mat {
    let cfg = model.config();
    let (heads, hd) = (cfg.num_heads, cfg.head_dim());
    let embed = mat(model.embed());
    let mut x: Mat = tokens.iter().map(|&t| embed[t as usize].clone()).collect();
    for (l, w) in model.layers().iter().enumerate() {
        let n1 = rms(&x, w.norm1.data(), cfg.norm_epsilon);
        let mut q = matmul(&n1, &mat(&w.wq));
        let mut k = matmul(&n1, &mat(&w.wk));
        let v = matmul(&n1, &mat(&w.wv));
        for (pos, (qr, kr)) in q.iter_mut().zip(k.iter_mut()).enumerate() {
            for h in 0..heads {
                rope(&mut qr[h * hd..(h + 1) * hd], pos, cfg.rope_base);
                rope(&mut kr[h * hd..(h + 1) * hd], pos, cfg.rope_base);
            }
        }
        let mut mixed = vec![vec![0.0; cfg.hidden_dim]; tokens.len()];
        for h in 0..heads {
            let r = h * hd..(h + 1) * hd;
            for i in 0..tokens.len() {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in r.clone() {
                        mixed[i][c] += ej / z * v[j][c];
                    }
                }
            }
        }
        let attn = matmul(&mixed, &mat(&w.wo));
        for (xr, ar) in x.iter_mut().zip(&attn) {
            xr.iter_mut().zip(ar).for_each(|(a, b)| *a += b);
        }
        let n2 = rms(&x, w.norm2.data(), cfg.norm_epsilon);
        let gate = matmul(&n2, &mat(&w.gate));
        let up = matmul(&n2, &mat(&w.up));
        let act: Mat = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| g.iter().zip(u).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect())
            .collect();
        let down = matmul(&act, &mat(&w.down));
        for (xr, dr) in x.iter_mut().zip(&down) {
            xr.iter_mut().zip(dr).for_each(|(a, b)| *a += b);
        }
        if l + 1 == cfg.num_layers {
            x = rms(&x, model.final_norm().data(), cfg.norm_epsilon);
        }
    }
    x
}

const TOKENS: [u32; 8] = [0, 17, 42, 5, 99, 1, 63, 8];

#[test]
fn forward_matches_straight_line_oracle() {
    let model = toy_model(21);
    let (states, _) = forward_full(&model, &TOKENS).unwrap();
    let oracle = straight_line(&model, &TOKENS);
    for (pos, row) in oracle.iter().enumerate() {
        for (a, b) in states.state(3, pos).iter().zip(row) {
            assert!((a - b).abs() < 1e-10, "pos {pos}: {a} vs {b}");
        }
    }
}

#[test]
fn logits_match_matrix_product_oracle() {
    let model = toy_model(21);
    let (states, _) = forward_full(&model, &TOKENS).unwrap();
    let h = straight_line(&model, &TOKENS);
    let unembed = mat(model.unembed());
    let want = matmul(&h, &unembed);
    for pos in [0, 7] {
        let got = logits_at(&model, &states, pos).unwrap();
        for (a, b) in got.0.iter().zip(&want[pos]) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn single_token_states() {
    let model = toy_model(2);
    let (states, _) = forward_full(&model, &[42]).unwrap();
    assert_eq!(states.tensor().shape(), &[5, 1, 32]);
    assert_eq!(states.state(-1, 0), model.embed().row(42));
}

#[test]
fn embedding_slot_is_an_exact_gather() {
    let model = toy_model(2);
    let (states, _) = forward_full(&model, &TOKENS).unwrap();
    for (pos, &t) in TOKENS.iter().enumerate() {
        assert_eq!(states.state(-1, pos), model.embed().row(t as usize));
    }
}

#[test]
fn later_tokens_never_change_earlier_states() {
    let model = toy_model(5);
    let (a, _) = forward_full(&model, &TOKENS).unwrap();
    for j in 1..TOKENS.len() {
        let mut changed = TOKENS;
        changed[j] = (changed[j] + 13) % 101;
        let (b, _) = forward_full(&model, &changed).unwrap();
        for layer in -1..4 {
            for pos in 0..j {
                assert_eq!(a.state(layer, pos), b.state(layer, pos));
            }
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let model = toy_model(5);
    let (a, _) = forward_full(&model, &TOKENS).unwrap();
    let (b, _) = forward_full(&model, &TOKENS).unwrap();
    assert_eq!(a.tensor(), b.tensor());
}

#[test]
fn save_load_round_trip_is_bit_identical() {
    let model = toy_model(7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.atgw");
    model.save(&path).unwrap();
    let back = ModelBundle::load(&path).unwrap();
    assert_eq!(back.to_bytes(), model.to_bytes());
    assert_eq!(back.fingerprint(), model.fingerprint());
    let (a, _) = forward_full(&model, &TOKENS).unwrap();
    let (b, _) = forward_full(&back, &TOKENS).unwrap();
    assert_eq!(a.tensor(), b.tensor());
}

#[test]
fn damaged_files_are_rejected() {
    let bytes = toy_model(7).to_bytes();
    let truncated = &bytes[..bytes.len() - 1000];
    assert!(matches!(ModelBundle::from_bytes(truncated), Err(LoadError::ShapeMismatch(_))));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(ModelBundle::from_bytes(&magic), Err(LoadError::BadMagic(_))));

    let mut flipped = bytes.clone();
    let mid = bytes.len() - 100;
    flipped[mid] ^= 0x40;
    assert!(matches!(ModelBundle::from_bytes(&flipped), Err(LoadError::Checksum { .. })));

    let missing = attrigraph_core::model::load_model("/nonexistent/model.atgw");
    assert!(matches!(missing, Err(Error::Load(LoadError::Io(_)))));
}

#[test]
fn zero_state_gives_zero_logits() {
    let model = toy_model(1);
    let states = LayerStates::new(Tensor::zeros(vec![5, 1, 32])).unwrap();
    assert!(logits_at(&model, &states, 0).unwrap().0.iter().all(|&l| l == 0.0));
}

/// One block with all-zero weights is the identity on the residual stream;
/// with orthogonal tied embeddings the greedy token is the input token.
#[test]
fn orthogonal_tied_embeddings_echo_the_input() {
    let d = 16;
    let config = ModelConfig {
        num_layers: 1,
        hidden_dim: d,
        num_heads: 2,
        intermediate_dim: 8,
        vocab_size: d,
        tied_unembedding: true,
        special_token_ids: [0].into(),
        ..toy_config()
    };
    let mut embed = Tensor::zeros(vec![d, d]);
    for t in 0..d {
        embed.data_mut()[t * d + (t * 5) % d] = if t % 2 == 0 { 2.0 } else { -3.0 };
    }
    let zero = |shape: Vec<usize>| Arc::new(Tensor::zeros(shape));
    let block = LayerWeights {
        wq: zero(vec![d, d]),
        wk: zero(vec![d, d]),
        wv: zero(vec![d, d]),
        wo: zero(vec![d, d]),
        gate: zero(vec![d, 8]),
        up: zero(vec![d, 8]),
        down: zero(vec![8, d]),
        norm1: Arc::new(Tensor::filled(vec![d], 1.0)),
        norm2: Arc::new(Tensor::filled(vec![d], 1.0)),
    };
    let model = ModelBundle::new(config, embed, None, vec![block], Tensor::filled(vec![d], 1.0)).unwrap();
    for t in 0..d as u32 {
        assert_eq!(next_token_logits(&model, &[t], 0).unwrap().argmax(), t);
    }
}

#[test]
fn config_validation() {
    let bad = ModelConfig { num_heads: 5, ..toy_config() };
    assert!(random_model(toy_config(), 0).config().validate().is_ok());
    assert!(bad.validate().is_err());
    let odd = ModelConfig { hidden_dim: 12, num_heads: 4, ..toy_config() };
    assert!(odd.validate().is_err(), "head dim 3 cannot be rotated in pairs");
}
