// SPDX-License-Identifier: MIT OR Apache-2.0

//! Eager tape: every primitive is evaluated as it is recorded, and the tape
//! keeps its output so the backward pass can read saved activations.
//!
//! The backward pass accepts a *fanned-out* seed: when the output node has a
//! leading dimension of 1, the seed may carry `B` independent cotangents
//! along that axis. Every saved activation is then broadcast over the `B`
//! cotangents, which is exactly what a forward over `B` identical replicas
//! would store, without running the forward `B` times.

use std::sync::Arc;

use super::rules::RuleSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of an activation-by-activation matrix product. The role decides
/// which factor is detached under the conservative-propagation rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProductKind {
    /// Generic product of two activations.
    Bilinear,
    /// Query-key product feeding a softmax.
    AttentionScores,
    /// Attention weights (left) times values (right).
    AttentionValues,
}

#[derive(Debug, Clone)]
enum Op {
    Input { slot: usize },
    Linear { x: NodeId, weight: Arc<Tensor>, bias: Option<Arc<Tensor>> },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    RmsNorm { x: NodeId, weight: Arc<Tensor>, eps: f64 },
    Silu { x: NodeId },
    Rope { x: NodeId, base: f64 },
    SplitHeads { x: NodeId, heads: usize },
    MergeHeads { x: NodeId },
    MatMul { a: NodeId, b: NodeId, transpose_b: bool, kind: ProductKind },
    CausalSoftmax { x: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Silu { .. } => "silu",
            Op::Rope { .. } => "rope",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::MatMul { .. } => "matmul",
            Op::CausalSoftmax { .. } => "causal_softmax",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input { .. } => vec![],
            Op::Linear { x, .. }
            | Op::Scale { x, .. }
            | Op::RmsNorm { x, .. }
            | Op::Silu { x }
            | Op::Rope { x, .. }
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads { x }
            | Op::CausalSoftmax { x } => vec![x],
            Op::Add { a, b } | Op::Mul { a, b } | Op::MatMul { a, b, .. } => vec![a, b],
        }
    }
}

/// Ordered record of primitives together with their saved outputs.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    input_count: usize,
}

/// Patched gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient at `node`, or `None` when nothing flowed into it.
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, node: NodeId) -> Option<Tensor> {
        self.grads.get_mut(node.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    /// Registers a leaf. Empty tensors are rejected.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        if value.is_empty() {
            return Err(Error::input("zero-length input tensor"));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("input"));
        }
        let slot = self.input_count;
        self.input_count += 1;
        self.ops.push(Op::Input { slot });
        self.values.push(value);
        Ok(NodeId(self.ops.len() - 1))
    }

    /// `x · weight (+ bias)` over the trailing dimension; `weight` is `[k, m]`.
    pub fn linear(&mut self, x: NodeId, weight: Arc<Tensor>, bias: Option<Arc<Tensor>>) -> Result<NodeId> {
        self.record(Op::Linear { x, weight, bias })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add { a, b })
    }

    /// Elementwise product of two activations.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.record(Op::Scale { x, factor })
    }

    /// RMS normalization over the trailing dimension followed by a learned scale.
    pub fn rms_norm(&mut self, x: NodeId, weight: Arc<Tensor>, eps: f64) -> Result<NodeId> {
        self.record(Op::RmsNorm { x, weight, eps })
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Silu { x })
    }

    /// Rotary position embedding on `[batch, heads, seq, head_dim]` using the
    /// half-split pairing `(p, p + head_dim/2)`.
    pub fn rope(&mut self, x: NodeId, base: f64) -> Result<NodeId> {
        self.record(Op::Rope { x, base })
    }

    /// `[batch, seq, d]` to `[batch, heads, seq, d/heads]`.
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        self.record(Op::SplitHeads { x, heads })
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::MergeHeads { x })
    }

    /// Batched product of two activations over the last two axes,
    /// optionally transposing the right operand.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool, kind: ProductKind) -> Result<NodeId> {
        self.record(Op::MatMul { a, b, transpose_b, kind })
    }

    /// Row softmax over the last axis of `[..., n, n]` with future positions masked.
    pub fn causal_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::CausalSoftmax { x })
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        if let Some(bad) = op.operands().into_iter().find(|id| id.0 >= self.values.len()) {
            return Err(Error::input(format!("{} references unknown node {}", op.name(), bad.0)));
        }
        let out = eval(&op, &self.values, &[])?;
        if !out.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.ops.push(op);
        self.values.push(out);
        Ok(NodeId(self.ops.len() - 1))
    }

    /// Re-executes every record from fresh leaf values and returns the
    /// outputs of all non-input records, in recording order.
    pub fn replay(&mut self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        if inputs.len() < self.input_count {
            return Err(Error::input(format!("tape has {} inputs, {} provided", self.input_count, inputs.len())));
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        for (idx, op) in self.ops.iter().enumerate() {
            let out = eval(op, &values, inputs)?;
            if out.shape() != self.values[idx].shape() {
                return Err(Error::shape(format!(
                    "{} at record {idx}: recorded {:?}, replayed {:?}",
                    op.name(),
                    self.values[idx].shape(),
                    out.shape()
                )));
            }
            if !out.is_finite() {
                return Err(Error::NonFinite(op.name()));
            }
            values.push(out);
        }
        self.values = values;
        Ok(self
            .ops
            .iter()
            .zip(&self.values)
            .filter(|(op, _)| !matches!(op, Op::Input { .. }))
            .map(|(_, v)| v.clone())
            .collect())
    }

    /// Reverse pass from `output`, seeded with `seed`.
    ///
    /// `seed` either matches the output shape, or (when the output's leading
    /// dimension is 1) has shape `[B, rest...]` to push `B` cotangents through
    /// the same saved activations at once. Returned gradients then carry the
    /// leading `B` axis everywhere.
    pub fn backward(&self, output: NodeId, seed: &Tensor, rules: &RuleSet) -> Result<Gradients> {
        let out_value =
            self.values.get(output.0).ok_or_else(|| Error::input(format!("unknown output node {}", output.0)))?;
        let fanned = seed.shape() != out_value.shape();
        if fanned {
            let ok = out_value.batch() == 1
                && seed.rank() == out_value.rank()
                && seed.shape()[1..] == out_value.shape()[1..];
            if !ok {
                return Err(Error::shape(format!(
                    "seed {:?} incompatible with output {:?}",
                    seed.shape(),
                    out_value.shape()
                )));
            }
        }
        if !seed.is_finite() {
            return Err(Error::NonFinite("seed"));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let op = &self.ops[idx];
            let contributions = self.backward_op(op, idx, &grad, rules)?;
            for (node, g) in contributions {
                if !g.is_finite() {
                    return Err(Error::NonFinite(op.name()));
                }
                accumulate(&mut grads[node.0], g);
            }
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn backward_op(&self, op: &Op, idx: usize, g: &Tensor, rules: &RuleSet) -> Result<Vec<(NodeId, Tensor)>> {
        let v = &self.values;
        let out = match *op {
            Op::Input { .. } => vec![],
            Op::Linear { x, ref weight, .. } => {
                let k = weight.shape()[0];
                let m = weight.shape()[1];
                let rows = g.len() / m;
                let mut gx = vec![0.0; rows * k];
                matmul_bt(g.data(), weight.data(), rows, m, k, &mut gx);
                vec![(x, shaped_like(&v[x.0], g, gx)?)]
            }
            Op::Add { a, b } => {
                vec![(a, shaped_like(&v[a.0], g, g.data().to_vec())?), (b, shaped_like(&v[b.0], g, g.data().to_vec())?)]
            }
            Op::Mul { a, b } => {
                let factor = if rules.splits_products() { 0.5 } else { 1.0 };
                let (av, bv) = (&v[a.0], &v[b.0]);
                let n = av.len();
                let ga = g.data().iter().enumerate().map(|(e, gv)| factor * gv * bv.data()[e % n]).collect();
                let gb = g.data().iter().enumerate().map(|(e, gv)| factor * gv * av.data()[e % n]).collect();
                vec![(a, shaped_like(av, g, ga)?), (b, shaped_like(bv, g, gb)?)]
            }
            Op::Scale { x, factor } => {
                let gx = g.data().iter().map(|gv| gv * factor).collect();
                vec![(x, shaped_like(&v[x.0], g, gx)?)]
            }
            Op::RmsNorm { x, ref weight, eps } => {
                let xv = &v[x.0];
                let d = xv.last_dim();
                let act_rows = xv.len() / d;
                let rows = g.len() / d;
                let w = weight.data();
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    if grow.iter().all(|&e| e == 0.0) {
                        continue;
                    }
                    let ar = r % act_rows;
                    let xrow = &xv.data()[ar * d..(ar + 1) * d];
                    let inv = inv_rms(xrow, eps);
                    let dst = &mut gx[r * d..(r + 1) * d];
                    if rules.freezes_norm() {
                        for c in 0..d {
                            dst[c] = grow[c] * w[c] * inv;
                        }
                    } else {
                        let dot: f64 = (0..d).map(|c| grow[c] * w[c] * xrow[c]).sum();
                        let coef = inv * inv * inv * dot / d as f64;
                        for c in 0..d {
                            dst[c] = inv * grow[c] * w[c] - xrow[c] * coef;
                        }
                    }
                }
                vec![(x, shaped_like(xv, g, gx)?)]
            }
            Op::Silu { x } => {
                let xv = &v[x.0];
                let n = xv.len();
                let gx = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(e, gv)| {
                        let xe = xv.data()[e % n];
                        let s = sigmoid(xe);
                        gv * s * (1.0 + xe * (1.0 - s))
                    })
                    .collect();
                vec![(x, shaped_like(xv, g, gx)?)]
            }
            Op::Rope { x, base } => {
                let shape = g.shape();
                let (seq, hd) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let gx = rope_apply(g.data(), seq, hd, base, true);
                vec![(x, shaped_like(&v[x.0], g, gx)?)]
            }
            Op::SplitHeads { x, .. } => {
                let gx = merge_heads_data(g.data(), g.shape());
                vec![(x, shaped_like(&v[x.0], g, gx)?)]
            }
            Op::MergeHeads { x } => {
                let heads = v[x.0].shape()[1];
                let gx = split_heads_data(g.data(), g.shape(), heads);
                vec![(x, shaped_like(&v[x.0], g, gx)?)]
            }
            Op::MatMul { a, b, transpose_b, kind } => {
                let (fa, fb) = match (rules.variant(), kind) {
                    (super::RuleVariant::Gradient, _) => (1.0, 1.0),
                    (super::RuleVariant::Attnlrp, _) => (0.5, 0.5),
                    (super::RuleVariant::Cplrp, ProductKind::AttentionValues) => (0.0, 1.0),
                    (super::RuleVariant::Cplrp, ProductKind::AttentionScores) => (1.0, 1.0),
                    (super::RuleVariant::Cplrp, ProductKind::Bilinear) => {
                        return Err(Error::UnsupportedRule { variant: "cplrp", op: "bilinear matmul" });
                    }
                };
                matmul_backward(&v[a.0], &v[b.0], transpose_b, g, fa, fb)?
                    .into_iter()
                    .zip([a, b])
                    .filter_map(|(t, id)| t.map(|t| (id, t)))
                    .collect()
            }
            Op::CausalSoftmax { x } => {
                if rules.detaches_attention() {
                    vec![]
                } else {
                    let y = &v[idx];
                    let n = y.last_dim();
                    let act_rows = y.len() / n;
                    let rows = g.len() / n;
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let grow = &g.data()[r * n..(r + 1) * n];
                        if grow.iter().all(|&e| e == 0.0) {
                            continue;
                        }
                        let ar = r % act_rows;
                        let yrow = &y.data()[ar * n..(ar + 1) * n];
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            gx[r * n + c] = yrow[c] * (grow[c] - dot);
                        }
                    }
                    vec![(x, shaped_like(&v[x.0], g, gx)?)]
                }
            }
        };
        Ok(out)
    }
}

/// Elementwise `activation ⊙ gradient`, optionally summed over `reduce_dims`.
pub fn relevance(activation: &Tensor, gradient: &Tensor, reduce_dims: Option<&[usize]>) -> Result<Tensor> {
    let prod = activation.hadamard(gradient)?;
    match reduce_dims {
        Some(axes) => prod.sum_axes(axes),
        None => Ok(prod),
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Gradient for `act` whose cotangent batch follows `g`.
fn shaped_like(act: &Tensor, g: &Tensor, data: Vec<f64>) -> Result<Tensor> {
    let mut shape = act.shape().to_vec();
    if data.len() != act.len() {
        shape[0] = g.batch();
    }
    Tensor::new(shape, data)
}

fn eval(op: &Op, values: &[Tensor], inputs: &[Tensor]) -> Result<Tensor> {
    match *op {
        Op::Input { slot } => {
            if inputs.is_empty() {
                // Recording path: the leaf value is pushed by `Tape::input`.
                unreachable!("inputs are recorded directly");
            }
            inputs.get(slot).cloned().ok_or_else(|| Error::input(format!("missing input {slot}")))
        }
        Op::Linear { x, ref weight, ref bias } => {
            let xv = &values[x.0];
            if weight.rank() != 2 || xv.last_dim() != weight.shape()[0] {
                return Err(Error::shape(format!("linear: input {:?} with weight {:?}", xv.shape(), weight.shape())));
            }
            let (k, m) = (weight.shape()[0], weight.shape()[1]);
            let rows = xv.len() / k;
            let mut out = vec![0.0; rows * m];
            matmul_into(xv.data(), weight.data(), rows, k, m, &mut out);
            if let Some(bias) = bias {
                if bias.len() != m {
                    return Err(Error::shape(format!("linear: bias {:?} for width {m}", bias.shape())));
                }
                for row in out.chunks_mut(m) {
                    for (o, b) in row.iter_mut().zip(bias.data()) {
                        *o += b;
                    }
                }
            }
            let mut shape = xv.shape().to_vec();
            *shape.last_mut().expect("rank >= 1") = m;
            Tensor::new(shape, out)
        }
        Op::Add { a, b } => {
            let (av, bv) = (&values[a.0], &values[b.0]);
            av.check_same_shape(bv, "add")?;
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            Tensor::new(av.shape().to_vec(), data)
        }
        Op::Mul { a, b } => values[a.0].hadamard(&values[b.0]),
        Op::Scale { x, factor } => {
            let xv = &values[x.0];
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * factor).collect())
        }
        Op::RmsNorm { x, ref weight, eps } => {
            let xv = &values[x.0];
            let d = xv.last_dim();
            if weight.len() != d {
                return Err(Error::shape(format!("rms_norm: weight {:?} for width {d}", weight.shape())));
            }
            let mut out = vec![0.0; xv.len()];
            for (src, dst) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
                let inv = inv_rms(src, eps);
                for c in 0..d {
                    dst[c] = src[c] * inv * weight.data()[c];
                }
            }
            Tensor::new(xv.shape().to_vec(), out)
        }
        Op::Silu { x } => {
            let xv = &values[x.0];
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * sigmoid(v)).collect())
        }
        Op::Rope { x, base } => {
            let xv = &values[x.0];
            if xv.rank() < 2 || xv.last_dim() % 2 != 0 {
                return Err(Error::shape(format!("rope: needs even head dim, got {:?}", xv.shape())));
            }
            let shape = xv.shape();
            let (seq, hd) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            Tensor::new(shape.to_vec(), rope_apply(xv.data(), seq, hd, base, false))
        }
        Op::SplitHeads { x, heads } => {
            let xv = &values[x.0];
            if xv.rank() != 3 || heads == 0 || xv.last_dim() % heads != 0 {
                return Err(Error::shape(format!("split_heads: {:?} into {heads} heads", xv.shape())));
            }
            let s = xv.shape();
            Tensor::new(vec![s[0], heads, s[1], s[2] / heads], split_heads_data(xv.data(), s, heads))
        }
        Op::MergeHeads { x } => {
            let xv = &values[x.0];
            if xv.rank() != 4 {
                return Err(Error::shape(format!("merge_heads: {:?}", xv.shape())));
            }
            let s = xv.shape();
            Tensor::new(vec![s[0], s[2], s[1] * s[3]], merge_heads_data(xv.data(), s))
        }
        Op::MatMul { a, b, transpose_b, .. } => matmul_forward(&values[a.0], &values[b.0], transpose_b),
        Op::CausalSoftmax { x } => {
            let xv = &values[x.0];
            let s = xv.shape();
            if xv.rank() < 2 || s[s.len() - 1] != s[s.len() - 2] {
                return Err(Error::shape(format!("causal_softmax: needs [.., n, n], got {s:?}")));
            }
            let n = xv.last_dim();
            let mut out = vec![0.0; xv.len()];
            for (r, (src, dst)) in xv.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
                let q = r % n;
                let max = src[..=q].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for c in 0..=q {
                    dst[c] = (src[c] - max).exp();
                    total += dst[c];
                }
                for v in &mut dst[..=q] {
                    *v /= total;
                }
            }
            Tensor::new(s.to_vec(), out)
        }
    }
}

fn inv_rms(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    1.0 / (ms + eps).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Applies the rotation (or its transpose when `inverse`) to a tensor whose
/// last two axes are `[seq, head_dim]`.
fn rope_apply(data: &[f64], seq: usize, hd: usize, base: f64, inverse: bool) -> Vec<f64> {
    let half = hd / 2;
    let mut out = vec![0.0; data.len()];
    let sign = if inverse { -1.0 } else { 1.0 };
    for (r, (src, dst)) in data.chunks(hd).zip(out.chunks_mut(hd)).enumerate() {
        let pos = (r % seq) as f64;
        for p in 0..half {
            let theta = pos * base.powf(-2.0 * p as f64 / hd as f64);
            let (sin, cos) = theta.sin_cos();
            let (x1, x2) = (src[p], src[p + half]);
            dst[p] = x1 * cos - sign * x2 * sin;
            dst[p + half] = x2 * cos + sign * x1 * sin;
        }
    }
    out
}

fn split_heads_data(data: &[f64], shape: &[usize], heads: usize) -> Vec<f64> {
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let hd = d / heads;
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        for p in 0..n {
            for h in 0..heads {
                let src = (bi * n + p) * d + h * hd;
                let dst = ((bi * heads + h) * n + p) * hd;
                out[dst..dst + hd].copy_from_slice(&data[src..src + hd]);
            }
        }
    }
    out
}

fn merge_heads_data(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let (b, heads, n, hd) = (shape[0], shape[1], shape[2], shape[3]);
    let d = heads * hd;
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        for h in 0..heads {
            for p in 0..n {
                let src = ((bi * heads + h) * n + p) * hd;
                let dst = (bi * n + p) * d + h * hd;
                out[dst..dst + hd].copy_from_slice(&data[src..src + hd]);
            }
        }
    }
    out
}

/// Matrix dims `(m, k, n, count)` of a batched product, validating shapes.
fn product_dims(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<(usize, usize, usize, usize)> {
    let err = || Error::shape(format!("matmul: {:?} x {:?} (transpose_b={transpose_b})", a.shape(), b.shape()));
    if a.rank() < 3 || a.rank() != b.rank() || a.shape()[..a.rank() - 2] != b.shape()[..b.rank() - 2] {
        return Err(err());
    }
    let r = a.rank();
    let (m, k) = (a.shape()[r - 2], a.shape()[r - 1]);
    let (bk, n) = if transpose_b { (b.shape()[r - 1], b.shape()[r - 2]) } else { (b.shape()[r - 2], b.shape()[r - 1]) };
    if bk != k {
        return Err(err());
    }
    let count = a.len() / (m * k).max(1);
    Ok((m, k, n, count))
}

fn matmul_forward(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let (m, k, n, count) = product_dims(a, b, transpose_b)?;
    let mut out = vec![0.0; count * m * n];
    let bsize = k * n;
    for mi in 0..count {
        let am = &a.data()[mi * m * k..(mi + 1) * m * k];
        let bm = &b.data()[mi * bsize..(mi + 1) * bsize];
        let om = &mut out[mi * m * n..(mi + 1) * m * n];
        if transpose_b {
            matmul_bt(am, bm, m, k, n, om);
        } else {
            matmul_into(am, bm, m, k, n, om);
        }
    }
    let mut shape = a.shape().to_vec();
    let r = shape.len();
    shape[r - 1] = n;
    Tensor::new(shape, out)
}

/// Gradients of a batched product, scaled per factor; a zero factor yields
/// no gradient. Operands may have a batch of 1 while `g` is fanned out.
fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    transpose_b: bool,
    g: &Tensor,
    fa: f64,
    fb: f64,
) -> Result<[Option<Tensor>; 2]> {
    let (m, k, n, count) = product_dims(a, b, transpose_b)?;
    let g_count = g.len() / (m * n);
    let bsize = k * n;
    let mut ga = (fa != 0.0).then(|| vec![0.0; g_count * m * k]);
    let mut gb = (fb != 0.0).then(|| vec![0.0; g_count * bsize]);
    for gi in 0..g_count {
        let ai = gi % count;
        let am = &a.data()[ai * m * k..(ai + 1) * m * k];
        let bm = &b.data()[ai * bsize..(ai + 1) * bsize];
        let gm = &g.data()[gi * m * n..(gi + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            let dst = &mut ga[gi * m * k..(gi + 1) * m * k];
            if transpose_b {
                // b is [n, k]: dA = dC · B
                matmul_into(gm, bm, m, n, k, dst);
            } else {
                // b is [k, n]: dA = dC · Bᵀ
                matmul_bt(gm, bm, m, n, k, dst);
            }
            dst.iter_mut().for_each(|v| *v *= fa);
        }
        if let Some(gb) = gb.as_mut() {
            let dst = &mut gb[gi * bsize..(gi + 1) * bsize];
            for i in 0..m {
                let grow = &gm[i * n..(i + 1) * n];
                if grow.iter().all(|&e| e == 0.0) {
                    continue;
                }
                let arow = &am[i * k..(i + 1) * k];
                if transpose_b {
                    // dB[j, :] += dC[i, j] * A[i, :]
                    for (j, &gv) in grow.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let row = &mut dst[j * k..(j + 1) * k];
                        for (d, &av) in row.iter_mut().zip(arow) {
                            *d += fb * gv * av;
                        }
                    }
                } else {
                    // dB[kk, :] += A[i, kk] * dC[i, :]
                    for (kk, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let row = &mut dst[kk * n..(kk + 1) * n];
                        for (d, &gv) in row.iter_mut().zip(grow) {
                            *d += fb * av * gv;
                        }
                    }
                }
            }
        }
    }
    let shape_of = |t: &Tensor, data: Vec<f64>| -> Result<Tensor> {
        let mut shape = t.shape().to_vec();
        if data.len() != t.len() {
            shape[0] = g.batch();
        }
        Tensor::new(shape, data)
    };
    Ok([ga.map(|d| shape_of(a, d)).transpose()?, gb.map(|d| shape_of(b, d)).transpose()?])
}

/// `out[m, n] = a[m, k] · b[k, n]`, skipping zero rows of `a`.
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, n] = a[m, k] · b[n, k]ᵀ`, skipping zero rows of `a`.
fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        if arow.iter().all(|&e| e == 0.0) {
            continue;
        }
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}
