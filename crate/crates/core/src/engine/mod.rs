// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense `f64` tensors and a reverse-mode tape whose backward rules are
//! patched so that gradient×input reads out LRP relevance.
//!
//! Rule patches by variant:
//!
//! | primitive              | `gradient` | `attnlrp`            | `cplrp`                    |
//! |------------------------|------------|----------------------|----------------------------|
//! | linear / affine        | standard   | standard             | standard                   |
//! | RMS norm               | standard   | statistic frozen     | statistic frozen           |
//! | elementwise product    | standard   | half to each factor  | half to each factor        |
//! | attention `A·V`        | standard   | half to each factor  | `A` detached, `V` gets all |
//! | attention `Q·Kᵀ`       | standard   | half to each factor  | standard (softmax detached)|
//! | softmax                | standard   | standard             | detached                   |
//! | SiLU, RoPE, reshapes   | standard   | standard             | standard                   |
//!
//! Biases absorb their own share of relevance; nothing is redistributed.

mod rules;
mod tape;
mod tensor;

pub use rules::{RuleSet, RuleVariant};
pub use tape::{relevance, Gradients, NodeId, ProductKind, Tape};
pub use tensor::Tensor;
