// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod analysis;
pub mod attribution;
pub mod engine;
pub mod error;
pub mod graph;
pub mod model;
pub mod sweep;

pub use error::{Error, LoadError, Result};
