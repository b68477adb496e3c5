// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeRelevances;

/// Relevance of the prediction position across layers `-1..L-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceProfile {
    pub raw: Vec<f64>,
    /// `(R^(l) − R^(−1)) / |R^(L−1)|`; `None` when the final relevance is zero.
    pub normalized: Option<Vec<f64>>,
    pub degenerate: bool,
}

impl RelevanceProfile {
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        let (first, last) = match (raw.first(), raw.last()) {
            (Some(&f), Some(&l)) => (f, l),
            _ => return Err(Error::input("relevance profile needs at least one layer")),
        };
        if last == 0.0 {
            return Ok(Self { raw, normalized: None, degenerate: true });
        }
        let scale = last.abs();
        let normalized = raw.iter().map(|r| (r - first) / scale).collect();
        Ok(Self { raw, normalized: Some(normalized), degenerate: false })
    }
}

/// Reads `R^(l)` at `position` for every layer.
pub fn relevance_profile(relev: &NodeRelevances, position: usize) -> Result<RelevanceProfile> {
    if position >= relev.seq_len() {
        return Err(Error::input(format!("position {position} outside sequence of {}", relev.seq_len())));
    }
    let raw = (-1..relev.num_layers() as i32).map(|l| relev.relevance(l, position)).collect();
    RelevanceProfile::from_raw(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reported_averages() {
        let p = RelevanceProfile::from_raw(vec![0.66, 5.0, 18.85]).unwrap();
        let n = p.normalized.unwrap();
        assert_eq!(n[0], 0.0);
        assert!((n[2] - 0.9650).abs() < 1e-4);
    }

    #[test]
    fn constant_profile_is_zero() {
        let p = RelevanceProfile::from_raw(vec![-2.0; 4]).unwrap();
        assert_eq!(p.normalized.unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn zero_final_relevance_is_degenerate() {
        let p = RelevanceProfile::from_raw(vec![1.0, 0.0]).unwrap();
        assert!(p.degenerate && p.normalized.is_none());
        assert!(RelevanceProfile::from_raw(vec![]).is_err());
    }
}
