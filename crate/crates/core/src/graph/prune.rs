// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MASS: f64 = 0.85;
pub const DEFAULT_NODE_THRESHOLD: f64 = 0.01;

/// Edge selection rule. Exactly one parameter is consulted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PruneMode {
    /// Keep `|a| > tau`.
    Global { tau: f64 },
    /// Keep the smallest prefix of `|a|` (sorted descending) carrying at
    /// least a fraction `p` of the total mass, plus ties at the cut.
    Cumulative { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    #[serde(flatten)]
    pub mode: PruneMode,
    /// Nodes are kept when `|R| > node_threshold`.
    pub node_threshold: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { mode: PruneMode::Cumulative { p: DEFAULT_MASS }, node_threshold: DEFAULT_NODE_THRESHOLD }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            PruneMode::Global { tau } if !(tau.is_finite() && tau >= 0.0) => {
                return Err(Error::input(format!("tau must be finite and non-negative, got {tau}")));
            }
            PruneMode::Cumulative { p } if !(p > 0.0 && p <= 1.0) => {
                return Err(Error::input(format!("p must lie in (0, 1], got {p}")));
            }
            _ => {}
        }
        if !(self.node_threshold.is_finite() && self.node_threshold >= 0.0) {
            return Err(Error::input(format!("node threshold must be non-negative, got {}", self.node_threshold)));
        }
        Ok(())
    }
}

/// Result of a cumulative-mass cut.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeCut {
    /// Indices into the input, ascending.
    pub retained: Vec<usize>,
    /// `τ_p = a_(k*)`; `None` when every value is zero.
    pub tau: Option<f64>,
    pub k_star: usize,
    pub total_mass: f64,
}

/// Indices with `|values[i]| > tau`.
pub fn prune_global(values: &[f64], tau: f64) -> Vec<usize> {
    (0..values.len()).filter(|&i| values[i].abs() > tau).collect()
}

/// Smallest `k*` with `Σ_{k≤k*} a_(k) ≥ p·M` over `|values|` sorted
/// descending; keeps every nonzero entry with `|a| ≥ a_(k*)`.
pub fn prune_cumulative(values: &[f64], p: f64) -> CumulativeCut {
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).filter(|&a| a > 0.0).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let total_mass: f64 = mags.iter().sum();
    if mags.is_empty() {
        return CumulativeCut { retained: Vec::new(), tau: None, k_star: 0, total_mass: 0.0 };
    }
    let goal = p * total_mass;
    let mut prefix = 0.0;
    let mut k_star = mags.len();
    for (k, a) in mags.iter().enumerate() {
        prefix += a;
        if prefix >= goal {
            k_star = k + 1;
            break;
        }
    }
    let tau = mags[k_star - 1];
    let retained = (0..values.len()).filter(|&i| values[i] != 0.0 && values[i].abs() >= tau).collect();
    CumulativeCut { retained, tau: Some(tau), k_star, total_mass }
}

/// Applies a mode to a flat value list.
pub fn select(values: &[f64], mode: PruneMode) -> Vec<usize> {
    match mode {
        PruneMode::Global { tau } => prune_global(values, tau),
        PruneMode::Cumulative { p } => prune_cumulative(values, p).retained,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_keeps_ties_at_the_cut() {
        // M = 10, goal 8.5: prefix 5, 8, 9 -> k* = 3, τ = 1, both 1s kept
        let cut = prune_cumulative(&[5.0, 3.0, 1.0, 1.0], 0.85);
        assert_eq!(cut.k_star, 3);
        assert_eq!(cut.tau, Some(1.0));
        assert_eq!(cut.retained, vec![0, 1, 2, 3]);
    }

    #[test]
    fn cumulative_tie_at_first_entry() {
        // M = 10, goal 5: prefix 4, 8 -> k* = 2, τ = 4
        let cut = prune_cumulative(&[4.0, -4.0, 2.0], 0.5);
        assert_eq!(cut.k_star, 2);
        assert_eq!(cut.tau, Some(4.0));
        assert_eq!(cut.retained, vec![0, 1]);
    }

    #[test]
    fn all_zero_retains_nothing() {
        let cut = prune_cumulative(&[0.0, 0.0], 0.85);
        assert!(cut.retained.is_empty());
        assert_eq!(cut.tau, None);
    }

    #[test]
    fn global_is_strict() {
        assert_eq!(prune_global(&[1.0, -2.0, 0.5], 1.0), vec![1]);
    }

    #[test]
    fn config_json_shape() {
        let json = serde_json::to_value(PruneConfig::default()).unwrap();
        assert_eq!(json, serde_json::json!({"mode": "cumulative", "p": 0.85, "node_threshold": 0.01}));
        let g: PruneConfig = serde_json::from_str(r#"{"mode":"global","tau":0.1,"node_threshold":0}"#).unwrap();
        assert_eq!(g.mode, PruneMode::Global { tau: 0.1 });
        assert!(PruneConfig { mode: PruneMode::Cumulative { p: 0.0 }, node_threshold: 0.0 }.validate().is_err());
        assert!(PruneConfig { mode: PruneMode::Global { tau: -1.0 }, node_threshold: 0.0 }.validate().is_err());
    }
}
