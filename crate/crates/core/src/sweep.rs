// SPDX-License-Identifier: MIT OR Apache-2.0

//! Wall-time and backward-call sweeps over sequence length and batch size.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attribution::synthetic_cases;
use crate::engine::RuleSet;
use crate::error::{Error, Result};
use crate::graph::{edge_matrix, node_pass, BatchPlan, InteractionMatrix};
use crate::model::ModelBundle;

/// One `(n, B)` measurement over every requested layer pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seq_len: usize,
    pub batch_size: usize,
    /// Fastest of the repeats, edge matrices only.
    pub wall_seconds: f64,
    /// Backward calls per layer pair.
    pub backward_calls: usize,
    /// `⌈n / B⌉`.
    pub expected_calls: usize,
    pub layer_pairs: usize,
    /// Largest entry difference against the first batch size of the same length.
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub lengths: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub layer_pairs: Vec<(i32, i32)>,
    pub repeats: usize,
    pub seed: u64,
}

/// Builds one seeded case per length and times the interaction matrices at
/// each batch size. Content tokens are drawn from ids `>= first_content`.
pub fn efficiency_sweep(
    model: &ModelBundle,
    rules: &RuleSet,
    config: &SweepConfig,
    first_content: u32,
) -> Result<Vec<SweepRow>> {
    if config.lengths.is_empty() || config.batch_sizes.is_empty() || config.repeats == 0 {
        return Err(Error::input("sweep needs lengths, batch sizes and at least one repeat"));
    }
    crate::graph::validate_pairs(&config.layer_pairs, model.config().num_layers)?;
    let plans = config.batch_sizes.iter().map(|&b| BatchPlan::new(b)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &n in &config.lengths {
        let case = synthetic_cases(model, 1, config.seed ^ n as u64, n..=n, first_content)?.remove(0);
        let relev = node_pass(model, &case, rules)?;
        let targets: Vec<usize> = (0..n).collect();
        let mut reference: Option<Vec<InteractionMatrix>> = None;
        for plan in &plans {
            let mut best = f64::INFINITY;
            let mut matrices = Vec::new();
            for _ in 0..config.repeats {
                let start = Instant::now();
                matrices = config
                    .layer_pairs
                    .iter()
                    .map(|&(s, t)| edge_matrix(model, relev.states(), &relev, s, t, &targets, plan, rules))
                    .collect::<Result<Vec<_>>>()?;
                best = best.min(start.elapsed().as_secs_f64());
            }
            let max_abs_diff = match &reference {
                Some(r) => r.iter().zip(&matrices).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max),
                None => 0.0,
            };
            let calls = matrices.iter().map(|m| m.backward_calls).max().unwrap_or(0);
            rows.push(SweepRow {
                seq_len: n,
                batch_size: plan.batch_size(),
                wall_seconds: best,
                backward_calls: calls,
                expected_calls: plan.expected_calls(n),
                layer_pairs: matrices.len(),
                max_abs_diff,
            });
            reference.get_or_insert(matrices);
        }
    }
    Ok(rows)
}
