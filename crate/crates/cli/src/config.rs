// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use attrigraph_core::attribution::ContrastCase;
use attrigraph_core::engine::{RuleSet, RuleVariant};
use attrigraph_core::graph::{consecutive_pairs, validate_pairs, BatchPlan, PruneConfig, PruneMode};
use attrigraph_core::model::{load_model, toy_model, ModelBundle};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// `toy`, `toy:<seed>`, or a path to an ATGW file.
pub fn load_model_spec(spec: &str) -> CliResult<ModelBundle> {
    if spec == "toy" {
        return Ok(toy_model(0));
    }
    if let Some(seed) = spec.strip_prefix("toy:") {
        let seed = seed.parse().map_err(|_| CliError::input(format!("bad toy seed in {spec:?}")))?;
        return Ok(toy_model(seed));
    }
    load_model(spec).map_err(|e| {
        let err = CliError::from(e);
        CliError { message: format!("{spec}: {}", err.message), ..err }
    })
}

/// `consecutive` or a comma list of `s:t` pairs such as `-1:0,0:3`.
pub fn parse_layer_pairs(spec: &str, num_layers: usize) -> CliResult<Vec<(i32, i32)>> {
    let pairs = if spec == "consecutive" {
        consecutive_pairs(num_layers)
    } else {
        spec.split(',')
            .map(|item| {
                let (s, t) = item
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| CliError::input(format!("layer pair {item:?} is not s:t")))?;
                let parse = |x: &str| x.parse::<i32>().map_err(|_| CliError::input(format!("bad layer {x:?}")));
                Ok((parse(s)?, parse(t)?))
            })
            .collect::<CliResult<Vec<_>>>()?
    };
    validate_pairs(&pairs, num_layers)?;
    Ok(pairs)
}

/// Comma list of positive integers.
pub fn parse_usize_list(spec: &str) -> CliResult<Vec<usize>> {
    spec.split(',')
        .map(|x| x.trim().parse().map_err(|_| CliError::input(format!("bad integer {x:?} in {spec:?}"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeFlag {
    Global,
    Cumulative,
}

/// Prune flags as given on the command line or in a query string.
pub fn prune_config(
    mode: ModeFlag,
    tau: Option<f64>,
    p: Option<f64>,
    node_threshold: Option<f64>,
) -> CliResult<PruneConfig> {
    let mode = match mode {
        ModeFlag::Global => {
            if p.is_some() {
                return Err(CliError::input("p applies to cumulative pruning; use tau with global mode"));
            }
            PruneMode::Global { tau: tau.ok_or_else(|| CliError::input("global pruning needs tau"))? }
        }
        ModeFlag::Cumulative => {
            if tau.is_some() {
                return Err(CliError::input("tau applies to global pruning; use p with cumulative mode"));
            }
            PruneMode::Cumulative { p: p.unwrap_or(attrigraph_core::graph::DEFAULT_MASS) }
        }
    };
    let config =
        PruneConfig { mode, node_threshold: node_threshold.unwrap_or(attrigraph_core::graph::DEFAULT_NODE_THRESHOLD) };
    config.validate()?;
    Ok(config)
}

pub fn rules_for(variant: RuleVariant) -> RuleSet {
    RuleSet::from(variant)
}

/// Everything that determines a computed artifact besides the case itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobConfig {
    pub model: String,
    pub model_fingerprint: String,
    pub rule_variant: RuleVariant,
    pub prune: PruneConfig,
    /// `None` selects `min(8, n)`.
    pub batch_size: Option<usize>,
    pub layer_pairs: Vec<(i32, i32)>,
    pub out: Option<PathBuf>,
}

impl JobConfig {
    /// Checks prune and batch settings before any computation.
    pub fn validate(&self) -> CliResult<()> {
        self.prune.validate()?;
        if let Some(b) = self.batch_size {
            BatchPlan::new(b)?;
        }
        if self.layer_pairs.is_empty() {
            return Err(CliError::input("at least one layer pair is required"));
        }
        Ok(())
    }

    pub fn plan(&self) -> Option<BatchPlan> {
        self.batch_size.map(|b| BatchPlan::new(b).expect("validated"))
    }

    /// SHA-256 over the artifact kind, every job field and the case.
    pub fn cache_key(&self, kind: &str, case: &ContrastCase) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            kind: &'a str,
            job: &'a JobConfig,
            case: &'a ContrastCase,
        }
        let bytes = serde_json::to_vec(&Key { kind, job: self, case }).expect("key serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
