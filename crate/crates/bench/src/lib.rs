// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixtures shared by the edge-construction benchmarks.

use attrigraph_core::attribution::{synthetic_cases, ContrastCase};
use attrigraph_core::engine::RuleSet;
use attrigraph_core::graph::{node_pass, NodeRelevances};
use attrigraph_core::model::{toy_model, ModelBundle};

pub const SEED: u64 = 0;
pub const FIRST_CONTENT: u32 = 4;

/// Toy model, one synthetic case of length `n` and its node pass.
pub struct Fixture {
    pub model: ModelBundle,
    pub case: ContrastCase,
    pub rules: RuleSet,
    pub relevances: NodeRelevances,
}

impl Fixture {
    /// `n` must be at least 8.
    pub fn new(n: usize, rules: RuleSet) -> Self {
        let model = toy_model(SEED);
        let case = synthetic_cases(&model, 1, SEED ^ n as u64, n..=n, FIRST_CONTENT).expect("synthetic case").remove(0);
        let relevances = node_pass(&model, &case, &rules).expect("node pass");
        Self { model, case, rules, relevances }
    }

    pub fn targets(&self) -> Vec<usize> {
        (0..self.case.len()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use attrigraph_core::engine::RuleVariant;

    #[test]
    fn fixture_has_requested_length() {
        let f = Fixture::new(12, RuleSet::from(RuleVariant::Attnlrp));
        assert_eq!(f.case.len(), 12);
        assert_eq!(f.relevances.seq_len(), 12);
        assert_eq!(f.targets().len(), 12);
    }
}
