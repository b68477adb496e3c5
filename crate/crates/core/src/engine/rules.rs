// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which backward patches are active during a relevance pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleVariant {
    /// Attention-aware LRP: norm statistics frozen, bilinear and gating
    /// products split uniformly between their factors.
    Attnlrp,
    /// Conservative-propagation LRP: attention weights detached, value path
    /// carries all relevance.
    Cplrp,
    /// Plain gradient, no patches.
    Gradient,
}

impl RuleVariant {
    pub const ALL: [RuleVariant; 3] = [RuleVariant::Attnlrp, RuleVariant::Cplrp, RuleVariant::Gradient];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleVariant::Attnlrp => "attnlrp",
            RuleVariant::Cplrp => "cplrp",
            RuleVariant::Gradient => "gradient",
        }
    }
}

impl fmt::Display for RuleVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RuleVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attnlrp" => Ok(RuleVariant::Attnlrp),
            "cplrp" => Ok(RuleVariant::Cplrp),
            "gradient" => Ok(RuleVariant::Gradient),
            other => Err(Error::input(format!("unknown rule variant {other:?} (expected attnlrp, cplrp or gradient)"))),
        }
    }
}

/// Rule variant plus its stabilizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    variant: RuleVariant,
    epsilon: f64,
}

impl RuleSet {
    pub const DEFAULT_EPSILON: f64 = 1e-9;

    pub fn new(variant: RuleVariant, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::input(format!("rule epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { variant, epsilon })
    }

    pub fn variant(&self) -> RuleVariant {
        self.variant
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// RMS statistic frozen during backward.
    pub(crate) fn freezes_norm(&self) -> bool {
        !matches!(self.variant, RuleVariant::Gradient)
    }

    /// Each factor of an elementwise product receives half its gradient.
    pub(crate) fn splits_products(&self) -> bool {
        !matches!(self.variant, RuleVariant::Gradient)
    }

    pub(crate) fn detaches_attention(&self) -> bool {
        matches!(self.variant, RuleVariant::Cplrp)
    }
}

impl From<RuleVariant> for RuleSet {
    fn from(variant: RuleVariant) -> Self {
        Self { variant, epsilon: Self::DEFAULT_EPSILON }
    }
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleVariant::Attnlrp.into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_must_be_positive() {
        assert!(RuleSet::new(RuleVariant::Attnlrp, 0.0).is_err());
        assert!(RuleSet::new(RuleVariant::Attnlrp, -1.0).is_err());
        assert!(RuleSet::new(RuleVariant::Attnlrp, f64::NAN).is_err());
        assert_eq!(RuleSet::default().epsilon(), 1e-9);
    }

    #[test]
    fn parses_variant_names() {
        for v in RuleVariant::ALL {
            assert_eq!(v.as_str().parse::<RuleVariant>().unwrap(), v);
        }
        assert!("lrp".parse::<RuleVariant>().is_err());
    }
}
