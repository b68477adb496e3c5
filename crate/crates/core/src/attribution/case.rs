// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;

/// Named half-open token range `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

/// One failure instance: the sequence, the prediction position, and the
/// (incorrect) target token contrasted against the alternative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastCase {
    pub case_id: String,
    pub tokens: Vec<u32>,
    /// Display string per token.
    pub display: Vec<String>,
    /// Index of the last context token; logits at this position predict the next token.
    pub position: usize,
    pub target: u32,
    pub contrast: u32,
    #[serde(default)]
    pub segments: Vec<Segment>,
    pub special_mask: Vec<bool>,
    /// Replacement id used when masking tokens in perturbation checks.
    pub mask_token: u32,
}

impl ContrastCase {
    /// Builds a case whose special mask comes from the model's declared
    /// special tokens and whose display strings are `<id>` placeholders.
    pub fn from_model(
        model: &ModelBundle,
        case_id: impl Into<String>,
        tokens: Vec<u32>,
        target: u32,
        contrast: u32,
        mask_token: u32,
    ) -> Self {
        let cfg = model.config();
        let special_mask = tokens.iter().map(|&t| cfg.is_special(t)).collect();
        let display = tokens.iter().map(|t| format!("<{t}>")).collect();
        let position = tokens.len().saturating_sub(1);
        Self {
            case_id: case_id.into(),
            tokens,
            display,
            position,
            target,
            contrast,
            segments: Vec::new(),
            special_mask,
            mask_token,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Structural invariants that do not depend on a model.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::input(format!("case {}: empty token sequence", self.case_id)));
        }
        if self.display.len() != n || self.special_mask.len() != n {
            return Err(Error::input(format!(
                "case {}: display ({}) and special_mask ({}) must match {n} tokens",
                self.case_id,
                self.display.len(),
                self.special_mask.len()
            )));
        }
        if self.position >= n {
            return Err(Error::input(format!("case {}: position {} out of range", self.case_id, self.position)));
        }
        if self.target == self.contrast {
            return Err(Error::input(format!("case {}: target and contrast are both {}", self.case_id, self.target)));
        }
        let mut spans: Vec<&Segment> = self.segments.iter().collect();
        spans.sort_by_key(|s| (s.start, s.end));
        for s in &spans {
            if s.start > s.end || s.end > n {
                return Err(Error::input(format!(
                    "case {}: segment {} [{}, {}) outside [0, {n})",
                    self.case_id, s.name, s.start, s.end
                )));
            }
        }
        for pair in spans.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(Error::input(format!(
                    "case {}: segments {} and {} overlap",
                    self.case_id, pair[0].name, pair[1].name
                )));
            }
        }
        Ok(())
    }

    /// Checks ids and position against a model; does not require
    /// `target != contrast`.
    pub fn check_against(&self, model: &ModelBundle) -> Result<()> {
        let v = model.config().vocab_size;
        if self.tokens.is_empty() {
            return Err(Error::input("empty token sequence"));
        }
        if self.position >= self.tokens.len() {
            return Err(Error::input(format!("position {} out of range", self.position)));
        }
        for (what, id) in [("target", self.target), ("contrast", self.contrast), ("mask", self.mask_token)] {
            if id as usize >= v {
                return Err(Error::input(format!("{what} token {id} outside vocabulary of {v}")));
            }
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= v) {
            return Err(Error::input(format!("token id {bad} outside vocabulary of {v}")));
        }
        Ok(())
    }

    pub fn non_special_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.special_mask.iter().enumerate().filter(|(_, &s)| !s).map(|(i, _)| i)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let case: ContrastCase = serde_json::from_str(text)?;
        case.validate()?;
        Ok(case)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serializes")
    }
}

/// Loads every `*.json` case in a directory, sorted by case id.
pub fn load_case_dir(dir: impl AsRef<Path>) -> Result<Vec<ContrastCase>> {
    let mut cases = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            cases.push(ContrastCase::load(&path).map_err(|e| match e {
                Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
                other => other,
            })?);
        }
    }
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case() -> ContrastCase {
        ContrastCase {
            case_id: "c".into(),
            tokens: vec![0, 5, 6, 7],
            display: vec!["<s>".into(), "a".into(), "b".into(), "c".into()],
            position: 3,
            target: 9,
            contrast: 10,
            segments: vec![
                Segment { name: "Instruction".into(), start: 1, end: 3 },
                Segment { name: "Answer".into(), start: 3, end: 4 },
            ],
            special_mask: vec![true, false, false, false],
            mask_token: 3,
        }
    }

    #[test]
    fn validates_structure() {
        assert!(case().validate().is_ok());
        assert!(ContrastCase { position: 4, ..case() }.validate().is_err());
        assert!(ContrastCase { contrast: 9, ..case() }.validate().is_err());
        let mut overlapping = case();
        overlapping.segments[1].start = 2;
        assert!(overlapping.validate().is_err());
        let mut outside = case();
        outside.segments[1].end = 5;
        assert!(outside.validate().is_err());
        assert!(ContrastCase { special_mask: vec![false], ..case() }.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = case();
        assert_eq!(ContrastCase::from_json(&c.to_json()).unwrap(), c);
        assert!(matches!(ContrastCase::from_json("{\"case_id\": 3}"), Err(Error::Parse(_))));
    }
}
