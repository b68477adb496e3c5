// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::case::ContrastCase;
use crate::engine::RuleVariant;
use crate::error::{Error, Result};

pub const HEATMAP_SCHEMA_VERSION: u32 = 1;

/// Input-token relevance for one case, normalized by the largest absolute
/// relevance among non-special tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub normalizer: f64,
    pub delta_logit: f64,
    /// Set when every non-special relevance is zero; `normalizer` is then 1.
    #[serde(default)]
    pub degenerate: bool,
}

impl Heatmap {
    /// Normalizes `raw`, skipping positions flagged in `special_mask` when
    /// picking the normalizer.
    pub fn from_raw(raw: Vec<f64>, special_mask: &[bool], delta_logit: f64) -> Result<Self> {
        if raw.len() != special_mask.len() {
            return Err(Error::shape(format!(
                "heatmap: {} relevances for {} mask entries",
                raw.len(),
                special_mask.len()
            )));
        }
        let max_abs =
            raw.iter().zip(special_mask).filter(|(_, &special)| !special).map(|(r, _)| r.abs()).fold(0.0, f64::max);
        let degenerate = max_abs == 0.0;
        let normalizer = if degenerate { 1.0 } else { max_abs };
        let normalized = raw.iter().map(|r| r / normalizer).collect();
        Ok(Self { raw, normalized, normalizer, delta_logit, degenerate })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Per-segment sum of normalized relevance over non-special member tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSum {
    pub name: String,
    pub sum: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentBreakdown {
    pub segments: Vec<SegmentSum>,
}

impl SegmentBreakdown {
    pub fn get(&self, name: &str) -> Option<&SegmentSum> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Sums normalized relevance per case segment. Special tokens inside a
/// segment are not counted, matching their exclusion from normalization.
pub fn segment_breakdown(heatmap: &Heatmap, case: &ContrastCase) -> Result<SegmentBreakdown> {
    if heatmap.len() != case.len() {
        return Err(Error::shape(format!(
            "heatmap has {} tokens, case {} has {}",
            heatmap.len(),
            case.case_id,
            case.len()
        )));
    }
    let segments = case
        .segments
        .iter()
        .map(|seg| {
            let members = (seg.start..seg.end.min(case.len())).filter(|&p| !case.special_mask[p]);
            let (sum, count) = members.fold((0.0, 0), |(s, c), p| (s + heatmap.normalized[p], c + 1));
            SegmentSum { name: seg.name.clone(), sum, count }
        })
        .collect();
    Ok(SegmentBreakdown { segments })
}

/// Export document for a heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapDocument {
    pub schema_version: u32,
    pub case_id: String,
    pub rule_variant: RuleVariant,
    pub delta_logit: f64,
    pub normalizer: f64,
    pub degenerate: bool,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl HeatmapDocument {
    pub fn new(heatmap: &Heatmap, case_id: &str, rule_variant: RuleVariant) -> Self {
        Self {
            schema_version: HEATMAP_SCHEMA_VERSION,
            case_id: case_id.to_owned(),
            rule_variant,
            delta_logit: heatmap.delta_logit,
            normalizer: heatmap.normalizer,
            degenerate: heatmap.degenerate,
            raw: heatmap.raw.clone(),
            normalized: heatmap.normalized.clone(),
        }
    }
}

/// Standalone HTML strip: red supports the target token, blue disfavors it,
/// special tokens are gray.
pub fn render_html(heatmap: &Heatmap, case: &ContrastCase) -> String {
    let mut body = String::new();
    for (p, text) in case.display.iter().enumerate() {
        let value = heatmap.normalized.get(p).copied().unwrap_or(0.0);
        let raw = heatmap.raw.get(p).copied().unwrap_or(0.0);
        let style = if case.special_mask.get(p).copied().unwrap_or(false) {
            "background:#d0d0d0;color:#606060".to_owned()
        } else {
            let alpha = value.abs().min(1.0);
            let rgb = if value >= 0.0 { "220,40,40" } else { "40,80,220" };
            format!("background:rgba({rgb},{alpha:.3})")
        };
        body.push_str(&format!(
            "<span class=\"tok\" style=\"{style}\" title=\"raw {raw:.6e} / normalized {value:.4}\">{}</span>",
            escape(text)
        ));
    }
    let badge = if heatmap.degenerate { "<p class=\"badge\">degenerate heatmap (all relevances zero)</p>" } else { "" };
    format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{id}</title>\
<style>body{{font-family:monospace}}.tok{{padding:1px 2px;margin:0 1px;white-space:pre}}\
.badge{{color:#a60}}</style></head><body>\
<h3>{id}</h3><p>&Delta;logit = {delta:.6}</p>{badge}<div>{body}</div></body></html>\n",
        id = escape(&case.case_id),
        delta = heatmap.delta_logit,
    )
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::case::Segment;

    fn case_with(raw_len: usize, special: Vec<bool>, segments: Vec<Segment>) -> ContrastCase {
        ContrastCase {
            case_id: "h".into(),
            tokens: (0..raw_len as u32).collect(),
            display: (0..raw_len).map(|i| format!("t{i}")).collect(),
            position: raw_len - 1,
            target: 1,
            contrast: 2,
            segments,
            special_mask: special,
            mask_token: 0,
        }
    }

    #[test]
    fn special_tokens_are_excluded_from_normalizer() {
        // BOS raw 10, max non-special |raw| 2
        let h = Heatmap::from_raw(vec![10.0, 1.0, -2.0, 0.5], &[true, false, false, false], 3.0).unwrap();
        assert_eq!(h.normalizer, 2.0);
        assert_eq!(h.normalized[0], 5.0);
        assert_eq!(h.normalized[2], -1.0);
        assert!(!h.degenerate);
    }

    #[test]
    fn all_zero_is_flagged() {
        let h = Heatmap::from_raw(vec![4.0, 0.0, 0.0], &[true, false, false], 0.0).unwrap();
        assert!(h.degenerate);
        assert_eq!(h.normalizer, 1.0);
        assert_eq!(h.normalized, vec![4.0, 0.0, 0.0]);
    }

    #[test]
    fn segment_sums_by_hand() {
        let h = Heatmap {
            raw: vec![1.0, -2.0, 3.0],
            normalized: vec![1.0, -2.0, 3.0],
            normalizer: 1.0,
            delta_logit: 0.0,
            degenerate: false,
        };
        let segs = vec![Segment { name: "A".into(), start: 0, end: 2 }, Segment { name: "B".into(), start: 2, end: 3 }];
        let c = case_with(3, vec![false; 3], segs);
        let b = segment_breakdown(&h, &c).unwrap();
        assert_eq!(b.get("A").unwrap().sum, -1.0);
        assert_eq!(b.get("B").unwrap().sum, 3.0);
        assert_eq!(b.get("A").unwrap().count, 2);
        assert_eq!(b.get("B").unwrap().count, 1);
    }

    #[test]
    fn empty_segment_is_zero() {
        let h = Heatmap::from_raw(vec![1.0, 2.0], &[false; 2], 1.0).unwrap();
        let c = case_with(2, vec![false; 2], vec![Segment { name: "E".into(), start: 1, end: 1 }]);
        let b = segment_breakdown(&h, &c).unwrap();
        assert_eq!(b.segments[0].sum, 0.0);
        assert_eq!(b.segments[0].count, 0);
    }

    #[test]
    fn html_marks_special_tokens_gray() {
        let h = Heatmap::from_raw(vec![1.0, -1.0, 0.0], &[true, false, false], 1.0).unwrap();
        let mut c = case_with(3, vec![true, false, false], vec![]);
        c.display[2] = "<b>".into();
        let html = render_html(&h, &c);
        assert!(html.contains("#d0d0d0"));
        assert!(html.contains("rgba(40,80,220,1.000)"));
        assert!(html.contains("&lt;b&gt;"));
    }
}
