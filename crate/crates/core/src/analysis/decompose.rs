// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttributionGraph, GraphNode};

/// Split of `R_n^(l)` by where its incoming relevance comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerComponents {
    pub layer: i32,
    pub total: f64,
    /// Residual not carried by any counted incoming edge.
    pub sb: f64,
    /// Edges from the BOS position.
    pub bos: f64,
    /// Edges from every other position except the prediction position itself.
    pub oc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Sb,
    Bos,
    Oc,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Sb, Component::Bos, Component::Oc];

    pub fn of(self, c: &LayerComponents) -> f64 {
        match self {
            Component::Sb => c.sb,
            Component::Bos => c.bos,
            Component::Oc => c.oc,
        }
    }
}

/// Composition fractions of SB/BOS/OC means, each normalized by `|R|-bar`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fractions {
    pub sb: Option<f64>,
    pub bos: Option<f64>,
    pub oc: Option<f64>,
}

impl Fractions {
    /// `sb = mean(SB) / (mean(SB) + mean(OC))`, `bos = |mean(BOS)| / (…)`,
    /// `oc = 1 − sb`. Undefined when the SB/OC mass is zero.
    pub fn from_layers(layers: &[LayerComponents], scale: f64) -> Self {
        if layers.is_empty() || scale == 0.0 {
            return Self { sb: None, bos: None, oc: None };
        }
        let k = layers.len() as f64;
        let mean = |f: fn(&LayerComponents) -> f64| layers.iter().map(|c| f(c) / scale).sum::<f64>() / k;
        let (sb, bos, oc) = (mean(|c| c.sb), mean(|c| c.bos), mean(|c| c.oc));
        let denom = sb + oc;
        if denom == 0.0 {
            return Self { sb: None, bos: None, oc: None };
        }
        let sb_frac = sb / denom;
        Self { sb: Some(sb_frac), bos: Some(bos.abs() / denom), oc: Some(1.0 - sb_frac) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub position: usize,
    pub bos_position: usize,
    /// Layers where the prediction node is present, ascending.
    pub layers: Vec<LayerComponents>,
    /// Layers skipped because the prediction node is absent from the graph.
    pub missing_layers: Vec<i32>,
    /// `|R|-bar`: mean of `|R_n^(l)|` over present layers.
    pub mean_abs_total: f64,
    pub fractions: Fractions,
}

impl Decomposition {
    pub fn layer(&self, layer: i32) -> Option<&LayerComponents> {
        self.layers.iter().find(|c| c.layer == layer)
    }

    pub fn series(&self, component: Component) -> Vec<(i32, f64)> {
        self.layers.iter().map(|c| (c.layer, component.of(c))).collect()
    }
}

/// Splits `R_position^(l)` for every layer of the graph's layer pairs.
pub fn decompose(graph: &AttributionGraph, position: usize, bos_position: usize) -> Decomposition {
    let mut layer_ids: Vec<i32> = graph.layer_pairs.iter().flat_map(|&(s, t)| [s, t]).collect();
    layer_ids.sort_unstable();
    layer_ids.dedup();
    let mut layers = Vec::new();
    let mut missing_layers = Vec::new();
    for layer in layer_ids {
        let Some(node) = graph.node((layer, position)).copied() else {
            missing_layers.push(layer);
            continue;
        };
        layers.push(split_node(graph, node, bos_position));
    }
    let mean_abs_total =
        if layers.is_empty() { 0.0 } else { layers.iter().map(|c| c.total.abs()).sum::<f64>() / layers.len() as f64 };
    let fractions = Fractions::from_layers(&layers, mean_abs_total);
    Decomposition { position, bos_position, layers, missing_layers, mean_abs_total, fractions }
}

fn split_node(graph: &AttributionGraph, node: GraphNode, bos_position: usize) -> LayerComponents {
    let (mut bos, mut oc) = (0.0, 0.0);
    for e in graph.edges.iter().filter(|e| e.target() == node.key()) {
        if e.i == node.pos {
            continue;
        }
        if e.i == bos_position {
            bos += e.w;
        } else {
            oc += e.w;
        }
    }
    LayerComponents { layer: node.layer, total: node.relevance, sb: node.relevance - bos - oc, bos, oc }
}

/// Layer range `[first, last]`, inclusive, with `-1` as the embedding slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSegment {
    pub first: i32,
    pub last: i32,
}

impl LayerSegment {
    pub fn contains(&self, layer: i32) -> bool {
        self.first <= layer && layer <= self.last
    }

    pub fn is_empty(&self) -> bool {
        self.last < self.first
    }
}

/// Early / Mid / Late partition of the `L+1` layer slots. Early takes
/// `⌈(L+1)·10/29⌉` slots, Late `⌈(L+1)·9/29⌉`, Mid the rest, which gives
/// `(-1..8, 9..18, 19..27)` at 28 layers.
pub fn layer_segments(num_layers: usize) -> [LayerSegment; 3] {
    let slots = num_layers + 1;
    let early = (slots * 10).div_ceil(29).min(slots);
    let late = (slots * 9).div_ceil(29).min(slots - early);
    let mid = slots - early - late;
    let start = -1;
    let seg =
        |from: usize, len: usize| LayerSegment { first: start + from as i32, last: start + (from + len) as i32 - 1 };
    [seg(0, early), seg(early, mid), seg(early + mid, late)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentComposition {
    pub name: String,
    pub segment: LayerSegment,
    pub layers: usize,
    pub fractions: Fractions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub segments: Vec<SegmentComposition>,
}

/// Composition fractions restricted to each segment's layers, using the
/// decomposition's global `|R|-bar`.
pub fn segment_composition(decomp: &Decomposition, num_layers: usize) -> SegmentStats {
    let names = ["Early", "Mid", "Late"];
    let segments = layer_segments(num_layers)
        .into_iter()
        .zip(names)
        .map(|(segment, name)| {
            let members: Vec<LayerComponents> =
                decomp.layers.iter().filter(|c| segment.contains(c.layer)).copied().collect();
            SegmentComposition {
                name: name.to_owned(),
                segment,
                layers: members.len(),
                fractions: Fractions::from_layers(&members, decomp.mean_abs_total),
            }
        })
        .collect();
    SegmentStats { segments }
}

/// Transition `l → l+1` with the largest `|Δ component|`; ties go to the
/// smallest `l`. Only adjacent layers both present are compared.
pub fn peak_transition(decomp: &Decomposition, component: Component) -> Result<i32> {
    peak_in_series(&decomp.series(component)).ok_or_else(|| Error::input("peak transition needs two adjacent layers"))
}

/// Same scan over an explicit `(layer, value)` series sorted by layer.
pub fn peak_in_series(series: &[(i32, f64)]) -> Option<i32> {
    let mut best: Option<(i32, f64)> = None;
    for w in series.windows(2) {
        let ((l0, v0), (l1, v1)) = (w[0], w[1]);
        if l1 != l0 + 1 {
            continue;
        }
        let change = (v1 - v0).abs();
        if best.map_or(true, |(_, b)| change > b) {
            best = Some((l0, change));
        }
    }
    best.map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_at_28_layers() {
        let [e, m, l] = layer_segments(28);
        assert_eq!((e.first, e.last), (-1, 8));
        assert_eq!((m.first, m.last), (9, 18));
        assert_eq!((l.first, l.last), (19, 27));
    }

    #[test]
    fn segments_partition_every_size() {
        for n in 1..80 {
            let segs = layer_segments(n);
            assert_eq!(segs[0].first, -1);
            assert_eq!(segs[2].last, n as i32 - 1);
            assert_eq!(segs[1].first, segs[0].last + 1);
            assert_eq!(segs[2].first, segs[1].last + 1);
        }
    }

    fn decomp(values: &[(f64, f64, f64)]) -> Decomposition {
        let layers: Vec<LayerComponents> = values
            .iter()
            .enumerate()
            .map(|(k, &(sb, bos, oc))| LayerComponents { layer: k as i32 - 1, total: sb + bos + oc, sb, bos, oc })
            .collect();
        Decomposition {
            position: 0,
            bos_position: 0,
            mean_abs_total: 1.0,
            fractions: Fractions::from_layers(&layers, 1.0),
            layers,
            missing_layers: vec![],
        }
    }

    #[test]
    fn peak_ties_take_the_smallest_transition() {
        let d = decomp(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (2.0, 0.0, 0.0), (3.0, 0.0, 0.0)]);
        assert_eq!(peak_transition(&d, Component::Sb).unwrap(), -1);
        let d = decomp(&[(0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 5.0, 0.0), (0.0, 5.0, 0.0)]);
        assert_eq!(peak_transition(&d, Component::Bos).unwrap(), 0);
    }

    #[test]
    fn uniform_components_give_equal_segments() {
        let d = decomp(&[(1.0, 0.5, 2.0); 5]);
        let stats = segment_composition(&d, 4);
        let f = stats.segments[0].fractions;
        for s in &stats.segments {
            assert_eq!(s.fractions, f);
        }
        assert_eq!(f.sb, Some(1.0 / 3.0));
    }
}
