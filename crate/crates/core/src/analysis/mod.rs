// SPDX-License-Identifier: MIT OR Apache-2.0

//! Statistics over attribution results: relevance profiles, SB/BOS/OC
//! decomposition, segment composition, clustering, PCA, agreement scores,
//! sharpness and cross-run comparison.

mod cluster;
mod compare;
mod decompose;
mod profile;
mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use cluster::{elbow, kmeans, silhouette, ClusterResult, ElbowPoint, ElbowReport, MAX_ITERATIONS};
pub use compare::{compare_runs, CaseRecord, Comparison, ComparisonRow, RunRecord, RunSummary, SegmentSplit};
pub use decompose::{
    decompose, layer_segments, peak_in_series, peak_transition, segment_composition, Component, Decomposition,
    Fractions, LayerComponents, LayerSegment, SegmentComposition, SegmentStats,
};
pub use profile::{relevance_profile, RelevanceProfile};
pub use stats::{
    adjusted_rand_index, gini, pca_2d, sharpness, variance_ratio, Ari, Projection, Sharpness, VarianceRatio,
    CONCENTRATION_TOP,
};

use crate::attribution::{segment_breakdown, ContrastCase, Heatmap, SegmentBreakdown};
use crate::engine::{RuleSet, RuleVariant};
use crate::error::{Error, Result};
use crate::graph::{dense_graph, prune_dense, BatchPlan, DenseGraph, PruneConfig, PruneMode};
use crate::model::ModelBundle;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Position whose outgoing edges count as BOS relevance.
pub const BOS_POSITION: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub schema_version: u32,
    pub case_id: String,
    pub rule_variant: RuleVariant,
    pub delta_logit: f64,
    pub profile: RelevanceProfile,
    pub decomposition: Decomposition,
    /// Composition fractions per layer segment.
    pub segments: SegmentStats,
    /// Input-token relevance summed over the case's token segments.
    pub token_segments: SegmentBreakdown,
    pub sharpness: Sharpness,
    pub peak_transitions: BTreeMap<Component, Option<i32>>,
}

/// Graph used for decomposition: every nonzero edge and node, no
/// connectivity filtering, so SB is the exact residual of the full matrices.
pub fn decomposition_graph(dense: &DenseGraph) -> crate::graph::AttributionGraph {
    prune_dense(dense, &PruneConfig { mode: PruneMode::Global { tau: 0.0 }, node_threshold: 0.0 })
}

/// Report for one case from an already built dense graph.
pub fn case_report(dense: &DenseGraph, case: &ContrastCase, num_layers: usize) -> Result<CaseReport> {
    let relev = &dense.relevances;
    let profile = relevance_profile(relev, case.position)?;
    let decomposition = decompose(&decomposition_graph(dense), case.position, BOS_POSITION);
    let segments = segment_composition(&decomposition, num_layers);
    let heatmap = Heatmap::from_raw(relev.layer_relevances(-1).to_vec(), &case.special_mask, relev.delta_logit())?;
    let token_segments = segment_breakdown(&heatmap, case)?;
    let sharpness = sharpness(&heatmap, case)?;
    let peak_transitions = Component::ALL.iter().map(|&c| (c, peak_transition(&decomposition, c).ok())).collect();
    Ok(CaseReport {
        schema_version: REPORT_SCHEMA_VERSION,
        case_id: case.case_id.clone(),
        rule_variant: dense.rule_variant,
        delta_logit: relev.delta_logit(),
        profile,
        decomposition,
        segments,
        token_segments,
        sharpness,
        peak_transitions,
    })
}

/// Builds the dense graph over `layer_pairs` and reports on it.
pub fn analyze_case(
    model: &ModelBundle,
    case: &ContrastCase,
    rules: &RuleSet,
    layer_pairs: &[(i32, i32)],
    plan: Option<BatchPlan>,
) -> Result<CaseReport> {
    let dense = dense_graph(model, case, rules, layer_pairs, plan)?;
    case_report(&dense, case, model.config().num_layers)
}

/// Clustering settings for a batch report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub k: usize,
    pub seed: u64,
    pub elbow_range: (usize, usize),
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { k: 3, seed: 0, elbow_range: (2, 6) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakSummary {
    pub component: Component,
    /// Transition layer → number of cases peaking there.
    pub histogram: BTreeMap<i32, usize>,
    /// Peak of the across-case mean component.
    pub mean_peak: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub schema_version: u32,
    pub config: BatchConfig,
    pub cases: Vec<CaseReport>,
    /// Case ids clustered, in cluster-input order.
    pub clustered: Vec<String>,
    /// Cases left out of clustering because their profile is degenerate.
    pub skipped: Vec<String>,
    pub clusters: ClusterResult,
    pub elbow: ElbowReport,
    pub pca: Projection,
    /// SB / BOS / OC fraction spread across profile clusters.
    pub variance_ratios: BTreeMap<Component, Option<VarianceRatio>>,
    /// Clusters of `(sb_frac, bos_frac)` composition features.
    pub composition_clusters: Option<ClusterResult>,
    /// Agreement between profile clusters and composition clusters.
    pub ari: Option<Ari>,
    pub peak_transitions: Vec<PeakSummary>,
    pub run_comparison: Option<Comparison>,
}

/// Clusters normalized profiles and aggregates the per-case reports.
pub fn batch_report(
    reports: Vec<CaseReport>,
    config: BatchConfig,
    run_comparison: Option<Comparison>,
) -> Result<BatchReport> {
    let (usable, skipped): (Vec<&CaseReport>, Vec<&CaseReport>) =
        reports.iter().partition(|r| r.profile.normalized.is_some());
    if usable.len() < config.k.max(2) {
        return Err(Error::input(format!(
            "{} non-degenerate profiles, need at least {} for k = {}",
            usable.len(),
            config.k.max(2),
            config.k
        )));
    }
    let profiles: Vec<Vec<f64>> =
        usable.iter().map(|r| r.profile.normalized.clone().expect("partitioned on normalized")).collect();
    let clusters = kmeans(&profiles, config.k, config.seed)?;
    let elbow = elbow(&profiles, config.elbow_range.0, config.elbow_range.1, config.seed)?;
    let pca = pca_2d(&profiles)?;

    let variance_ratios = Component::ALL
        .iter()
        .map(|&c| {
            let (xs, ls): (Vec<f64>, Vec<usize>) = usable
                .iter()
                .zip(&clusters.assignments)
                .filter_map(|(r, &l)| fraction(&r.decomposition.fractions, c).map(|x| (x, l)))
                .unzip();
            (c, variance_ratio(&xs, &ls).ok())
        })
        .collect();

    let composition: Vec<(usize, Vec<f64>)> = usable
        .iter()
        .enumerate()
        .filter_map(|(i, r)| Some((i, vec![r.decomposition.fractions.sb?, r.decomposition.fractions.bos?])))
        .collect();
    let (composition_clusters, ari) = if composition.len() >= config.k && composition.len() >= 2 {
        let feats: Vec<Vec<f64>> = composition.iter().map(|(_, f)| f.clone()).collect();
        let comp = kmeans(&feats, config.k, config.seed)?;
        let profile_labels: Vec<usize> = composition.iter().map(|&(i, _)| clusters.assignments[i]).collect();
        let ari = adjusted_rand_index(&profile_labels, &comp.assignments)?;
        (Some(comp), Some(ari))
    } else {
        (None, None)
    };

    let peak_transitions = Component::ALL.iter().map(|&c| peak_summary(&reports, c)).collect();
    Ok(BatchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config,
        clustered: usable.iter().map(|r| r.case_id.clone()).collect(),
        skipped: skipped.iter().map(|r| r.case_id.clone()).collect(),
        clusters,
        elbow,
        pca,
        variance_ratios,
        composition_clusters,
        ari,
        peak_transitions,
        run_comparison,
        cases: reports,
    })
}

fn fraction(f: &Fractions, c: Component) -> Option<f64> {
    match c {
        Component::Sb => f.sb,
        Component::Bos => f.bos,
        Component::Oc => f.oc,
    }
}

fn peak_summary(reports: &[CaseReport], component: Component) -> PeakSummary {
    let mut histogram = BTreeMap::new();
    let mut sums: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for r in reports {
        if let Some(Some(l)) = r.peak_transitions.get(&component) {
            *histogram.entry(*l).or_insert(0) += 1;
        }
        let scale = r.decomposition.mean_abs_total;
        if scale == 0.0 {
            continue;
        }
        for (layer, v) in r.decomposition.series(component) {
            let acc = sums.entry(layer).or_insert((0.0, 0));
            acc.0 += v / scale;
            acc.1 += 1;
        }
    }
    let mean: Vec<(i32, f64)> = sums.into_iter().map(|(l, (s, c))| (l, s / c as f64)).collect();
    PeakSummary { component, histogram, mean_peak: peak_in_series(&mean) }
}

/// Turns per-case reports from one model into a comparison run.
pub fn run_record(run_id: impl Into<String>, reports: &[CaseReport]) -> RunRecord {
    RunRecord {
        run_id: run_id.into(),
        cases: reports
            .iter()
            .map(|r| (r.case_id.clone(), CaseRecord { delta_logit: r.delta_logit, segments: r.token_segments.clone() }))
            .collect(),
    }
}
