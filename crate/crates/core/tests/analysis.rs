// SPDX-License-Identifier: MIT OR Apache-2.0

// Jacobi and matrix oracles index explicitly.
#![allow(clippy::needless_range_loop)]

use attrigraph_core::analysis::{
    adjusted_rand_index, analyze_case, compare_runs, decompose, elbow, gini, kmeans, pca_2d, peak_in_series,
    peak_transition, relevance_profile, run_record, segment_composition, sharpness, silhouette, variance_ratio,
    CaseRecord, CaseReport, Component, RelevanceProfile, RunRecord, BOS_POSITION,
};
use attrigraph_core::attribution::{synthetic_cases, ContrastCase, Heatmap, SegmentBreakdown, SegmentSum};
use attrigraph_core::engine::{RuleSet, RuleVariant};
use attrigraph_core::graph::{
    consecutive_pairs, node_pass, AttributionGraph, GraphEdge, GraphFlags, GraphNode, PruneConfig, GRAPH_SCHEMA_VERSION,
};
use attrigraph_core::model::toy_model;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn edge(s: i32, i: usize, j: usize, w: f64) -> GraphEdge {
    GraphEdge { s, i, t: s + 1, j, w }
}

/// Three layers at prediction position 2, BOS at 0.
fn fixture_graph() -> AttributionGraph {
    let node = |layer, relevance| GraphNode { layer, pos: 2, relevance };
    AttributionGraph {
        schema_version: GRAPH_SCHEMA_VERSION,
        case_id: "fixture".into(),
        rule_variant: RuleVariant::Attnlrp,
        prune: PruneConfig::default(),
        layer_pairs: vec![(-1, 0), (0, 1)],
        target: node(1, -1.0),
        nodes: vec![node(-1, 1.0), node(0, 2.0), node(1, -1.0)],
        edges: vec![
            edge(-1, 0, 2, 0.5),
            edge(-1, 1, 2, 0.25),
            edge(-1, 2, 2, 1.0),
            edge(0, 0, 2, -0.5),
            edge(0, 1, 2, 0.75),
            // Into another position; must be ignored.
            edge(0, 1, 1, 9.0),
        ],
        flags: GraphFlags::default(),
    }
}

#[test]
fn hand_built_decomposition() {
    let d = decompose(&fixture_graph(), 2, 0);
    let rows: Vec<(i32, f64, f64, f64, f64)> = d.layers.iter().map(|c| (c.layer, c.total, c.sb, c.bos, c.oc)).collect();
    assert_eq!(rows, vec![(-1, 1.0, 1.0, 0.0, 0.0), (0, 2.0, 1.25, 0.5, 0.25), (1, -1.0, -1.25, -0.5, 0.75)]);
    assert_eq!(d.mean_abs_total, 4.0 / 3.0);
    // Normalized layer means: SB 1/4, BOS 0, OC 1/4.
    assert_eq!(d.fractions.sb, Some(0.5));
    assert_eq!(d.fractions.bos, Some(0.0));
    assert_eq!(d.fractions.oc, Some(0.5));
    assert_eq!(peak_transition(&d, Component::Sb).unwrap(), 0);
    assert_eq!(peak_transition(&d, Component::Bos).unwrap(), 0);
    assert!(d.missing_layers.is_empty());
}

#[test]
fn absent_prediction_nodes_are_listed() {
    let mut g = fixture_graph();
    g.nodes.retain(|n| n.layer != 0);
    let d = decompose(&g, 2, 0);
    assert_eq!(d.missing_layers, vec![0]);
    assert!(peak_transition(&d, Component::Sb).is_err(), "layers -1 and 1 are not adjacent");
}

fn reports(seed: u64, count: usize) -> (Vec<ContrastCase>, Vec<CaseReport>) {
    let model = toy_model(seed);
    let cases = synthetic_cases(&model, count, seed + 100, 10..=18, 4).unwrap();
    let rules = RuleSet::from(RuleVariant::Attnlrp);
    let reports = cases.iter().map(|c| analyze_case(&model, c, &rules, &consecutive_pairs(4), None).unwrap()).collect();
    (cases, reports)
}

#[test]
fn decomposition_identity_survives_serialization() {
    let (_, reports) = reports(1, 4);
    for report in reports {
        let back: CaseReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.decomposition.layers.len(), 5);
        for c in &back.decomposition.layers {
            assert!((c.sb + c.bos + c.oc - c.total).abs() < 1e-12);
        }
    }
}

#[test]
fn report_totals_are_node_relevances() {
    let model = toy_model(2);
    let case = &synthetic_cases(&model, 1, 3, 12..=12, 4).unwrap()[0];
    let rules = RuleSet::from(RuleVariant::Cplrp);
    let report = analyze_case(&model, case, &rules, &consecutive_pairs(4), None).unwrap();
    let relev = node_pass(&model, case, &rules).unwrap();
    for c in &report.decomposition.layers {
        assert_eq!(c.total, relev.relevance(c.layer, case.position));
    }
    assert_eq!(report.profile, relevance_profile(&relev, case.position).unwrap());
    assert_eq!(report.decomposition.bos_position, BOS_POSITION);
    let stats = segment_composition(&report.decomposition, 4);
    assert_eq!(stats.segments.iter().map(|s| s.layers).sum::<usize>(), 5);
}

#[test]
fn profiles_start_at_zero() {
    let (_, reports) = reports(3, 5);
    for r in reports {
        let n = r.profile.normalized.expect("toy profiles are not degenerate");
        assert_eq!(n[0], 0.0);
        let last = r.profile.raw[4];
        let want = (last - r.profile.raw[0]) / last.abs();
        assert!((n[4] - want).abs() < 1e-15);
    }
    let reported = RelevanceProfile::from_raw(vec![0.66, 3.0, 18.85]).unwrap();
    assert!((reported.normalized.unwrap()[2] - 0.9650).abs() <= 1e-4);
}

/// Cyclic Jacobi rotations; returns eigenvalues and column eigenvectors.
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| a[i][j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn random_vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|c| rng.gen_range(-1.0..1.0) * (c + 1) as f64).collect()).collect()
}

#[test]
fn pca_matches_jacobi_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..10 {
        let x = random_vectors(&mut rng, 12 + trial, 5);
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..5).map(|c| x.iter().map(|v| v[c]).sum::<f64>() / n).collect();
        let cov: Vec<Vec<f64>> = (0..5)
            .map(|a| (0..5).map(|b| x.iter().map(|v| (v[a] - mean[a]) * (v[b] - mean[b])).sum::<f64>() / n).collect())
            .collect();
        let (vals, vecs) = jacobi(cov);
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
        let p = pca_2d(&x).unwrap();
        let total: f64 = vals.iter().sum();
        for slot in 0..2 {
            let idx = order[slot];
            assert!((p.explained_variance[slot] - vals[idx]).abs() < 1e-10);
            assert!((p.explained_ratio[slot] - vals[idx] / total).abs() < 1e-10);
            let dot: f64 = (0..5).map(|c| p.axes[slot][c] * vecs[c][idx]).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-8);
            let lead = p.axes[slot].iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(lead > 0.0);
            for (r, v) in x.iter().enumerate() {
                let proj: f64 = (0..5).map(|c| (v[c] - mean[c]) * p.axes[slot][c]).sum();
                assert!((p.coords[r][slot] - proj).abs() < 1e-12);
            }
        }
        assert!(!p.rank_deficient);
    }
}

#[test]
fn pca_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_vectors(&mut rng, 15, 2);
    let (c, s) = (0.6f64, 0.8f64);
    let rotated: Vec<Vec<f64>> = x.iter().map(|v| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]]).collect();
    let a = pca_2d(&x).unwrap();
    let b = pca_2d(&rotated).unwrap();
    for slot in 0..2 {
        assert!((a.explained_variance[slot] - b.explained_variance[slot]).abs() < 1e-12);
        for r in 0..x.len() {
            assert!((a.coords[r][slot].abs() - b.coords[r][slot].abs()).abs() < 1e-10);
        }
    }
}

#[test]
fn pca_flags_collinear_data() {
    let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
    let p = pca_2d(&x).unwrap();
    assert!(p.rank_deficient);
    assert_eq!(p.explained_variance[1], 0.0);
    assert!((p.explained_ratio[0] - 1.0).abs() < 1e-12);
    assert!(pca_2d(&x[..1]).is_err());
}

/// Two-pass means and variances, written out longhand.
fn variance_oracle(xs: &[f64], labels: &[usize]) -> (f64, f64) {
    let k = labels.iter().max().unwrap() + 1;
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for c in 0..k {
        let members: Vec<f64> = xs.iter().zip(labels).filter(|(_, &l)| l == c).map(|(&x, _)| x).collect();
        if members.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for m in &members {
            sum += m;
        }
        let mean = sum / members.len() as f64;
        let mut sq = 0.0;
        for m in &members {
            sq += (m - mean) * (m - mean);
        }
        means.push(mean);
        vars.push(sq / members.len() as f64);
    }
    let intra = vars.iter().sum::<f64>() / vars.len() as f64;
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let inter = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / means.len() as f64;
    (intra, inter)
}

fn pair_ari(a: &[usize], b: &[usize]) -> f64 {
    // Pair counting over all i < j.
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut total) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            total += 1.0;
            if sa && sb {
                both += 1.0;
            }
            if sa {
                only_a += 1.0;
            }
            if sb {
                only_b += 1.0;
            }
        }
    }
    let expected = only_a * only_b / total;
    (both - expected) / ((only_a + only_b) / 2.0 - expected)
}

fn gini_oracle(values: &[f64]) -> f64 {
    // Mean absolute difference over all ordered pairs, halved by the mean.
    let k = values.len() as f64;
    let xs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let mean = xs.iter().sum::<f64>() / k;
    let mut diff = 0.0;
    for a in &xs {
        for b in &xs {
            diff += (a - b).abs();
        }
    }
    diff / (2.0 * k * k * mean)
}

proptest! {
    #[test]
    fn variance_ratio_matches_oracle(rows in prop::collection::vec((-10.0f64..10.0, 0usize..4), 2..30)) {
        let (xs, mut labels): (Vec<f64>, Vec<usize>) = rows.into_iter().unzip();
        labels[0] = 0;
        labels[1] = 1;
        let got = variance_ratio(&xs, &labels).unwrap();
        let (intra, inter) = variance_oracle(&xs, &labels);
        prop_assert!((got.intra - intra).abs() < 1e-12);
        prop_assert!((got.inter - inter).abs() < 1e-12);
        if inter > 0.0 {
            prop_assert!((got.ratio.unwrap() - intra / inter).abs() <= 1e-12 * (1.0 + intra / inter));
        }
    }

    #[test]
    fn gini_matches_pairwise_oracle(values in prop::collection::vec(-5.0f64..5.0, 1..25)) {
        prop_assume!(values.iter().any(|v| v.abs() > 1e-6));
        let got = gini(&values).unwrap();
        prop_assert!((got - gini_oracle(&values)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn ari_is_symmetric(a in prop::collection::vec(0usize..3, 6..20), b in prop::collection::vec(0usize..3, 20)) {
        let b = &b[..a.len()];
        let ab = adjusted_rand_index(&a, b).unwrap();
        let ba = adjusted_rand_index(b, &a).unwrap();
        prop_assert_eq!(ab.degenerate, ba.degenerate);
        prop_assert!((ab.value - ba.value).abs() < 1e-12);
        if !ab.degenerate {
            prop_assert!((ab.value - pair_ari(&a, b)).abs() < 1e-12);
        }
        let same = adjusted_rand_index(&a, &a).unwrap();
        prop_assert!(same.degenerate || same.value == 1.0);
    }

    #[test]
    fn peak_matches_exhaustive_scan(values in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), -3.0f64..3.0], 2..12)) {
        let series: Vec<(i32, f64)> = values.iter().enumerate().map(|(k, &v)| (k as i32 - 1, v)).collect();
        let changes: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let max = changes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = changes.iter().position(|&c| c == max).unwrap() as i32 - 1;
        prop_assert_eq!(peak_in_series(&series), Some(first));
    }
}

#[test]
fn ari_six_point_fixture() {
    let a = [0, 0, 0, 1, 1, 1];
    let b = [0, 0, 1, 1, 2, 2];
    let got = adjusted_rand_index(&a, &b).unwrap();
    assert!((got.value - pair_ari(&a, &b)).abs() < 1e-12);
    // index 2, Σa 6, Σb 3, 15 pairs -> (2 − 1.2) / (4.5 − 1.2)
    assert!((got.value - 0.8 / 3.3).abs() < 1e-12);
    let relabeled = [2, 2, 2, 0, 0, 0];
    assert_eq!(adjusted_rand_index(&a, &relabeled).unwrap().value, 1.0);
}

fn clouds(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centers = [[0.0, 0.0, 0.0], [5.0, 5.0, 0.0], [0.0, 5.0, 5.0]];
    let mut x = Vec::new();
    let mut truth = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..8 {
            x.push(center.iter().map(|m| m + rng.gen_range(-0.5..0.5)).collect());
            truth.push(c);
        }
    }
    (x, truth)
}

#[test]
fn kmeans_recovers_clouds_deterministically() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (x, truth) = clouds(&mut rng);
    let a = kmeans(&x, 3, 4).unwrap();
    let b = kmeans(&x, 3, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(adjusted_rand_index(&a.assignments, &truth).unwrap().value, 1.0);
    for seed in 0..5 {
        let r = kmeans(&x, 3, seed).unwrap();
        assert_eq!(adjusted_rand_index(&r.assignments, &a.assignments).unwrap().value, 1.0);
    }
    assert!(a.silhouette > 0.8);
    assert_eq!(a.silhouette, silhouette(&x, &a.assignments, 3));
    let inertia: f64 = x
        .iter()
        .zip(&a.assignments)
        .map(|(v, &l)| v.iter().zip(&a.centroids[l]).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
        .sum();
    assert!((a.inertia - inertia).abs() < 1e-12);
    let p1 = pca_2d(&x).unwrap();
    assert_eq!(p1, pca_2d(&x).unwrap());
}

#[test]
fn elbow_finds_three_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (x, _) = clouds(&mut rng);
    let report = elbow(&x, 2, 6, 0).unwrap();
    assert_eq!(report.points.len(), 5);
    assert_eq!(report.max_curvature_k, Some(3));
    assert_eq!(report.max_silhouette_k, Some(3));
    for w in report.points.windows(3) {
        let c = w[0].inertia - 2.0 * w[1].inertia + w[2].inertia;
        assert_eq!(w[1].curvature, Some(c));
    }
    assert!(report.points[0].curvature.is_none() && report.points[4].curvature.is_none());
}

#[test]
fn silhouette_hand_values() {
    let x = vec![vec![0.0], vec![1.0], vec![4.0]];
    // Point 0: a = 1, b = 4 -> 0.75; point 1: a = 1, b = 3 -> 2/3; point 2 is a singleton.
    let s = silhouette(&x, &[0, 0, 1], 2);
    assert!((s - (0.75 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
    assert_eq!(silhouette(&x, &[0, 0, 0], 1), 0.0);
}

fn case_with(n: usize, special: &[usize]) -> ContrastCase {
    let mut case = ContrastCase::from_model(&toy_model(0), "sharp", vec![5; n], 7, 8, 3);
    for &p in special {
        case.special_mask[p] = true;
    }
    case
}

#[test]
fn sharpness_extremes() {
    let case = case_with(25, &[0]);
    let mut raw = vec![0.0; 25];
    raw[0] = 100.0;
    raw[7] = -3.0;
    let spike = sharpness(&Heatmap::from_raw(raw, &case.special_mask, 1.0).unwrap(), &case).unwrap();
    assert_eq!(spike.concentration, Some(1.0));
    assert!((spike.gini.unwrap() - 23.0 / 24.0).abs() < 1e-12);
    assert_eq!(spike.tokens, 24);

    let flat = sharpness(&Heatmap::from_raw(vec![0.5; 25], &case.special_mask, 1.0).unwrap(), &case).unwrap();
    assert!((flat.concentration.unwrap() - 10.0 / 24.0).abs() < 1e-12);
    assert_eq!(flat.gini, Some(0.0));

    let short = case_with(4, &[]);
    let s =
        sharpness(&Heatmap::from_raw(vec![1.0, -2.0, 3.0, 0.0], &short.special_mask, 1.0).unwrap(), &short).unwrap();
    assert_eq!(s.concentration, Some(1.0));

    let zero = sharpness(&Heatmap::from_raw(vec![0.0; 4], &short.special_mask, 1.0).unwrap(), &short).unwrap();
    assert_eq!((zero.concentration, zero.gini), (None, None));
}

fn record(id: &str, rows: &[(&str, f64, f64)]) -> RunRecord {
    let cases = rows
        .iter()
        .map(|&(c, d, q)| {
            let segments = SegmentBreakdown {
                segments: vec![
                    SegmentSum { name: "Question".into(), sum: q, count: 2 },
                    SegmentSum { name: "Answer".into(), sum: 1.0 - q, count: 3 },
                ],
            };
            (c.to_owned(), CaseRecord { delta_logit: d, segments })
        })
        .collect();
    RunRecord { run_id: id.into(), cases }
}

#[test]
fn three_run_comparison() {
    let base = record("base", &[("a", 2.0, 0.5), ("b", 1.0, 0.25), ("c", -1.0, 0.0), ("d", 3.0, 0.75)]);
    let mid = record("mid", &[("a", -1.0, 0.125), ("b", 0.5, 0.5), ("c", -2.0, 1.0), ("d", 3.0, 0.5)]);
    let late = record("late", &[("a", -3.0, 0.0), ("b", -0.5, 0.25), ("c", 1.0, 0.5)]);
    let ids: Vec<String> = ["a", "b", "c", "d", "a"].iter().map(|s| s.to_string()).collect();
    let cmp = compare_runs(&ids, &[base, mid, late]).unwrap();
    assert_eq!(cmp.excluded, vec!["d".to_owned()]);
    assert_eq!(cmp.rows.len(), 3);
    assert_eq!(cmp.rows[0].corrected, vec![false, true, true]);
    assert_eq!(cmp.rows[1].corrected, vec![false, false, true]);
    // Baseline Δℓ < 0: never counted as corrected.
    assert_eq!(cmp.rows[2].corrected, vec![false, false, false]);
    assert_eq!(cmp.rows[1].shifts, vec![0.0, -0.5, -1.5]);
    assert_eq!(cmp.runs[1].corrected_count, 1);
    assert_eq!(cmp.runs[2].corrected_rate, 2.0 / 3.0);
    assert_eq!(cmp.runs[0].mean_delta_logit, 2.0 / 3.0);
    let q = &cmp.runs[2].segments[0];
    assert_eq!(q.name, "Question");
    assert_eq!((q.corrected, q.uncorrected), (Some(0.125), Some(0.5)));
    let csv = cmp.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv.lines().nth(3).unwrap(), "c,-1.0,false,-2.0,false,1.0,false");
    assert!(compare_runs(&ids, &[]).is_err());
}

#[test]
fn run_records_follow_reports() {
    let (cases, reports) = reports(4, 3);
    let run = run_record("toy", &reports);
    assert_eq!(run.cases.len(), 3);
    for (case, report) in cases.iter().zip(&reports) {
        let rec = &run.cases[&case.case_id];
        assert_eq!(rec.delta_logit, report.delta_logit);
        assert_eq!(rec.segments, report.token_segments);
    }
    let same = compare_runs(&cases.iter().map(|c| c.case_id.clone()).collect::<Vec<_>>(), &[run.clone(), run]).unwrap();
    assert!(same.rows.iter().all(|r| r.delta_logits[0] == r.delta_logits[1] && !r.corrected[1]));
}
