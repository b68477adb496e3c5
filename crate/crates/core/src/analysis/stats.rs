// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::attribution::{ContrastCase, Heatmap};
use crate::error::{Error, Result};

/// Relative eigenvalue floor under which the second axis counts as absent.
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Variance along the two axes (population covariance eigenvalues).
    pub explained_variance: [f64; 2],
    pub explained_ratio: [f64; 2],
    /// Unit principal axes, sign fixed so the largest-magnitude entry is positive.
    pub axes: [Vec<f64>; 2],
    pub mean: Vec<f64>,
    /// Set when the data has fewer than two directions of variance.
    pub rank_deficient: bool,
}

/// Mean-centered projection onto the top two eigenvectors of the
/// population covariance.
pub fn pca_2d(vectors: &[Vec<f64>]) -> Result<Projection> {
    if vectors.len() < 2 {
        return Err(Error::input("PCA needs at least two samples"));
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::input("PCA samples must share a positive dimension"));
    }
    let n = vectors.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|c| vectors.iter().map(|v| v[c]).sum::<f64>() / n).collect();
    let centered = DMatrix::from_fn(vectors.len(), dim, |r, c| vectors[r][c] - mean[c]);
    let cov = (centered.transpose() * &centered) / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0)).sum();

    let mut axes: [Vec<f64>; 2] = [vec![0.0; dim], vec![0.0; dim]];
    let mut variance = [0.0; 2];
    let mut present = [false; 2];
    for slot in 0..2 {
        let Some(&idx) = order.get(slot) else {
            continue;
        };
        let lambda = eig.eigenvalues[idx].max(0.0);
        if lambda <= RANK_TOLERANCE * total.max(f64::MIN_POSITIVE) {
            continue;
        }
        let mut axis: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = axis.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
        axes[slot] = axis;
        variance[slot] = lambda;
        present[slot] = true;
    }
    let coords = (0..vectors.len())
        .map(|r| {
            let row = centered.row(r);
            let dot = |axis: &[f64]| row.iter().zip(axis).map(|(a, b)| a * b).sum::<f64>();
            [dot(&axes[0]), dot(&axes[1])]
        })
        .collect();
    let ratio = |v: f64| if total > 0.0 { v / total } else { 0.0 };
    Ok(Projection {
        coords,
        explained_variance: variance,
        explained_ratio: [ratio(variance[0]), ratio(variance[1])],
        axes,
        mean,
        rank_deficient: !present[1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatio {
    /// Mean of within-cluster population variances.
    pub intra: f64,
    /// Population variance of the cluster means.
    pub inter: f64,
    /// `intra / inter`; `None` when `inter` is zero.
    pub ratio: Option<f64>,
}

pub fn variance_ratio(features: &[f64], labels: &[usize]) -> Result<VarianceRatio> {
    if features.len() != labels.len() {
        return Err(Error::input("features and labels differ in length"));
    }
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&x, &l) in features.iter().zip(labels) {
        groups.entry(l).or_default().push(x);
    }
    if groups.len() < 2 {
        return Err(Error::input("variance ratio needs at least two clusters"));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let var = |xs: &[f64]| {
        let m = mean(xs);
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
    };
    let k = groups.len() as f64;
    let intra = groups.values().map(|g| var(g)).sum::<f64>() / k;
    let means: Vec<f64> = groups.values().map(|g| mean(g)).collect();
    let inter = var(&means);
    let ratio = (inter > 0.0).then(|| intra / inter);
    Ok(VarianceRatio { intra, inter, ratio })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ari {
    pub value: f64,
    /// One side has a single cluster, or the adjustment denominator is zero;
    /// value is then 0.
    pub degenerate: bool,
}

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index from the contingency table.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<Ari> {
    if a.len() != b.len() {
        return Err(Error::input("labelings differ in length"));
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let pairs = choose2(a.len() as u64);
    if pairs == 0.0 || rows.len() < 2 || cols.len() < 2 {
        return Ok(Ari { value: 0.0, degenerate: true });
    }
    let expected = sum_a * sum_b / pairs;
    let max = (sum_a + sum_b) / 2.0;
    if max - expected == 0.0 {
        return Ok(Ari { value: 0.0, degenerate: true });
    }
    Ok(Ari { value: (index - expected) / (max - expected), degenerate: false })
}

/// `Σ (2i − K − 1) x_(i) / (K Σ x)` over ascending `|values|`, `i` from 1.
/// `None` when every value is zero or the input is empty.
pub fn gini(values: &[f64]) -> Option<f64> {
    let mut xs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    xs.sort_by(f64::total_cmp);
    let k = xs.len() as f64;
    let total: f64 = xs.iter().sum();
    if xs.is_empty() || total == 0.0 {
        return None;
    }
    let weighted: f64 = xs.iter().enumerate().map(|(i, x)| (2.0 * (i + 1) as f64 - k - 1.0) * x).sum();
    Some(weighted / (k * total))
}

pub const CONCENTRATION_TOP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sharpness {
    /// Share of non-special `|relevance|` mass in the top ten tokens.
    pub concentration: Option<f64>,
    pub gini: Option<f64>,
    pub tokens: usize,
}

/// Concentration and Gini of `|raw relevance|` over non-special tokens.
pub fn sharpness(heatmap: &Heatmap, case: &ContrastCase) -> Result<Sharpness> {
    if heatmap.len() != case.len() {
        return Err(Error::shape("heatmap length differs from case length"));
    }
    let mut mags: Vec<f64> = case.non_special_positions().map(|p| heatmap.raw[p].abs()).collect();
    if mags.is_empty() {
        return Err(Error::input(format!("case {} has no non-special tokens", case.case_id)));
    }
    mags.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = mags.iter().sum();
    let concentration = (total > 0.0).then(|| mags.iter().take(CONCENTRATION_TOP).sum::<f64>() / total);
    Ok(Sharpness { concentration, gini: gini(&mags), tokens: mags.len() })
}
