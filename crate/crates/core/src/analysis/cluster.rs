// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub silhouette: f64,
    pub seed: u64,
    pub iterations: usize,
    /// Times an empty cluster was refilled.
    pub repairs: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_vectors(vectors: &[Vec<f64>]) -> Result<usize> {
    let dim = vectors.first().map(Vec::len).ok_or_else(|| Error::input("no samples"))?;
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::input("samples differ in length"));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cluster input"));
    }
    Ok(dim)
}

/// Seeded first center, then repeatedly the point farthest from all chosen
/// centers (ties by lowest index).
fn farthest_point_init(vectors: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..vectors.len());
    let mut centers = vec![vectors[first].clone()];
    let mut nearest: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &vectors[first])).collect();
    while centers.len() < k {
        let mut pick = 0;
        for (i, &d) in nearest.iter().enumerate() {
            if d > nearest[pick] {
                pick = i;
            }
        }
        centers.push(vectors[pick].clone());
        for (i, v) in vectors.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(v, &vectors[pick]));
        }
    }
    centers
}

fn assign(vectors: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<usize> {
    vectors
        .iter()
        .map(|v| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(v, center);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

fn centroids(vectors: &[Vec<f64>], labels: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (v, &l) in vectors.iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(v) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    sums
}

/// Moves the member of the largest cluster farthest from its centroid into
/// each empty cluster. Returns the number of moves.
fn repair_empty(vectors: &[Vec<f64>], labels: &mut [usize], k: usize, dim: usize) -> usize {
    let mut moves = 0;
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return moves;
        };
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).expect("k >= 1");
        let centers = centroids(vectors, labels, k, dim);
        let mut pick = None;
        let mut pick_d = -1.0;
        for (i, v) in vectors.iter().enumerate() {
            if labels[i] == largest {
                let d = sq_dist(v, &centers[largest]);
                if d > pick_d {
                    pick = Some(i);
                    pick_d = d;
                }
            }
        }
        labels[pick.expect("largest cluster has members")] = empty;
        moves += 1;
    }
}

/// Lloyd iterations from a farthest-point initialization until the
/// assignment stops changing or [`MAX_ITERATIONS`] is reached.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterResult> {
    let dim = check_vectors(vectors)?;
    if k == 0 || k > vectors.len() {
        return Err(Error::input(format!("k = {k} must lie in [1, {}]", vectors.len())));
    }
    let mut centers = farthest_point_init(vectors, k, seed);
    let mut labels: Vec<usize> = Vec::new();
    let mut iterations = 0;
    let mut repairs = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut next = assign(vectors, &centers);
        repairs += repair_empty(vectors, &mut next, k, dim);
        let settled = next == labels;
        labels = next;
        centers = centroids(vectors, &labels, k, dim);
        if settled {
            break;
        }
    }
    let inertia = vectors.iter().zip(&labels).map(|(v, &l)| sq_dist(v, &centers[l])).sum();
    let silhouette = silhouette(vectors, &labels, k);
    Ok(ClusterResult { k, assignments: labels, centroids: centers, inertia, silhouette, seed, iterations, repairs })
}

/// Mean silhouette over samples with Euclidean distance; members of
/// singleton clusters score 0, and fewer than two clusters score 0.
pub fn silhouette(vectors: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let n = vectors.len();
    if k < 2 || n == 0 {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if counts[own] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += sq_dist(&vectors[i], &vectors[j]).sqrt();
            }
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    total / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowPoint {
    pub k: usize,
    pub inertia: f64,
    pub silhouette: f64,
    /// `I(k−1) − 2·I(k) + I(k+1)`; absent at the ends of the scanned range.
    pub curvature: Option<f64>,
}

/// Advisory model-selection scan: inertia, silhouette and discrete
/// curvature for each `k` in `[k_min, k_max]` (clipped to the sample count).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowReport {
    pub points: Vec<ElbowPoint>,
    pub max_curvature_k: Option<usize>,
    pub max_silhouette_k: Option<usize>,
}

pub fn elbow(vectors: &[Vec<f64>], k_min: usize, k_max: usize, seed: u64) -> Result<ElbowReport> {
    let k_max = k_max.min(vectors.len());
    let runs = (k_min.max(1)..=k_max).map(|k| kmeans(vectors, k, seed)).collect::<Result<Vec<_>>>()?;
    let points: Vec<ElbowPoint> = runs
        .iter()
        .enumerate()
        .map(|(idx, r)| ElbowPoint {
            k: r.k,
            inertia: r.inertia,
            silhouette: r.silhouette,
            curvature: (idx > 0 && idx + 1 < runs.len())
                .then(|| runs[idx - 1].inertia - 2.0 * r.inertia + runs[idx + 1].inertia),
        })
        .collect();
    let argmax = |f: &dyn Fn(&ElbowPoint) -> Option<f64>| {
        points
            .iter()
            .filter_map(|p| f(p).map(|v| (p.k, v)))
            .fold(None, |best: Option<(usize, f64)>, (k, v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((k, v)),
            })
            .map(|(k, _)| k)
    };
    let max_curvature_k = argmax(&|p| p.curvature);
    let max_silhouette_k = argmax(&|p| Some(p.silhouette));
    Ok(ElbowReport { points, max_curvature_k, max_silhouette_k })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_clouds() {
        let mut v = Vec::new();
        for i in 0..5 {
            v.push(vec![i as f64 * 0.01, 0.0]);
            v.push(vec![100.0 + i as f64 * 0.01, 50.0]);
        }
        let r = kmeans(&v, 2, 7).unwrap();
        for (i, &l) in r.assignments.iter().enumerate() {
            assert_eq!(l, r.assignments[i % 2]);
        }
        assert_ne!(r.assignments[0], r.assignments[1]);
        assert!(r.silhouette > 0.99);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let v = vec![vec![1.0], vec![2.0], vec![5.0]];
        let r = kmeans(&v, 3, 0).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn duplicates_are_repaired() {
        let v = vec![vec![1.0, 1.0]; 4];
        let r = kmeans(&v, 3, 1).unwrap();
        let mut used = r.assignments.clone();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), 3);
        assert!(r.repairs > 0);
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn bad_k() {
        assert!(kmeans(&[vec![1.0]], 2, 0).is_err());
        assert!(kmeans(&[vec![1.0]], 0, 0).is_err());
        assert!(kmeans(&[vec![1.0], vec![1.0, 2.0]], 1, 0).is_err());
    }
}
