//! K-Means over token features, representative selection and partition
//! statistics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::FeatureMap;
use crate::model::ComputeSet;
use crate::rng::SeededRng;
use crate::{Error, Result};

/// Result of a K-Means run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: FeatureMap,
    /// Within-cluster sum of squares of `labels` against `centroids`.
    pub inertia: f64,
    /// Lloyd iterations performed (assignment + update rounds).
    pub iterations: usize,
    /// Objective after each assignment step.
    pub wcss_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn tokens(&self) -> usize {
        self.labels.len()
    }

    /// Member token indices per cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn non_empty_clusters(&self) -> usize {
        self.members().iter().filter(|m| !m.is_empty()).count()
    }
}

/// Centroids kept from the last full-calculation clustering.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CentroidCache {
    pub centroids: FeatureMap,
    /// Denoising step the centroids came from.
    pub step: usize,
}

#[derive(Debug)]
pub enum KMeansInit<'a> {
    /// k-means++ seeding from the given stream.
    Random(&'a mut SeededRng),
    WarmStart(&'a CentroidCache),
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &FeatureMap) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(features: &FeatureMap, k: usize, rng: &mut SeededRng) -> FeatureMap {
    let t = features.rows();
    let mut centroids = FeatureMap::zeros(k, features.cols());
    let first = rng.below(t);
    centroids.row_mut(0).copy_from_slice(features.row(first));
    let mut d2: Vec<f64> = (0..t).map(|i| sq_dist(features.row(i), features.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut chosen = t - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    chosen = i;
                    break;
                }
            }
            // Rounding can leave `target` past the last positive weight.
            if d2[chosen] == 0.0 {
                chosen = (0..t).rev().find(|&i| d2[i] > 0.0).unwrap_or(first);
            }
            chosen
        } else {
            first
        };
        centroids.row_mut(c).copy_from_slice(features.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(features.row(i), features.row(pick)));
        }
    }
    centroids
}

fn assign(features: &FeatureMap, centroids: &FeatureMap, labels: &mut [usize]) -> f64 {
    let mut wcss = 0.0;
    for (i, l) in labels.iter_mut().enumerate() {
        let (c, d) = nearest(features.row(i), centroids);
        *l = c;
        wcss += d;
    }
    wcss
}

/// Means of the assigned members. Empty clusters move to the point farthest
/// from its nearest centroid, processed in cluster order.
fn update(features: &FeatureMap, labels: &[usize], k: usize) -> FeatureMap {
    let d = features.cols();
    let mut sums = FeatureMap::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            for s in sums.row_mut(c) {
                *s /= n as f64;
            }
        }
    }
    let mut centroids = sums;
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let live: Vec<usize> = (0..k).filter(|&j| counts[j] > 0 || j < c).collect();
        let mut far = (0, -1.0);
        for i in 0..features.rows() {
            let dist = live
                .iter()
                .map(|&j| sq_dist(features.row(i), centroids.row(j)))
                .fold(f64::INFINITY, f64::min);
            if dist > far.1 {
                far = (i, dist);
            }
        }
        centroids.row_mut(c).copy_from_slice(features.row(far.0));
    }
    centroids
}

/// Lloyd's algorithm until the largest centroid move is at most `tol` or
/// `max_iters` rounds have run.
pub fn kmeans(features: &FeatureMap, k: usize, init: KMeansInit<'_>, max_iters: usize, tol: f64) -> Result<ClusterAssignment> {
    let t = features.rows();
    if k == 0 || k > t {
        return Err(Error::config("cache.clusters", format!("K = {k} must lie in 1..={t}")));
    }
    if max_iters == 0 {
        return Err(Error::config("cache.kmeans_max_iters", "must be >= 1"));
    }
    if !(tol >= 0.0) {
        return Err(Error::config("cache.kmeans_tol", "must be >= 0"));
    }
    let mut centroids = match init {
        KMeansInit::Random(rng) => kmeans_pp(features, k, rng),
        KMeansInit::WarmStart(cache) => {
            if cache.centroids.shape() != (k, features.cols()) {
                return Err(Error::shape(
                    "kmeans warm start",
                    format!("{k}x{}", features.cols()),
                    format!("{}x{}", cache.centroids.rows(), cache.centroids.cols()),
                ));
            }
            cache.centroids.clone()
        }
    };
    let mut labels = vec![0usize; t];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        history.push(assign(features, &centroids, &mut labels));
        let next = update(features, &labels, k);
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centroids.row(c)))
            .fold(0.0, f64::max);
        centroids = next;
        if libm::sqrt(shift) <= tol {
            break;
        }
    }
    let inertia = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(features.row(i), centroids.row(l)))
        .sum();
    Ok(ClusterAssignment {
        labels,
        centroids,
        inertia,
        iterations,
        wcss_history: history,
    })
}

/// One uniformly chosen member per non-empty cluster, drawn in cluster order.
pub fn select_representatives(a: &ClusterAssignment, rng: &mut SeededRng) -> ComputeSet {
    let picks = a
        .members()
        .into_iter()
        .filter(|m| !m.is_empty())
        .map(|m| m[rng.below(m.len())])
        .collect();
    ComputeSet::new(picks, a.tokens()).expect("members are valid token indices")
}

/// Adjusted Rand index between two labelings.
///
/// Evaluated exactly in integers as
/// `2 (Σ C(n_ij,2)·C(n,2) − Σa·Σb) / ((Σa + Σb)·C(n,2) − 2 Σa·Σb)`.
/// When the denominator vanishes (both partitions a single cluster, both all
/// singletons, or fewer than two items) the partitions coincide and the
/// result is 1.
pub fn ari(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::shape(
            "ari",
            format!("{}", labels_a.len()),
            format!("{}", labels_b.len()),
        ));
    }
    let pairs = |n: i128| n * (n - 1) / 2;
    let mut table: BTreeMap<(usize, usize), i128> = BTreeMap::new();
    let mut rows: BTreeMap<usize, i128> = BTreeMap::new();
    let mut cols: BTreeMap<usize, i128> = BTreeMap::new();
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: i128 = table.values().map(|&n| pairs(n)).sum();
    let sum_a: i128 = rows.values().map(|&n| pairs(n)).sum();
    let sum_b: i128 = cols.values().map(|&n| pairs(n)).sum();
    let total = pairs(labels_a.len() as i128);
    let num = 2 * (index * total - sum_a * sum_b);
    let den = (sum_a + sum_b) * total - 2 * sum_a * sum_b;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DistanceStats {
    pub intra_mean: f64,
    pub global_mean: f64,
    /// `intra_mean / global_mean`, or 0 when every token coincides.
    pub ratio: f64,
}

/// Mean pairwise Euclidean distance within clusters and over all pairs.
pub fn distance_stats(features: &FeatureMap, labels: &[usize]) -> Result<DistanceStats> {
    let t = features.rows();
    if t < 2 {
        return Err(Error::shape("distance_stats", "at least 2 tokens", format!("{t}")));
    }
    if labels.len() != t {
        return Err(Error::shape("distance_stats", format!("{t} labels"), format!("{}", labels.len())));
    }
    let (mut intra, mut intra_n, mut global) = (0.0, 0usize, 0.0);
    for i in 0..t {
        for j in i + 1..t {
            let d = libm::sqrt(sq_dist(features.row(i), features.row(j)));
            global += d;
            if labels[i] == labels[j] {
                intra += d;
                intra_n += 1;
            }
        }
    }
    let global_mean = global / (t * (t - 1) / 2) as f64;
    let intra_mean = if intra_n == 0 { 0.0 } else { intra / intra_n as f64 };
    let ratio = if global_mean == 0.0 { 0.0 } else { intra_mean / global_mean };
    Ok(DistanceStats {
        intra_mean,
        global_mean,
        ratio,
    })
}
