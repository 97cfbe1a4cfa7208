//! Analytic FLOPs model, oracle error and the similarity, ARI and PCA
//! analyses.
//!
//! FLOPs cover the cached modules only (attention and MLP of every block);
//! the token embedding and the output head run identically under every
//! policy and are left out. Taylor forecasts are not charged.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::cache::{plan_schedule, CacheConfig, PolicyKind, StepTag};
use crate::cluster::ari;
use crate::matrix::{seeded_gaussian, FeatureMap};
use crate::model::ModelConfig;
use crate::rng::{SeededRng, Stream};
use crate::{Error, Result};

// ── FLOPs model ─────────────────────────────────────────────────────────────

/// Attention cost with `computed` query tokens:
/// `T·D²` (key/value projection) `+ c·D²` (queries) `+ 2·c·T·D` (scores and
/// weighted sum) `+ c·D²` (output projection). Zero when nothing is computed.
pub fn attention_flops(tokens: usize, dim: usize, computed: usize) -> u64 {
    if computed == 0 {
        return 0;
    }
    let (t, d, c) = (tokens as u64, dim as u64, computed as u64);
    t * d * d + c * d * d + 2 * c * t * d + c * d * d
}

/// MLP cost: `8·c·D²` for the two `D × 4D` projections.
pub fn mlp_flops(dim: usize, computed: usize) -> u64 {
    let (d, c) = (dim as u64, computed as u64);
    8 * c * d * d
}

/// Distance evaluations of one Lloyd assignment pass: `T·K·D`.
pub fn kmeans_iteration_flops(tokens: usize, clusters: usize, dim: usize) -> u64 {
    (tokens * clusters * dim) as u64
}

/// Cluster means (`c·D` adds, `K·D` divides) and the blend
/// (`3·D` per non-computed token) for one module.
pub fn propagation_flops(tokens: usize, dim: usize, computed: usize, clusters: usize) -> u64 {
    let stale = tokens.saturating_sub(computed);
    (computed * dim + clusters * dim + 3 * stale * dim) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlopsTally {
    pub model: u64,
    pub clustering: u64,
    pub propagation: u64,
}

impl FlopsTally {
    pub fn total(&self) -> u64 {
        self.model + self.clustering + self.propagation
    }

    pub fn add(&mut self, other: &FlopsTally) {
        self.model += other.model;
        self.clustering += other.clustering;
        self.propagation += other.propagation;
    }

    /// Clustering FLOPs as a fraction of the total.
    pub fn clustering_share(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.clustering as f64 / t as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlopsEstimate {
    pub policy: FlopsTally,
    pub full: FlopsTally,
    /// Full-policy model FLOPs over policy model FLOPs.
    pub speedup_model: f64,
    /// Full-policy FLOPs over all policy FLOPs, overheads included.
    pub speedup_total: f64,
}

impl FlopsEstimate {
    pub fn new(policy: FlopsTally, full: FlopsTally) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { f64::INFINITY } else { a as f64 / b as f64 };
        Self {
            policy,
            full,
            speedup_model: ratio(full.model, policy.model),
            speedup_total: ratio(full.total(), policy.total()),
        }
    }
}

/// Model FLOPs of one uncached step.
pub fn full_step_flops(model: &ModelConfig) -> u64 {
    let (t, d) = (model.tokens(), model.dim);
    model.depth as u64 * (attention_flops(t, d, t) + mlp_flops(d, t))
}

/// Analytic FLOPs of a whole run.
///
/// Partial steps recompute `K` tokens under ToCa-proxy and ClusCa (all `K`
/// clusters assumed non-empty). Clustering is charged as an upper bound: one
/// k-means++ seeding pass plus `kmeans_max_iters` Lloyd passes per Full step.
pub fn count_flops(model: &ModelConfig, steps: usize, cache: &CacheConfig) -> FlopsEstimate {
    let (t, d, depth) = (model.tokens(), model.dim, model.depth as u64);
    let k = cache.clusters.min(t);
    let full_step = full_step_flops(model);
    let plan = plan_schedule(steps, cache.effective_interval(), cache.rearrange_last);
    let mut tally = FlopsTally::default();
    for (i, tag) in plan.tags().iter().enumerate() {
        match (tag, cache.policy) {
            (StepTag::Full, policy) => {
                tally.model += full_step;
                if policy == PolicyKind::ClusCa {
                    let passes = cache.kmeans_max_iters as u64 + u64::from(i == 0);
                    tally.clustering += passes * kmeans_iteration_flops(t, k, d);
                }
            }
            (StepTag::Partial, PolicyKind::Full | PolicyKind::Fora | PolicyKind::TaylorSeer) => {}
            (StepTag::Partial, PolicyKind::Toca) => {
                tally.model += depth * (attention_flops(t, d, k) + mlp_flops(d, k));
            }
            (StepTag::Partial, PolicyKind::ClusCa) => {
                let c = if cache.representatives { k } else { 0 };
                tally.model += depth * (attention_flops(t, d, c) + mlp_flops(d, c));
                tally.propagation += 2 * depth * propagation_flops(t, d, c, k);
            }
        }
    }
    let full = FlopsTally {
        model: steps as u64 * full_step,
        ..FlopsTally::default()
    };
    FlopsEstimate::new(tally, full)
}

// ── Error and similarity ────────────────────────────────────────────────────

/// `‖a − b‖_F / max(‖b‖_F, f64::MIN_POSITIVE)`.
pub fn relative_error(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    let diff = a.sub(b)?;
    Ok(diff.frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE))
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMode {
    /// Row `s`, column `i`: token `i` at snapshot `s` against snapshot `s + dt`.
    Temporal { dt: usize },
    /// Token-pair similarity within one snapshot.
    Spatial { snapshot: usize },
}

pub fn similarity_map(snapshots: &[FeatureMap], mode: SimilarityMode) -> Result<FeatureMap> {
    match mode {
        SimilarityMode::Temporal { dt } => {
            if dt == 0 || snapshots.len() <= dt {
                return Err(Error::shape(
                    "similarity_map",
                    format!("more than {dt} snapshots and dt >= 1"),
                    format!("{}", snapshots.len()),
                ));
            }
            let t = snapshots[0].rows();
            if snapshots.iter().any(|s| s.shape() != snapshots[0].shape()) {
                return Err(Error::shape("similarity_map", "equal snapshot shapes", "mixed shapes"));
            }
            let pairs = snapshots.len() - dt;
            let mut data = Vec::with_capacity(pairs * t);
            for s in 0..pairs {
                for i in 0..t {
                    data.push(cosine(snapshots[s].row(i), snapshots[s + dt].row(i)));
                }
            }
            Ok(FeatureMap::from_parts(pairs, t, data))
        }
        SimilarityMode::Spatial { snapshot } => {
            let snap = snapshots.get(snapshot).ok_or(Error::Bounds {
                index: snapshot,
                len: snapshots.len(),
            })?;
            let t = snap.rows();
            if t < 2 {
                return Err(Error::shape("similarity_map", "at least 2 tokens", format!("{t}")));
            }
            let mut data = vec![0.0; t * t];
            for i in 0..t {
                for j in i..t {
                    let c = cosine(snap.row(i), snap.row(j));
                    data[i * t + j] = c;
                    data[j * t + i] = c;
                }
            }
            Ok(FeatureMap::from_parts(t, t, data))
        }
    }
}

// ── ARI series ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AriPoint {
    pub dt: usize,
    pub step_a: usize,
    pub step_b: usize,
    pub ari: f64,
}

/// ARI between every pair of labelings whose steps differ by one of `dts`.
pub fn ari_series(assignments: &[(usize, &[usize])], dts: &[usize]) -> Result<Vec<AriPoint>> {
    let mut out = Vec::new();
    for &dt in dts {
        for (i, (step_a, a)) in assignments.iter().enumerate() {
            for (step_b, b) in &assignments[i + 1..] {
                if step_b.checked_sub(*step_a) == Some(dt) {
                    out.push(AriPoint {
                        dt,
                        step_a: *step_a,
                        step_b: *step_b,
                        ari: ari(a, b)?,
                    });
                }
            }
        }
    }
    Ok(out)
}

// ── PCA ─────────────────────────────────────────────────────────────────────

const PCA_MAX_ITERS: usize = 10_000;
const PCA_TOL: f64 = 1e-13;

fn mat_vec(m: &FeatureMap, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Leading eigenpair of a symmetric PSD matrix by power iteration from a
/// fixed seeded start. The sign is fixed so the largest component is positive.
fn leading_eigen(cov: &FeatureMap) -> (f64, Vec<f64>) {
    let d = cov.rows();
    let mut v = seeded_gaussian(1, d, &mut SeededRng::new(0x9ca, Stream::Analysis)).into_data();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..PCA_MAX_ITERS {
        let mut next = mat_vec(cov, &v);
        lambda = normalize(&mut next);
        if lambda == 0.0 {
            return (0.0, vec![0.0; d]);
        }
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < PCA_TOL {
            break;
        }
    }
    let pivot = v
        .iter()
        .copied()
        .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (lambda, v)
}

/// Projects the rows of `points` onto the top two principal components.
pub fn pca2d(points: &FeatureMap) -> Result<FeatureMap> {
    let (n, d) = points.shape();
    if n < 2 {
        return Err(Error::shape("pca2d", "at least 2 points", format!("{n}")));
    }
    let mut centered = points.clone();
    for c in 0..d {
        let mean = (0..n).map(|r| points.get(r, c)).sum::<f64>() / n as f64;
        for r in 0..n {
            centered.row_mut(r)[c] -= mean;
        }
    }
    let mut cov = FeatureMap::zeros(d, d);
    for r in 0..n {
        let row = centered.row(r);
        for i in 0..d {
            for j in 0..d {
                cov.row_mut(i)[j] += row[i] * row[j] / (n - 1) as f64;
            }
        }
    }
    let (l1, v1) = leading_eigen(&cov);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated.row_mut(i)[j] -= l1 * v1[i] * v1[j];
        }
    }
    let (_, v2) = if d > 1 { leading_eigen(&deflated) } else { (0.0, vec![0.0; d]) };
    let mut out = FeatureMap::zeros(n, 2);
    for r in 0..n {
        let row = centered.row(r);
        let p1: f64 = row.iter().zip(&v1).map(|(a, b)| a * b).sum();
        let p2: f64 = row.iter().zip(&v2).map(|(a, b)| a * b).sum();
        out.row_mut(r).copy_from_slice(&[p1, p2]);
    }
    Ok(out)
}
