use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::taylor::TaylorCacheEntry;
use crate::matrix::FeatureMap;
use crate::model::TokenRows;
use crate::{Error, Result};

/// Per-cluster mean of the freshly computed rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMeans {
    dim: usize,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl ClusterMeans {
    pub fn clusters(&self) -> usize {
        self.counts.len()
    }

    /// `None` when no computed token belongs to cluster `c`.
    pub fn mean(&self, c: usize) -> Option<&[f64]> {
        (self.counts[c] > 0).then(|| &self.sums[c * self.dim..(c + 1) * self.dim])
    }
}

/// `μ_c = Σ_{j computed, label j = c} F(x_j) / #{j computed, label j = c}`.
pub fn cluster_mean(computed: &TokenRows, labels: &[usize], clusters: usize) -> Result<ClusterMeans> {
    let dim = computed.dim();
    let mut sums = vec![0.0; clusters * dim];
    let mut counts = vec![0usize; clusters];
    for (i, row) in computed.iter() {
        let c = *labels.get(i).ok_or(Error::Bounds {
            index: i,
            len: labels.len(),
        })?;
        if c >= clusters {
            return Err(Error::policy(format!("label {c} outside 0..{clusters}")));
        }
        counts[c] += 1;
        for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 1 {
            for s in &mut sums[c * dim..(c + 1) * dim] {
                *s /= n as f64;
            }
        }
    }
    Ok(ClusterMeans { dim, sums, counts })
}

/// Spatial propagation onto a temporal estimate.
///
/// Computed tokens take their fresh rows. Every other token becomes
/// `γ·μ_c + (1−γ)·temporal`, where `c` is its cluster; tokens whose cluster
/// has no computed member keep the temporal value unchanged.
pub fn propagate(temporal: &FeatureMap, computed: &TokenRows, labels: &[usize], clusters: usize, gamma: f64) -> Result<FeatureMap> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config("cache.gamma", format!("{gamma} outside [0, 1]")));
    }
    if labels.len() != temporal.rows() || computed.dim() != temporal.cols() {
        return Err(Error::shape(
            "propagate",
            format!("{} labels, dim {}", temporal.rows(), temporal.cols()),
            format!("{} labels, dim {}", labels.len(), computed.dim()),
        ));
    }
    let means = cluster_mean(computed, labels, clusters)?;
    let mut out = temporal.clone();
    let mut is_computed = vec![false; temporal.rows()];
    for (i, row) in computed.iter() {
        is_computed[i] = true;
        out.row_mut(i).copy_from_slice(row);
    }
    for (i, &c) in labels.iter().enumerate() {
        if is_computed[i] {
            continue;
        }
        if let Some(mu) = means.mean(c) {
            for (o, m) in out.row_mut(i).iter_mut().zip(mu) {
                *o = gamma * m + (1.0 - gamma) * *o;
            }
        }
    }
    Ok(out)
}

/// ClusCa update for one module at a Partial step `k` after the last refresh.
///
/// The temporal component is the order-`order` Taylor forecast. The result
/// is returned and also stored as the entry's working cache.
#[allow(clippy::too_many_arguments)]
pub fn clusca_update(
    entry: &mut TaylorCacheEntry,
    computed: &TokenRows,
    labels: &[usize],
    clusters: usize,
    gamma: f64,
    k: usize,
    span: usize,
    order: usize,
) -> Result<FeatureMap> {
    let temporal = entry.forecast(k, span, order)?;
    let estimate = propagate(&temporal, computed, labels, clusters, gamma)?;
    entry.set_working(estimate.clone());
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ComputeSet;

    fn rows(indices: &[usize], tokens: usize, dim: usize, values: &[f64]) -> TokenRows {
        TokenRows::new(ComputeSet::new(indices.to_vec(), tokens).unwrap(), dim, values.to_vec()).unwrap()
    }

    #[test]
    fn single_member_mean_is_that_member() {
        let r = rows(&[1, 3], 4, 2, &[1.0, 2.0, 5.0, 6.0]);
        let m = cluster_mean(&r, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.mean(0), Some(&[1.0, 2.0][..]));
        assert_eq!(m.mean(1), Some(&[5.0, 6.0][..]));
    }

    #[test]
    fn two_members_average() {
        let r = rows(&[0, 2], 3, 1, &[1.0, 3.0]);
        let m = cluster_mean(&r, &[0, 1, 0], 2).unwrap();
        assert_eq!(m.mean(0), Some(&[2.0][..]));
        assert_eq!(m.mean(1), None);
    }

    #[test]
    fn blend_arithmetic() {
        let temporal = FeatureMap::filled(3, 1, 1.0);
        let computed = rows(&[0], 3, 1, &[2.0]);
        let labels = [0, 0, 1];

        let out = propagate(&temporal, &computed, &labels, 2, 0.005).unwrap();
        assert_eq!(out.get(0, 0), 2.0);
        assert!((out.get(1, 0) - 1.005).abs() <= 1e-15);
        // Cluster 1 has no computed member.
        assert_eq!(out.get(2, 0), 1.0);

        let out = propagate(&temporal, &computed, &labels, 2, 0.0).unwrap();
        assert_eq!(out.get(1, 0), 1.0);
        let out = propagate(&temporal, &computed, &labels, 2, 1.0).unwrap();
        assert_eq!(out.get(1, 0), 2.0);
    }

    #[test]
    fn gamma_out_of_range_is_a_config_error() {
        let temporal = FeatureMap::filled(2, 1, 1.0);
        let computed = rows(&[0], 2, 1, &[2.0]);
        assert!(matches!(
            propagate(&temporal, &computed, &[0, 0], 1, 1.5),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn update_writes_back_the_working_cache() {
        let mut entry = TaylorCacheEntry::new(1);
        entry.refresh_full(FeatureMap::filled(2, 1, 4.0), 0).unwrap();
        let computed = rows(&[1], 2, 1, &[8.0]);
        let out = clusca_update(&mut entry, &computed, &[0, 0], 1, 0.5, 1, 5, 1).unwrap();
        assert_eq!(out.data(), &[6.0, 8.0]);
        assert_eq!(entry.working(), Some(&out));
    }
}
