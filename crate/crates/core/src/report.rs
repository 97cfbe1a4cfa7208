//! Run results.

use alloc::string::String;
use alloc::vec::Vec;

use crate::cache::{PolicyKind, StepTag};
use crate::cluster::DistanceStats;
use crate::matrix::FeatureMap;
use crate::metrics::{AriPoint, FlopsTally};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    /// Position in denoising order, starting at 0.
    pub step: usize,
    /// Diffusion timestep, counting down from the step count to 1.
    pub t: usize,
    pub tag: StepTag,
    /// Steps since the last Full step.
    pub offset: usize,
    pub compute_tokens: usize,
    pub flops: FlopsTally,
    pub latent_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AssignmentRecord {
    pub step: usize,
    pub labels: Vec<usize>,
    pub iterations: usize,
    pub inertia: f64,
    pub non_empty: usize,
    pub distance: DistanceStats,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Snapshot {
    pub step: usize,
    pub t: usize,
    pub latent: Option<FeatureMap>,
    pub features: Option<FeatureMap>,
}

/// Wall-clock nanoseconds per category. Not deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Timing {
    pub model_ns: u64,
    pub clustering_ns: u64,
    pub propagation_ns: u64,
    pub total_ns: u64,
}

impl Timing {
    pub fn clustering_share(&self) -> f64 {
        if self.total_ns == 0 {
            0.0
        } else {
            self.clustering_ns as f64 / self.total_ns as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunReport {
    pub policy: PolicyKind,
    pub label: String,
    pub final_latent: FeatureMap,
    pub flops: FlopsTally,
    /// FLOPs of the uncached run of the same model and step count.
    pub full_flops: FlopsTally,
    pub speedup_model: f64,
    pub speedup_total: f64,
    pub clustering_share: f64,
    /// Relative Frobenius error of `final_latent` against the oracle run.
    #[cfg_attr(feature = "serde", serde(skip_serializing_if = "Option::is_none", default))]
    pub error_vs_oracle: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub assignments: Vec<AssignmentRecord>,
    pub ari_series: Vec<AriPoint>,
    pub trajectory: Vec<Snapshot>,
    #[cfg_attr(feature = "serde", serde(skip_serializing_if = "Option::is_none", default))]
    pub timing: Option<Timing>,
}

impl RunReport {
    /// Fills the oracle error field.
    pub fn compare_with(&mut self, oracle: &RunReport) -> crate::Result<f64> {
        let e = crate::metrics::relative_error(&self.final_latent, &oracle.final_latent)?;
        self.error_vs_oracle = Some(e);
        Ok(e)
    }

    pub fn full_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.tag == StepTag::Full).count()
    }
}
