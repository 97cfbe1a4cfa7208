//! Deterministic denoising loop.
//!
//! The backward step defaults to
//! `x_{t−1} = (1/√α_t)·(x_t − ((1−α_t)/√(1−α_t))·ε̂)` with no added noise,
//! where `α_t` is the per-step schedule value (not a cumulative product).
//! [`BackwardForm::Ddim`] selects the conventional DDIM update instead,
//! reading the schedule as cumulative `ᾱ_t`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::cache::{CacheConfig, CacheEngine, PolicyKind};
use crate::cluster::{kmeans, CentroidCache, KMeansInit};
use crate::matrix::{seeded_gaussian, FeatureMap};
use crate::metrics::{ari_series, count_flops, FlopsTally};
use crate::model::{CacheContext, ComputeSet, Site, ToyDit, TokenRows};
use crate::report::{AssignmentRecord, RunReport, Snapshot, StepRecord, Timing};
use crate::rng::{SeededRng, Stream};
use crate::{cluster, Clock, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ScheduleShape {
    #[default]
    Linear,
    Cosine,
}

/// `α_t` for `t = 1..=T`, non-increasing in `t`, all in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    /// `α_t` for `1 ≤ t ≤ T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        t.checked_sub(1)
            .and_then(|i| self.alphas.get(i))
            .copied()
            .ok_or(Error::Bounds {
                index: t,
                len: self.alphas.len(),
            })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn is_monotone(&self) -> bool {
        self.alphas.windows(2).all(|w| w[1] <= w[0])
    }
}

pub fn make_schedule(steps: usize, alpha_start: f64, alpha_end: f64, shape: ScheduleShape) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule.steps", "must be >= 1"));
    }
    if !(alpha_end > 0.0 && alpha_end <= alpha_start && alpha_start <= 1.0) {
        return Err(Error::config(
            "schedule.alpha_end",
            format!("need 0 < alpha_end <= alpha_start <= 1, got {alpha_end} and {alpha_start}"),
        ));
    }
    if steps == 1 {
        return Ok(NoiseSchedule {
            alphas: vec![alpha_start],
        });
    }
    let span = alpha_start - alpha_end;
    let last = (steps - 1) as f64;
    let alphas = (0..steps)
        .map(|i| {
            let frac = i as f64 / last;
            let w = match shape {
                ScheduleShape::Linear => frac,
                ScheduleShape::Cosine => 0.5 * (1.0 - libm::cos(PI * frac)),
            };
            if i == steps - 1 {
                alpha_end
            } else {
                alpha_start - span * w
            }
        })
        .collect();
    Ok(NoiseSchedule { alphas })
}

/// `x_t = √α_t·x₀ + √(1−α_t)·ε`.
pub fn forward_diffuse(x0: &FeatureMap, t: usize, eps: &FeatureMap, s: &NoiseSchedule) -> Result<FeatureMap> {
    let a = s.alpha(t)?;
    let (sa, sn) = (libm::sqrt(a), libm::sqrt(1.0 - a));
    x0.zip_with(eps, "forward_diffuse", |x, e| sa * x + sn * e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum BackwardForm {
    /// `(x − √(1−α_t)·ε̂)/√α_t`, reading α_t as a single-step factor.
    #[default]
    Stepwise,
    /// Conventional DDIM, reading the schedule as cumulative ᾱ_t.
    Ddim,
}

/// Deterministic backward step `x_t → x_{t−1}` (σ_t = 0).
pub fn ddim_step(x_t: &FeatureMap, eps_hat: &FeatureMap, t: usize, s: &NoiseSchedule) -> Result<FeatureMap> {
    let a = s.alpha(t)?;
    if a <= 0.0 {
        return Err(Error::config("schedule", "alpha_t = 0 makes the backward step singular"));
    }
    // (1 − α)/√(1 − α) is 0/0 at α = 1, where the noise term vanishes.
    let noise_coeff = if a < 1.0 { (1.0 - a) / libm::sqrt(1.0 - a) } else { 0.0 };
    let inv = 1.0 / libm::sqrt(a);
    x_t.zip_with(eps_hat, "ddim_step", |x, e| inv * (x - noise_coeff * e))
}

/// Conventional DDIM (η = 0) step reading the schedule as `ᾱ_t`, with `ᾱ_0 = 1`.
pub fn ddim_step_conventional(x_t: &FeatureMap, eps_hat: &FeatureMap, t: usize, s: &NoiseSchedule) -> Result<FeatureMap> {
    let a = s.alpha(t)?;
    let a_prev = if t > 1 { s.alpha(t - 1)? } else { 1.0 };
    let (sa, sn) = (libm::sqrt(a), libm::sqrt(1.0 - a));
    let (sa_prev, sn_prev) = (libm::sqrt(a_prev), libm::sqrt(1.0 - a_prev));
    x_t.zip_with(eps_hat, "ddim_step", |x, e| {
        let x0 = (x - sn * e) / sa;
        sa_prev * x0 + sn_prev * e
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct SamplerConfig {
    pub steps: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub shape: ScheduleShape,
    pub backward: BackwardForm,
    pub class: usize,
    /// Largest allowed per-step growth of the latent Frobenius norm.
    pub max_norm_growth: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            alpha_start: 0.999,
            alpha_end: 0.95,
            shape: ScheduleShape::Linear,
            backward: BackwardForm::Stepwise,
            class: 0,
            max_norm_growth: 10.0,
        }
    }
}

impl SamplerConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.alpha_start, self.alpha_end, self.shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct Seeds {
    pub noise: u64,
    pub cluster: u64,
    pub selection: u64,
}

/// What to record besides the final latent.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrajectorySpec {
    /// Record every `stride`-th step (0 disables snapshots).
    pub stride: usize,
    pub latent: bool,
    /// Module output estimate to snapshot.
    pub features: Option<Site>,
    /// Cluster the snapshot features at every recorded step (warm-started,
    /// not charged to the run) and build the ARI series from those labels.
    pub analysis_clustering: bool,
    /// Step distances for the ARI series. Empty means the cache interval
    /// (policy clusterings) or the stride (analysis clusterings).
    pub ari_offsets: Vec<usize>,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            stride: 0,
            latent: false,
            features: None,
            analysis_clustering: false,
            ari_offsets: Vec::new(),
        }
    }
}

/// Forwards to the engine and keeps the estimate of one site.
struct Recorder<'a> {
    inner: &'a mut CacheEngine,
    site: Option<Site>,
    captured: Option<FeatureMap>,
}

impl CacheContext for Recorder<'_> {
    fn directive(&mut self, site: Site, tokens: usize) -> Result<ComputeSet> {
        self.inner.directive(site, tokens)
    }

    fn assemble(&mut self, site: Site, computed: TokenRows) -> Result<FeatureMap> {
        let out = self.inner.assemble(site, computed)?;
        if self.site == Some(site) {
            self.captured = Some(out.clone());
        }
        Ok(out)
    }
}

/// Runs the full denoising loop under `cache`'s policy.
pub fn sample(
    model: &ToyDit,
    cache: &CacheConfig,
    sampler: &SamplerConfig,
    seeds: Seeds,
    record: &TrajectorySpec,
    clock: Clock,
) -> Result<RunReport> {
    let started = clock();
    let schedule = sampler.schedule()?;
    let steps = schedule.steps();
    let mcfg = model.config();
    let mut engine = CacheEngine::new(cache.clone(), mcfg, steps, seeds.cluster, seeds.selection, clock)?;
    if let Some(site) = record.features {
        if site.layer >= mcfg.depth {
            return Err(Error::config("trajectory.features", format!("layer {} outside 0..{}", site.layer, mcfg.depth)));
        }
    }
    if !(sampler.max_norm_growth > 0.0) {
        return Err(Error::config("sampler.max_norm_growth", "must be > 0"));
    }

    let mut x = seeded_gaussian(mcfg.tokens(), mcfg.dim, &mut SeededRng::new(seeds.noise, Stream::Noise));
    let mut step_records = Vec::with_capacity(steps);
    let mut trajectory = Vec::new();
    let mut analysis: Vec<AssignmentRecord> = Vec::new();
    let mut analysis_centroids: Option<CentroidCache> = None;
    let mut analysis_rng = SeededRng::new(seeds.cluster, Stream::Analysis);
    let mut model_ns = 0u64;

    for step in 0..steps {
        let t = steps - step;
        engine.begin_step(step)?;
        let recording = record.stride > 0 && step % record.stride == 0;
        let t0 = clock();
        let mut ctx = Recorder {
            inner: &mut engine,
            site: if recording { record.features } else { None },
            captured: None,
        };
        let eps = model.predict_noise(&x, t, steps, sampler.class, &mut ctx)?;
        let captured = ctx.captured.take();
        model_ns += clock().saturating_sub(t0);

        let next = match sampler.backward {
            BackwardForm::Stepwise => ddim_step(&x, &eps, t, &schedule)?,
            BackwardForm::Ddim => ddim_step_conventional(&x, &eps, t, &schedule)?,
        };
        if !next.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("non-finite latent at t = {t}"),
            });
        }
        let (before, after) = (x.frobenius_norm(), next.frobenius_norm());
        if before > 0.0 && after > sampler.max_norm_growth * before {
            return Err(Error::Divergence {
                step,
                reason: format!("latent norm grew from {before:e} to {after:e}"),
            });
        }
        x = next;

        let acc = engine.accounting().last().expect("step opened").clone();
        step_records.push(StepRecord {
            step,
            t,
            tag: acc.tag,
            offset: acc.offset,
            compute_tokens: acc.compute_tokens,
            flops: acc.flops,
            latent_norm: after,
        });

        if recording {
            if record.analysis_clustering {
                if let Some(features) = &captured {
                    let k = cache.clusters.min(features.rows());
                    let a = match &analysis_centroids {
                        Some(c) if c.centroids.rows() == k => {
                            kmeans(features, k, KMeansInit::WarmStart(c), cache.kmeans_max_iters, cache.kmeans_tol)?
                        }
                        _ => kmeans(features, k, KMeansInit::Random(&mut analysis_rng), cache.kmeans_max_iters, cache.kmeans_tol)?,
                    };
                    analysis.push(AssignmentRecord {
                        step,
                        labels: a.labels.clone(),
                        iterations: a.iterations,
                        inertia: a.inertia,
                        non_empty: a.non_empty_clusters(),
                        distance: cluster::distance_stats(features, &a.labels)?,
                    });
                    analysis_centroids = Some(CentroidCache {
                        centroids: a.centroids,
                        step,
                    });
                }
            }
            if record.latent || record.features.is_some() {
                trajectory.push(Snapshot {
                    step,
                    t,
                    latent: record.latent.then(|| x.clone()),
                    features: captured,
                });
            }
        }
    }

    let mut flops = FlopsTally::default();
    let (mut clustering_ns, mut propagation_ns) = (0, 0);
    for acc in engine.accounting() {
        flops.add(&acc.flops);
        clustering_ns += acc.clustering_ns;
        propagation_ns += acc.propagation_ns;
    }
    let full_flops = count_flops(
        mcfg,
        steps,
        &CacheConfig {
            policy: PolicyKind::Full,
            ..cache.clone()
        },
    )
    .full;
    let estimate = crate::metrics::FlopsEstimate::new(flops, full_flops);

    let (assignments, default_dt) = if record.analysis_clustering {
        (analysis, record.stride.max(1))
    } else {
        (engine.assignments().to_vec(), cache.interval)
    };
    let dts = if record.ari_offsets.is_empty() {
        vec![default_dt]
    } else {
        record.ari_offsets.clone()
    };
    let labelled: Vec<(usize, &[usize])> = assignments.iter().map(|a| (a.step, a.labels.as_slice())).collect();
    let ari = ari_series(&labelled, &dts)?;

    let total_ns = clock().saturating_sub(started);
    let timing = (total_ns > 0).then_some(Timing {
        model_ns: model_ns.saturating_sub(clustering_ns + propagation_ns),
        clustering_ns,
        propagation_ns,
        total_ns,
    });

    Ok(RunReport {
        policy: cache.policy,
        label: cache.label(),
        final_latent: x,
        flops,
        full_flops,
        speedup_model: estimate.speedup_model,
        speedup_total: estimate.speedup_total,
        clustering_share: flops.clustering_share(),
        error_vs_oracle: None,
        steps: step_records,
        assignments,
        ari_series: ari,
        trajectory,
        timing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_schedule(alpha: f64) -> NoiseSchedule {
        NoiseSchedule { alphas: vec![alpha] }
    }

    fn scalar(v: f64) -> FeatureMap {
        FeatureMap::filled(1, 1, v)
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1, 0.9, 0.5, ScheduleShape::Linear).unwrap();
        assert_eq!(s.alphas(), &[0.9]);
        let s = make_schedule(3, 0.9, 0.5, ScheduleShape::Linear).unwrap();
        assert_eq!(s.alphas().len(), 3);
        for (got, want) in s.alphas().iter().zip([0.9, 0.7, 0.5]) {
            assert!((got - want).abs() < 1e-15);
        }
        for shape in [ScheduleShape::Linear, ScheduleShape::Cosine] {
            assert!(make_schedule(50, 0.999, 0.95, shape).unwrap().is_monotone());
        }
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(make_schedule(0, 0.9, 0.5, ScheduleShape::Linear).is_err());
        assert!(make_schedule(3, 0.5, 0.9, ScheduleShape::Linear).is_err());
        assert!(make_schedule(3, 0.9, 0.0, ScheduleShape::Linear).is_err());
        assert!(make_schedule(3, 1.1, 0.5, ScheduleShape::Linear).is_err());
    }

    #[test]
    fn forward_examples() {
        let x0 = scalar(2.0);
        assert_eq!(forward_diffuse(&x0, 1, &scalar(5.0), &scalar_schedule(1.0)).unwrap(), x0);
        let xt = forward_diffuse(&x0, 1, &scalar(1.0), &scalar_schedule(0.25)).unwrap();
        assert!((xt.get(0, 0) - 1.866_025_4).abs() < 1e-7);
        let xt = forward_diffuse(&x0, 1, &scalar(0.0), &scalar_schedule(0.25)).unwrap();
        assert_eq!(xt.get(0, 0), 1.0);
        assert!(forward_diffuse(&x0, 1, &FeatureMap::zeros(2, 1), &scalar_schedule(0.25)).is_err());
    }

    #[test]
    fn backward_examples() {
        let out = ddim_step(&scalar(3.0), &scalar(7.0), 1, &scalar_schedule(1.0)).unwrap();
        assert_eq!(out, scalar(3.0));
        let out = ddim_step(&scalar(1.0), &scalar(0.0), 1, &scalar_schedule(0.25)).unwrap();
        assert_eq!(out, scalar(2.0));
        let out = ddim_step(&scalar(1.0), &scalar(1.0), 1, &scalar_schedule(0.25)).unwrap();
        assert!((out.get(0, 0) - 0.267_949_2).abs() < 1e-7);
    }

    #[test]
    fn backward_inverts_forward_with_known_noise() {
        let mut rng = SeededRng::new(1, Stream::Analysis);
        let x0 = seeded_gaussian(8, 4, &mut rng);
        let eps = seeded_gaussian(8, 4, &mut rng);
        let s = make_schedule(10, 0.99, 0.3, ScheduleShape::Cosine).unwrap();
        for t in 1..=10 {
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let back = ddim_step(&xt, &eps, t, &s).unwrap();
            let err = back.sub(&x0).unwrap().data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-12, "t = {t}: {err}");
        }
    }

    #[test]
    fn conventional_step_recovers_clean_sample_at_t1() {
        let s = make_schedule(4, 0.9, 0.5, ScheduleShape::Linear).unwrap();
        let x0 = scalar(1.5);
        let eps = scalar(-0.5);
        let x1 = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        let back = ddim_step_conventional(&x1, &eps, 1, &s).unwrap();
        assert!((back.get(0, 0) - 1.5).abs() < 1e-12);
    }
}
