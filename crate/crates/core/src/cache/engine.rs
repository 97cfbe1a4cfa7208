use alloc::format;
use alloc::vec::Vec;

use super::plan::{plan_schedule, StepPlan, StepTag};
use super::taylor::TaylorCacheEntry;
use super::update::propagate;
use super::{CacheConfig, PolicyKind};
use crate::cluster::{distance_stats, kmeans, select_representatives, CentroidCache, ClusterAssignment, KMeansInit};
use crate::matrix::FeatureMap;
use crate::metrics::{attention_flops, kmeans_iteration_flops, mlp_flops, propagation_flops, FlopsTally};
use crate::model::{CacheContext, ComputeSet, ModelConfig, Module, Site, TokenRows};
use crate::report::AssignmentRecord;
use crate::rng::{SeededRng, Stream};
use crate::{Clock, Error, Result};

/// What happened at one denoising step, as seen by the cache.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAccounting {
    pub step: usize,
    pub tag: StepTag,
    pub offset: usize,
    pub compute_tokens: usize,
    pub flops: FlopsTally,
    pub clustering_ns: u64,
    pub propagation_ns: u64,
}

/// Per-run cache state for every `(layer, module)` site.
///
/// Drive it with [`CacheEngine::begin_step`] once per denoising step, then
/// hand it to [`crate::model::ToyDit::predict_noise`] as the cache context.
#[derive(Debug)]
pub struct CacheEngine {
    cfg: CacheConfig,
    tokens: usize,
    dim: usize,
    cluster_site: Site,
    plan: StepPlan,
    entries: Vec<TaylorCacheEntry>,
    step_compute: ComputeSet,
    assignment: Option<ClusterAssignment>,
    centroids: Option<CentroidCache>,
    init_rng: SeededRng,
    select_rng: SeededRng,
    accounting: Vec<StepAccounting>,
    assignments: Vec<AssignmentRecord>,
    clock: Clock,
}

impl CacheEngine {
    pub fn new(cfg: CacheConfig, model: &ModelConfig, steps: usize, cluster_seed: u64, selection_seed: u64, clock: Clock) -> Result<Self> {
        model.validate()?;
        cfg.validate(model)?;
        let plan = plan_schedule(steps, cfg.effective_interval(), cfg.rearrange_last);
        Ok(Self {
            tokens: model.tokens(),
            dim: model.dim,
            cluster_site: cfg.cluster_site_for(model),
            entries: (0..2 * model.depth).map(|_| TaylorCacheEntry::with_scheme(cfg.order, cfg.differences)).collect(),
            plan,
            cfg,
            step_compute: ComputeSet::empty(),
            assignment: None,
            centroids: None,
            init_rng: SeededRng::new(cluster_seed, Stream::ClusterInit),
            select_rng: SeededRng::new(selection_seed, Stream::Selection),
            accounting: Vec::new(),
            assignments: Vec::new(),
            clock,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &StepPlan {
        &self.plan
    }

    pub fn entry(&self, site: Site) -> &TaylorCacheEntry {
        &self.entries[site.index()]
    }

    pub fn accounting(&self) -> &[StepAccounting] {
        &self.accounting
    }

    pub fn assignments(&self) -> &[AssignmentRecord] {
        &self.assignments
    }

    pub fn current_assignment(&self) -> Option<&ClusterAssignment> {
        self.assignment.as_ref()
    }

    /// Tokens recomputed at the current step.
    pub fn step_compute(&self) -> &ComputeSet {
        &self.step_compute
    }

    fn current(&self) -> Result<&StepAccounting> {
        self.accounting
            .last()
            .ok_or_else(|| Error::policy("cache used before begin_step"))
    }

    fn current_mut(&mut self) -> &mut StepAccounting {
        self.accounting.last_mut().expect("checked by current()")
    }

    /// Opens step `step` (denoising order) and fixes its compute set.
    pub fn begin_step(&mut self, step: usize) -> Result<&StepAccounting> {
        if step != self.accounting.len() || step >= self.plan.len() {
            return Err(Error::policy(format!(
                "step {step} out of sequence (expected {} of {})",
                self.accounting.len(),
                self.plan.len()
            )));
        }
        let tag = self.plan.tag(step);
        self.step_compute = match (tag, self.cfg.policy) {
            (StepTag::Full, _) => ComputeSet::all(self.tokens),
            (StepTag::Partial, PolicyKind::Full) => {
                return Err(Error::policy("full policy planned a partial step"));
            }
            (StepTag::Partial, PolicyKind::Fora | PolicyKind::TaylorSeer) => ComputeSet::empty(),
            (StepTag::Partial, PolicyKind::Toca) => self.random_subset(self.cfg.clusters),
            (StepTag::Partial, PolicyKind::ClusCa) => {
                let assignment = self
                    .assignment
                    .as_ref()
                    .ok_or_else(|| Error::policy("partial step before any clustering"))?;
                if self.cfg.representatives {
                    select_representatives(assignment, &mut self.select_rng)
                } else {
                    ComputeSet::empty()
                }
            }
        };
        self.accounting.push(StepAccounting {
            step,
            tag,
            offset: self.plan.offset(step),
            compute_tokens: self.step_compute.len(),
            flops: FlopsTally::default(),
            clustering_ns: 0,
            propagation_ns: 0,
        });
        self.current()
    }

    /// `n` distinct tokens by a partial Fisher-Yates shuffle.
    fn random_subset(&mut self, n: usize) -> ComputeSet {
        let mut pool: Vec<usize> = (0..self.tokens).collect();
        let n = n.min(self.tokens);
        for i in 0..n {
            let j = i + self.select_rng.below(self.tokens - i);
            pool.swap(i, j);
        }
        pool.truncate(n);
        ComputeSet::new(pool, self.tokens).expect("indices below token count")
    }

    fn cluster(&mut self, features: &FeatureMap, step: usize) -> Result<()> {
        let start = (self.clock)();
        let k = self.cfg.clusters;
        let warm = self.centroids.take();
        let assignment = match &warm {
            Some(cache) => kmeans(features, k, KMeansInit::WarmStart(cache), self.cfg.kmeans_max_iters, self.cfg.kmeans_tol)?,
            None => kmeans(
                features,
                k,
                KMeansInit::Random(&mut self.init_rng),
                self.cfg.kmeans_max_iters,
                self.cfg.kmeans_tol,
            )?,
        };
        let elapsed = (self.clock)().saturating_sub(start);
        let passes = assignment.iterations as u64 + u64::from(warm.is_none());
        let flops = passes * kmeans_iteration_flops(self.tokens, k, self.dim);
        let acc = self.current_mut();
        acc.flops.clustering += flops;
        acc.clustering_ns += elapsed;

        self.assignments.push(AssignmentRecord {
            step,
            labels: assignment.labels.clone(),
            iterations: assignment.iterations,
            inertia: assignment.inertia,
            non_empty: assignment.non_empty_clusters(),
            distance: distance_stats(features, &assignment.labels)?,
        });
        self.centroids = Some(CentroidCache {
            centroids: assignment.centroids.clone(),
            step,
        });
        self.assignment = Some(assignment);
        Ok(())
    }
}

impl CacheContext for CacheEngine {
    fn directive(&mut self, site: Site, tokens: usize) -> Result<ComputeSet> {
        self.current()?;
        if tokens != self.tokens {
            return Err(Error::policy(format!("engine built for {} tokens, model has {tokens}", self.tokens)));
        }
        let c = self.step_compute.len();
        let flops = match site.module {
            Module::Attention => attention_flops(self.tokens, self.dim, c),
            Module::Mlp => mlp_flops(self.dim, c),
        };
        self.current_mut().flops.model += flops;
        Ok(self.step_compute.clone())
    }

    fn assemble(&mut self, site: Site, computed: TokenRows) -> Result<FeatureMap> {
        let (step, tag, offset) = {
            let acc = self.current()?;
            (acc.step, acc.tag, acc.offset)
        };
        if computed.compute() != &self.step_compute {
            return Err(Error::policy(format!(
                "site {site:?}: computed {} tokens, directive was {}",
                computed.len(),
                self.step_compute.len()
            )));
        }
        let idx = site.index();
        if idx >= self.entries.len() {
            return Err(Error::Bounds {
                index: site.layer,
                len: self.entries.len() / 2,
            });
        }
        if tag == StepTag::Full {
            let fresh = computed.into_full(self.tokens)?;
            let entry = &mut self.entries[idx];
            entry.refresh_full(fresh.clone(), step)?;
            entry.set_working(fresh.clone());
            if self.cfg.policy == PolicyKind::ClusCa && site == self.cluster_site {
                self.cluster(&fresh, step)?;
            }
            return Ok(fresh);
        }

        let span = self.cfg.interval;
        match self.cfg.policy {
            PolicyKind::Full => Err(Error::policy("full policy reached a partial step")),
            PolicyKind::Fora => self.entries[idx].forecast(offset, span, 0),
            PolicyKind::TaylorSeer => self.entries[idx].forecast(offset, span, self.cfg.order),
            PolicyKind::Toca => {
                let working = self.entries[idx]
                    .working_mut()
                    .ok_or_else(|| Error::policy(format!("site {site:?} has no cached features")))?;
                computed.scatter_into(working);
                Ok(working.clone())
            }
            PolicyKind::ClusCa => {
                let start = (self.clock)();
                let labels = &self
                    .assignment
                    .as_ref()
                    .ok_or_else(|| Error::policy("partial step before any clustering"))?
                    .labels;
                let entry = &self.entries[idx];
                let temporal = entry.forecast(offset, span, self.cfg.order)?;
                let estimate = propagate(&temporal, &computed, labels, self.cfg.clusters, self.cfg.gamma)?;
                self.entries[idx].set_working(estimate.clone());
                let elapsed = (self.clock)().saturating_sub(start);
                let flops = propagation_flops(self.tokens, self.dim, computed.len(), self.cfg.clusters);
                let acc = self.current_mut();
                acc.flops.propagation += flops;
                acc.propagation_ns += elapsed;
                Ok(estimate)
            }
        }
    }
}
