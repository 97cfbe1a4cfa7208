//! Feature caches, schedules and the cache policies.
//!
//! A run refreshes every cached module at Full steps. At Partial steps each
//! policy fills the module outputs differently:
//!
//! | policy      | recomputed tokens            | everything else                         |
//! |-------------|------------------------------|-----------------------------------------|
//! | Full        | all (every step is Full)     | n/a                                     |
//! | FORA        | none                         | last refreshed value                    |
//! | TaylorSeer  | none                         | order-O Taylor forecast                 |
//! | ToCa-proxy  | `K` uniformly random tokens  | working cache, updated token-wise       |
//! | ClusCa      | one random token per cluster | `γ·μ_cluster + (1−γ)·forecast`          |
//!
//! ToCa-proxy stands in for ToCa's importance scores, which are not
//! reproduced here.

mod engine;
mod plan;
mod taylor;
mod update;

use alloc::format;
use alloc::string::String;

pub use engine::{CacheEngine, StepAccounting};
pub use plan::{plan_schedule, StepPlan, StepTag};
pub use taylor::{taylor_forecast, DifferenceScheme, TaylorCacheEntry};
pub use update::{cluster_mean, clusca_update, propagate, ClusterMeans};

use crate::model::{ModelConfig, Module, Site};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum PolicyKind {
    Full,
    Fora,
    Toca,
    TaylorSeer,
    ClusCa,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [Self::Full, Self::Fora, Self::Toca, Self::TaylorSeer, Self::ClusCa];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Fora => "fora",
            Self::Toca => "toca",
            Self::TaylorSeer => "taylorseer",
            Self::ClusCa => "clusca",
        }
    }
}

impl core::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|p| p.name() == lower)
            .ok_or_else(|| Error::config("policy", format!("unknown policy `{s}` (full, fora, toca, taylorseer, clusca)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct CacheConfig {
    pub policy: PolicyKind,
    /// Cache interval `N`: one Full step every `N` steps.
    pub interval: usize,
    /// Cluster count `K`; also the ToCa-proxy subset size.
    pub clusters: usize,
    /// Propagation ratio `γ`.
    pub gamma: f64,
    /// Taylor order `O`.
    pub order: usize,
    /// How Taylor difference levels are rebuilt at Full steps.
    pub differences: DifferenceScheme,
    /// Move the latest Full step to the final step.
    pub rearrange_last: bool,
    /// Module whose Full-step output is clustered. Defaults to the last block's MLP.
    pub cluster_site: Option<Site>,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    /// When false, ClusCa recomputes no tokens at Partial steps.
    pub representatives: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::ClusCa,
            interval: 5,
            clusters: 16,
            gamma: 0.005,
            order: 2,
            differences: DifferenceScheme::Interpolated,
            rearrange_last: false,
            cluster_site: None,
            kmeans_max_iters: 30,
            kmeans_tol: 1e-6,
            representatives: true,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::config("cache.interval", "N must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("cache.gamma", format!("{} outside [0, 1]", self.gamma)));
        }
        if self.clusters == 0 {
            return Err(Error::config("cache.clusters", "K must be >= 1"));
        }
        if matches!(self.policy, PolicyKind::ClusCa | PolicyKind::Toca) && self.clusters > model.tokens() {
            return Err(Error::config(
                "cache.clusters",
                format!("K = {} exceeds the token count T = {}", self.clusters, model.tokens()),
            ));
        }
        if self.kmeans_max_iters == 0 {
            return Err(Error::config("cache.kmeans_max_iters", "must be >= 1"));
        }
        if !(self.kmeans_tol >= 0.0) {
            return Err(Error::config("cache.kmeans_tol", "must be >= 0"));
        }
        if let Some(site) = self.cluster_site {
            if site.layer >= model.depth {
                return Err(Error::config(
                    "cache.cluster_site",
                    format!("layer {} outside 0..{}", site.layer, model.depth),
                ));
            }
        }
        Ok(())
    }

    pub fn cluster_site_for(&self, model: &ModelConfig) -> Site {
        self.cluster_site
            .unwrap_or(Site::new(model.depth.saturating_sub(1), Module::Mlp))
    }

    /// Effective schedule interval: the Full policy computes every step.
    pub fn effective_interval(&self) -> usize {
        match self.policy {
            PolicyKind::Full => 1,
            _ => self.interval,
        }
    }

    /// Short label such as `clusca(N=5,K=16,O=2,gamma=0.005)`. A `plain`
    /// suffix marks the non-default difference scheme where it matters.
    pub fn label(&self) -> String {
        let plain = self.order >= 2 && self.differences == DifferenceScheme::Plain;
        let label = match self.policy {
            PolicyKind::Full => String::from("full"),
            PolicyKind::Fora => format!("fora(N={})", self.interval),
            PolicyKind::Toca => format!("toca(N={},K={})", self.interval, self.clusters),
            PolicyKind::TaylorSeer => format!("taylorseer(N={},O={})", self.interval, self.order),
            PolicyKind::ClusCa => format!(
                "clusca(N={},K={},O={},gamma={})",
                self.interval, self.clusters, self.order, self.gamma
            ),
        };
        match self.policy {
            PolicyKind::TaylorSeer | PolicyKind::ClusCa if plain => format!("{},plain)", &label[..label.len() - 1]),
            _ => label,
        }
    }
}
