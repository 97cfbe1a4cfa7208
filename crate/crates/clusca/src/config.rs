//! Experiment configuration files.
//!
//! One TOML file describes a run:
//!
//! ```toml
//! run_id = "baseline"
//!
//! [output]
//! dir = "runs"
//!
//! [model]
//! depth = 6
//! height = 16
//! width = 16
//! dim = 64
//! heads = 4
//!
//! [sampler]
//! steps = 50
//!
//! [cache]
//! policy = "clusca"
//! interval = 5
//! clusters = 16
//! gamma = 0.005
//! order = 2
//!
//! [seeds]
//! weights = 0
//! noise = 1
//! cluster = 2
//! selection = 3
//! ```
//!
//! Every section except `[seeds]` may be omitted and every key inside a
//! section has a default; all four seeds must be given explicitly.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clusca_core::cache::{CacheConfig, PolicyKind};
use clusca_core::model::ModelConfig;
use clusca_core::sampler::{SamplerConfig, Seeds, TrajectorySpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Overrides `[output] dir` when set.
pub const OUTPUT_DIR_ENV: &str = "CLUSCA_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Stem of every output file name.
    pub run_id: String,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub cache: CacheConfig,
    pub seeds: SeedConfig,
    #[serde(default)]
    pub trajectory: TrajectorySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Add wall-clock timings to the report. Reports then differ between runs.
    pub wall_time: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            wall_time: false,
        }
    }
}

/// Model shape. The weight seed lives in `[seeds]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    pub num_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            depth: m.depth,
            height: m.height,
            width: m.width,
            dim: m.dim,
            heads: m.heads,
            num_classes: m.num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub weights: u64,
    pub noise: u64,
    pub cluster: u64,
    pub selection: u64,
}

impl SeedConfig {
    pub fn sampling(&self) -> Seeds {
        Seeds {
            noise: self.noise,
            cluster: self.cluster,
            selection: self.selection,
        }
    }
}

impl ExperimentConfig {
    /// A config with every default and the given seeds.
    pub fn with_seeds(run_id: impl Into<String>, seeds: SeedConfig) -> Self {
        Self {
            run_id: run_id.into(),
            output: OutputConfig::default(),
            model: ModelSection::default(),
            sampler: SamplerConfig::default(),
            cache: CacheConfig::default(),
            seeds,
            trajectory: TrajectorySpec::default(),
        }
    }

    /// Reads, parses and validates a config file, then applies the
    /// output-directory environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            cfg.output.dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    /// Parses and validates TOML text. Does not touch the file system.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            depth: m.depth,
            height: m.height,
            width: m.width,
            dim: m.dim,
            heads: m.heads,
            num_classes: m.num_classes,
            weight_seed: self.seeds.weights,
        }
    }

    /// Checks every cross-field constraint and names the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(CliError::Config(format!(
                "invalid configuration: run_id: `{}` must be non-empty and use only [A-Za-z0-9._-]",
                self.run_id
            )));
        }
        let model = self.model_config();
        model.validate()?;
        self.cache.validate(&model)?;
        self.sampler.schedule()?;
        if self.sampler.class >= model.num_classes {
            return Err(CliError::Config(format!(
                "invalid configuration: sampler.class: {} outside 0..{}",
                self.sampler.class, model.num_classes
            )));
        }
        if !(self.sampler.max_norm_growth > 0.0) {
            return Err(CliError::Config(
                "invalid configuration: sampler.max_norm_growth: must be > 0".into(),
            ));
        }
        if let Some(site) = self.trajectory.features {
            if site.layer >= model.depth {
                return Err(CliError::Config(format!(
                    "invalid configuration: trajectory.features: layer {} outside 0..{}",
                    site.layer, model.depth
                )));
            }
        }
        if self.trajectory.ari_offsets.contains(&0) {
            return Err(CliError::Config(
                "invalid configuration: trajectory.ari_offsets: offsets must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Creates the output directory and checks that it accepts files.
    pub fn prepare_output_dir(&self) -> Result<&Path> {
        let dir = self.output.dir.as_path();
        std::fs::create_dir_all(dir)
            .and_then(|_| tempfile::NamedTempFile::new_in(dir).map(drop))
            .map_err(|e| CliError::Config(format!("invalid configuration: output.dir: {} is not writable: {e}", dir.display())))?;
        Ok(dir)
    }
}

/// A policy name with optional overrides, e.g. `clusca:N=1:K=64` or
/// `taylorseer:O=0`.
///
/// Keys: `N` (interval), `K` (clusters), `O` (order), `gamma`,
/// `rearrange` (bool), `reps` (bool, ClusCa representatives).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    pub text: String,
    pub policy: PolicyKind,
    overrides: Vec<(Axis, String)>,
}

impl PolicySpec {
    /// The base cache config with this spec's policy and overrides applied.
    pub fn apply(&self, base: &CacheConfig) -> Result<CacheConfig> {
        let mut cfg = CacheConfig {
            policy: self.policy,
            ..base.clone()
        };
        for (axis, value) in &self.overrides {
            axis.set(&mut cfg, value)?;
        }
        Ok(cfg)
    }
}

impl FromStr for PolicySpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let text = s.trim();
        let mut parts = text.split(':');
        let policy: PolicyKind = parts.next().unwrap_or_default().parse()?;
        let mut overrides = Vec::new();
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("policy `{text}`: override `{part}` is not KEY=VALUE")))?;
            let axis = match key.trim() {
                "rearrange" => Axis::Rearrange,
                "reps" => Axis::Representatives,
                "diff" => Axis::Differences,
                k => k
                    .parse()
                    .map_err(|_| CliError::Config(format!("policy `{text}`: unknown key `{k}` (N, K, O, gamma, rearrange, reps, diff)")))?,
            };
            overrides.push((axis, value.trim().to_string()));
        }
        Ok(Self {
            text: text.to_string(),
            policy,
            overrides,
        })
    }
}

/// A cache setting that sweeps and policy overrides can change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Gamma,
    Interval,
    Clusters,
    Order,
    Rearrange,
    Representatives,
    Differences,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gamma => "gamma",
            Self::Interval => "N",
            Self::Clusters => "K",
            Self::Order => "O",
            Self::Rearrange => "rearrange",
            Self::Representatives => "reps",
            Self::Differences => "diff",
        }
    }

    pub fn set(self, cfg: &mut CacheConfig, value: &str) -> Result<()> {
        let bad = |what: &str| CliError::Config(format!("{}: `{value}` is not {what}", self.name()));
        match self {
            Self::Gamma => cfg.gamma = value.parse().map_err(|_| bad("a number"))?,
            Self::Interval => cfg.interval = value.parse().map_err(|_| bad("a non-negative integer"))?,
            Self::Clusters => cfg.clusters = value.parse().map_err(|_| bad("a non-negative integer"))?,
            Self::Order => cfg.order = value.parse().map_err(|_| bad("a non-negative integer"))?,
            Self::Rearrange => cfg.rearrange_last = value.parse().map_err(|_| bad("true or false"))?,
            Self::Representatives => cfg.representatives = value.parse().map_err(|_| bad("true or false"))?,
            Self::Differences => cfg.differences = value.parse().map_err(|_| bad("interpolated or plain"))?,
        }
        Ok(())
    }
}

impl FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gamma" | "g" => Ok(Self::Gamma),
            "N" | "n" | "interval" => Ok(Self::Interval),
            "K" | "k" | "clusters" => Ok(Self::Clusters),
            "O" | "o" | "order" => Ok(Self::Order),
            other => Err(CliError::Config(format!("unknown axis `{other}` (gamma, N, K, O)"))),
        }
    }
}
