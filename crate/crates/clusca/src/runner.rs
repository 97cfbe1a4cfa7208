//! The three commands as library functions.
//!
//! Member runs of `compare` and `sweep` are independent (each builds its own
//! cache engine and random streams from the shared seeds), so they run on the
//! rayon pool and are collected in input order. Results match a sequential
//! loop bit for bit.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use clusca_core::cache::{CacheConfig, PolicyKind};
use clusca_core::model::ToyDit;
use clusca_core::report::RunReport;
use clusca_core::sampler::{sample, TrajectorySpec};
use clusca_core::{no_clock, Clock};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Axis, ExperimentConfig, PolicySpec};
use crate::error::{CliError, Result};
use crate::output::{
    compare_row, output_path, sweep_row, text_table, trace_rows, write_csv, write_json, Summary, COMPARE_HEADER,
    SWEEP_HEADER, TRACE_HEADER,
};

fn wall_clock() -> u64 {
    static START: OnceLock<Instant> = OnceLock::new();
    START.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

fn clock_for(cfg: &ExperimentConfig) -> Clock {
    if cfg.output.wall_time {
        wall_clock
    } else {
        no_clock
    }
}

/// Samples one policy with the config's model, schedule and seeds.
pub fn run_policy(model: &ToyDit, cfg: &ExperimentConfig, cache: &CacheConfig, record: &TrajectorySpec) -> Result<RunReport> {
    cache.validate(model.config())?;
    Ok(sample(model, cache, &cfg.sampler, cfg.seeds.sampling(), record, clock_for(cfg))?)
}

/// The uncached reference run for `cfg`.
pub fn run_oracle(model: &ToyDit, cfg: &ExperimentConfig) -> Result<RunReport> {
    let cache = CacheConfig {
        policy: PolicyKind::Full,
        ..cfg.cache.clone()
    };
    run_policy(model, cfg, &cache, &TrajectorySpec::default())
}

fn with_error(mut report: RunReport, oracle: &RunReport) -> Result<RunReport> {
    report.compare_with(oracle)?;
    Ok(report)
}

/// An oracle run compared with itself: error exactly 0.
fn self_compared(report: RunReport) -> Result<RunReport> {
    let copy = report.clone();
    with_error(report, &copy)
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub report_path: PathBuf,
    pub trace_path: PathBuf,
}

/// Runs the configured policy, fills its error against the oracle and
/// writes `{run_id}.report.json` and `{run_id}.trace.csv`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.prepare_output_dir()?;
    let model = ToyDit::new(cfg.model_config())?;
    let report = run_policy(&model, cfg, &cfg.cache, &cfg.trajectory)?;
    let report = if cfg.cache.policy == PolicyKind::Full {
        self_compared(report)?
    } else {
        with_error(report, &run_oracle(&model, cfg)?)?
    };
    let report_path = output_path(dir, &cfg.run_id, "report", "json");
    let trace_path = output_path(dir, &cfg.run_id, "trace", "csv");
    write_json(&report_path, &report)?;
    write_csv(&trace_path, TRACE_HEADER, &trace_rows(&report))?;
    Ok(RunOutcome {
        report,
        report_path,
        trace_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub policy: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub run_id: String,
    pub oracle: Summary,
    pub rows: Vec<CompareRow>,
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub report: CompareReport,
    pub table: String,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
}

/// Runs every policy spec plus the oracle with shared seeds and writes
/// `{run_id}.compare.csv` and `{run_id}.compare.json`.
pub fn cmd_compare(cfg: &ExperimentConfig, specs: &[PolicySpec]) -> Result<CompareOutcome> {
    if specs.len() < 2 {
        return Err(CliError::Config(format!("compare needs at least 2 policies, got {}", specs.len())));
    }
    cfg.validate()?;
    let caches = specs.iter().map(|s| s.apply(&cfg.cache)).collect::<Result<Vec<_>>>()?;
    let model = ToyDit::new(cfg.model_config())?;
    for c in &caches {
        c.validate(model.config())?;
    }
    let dir = cfg.prepare_output_dir()?;
    let oracle = self_compared(run_oracle(&model, cfg)?)?;
    let none = TrajectorySpec::default();
    let reports: Vec<Result<RunReport>> = caches
        .par_iter()
        .map(|c| with_error(run_policy(&model, cfg, c, &none)?, &oracle))
        .collect();
    let mut rows = Vec::with_capacity(specs.len());
    for (spec, r) in specs.iter().zip(reports) {
        rows.push(CompareRow {
            policy: spec.text.clone(),
            summary: Summary::from_report(&r?),
        });
    }
    let report = CompareReport {
        run_id: cfg.run_id.clone(),
        oracle: Summary::from_report(&oracle),
        rows,
    };
    let csv_path = output_path(dir, &cfg.run_id, "compare", "csv");
    let json_path = output_path(dir, &cfg.run_id, "compare", "json");
    let csv_rows: Vec<_> = report.rows.iter().map(|r| compare_row(&r.policy, &r.summary)).collect();
    write_csv(&csv_path, COMPARE_HEADER, &csv_rows)?;
    write_json(&json_path, &report)?;
    let table_rows: Vec<_> = report.rows.iter().map(|r| (r.policy.clone(), &r.summary)).collect();
    let table = text_table("policy", &table_rows);
    Ok(CompareOutcome {
        report,
        table,
        csv_path,
        json_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub run_id: String,
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub report: SweepReport,
    pub table: String,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
}

/// One run of the configured policy per axis value, shared seeds, written
/// to `{run_id}.sweep.csv` and `{run_id}.sweep.json`.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: Axis, values: &[String]) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    if !matches!(axis, Axis::Gamma | Axis::Interval | Axis::Clusters | Axis::Order) {
        return Err(CliError::Config(format!("cannot sweep `{}` (gamma, N, K, O)", axis.name())));
    }
    cfg.validate()?;
    let model = ToyDit::new(cfg.model_config())?;
    let mut caches = Vec::with_capacity(values.len());
    for v in values {
        let mut c = cfg.cache.clone();
        axis.set(&mut c, v)?;
        c.validate(model.config())?;
        caches.push(c);
    }
    let dir = cfg.prepare_output_dir()?;
    let oracle = run_oracle(&model, cfg)?;
    let none = TrajectorySpec::default();
    let reports: Vec<Result<RunReport>> = caches
        .par_iter()
        .map(|c| with_error(run_policy(&model, cfg, c, &none)?, &oracle))
        .collect();
    let mut rows = Vec::with_capacity(values.len());
    for (v, r) in values.iter().zip(reports) {
        rows.push(SweepRow {
            value: v.trim().to_string(),
            summary: Summary::from_report(&r?),
        });
    }
    let report = SweepReport {
        run_id: cfg.run_id.clone(),
        axis: axis.name().to_string(),
        rows,
    };
    let csv_path = output_path(dir, &cfg.run_id, "sweep", "csv");
    let json_path = output_path(dir, &cfg.run_id, "sweep", "json");
    let csv_rows: Vec<_> = report.rows.iter().map(|r| sweep_row(&report.axis, &r.value, &r.summary)).collect();
    write_csv(&csv_path, SWEEP_HEADER, &csv_rows)?;
    write_json(&json_path, &report)?;
    let table_rows: Vec<_> = report
        .rows
        .iter()
        .map(|r| (format!("{}={}", report.axis, r.value), &r.summary))
        .collect();
    let table = text_table("value", &table_rows);
    Ok(SweepOutcome {
        report,
        table,
        csv_path,
        json_path,
    })
}
