//! Report, trace and table files.
//!
//! Every file is written to a temporary sibling and renamed into place, so
//! readers never see a partial file and reruns overwrite rather than append.
//!
//! CSV headers are part of the public interface:
//!
//! | file                    | header |
//! |-------------------------|--------|
//! | `{run_id}.trace.csv`    | `step,t,tag,offset,metric,value` |
//! | `{run_id}.compare.csv`  | `policy,label,flops_total,flops_model,flops_clustering,flops_propagation,speedup_model,speedup_total,clustering_share,rel_error` |
//! | `{run_id}.sweep.csv`    | `axis,value,label,flops_total,flops_model,flops_clustering,flops_propagation,speedup_model,speedup_total,clustering_share,rel_error` |

use std::io::Write;
use std::path::{Path, PathBuf};

use clusca_core::cache::StepTag;
use clusca_core::metrics::FlopsTally;
use clusca_core::report::RunReport;
use serde::Serialize;

use crate::error::{CliError, Result};

pub const TRACE_HEADER: [&str; 6] = ["step", "t", "tag", "offset", "metric", "value"];

pub const COMPARE_HEADER: [&str; 10] = [
    "policy",
    "label",
    "flops_total",
    "flops_model",
    "flops_clustering",
    "flops_propagation",
    "speedup_model",
    "speedup_total",
    "clustering_share",
    "rel_error",
];

pub const SWEEP_HEADER: [&str; 11] = [
    "axis",
    "value",
    "label",
    "flops_total",
    "flops_model",
    "flops_clustering",
    "flops_propagation",
    "speedup_model",
    "speedup_total",
    "clustering_share",
    "rel_error",
];

/// `{dir}/{run_id}.{kind}.{ext}`
pub fn output_path(dir: &Path, run_id: &str, kind: &str, ext: &str) -> PathBuf {
    dir.join(format!("{run_id}.{kind}.{ext}"))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_csv<const N: usize>(path: &Path, header: [&str; N], rows: &[[String; N]]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| CliError::Internal(e.to_string()))?;
    for row in rows {
        w.write_record(row).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn tag_name(tag: StepTag) -> &'static str {
    match tag {
        StepTag::Full => "full",
        StepTag::Partial => "partial",
    }
}

/// One row per (step, metric), ordered by step.
///
/// Per step: `compute_tokens`, `flops_model`, `flops_clustering`,
/// `flops_propagation`, `latent_norm`. At clustering steps: `kmeans_iterations`,
/// `inertia`, `non_empty_clusters`, `intra_mean`, `global_mean`,
/// `distance_ratio`. At the later step of each ARI pair: `ari_dt{dt}`.
pub fn trace_rows(report: &RunReport) -> Vec<[String; 6]> {
    let mut per_step: Vec<Vec<(String, String)>> = vec![Vec::new(); report.steps.len()];
    for s in &report.steps {
        let m = &mut per_step[s.step];
        m.push(("compute_tokens".into(), s.compute_tokens.to_string()));
        m.push(("flops_model".into(), s.flops.model.to_string()));
        m.push(("flops_clustering".into(), s.flops.clustering.to_string()));
        m.push(("flops_propagation".into(), s.flops.propagation.to_string()));
        m.push(("latent_norm".into(), s.latent_norm.to_string()));
    }
    for a in &report.assignments {
        if let Some(m) = per_step.get_mut(a.step) {
            m.push(("kmeans_iterations".into(), a.iterations.to_string()));
            m.push(("inertia".into(), a.inertia.to_string()));
            m.push(("non_empty_clusters".into(), a.non_empty.to_string()));
            m.push(("intra_mean".into(), a.distance.intra_mean.to_string()));
            m.push(("global_mean".into(), a.distance.global_mean.to_string()));
            m.push(("distance_ratio".into(), a.distance.ratio.to_string()));
        }
    }
    for p in &report.ari_series {
        if let Some(m) = per_step.get_mut(p.step_b) {
            m.push((format!("ari_dt{}", p.dt), p.ari.to_string()));
        }
    }
    let mut rows = Vec::new();
    for (s, metrics) in report.steps.iter().zip(per_step) {
        for (metric, value) in metrics {
            rows.push([
                s.step.to_string(),
                s.t.to_string(),
                tag_name(s.tag).to_string(),
                s.offset.to_string(),
                metric,
                value,
            ]);
        }
    }
    rows
}

/// Cost and error summary of one policy run against the oracle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub label: String,
    pub flops: FlopsTally,
    pub speedup_model: f64,
    pub speedup_total: f64,
    pub clustering_share: f64,
    pub rel_error: f64,
}

impl Summary {
    pub fn from_report(report: &RunReport) -> Self {
        Self {
            label: report.label.clone(),
            flops: report.flops,
            speedup_model: report.speedup_model,
            speedup_total: report.speedup_total,
            clustering_share: report.clustering_share,
            rel_error: report.error_vs_oracle.unwrap_or(f64::NAN),
        }
    }

    fn cells(&self) -> [String; 8] {
        [
            self.label.clone(),
            self.flops.total().to_string(),
            self.flops.model.to_string(),
            self.flops.clustering.to_string(),
            self.flops.propagation.to_string(),
            self.speedup_model.to_string(),
            self.speedup_total.to_string(),
            self.clustering_share.to_string(),
        ]
    }
}

pub fn compare_row(policy: &str, s: &Summary) -> [String; 10] {
    let [label, total, model, clustering, propagation, sm, st, share] = s.cells();
    [policy.to_string(), label, total, model, clustering, propagation, sm, st, share, s.rel_error.to_string()]
}

pub fn sweep_row(axis: &str, value: &str, s: &Summary) -> [String; 11] {
    let [label, total, model, clustering, propagation, sm, st, share] = s.cells();
    [
        axis.to_string(),
        value.to_string(),
        label,
        total,
        model,
        clustering,
        propagation,
        sm,
        st,
        share,
        s.rel_error.to_string(),
    ]
}

/// Left-aligned first column, right-aligned numbers.
pub fn text_table(key: &str, rows: &[(String, &Summary)]) -> String {
    let header = [key, "label", "GFLOPs", "speedup", "speedup+ovh", "cluster %", "rel error"];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|(k, s)| {
            [
                k.clone(),
                s.label.clone(),
                format!("{:.4}", s.flops.total() as f64 / 1e9),
                format!("{:.4}", s.speedup_model),
                format!("{:.4}", s.speedup_total),
                format!("{:.3}", 100.0 * s.clustering_share),
                format!("{:.6e}", s.rel_error),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[&str]| {
        let mut out = String::new();
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            if i < 2 {
                out.push_str(&format!("{cell:<w$}"));
            } else {
                out.push_str(&format!("{cell:>w$}"));
            }
        }
        out.trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    out.push_str(&line(&widths.map(|w| "-".repeat(w)).each_ref().map(String::as_str)));
    for row in &body {
        out.push_str(&line(&row.each_ref().map(String::as_str)));
    }
    out
}
