use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clusca::config::OUTPUT_DIR_ENV;
use clusca::output::{COMPARE_HEADER, SWEEP_HEADER, TRACE_HEADER};
use clusca::runner::{cmd_compare, cmd_sweep, run_oracle, run_policy};
use clusca::{Axis, ExperimentConfig, PolicySpec};
use clusca_core::model::ToyDit;
use clusca_core::sampler::TrajectorySpec;
use serde_json::Value;

fn small_config(run_id: &str, out: &Path, cache: &str) -> String {
    format!(
        "run_id = \"{run_id}\"\n\
         [output]\ndir = \"{}\"\n\
         [model]\ndepth = 2\nheight = 4\nwidth = 4\ndim = 16\nheads = 2\n\
         [sampler]\nsteps = 10\n\
         [cache]\nclusters = 4\n{cache}\n\
         [seeds]\nweights = 5\nnoise = 6\ncluster = 7\nselection = 8\n",
        out.display()
    )
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn config(&self, name: &str, cache: &str) -> PathBuf {
        let p = self.dir.path().join(format!("{name}.toml"));
        std::fs::write(&p, small_config(name, &self.out(), cache)).unwrap();
        p
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out().join(name)
    }
}

fn clusca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clusca"))
        .args(args)
        .env_remove(OUTPUT_DIR_ENV)
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_ok(args: &[&str]) -> Output {
    let o = clusca(args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    o
}

#[test]
fn full_policy_run_has_unit_speedup_and_zero_error() {
    let f = Fixture::new();
    let cfg = f.config("full", "policy = \"full\"");
    run_ok(&["run", "--config", cfg.to_str().unwrap()]);
    let r = json(&f.file("full.report.json"));
    assert_eq!(r["speedup_model"], 1.0);
    assert_eq!(r["speedup_total"], 1.0);
    assert_eq!(r["error_vs_oracle"], 0.0);
    assert!(r.get("timing").is_none());
}

#[test]
fn rerun_writes_byte_identical_files() {
    let f = Fixture::new();
    let cfg = f.config("again", "policy = \"clusca\"");
    let cfg = cfg.to_str().unwrap();
    run_ok(&["run", "--config", cfg]);
    let first = std::fs::read(f.file("again.report.json")).unwrap();
    let trace = std::fs::read(f.file("again.trace.csv")).unwrap();
    run_ok(&["run", "--config", cfg]);
    assert_eq!(std::fs::read(f.file("again.report.json")).unwrap(), first);
    assert_eq!(std::fs::read(f.file("again.trace.csv")).unwrap(), trace);
    assert_eq!(std::fs::read_dir(f.out()).unwrap().count(), 2);
}

#[test]
fn trace_has_the_frozen_header_and_rows_per_step() {
    let f = Fixture::new();
    let cfg = f.config("trace", "policy = \"clusca\"");
    run_ok(&["run", "--config", cfg.to_str().unwrap()]);
    let mut rdr = csv::Reader::from_path(f.file("trace.trace.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), &csv::StringRecord::from(TRACE_HEADER.to_vec()));
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    for step in 0..10 {
        let s = step.to_string();
        let latent = rows.iter().filter(|r| r[0] == s && &r[4] == "latent_norm").count();
        assert_eq!(latent, 1, "step {step}");
    }
    let ari = rows.iter().filter(|r| &r[4] == "ari_dt5").count();
    assert_eq!(ari, 1);
}

#[test]
fn too_many_clusters_exits_2_naming_the_field() {
    let f = Fixture::new();
    let p = f.dir.path().join("bigk.toml");
    std::fs::write(&p, small_config("bigk", &f.out(), "").replace("clusters = 4", "clusters = 17")).unwrap();
    let o = clusca(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cache.clusters"), "{}", stderr(&o));
    assert!(!f.out().exists() || std::fs::read_dir(f.out()).unwrap().count() == 0);
}

#[test]
fn parse_errors_exit_2_with_line_and_field() {
    let f = Fixture::new();
    let p = f.dir.path().join("bad.toml");
    std::fs::write(&p, "run_id = \"bad\"\n[cache]\ngamma = \"high\"\n").unwrap();
    let o = clusca(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("line 3") && e.contains("gamma"), "{e}");

    let o = clusca(&["run", "--config", f.dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = clusca(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let f = Fixture::new();
    let p = f.config("div", "");
    let text = std::fs::read_to_string(&p).unwrap().replace("steps = 10", "steps = 10\nmax_norm_growth = 0.5");
    std::fs::write(&p, text).unwrap();
    let o = clusca(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("divergence"));
}

#[test]
fn env_var_overrides_output_dir() {
    let f = Fixture::new();
    let cfg = f.config("env", "policy = \"fora\"");
    let alt = f.dir.path().join("alt");
    let o = Command::new(env!("CARGO_BIN_EXE_clusca"))
        .args(["run", "--config", cfg.to_str().unwrap()])
        .env(OUTPUT_DIR_ENV, &alt)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(alt.join("env.report.json").exists());
    assert!(!f.out().exists());
}

#[test]
fn init_prints_a_loadable_default_config() {
    let o = run_ok(&["init", "--run-id", "fresh"]);
    let cfg = ExperimentConfig::parse(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg.run_id, "fresh");
    assert_eq!((cfg.cache.interval, cfg.cache.clusters, cfg.cache.order, cfg.cache.gamma), (5, 16, 2, 0.005));
}

fn compare_rows(f: &Fixture, name: &str, policies: &str) -> Vec<Value> {
    let cfg = f.config(name, "");
    let o = run_ok(&["compare", "--config", cfg.to_str().unwrap(), "--policies", policies]);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("policy"), "{table}");
    json(&f.file(&format!("{name}.compare.json")))["rows"].as_array().unwrap().clone()
}

#[test]
fn compare_examples() {
    let f = Fixture::new();
    let rows = compare_rows(&f, "ff", "full,full");
    for r in &rows {
        assert_eq!(r["rel_error"], 0.0);
        assert_eq!(r["speedup_model"], 1.0);
    }
    let rows = compare_rows(&f, "fc", "full,clusca:N=1");
    assert_eq!(rows[1]["rel_error"], 0.0);
    let rows = compare_rows(&f, "ft", "fora,taylorseer:O=0");
    assert_eq!(rows[0]["rel_error"], rows[1]["rel_error"]);
    assert!(rows[0]["rel_error"].as_f64().unwrap() > 0.0);

    let mut rdr = csv::Reader::from_path(f.file("ft.compare.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), &csv::StringRecord::from(COMPARE_HEADER.to_vec()));
    assert_eq!(rdr.records().count(), 2);
}

#[test]
fn compare_needs_two_policies() {
    let f = Fixture::new();
    let cfg = f.config("one", "");
    let o = clusca(&["compare", "--config", cfg.to_str().unwrap(), "--policies", "fora"]);
    assert_eq!(o.status.code(), Some(2));
    let o = clusca(&["compare", "--config", cfg.to_str().unwrap(), "--policies", "fora,clusca:K=99"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cache.clusters"));
}

fn sweep_rows(f: &Fixture, name: &str, cache: &str, axis: &str, values: &str) -> Vec<Value> {
    let cfg = f.config(name, cache);
    run_ok(&["sweep", "--config", cfg.to_str().unwrap(), "--axis", axis, "--values", values]);
    json(&f.file(&format!("{name}.sweep.json")))["rows"].as_array().unwrap().clone()
}

#[test]
fn sweep_examples() {
    let f = Fixture::new();
    let rows = sweep_rows(&f, "g", "gamma = 0.3", "gamma", "0");
    assert_eq!(rows.len(), 1);
    let single = f.config("g0", "gamma = 0.0");
    run_ok(&["run", "--config", single.to_str().unwrap()]);
    let r = json(&f.file("g0.report.json"));
    assert_eq!(rows[0]["rel_error"], r["error_vs_oracle"]);
    assert_eq!(rows[0]["speedup_total"], r["speedup_total"]);

    let rows = sweep_rows(&f, "n", "", "N", "1,2,5");
    assert_eq!(rows[0]["rel_error"], 0.0);
    assert!(rows[2]["rel_error"].as_f64().unwrap() > 0.0);

    let rows = sweep_rows(&f, "k", "", "K", "2,16");
    assert!(rows[1]["rel_error"].as_f64().unwrap() <= 1e-9);

    let mut rdr = csv::Reader::from_path(f.file("k.sweep.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), &csv::StringRecord::from(SWEEP_HEADER.to_vec()));

    let cfg = f.config("badaxis", "");
    let o = clusca(&["sweep", "--config", cfg.to_str().unwrap(), "--axis", "depth", "--values", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn concurrent_members_match_sequential_runs() {
    let f = Fixture::new();
    let text = small_config("par", &f.out(), "");
    let cfg = ExperimentConfig::parse(&text).unwrap();
    let specs: Vec<PolicySpec> = ["fora", "toca", "taylorseer:O=1", "clusca", "clusca:gamma=0.5"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let out = cmd_compare(&cfg, &specs).unwrap();
    let model = ToyDit::new(cfg.model_config()).unwrap();
    let oracle = run_oracle(&model, &cfg).unwrap();
    for (spec, row) in specs.iter().zip(&out.report.rows) {
        let c = spec.apply(&cfg.cache).unwrap();
        let mut r = run_policy(&model, &cfg, &c, &TrajectorySpec::default()).unwrap();
        let e = r.compare_with(&oracle).unwrap();
        assert_eq!(row.summary.rel_error, e, "{}", spec.text);
        assert_eq!(row.summary.flops, r.flops, "{}", spec.text);
    }

    let values: Vec<String> = ["0", "0.01", "0.5"].map(String::from).to_vec();
    let sweep = cmd_sweep(&cfg, Axis::Gamma, &values).unwrap();
    for (v, row) in values.iter().zip(&sweep.report.rows) {
        let mut c = cfg.cache.clone();
        c.gamma = v.parse().unwrap();
        let mut r = run_policy(&model, &cfg, &c, &TrajectorySpec::default()).unwrap();
        assert_eq!(row.summary.rel_error, r.compare_with(&oracle).unwrap());
    }
}
