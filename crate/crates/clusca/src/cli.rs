//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{Axis, ExperimentConfig, PolicySpec, SeedConfig};
use crate::error::Result;
use crate::runner::{cmd_compare, cmd_run, cmd_sweep};

#[derive(Debug, Parser)]
#[command(name = "clusca", version, about = "Cluster-driven feature caching experiments on a toy diffusion transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample once under the configured policy and write the report and trace.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run several policies against the oracle with shared seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated specs such as `fora,taylorseer:O=1,clusca:K=32`.
        #[arg(long, value_delimiter = ',', required = true)]
        policies: Vec<String>,
    },
    /// Vary one cache setting of the configured policy.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// gamma, N, K or O.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Print a config file with every default filled in.
    Init {
        #[arg(long, default_value = "example")]
        run_id: String,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 I/O or internal failure, 2 configuration
/// error, 3 numerical divergence.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = cmd_run(&cfg)?;
            let r = &out.report;
            println!(
                "{}: speedup {:.4} (with overheads {:.4}), rel error {:.6e}",
                r.label,
                r.speedup_model,
                r.speedup_total,
                r.error_vs_oracle.unwrap_or(f64::NAN)
            );
            if let Some(t) = r.timing {
                eprintln!(
                    "wall time: total {:.3} s, clustering {:.2}%",
                    t.total_ns as f64 / 1e9,
                    100.0 * t.clustering_share()
                );
            }
            println!("wrote {}", out.report_path.display());
            println!("wrote {}", out.trace_path.display());
        }
        Command::Compare { config, policies } => {
            let cfg = ExperimentConfig::load(&config)?;
            let specs = policies.iter().map(|p| p.parse()).collect::<Result<Vec<PolicySpec>>>()?;
            let out = cmd_compare(&cfg, &specs)?;
            print!("{}", out.table);
            println!("wrote {}", out.csv_path.display());
            println!("wrote {}", out.json_path.display());
        }
        Command::Sweep { config, axis, values } => {
            let cfg = ExperimentConfig::load(&config)?;
            let axis: Axis = axis.parse()?;
            let out = cmd_sweep(&cfg, axis, &values)?;
            print!("{}", out.table);
            println!("wrote {}", out.csv_path.display());
            println!("wrote {}", out.json_path.display());
        }
        Command::Init { run_id } => {
            let cfg = ExperimentConfig::with_seeds(
                run_id,
                SeedConfig {
                    weights: 0,
                    noise: 1,
                    cluster: 2,
                    selection: 3,
                },
            );
            cfg.validate()?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}
