//! `carma` — generate data, train variants, run interventions, aggregate
//! reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use carma_core::data::SplitName;
use carma_core::trainer::Variant;
use commands::{lab_dir, parse_list, parse_rate_list};
use config::load_config;

#[derive(Parser)]
#[command(name = "carma", version, about = "Desk-scale CARMA training and evaluation lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Static run config (JSON); defaults to the built-in desk config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set carma.lambda=0.5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset (TSV + manifest).
    Gen {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one variant over a list of seeds.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        variant: String,
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
        /// Dataset directory (from `gen`).
        #[arg(long)]
        data: PathBuf,
        /// Root for run directories; default `$CARMA_LAB_DIR/runs`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel seed workers.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Constituent-aware pooling sweep over layers and modes.
    Cap {
        /// Runs root (from `train`).
        #[arg(long)]
        runs: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// `all` or a comma list of layer indices.
        #[arg(long, default_value = "all")]
        layers: String,
        /// `all` or a comma list of mean/max/sum.
        #[arg(long, default_value = "all")]
        modes: String,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synonym-replacement consistency table (CS / CV / NI).
    Synonyms {
        #[arg(long)]
        runs: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma list of replacement rates.
        #[arg(long, default_value = "0.25,0.4")]
        rates: String,
        /// Comma list of perturbation seeds (>= 5 for valid CV rows).
        #[arg(long = "eval-seeds", default_value = "1,2,3,4,5")]
        eval_seeds: String,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate result CSVs into a markdown summary and plot data.
    Report {
        /// Directory holding cap_*.csv / synonyms_*.csv.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also emit SVG line plots.
        #[arg(long)]
        svg: bool,
    },
}

/// Errors that stem from user-provided configuration (exit code 2) rather
/// than runtime failures (exit code 3).
fn is_config_error(err: &anyhow::Error) -> bool {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<carma_core::Error>() {
            return matches!(
                core,
                carma_core::Error::Config(_) | carma_core::Error::Json(_)
            );
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return true;
        }
        let text = cause.to_string();
        if text.contains("override")
            || text.contains("parsing config")
            || text.contains("not in (0, 1]")
        {
            return true;
        }
    }
    false
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen { task, seed, n, out } => {
            if n < 50 {
                return Err(anyhow::Error::new(carma_core::Error::config(format!(
                    "--n {n} below the generator minimum of 50"
                ))));
            }
            commands::cmd_gen(&task, seed, n, out)?;
        }
        Cmd::Train {
            config,
            variant,
            seeds,
            data,
            out,
            jobs,
        } => {
            let cfg = load_config(config.config.as_deref(), &config.overrides)?;
            let variant: Variant = variant.parse().map_err(anyhow::Error::new)?;
            let seeds: Vec<u64> = parse_list(&seeds)?;
            let out = out.unwrap_or_else(|| lab_dir().join("runs"));
            commands::cmd_train(&cfg, &data, variant, &seeds, &out, jobs)?;
        }
        Cmd::Cap {
            runs,
            data,
            layers,
            modes,
            split,
            out,
        } => {
            let defaults = config::EvalSpec::default();
            let split = match split {
                Some(s) => s.parse::<SplitName>().map_err(anyhow::Error::new)?,
                None => defaults.cap_split,
            };
            let runs = runs.unwrap_or_else(|| lab_dir().join("runs"));
            commands::cmd_cap(&runs, &data, &layers, &modes, split, out)?;
        }
        Cmd::Synonyms {
            runs,
            data,
            rates,
            eval_seeds,
            split,
            out,
        } => {
            let defaults = config::EvalSpec::default();
            let split = match split {
                Some(s) => s.parse::<SplitName>().map_err(anyhow::Error::new)?,
                None => defaults.synonym_split,
            };
            let rates = parse_rate_list(&rates)?;
            let eval_seeds: Vec<u64> = parse_list(&eval_seeds)?;
            let runs = runs.unwrap_or_else(|| lab_dir().join("runs"));
            commands::cmd_synonyms(
                &runs,
                &data,
                &rates,
                &eval_seeds,
                split,
                defaults.cv_estimator,
                out,
            )?;
        }
        Cmd::Report { results, out, svg } => {
            let results = results.unwrap_or_else(|| lab_dir().join("results"));
            commands::cmd_report(&results, out, svg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
