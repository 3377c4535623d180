use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Parser, Subcommand};

use retain_cli::config::{DataSource, ExperimentConfig, LeakagePolicy};
use retain_cli::pipeline::{load_data, run_experiment, summary, RunOptions};
use retain_cli::report::{emit_report, read_audits, read_evaluations};
use retain_cli::roster::score_roster;
use retain_cli::store::RunStore;
use retain_core::evaluation::selection_window;
use retain_core::events::{export_csv, ingest_csv, validate_event_log, write_ground_truth_csv};

#[derive(Parser)]
#[command(name = "retain", version, about = "Risk models for retention in care")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for fitting and scoring.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Abort on any leakage finding, whatever the config says.
    #[arg(long, global = true, conflicts_with = "warn_leakage")]
    strict_leakage: bool,
    /// Report leakage findings as warnings instead of aborting.
    #[arg(long, global = true)]
    warn_leakage: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic cohort as CSV files.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Check an event log for data-quality problems.
    Validate {
        #[arg(long, requires = "events")]
        entities: Option<PathBuf>,
        #[arg(long, requires = "entities")]
        events: Option<PathBuf>,
    },
    /// Run the full experiment and select a model.
    Run,
    /// Emit report tables and plots for a finished run.
    Report {
        /// Run directory; derived from --config when absent.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Score a ranked list on one date with the selected model.
    Roster {
        #[arg(long)]
        as_of: NaiveDate,
        /// Percent of rows to list; the selection k when absent.
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Summarize false-omission-rate audits of a finished run.
    Audit {
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .context("--config is required for this command")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

/// The run store and its config, from `--run` or from the config's run id.
fn open_run(cli: &Cli, run: Option<&Path>) -> Result<(RunStore, ExperimentConfig)> {
    match run {
        Some(dir) => {
            let store = RunStore::existing(dir)?;
            let cfg: ExperimentConfig = serde_json::from_str(&store.read("config.json")?)
                .context("config.json in the run directory")?;
            Ok((store, cfg))
        }
        None => {
            let cfg = load_config(cli)?;
            let dir = cfg.output_dir.join(cfg.run_id());
            Ok((RunStore::existing(&dir)?, cfg))
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { out } => {
            let cfg = load_config(cli)?;
            let DataSource::Synthetic(_) = &cfg.data else {
                bail!("generate needs a [data.synthetic] block in the config");
            };
            let data = load_data(&cfg)?;
            std::fs::create_dir_all(out)?;
            export_csv(
                &data.log,
                &out.join("entities.csv"),
                &out.join("events.csv"),
                0,
            )?;
            if let Some(t) = &data.truth {
                write_ground_truth_csv(t, &out.join("ground_truth.csv"))?;
            }
            if let Some(z) = &data.zip {
                z.write_csv(std::fs::File::create(out.join("zip_attributes.csv"))?)?;
            }
            println!(
                "wrote {} entities and {} events to {}",
                data.log.n_entities(),
                data.log.events().len(),
                out.display()
            );
        }
        Command::Validate { entities, events } => {
            let log = match (entities, events) {
                (Some(a), Some(b)) => ingest_csv(a, b)?,
                _ => load_data(&load_config(cli)?)?.log,
            };
            let report = validate_event_log(&log);
            if report.is_empty() {
                println!(
                    "{} entities, {} events: no findings",
                    log.n_entities(),
                    log.events().len()
                );
            } else {
                print!("{report}");
            }
        }
        Command::Run => {
            let cfg = load_config(cli)?;
            let leakage = if cli.strict_leakage {
                Some(LeakagePolicy::Abort)
            } else if cli.warn_leakage {
                Some(LeakagePolicy::Warn)
            } else {
                None
            };
            let outcome = run_experiment(
                &cfg,
                RunOptions {
                    jobs: cli.jobs,
                    leakage,
                },
            )?;
            print!("{}", summary(&outcome));
            println!("run directory: {}", cfg.output_dir.join(&outcome.run_id).display());
        }
        Command::Report { run } => {
            let (store, cfg) = open_run(cli, run.as_deref())?;
            let dir = emit_report(&store, &cfg)?;
            println!("report written to {}", dir.display());
        }
        Command::Roster { as_of, k, run } => {
            let (store, cfg) = open_run(cli, run.as_deref())?;
            let path = score_roster(&store, &cfg, *as_of, *k)?;
            println!("roster written to {}", path.display());
        }
        Command::Audit { run } => {
            let (store, cfg) = open_run(cli, run.as_deref())?;
            let audits = read_audits(&store.path("audits.csv"))?;
            let records = read_evaluations(&store.path("evaluations.csv"))?;
            let window = selection_window(&records, cfg.selection.last_n_periods);
            let (lo, hi) = cfg.audit.parity_band;
            println!(
                "mean FOR ratio over splits {window:?} (parity band [{lo}, {hi}], top {}% flagged)",
                cfg.selection.k_pct
            );
            let mut keys: Vec<(String, String, String)> = audits
                .iter()
                .map(|a| (a.model_group.clone(), a.attribute.to_string(), a.group.clone()))
                .collect();
            keys.sort();
            keys.dedup();
            for (g, attr, grp) in keys {
                let ratios: Vec<Option<f64>> = audits
                    .iter()
                    .filter(|a| {
                        a.model_group == g
                            && a.attribute.to_string() == attr
                            && a.group == grp
                            && window.contains(&a.split_id)
                    })
                    .map(|a| a.ratio)
                    .collect();
                if ratios.is_empty() {
                    continue;
                }
                let line = match ratios.iter().copied().collect::<Option<Vec<f64>>>() {
                    Some(v) => {
                        let m = v.iter().sum::<f64>() / v.len() as f64;
                        let tag = if m >= lo && m <= hi { "in band" } else { "OUT OF BAND" };
                        format!("{m:.3} {tag}")
                    }
                    None => "undefined in some split".to_string(),
                };
                println!("{g}\t{attr}={grp}\t{line}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
