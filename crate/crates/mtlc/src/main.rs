use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtlc::config::Config;
use mtlc::error::{Error, Result};
use mtlc::pipeline::{Run, Status};
use mtlc::reports::{forecast_table, forecasts};
use mtlc::tables::{read_fits, staged_from_rows};
use mtlc_core::grid::{average_over_shifts, Metric};

#[derive(Parser)]
#[command(name = "mtlc", version, about = "Multi-task learning curves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores, capped by the config.
    #[arg(long, env = "MTLC_PARALLELISM")]
    parallelism: Option<usize>,
    /// Keep completed grid entries from an earlier run.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(Common),
    /// Assign cross-validation folds.
    Split(Common),
    /// Train and evaluate every grid entry.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Stop after this many entries (the run can be resumed).
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Fit the staged learning curves.
    Fit(Common),
    /// Measure TAG inter-task affinities.
    Tag(Common),
    /// Write the report tables.
    Report(Common),
    /// Run every stage that is out of date.
    Pipeline(Common),
    /// Rank tasks by the forecast gain of extra labels.
    Forecast {
        #[command(flatten)]
        common: Common,
        /// Extra labels per task; defaults to one more fold of each task.
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long, default_value = "auroc", value_parser = ["auroc", "aupr"])]
        metric: String,
    },
}

fn open(c: &Common, command: &str) -> Result<Run> {
    let mut cfg = Config::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if c.parallelism == Some(0) {
        return Err(Error::Config("--parallelism must be positive".into()));
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let parallelism = c
        .parallelism
        .unwrap_or_else(|| cfg.parallelism.map_or(cores, |p| p.min(cores)));
    Run::new(cfg, &c.out, parallelism, command)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => open(&c, "synth")?.synth().map_err(|e| e.in_stage("synth")),
        Command::Split(c) => open(&c, "split")?.split().map_err(|e| e.in_stage("split")),
        Command::Grid { common, stop_after } => {
            let r = open(&common, "grid")?
                .grid(common.resume, stop_after)
                .map_err(|e| e.in_stage("grid"))?;
            println!(
                "grid: {} entries ({} reused), {} failed{}",
                r.observations.len(),
                r.reused,
                r.failures.len(),
                if r.complete { "" } else { ", stopped early" }
            );
            Ok(())
        }
        Command::Fit(c) => open(&c, "fit")?.fit().map_err(|e| e.in_stage("fit")),
        Command::Tag(c) => open(&c, "tag")?.tag().map_err(|e| e.in_stage("tag")),
        Command::Report(c) => {
            let files = open(&c, "report")?.report().map_err(|e| e.in_stage("report"))?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Pipeline(c) => {
            let status = open(&c, "pipeline")?.pipeline()?;
            if status.iter().all(|(_, s)| *s == Status::UpToDate) {
                println!("up to date");
            } else {
                for (stage, s) in status {
                    let word = match s {
                        Status::Ran => "ran",
                        Status::UpToDate => "up to date",
                        Status::Partial => "partial",
                    };
                    println!("{stage}: {word}");
                }
            }
            Ok(())
        }
        Command::Forecast { common, budget, metric } => {
            let r = open(&common, "forecast")?;
            let metric = if metric == "aupr" { Metric::Aupr } else { Metric::Auroc };
            let obs = r.load_grid().map_err(|e| e.in_stage("forecast"))?;
            let records = average_over_shifts(&obs).map_err(|e| Error::Numerical(e.to_string()))?;
            let fits = staged_from_rows(&read_fits(&r.fits_path(metric)).map_err(|e| e.in_stage("forecast"))?);
            let all = [(metric, fits)].into_iter().collect();
            print!("{}", forecast_table(&forecasts(&records, &all, budget)).markdown(&r.hash));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
