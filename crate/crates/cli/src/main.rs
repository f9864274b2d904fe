//! Command-line entry points for the interval-sliced recommender pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or artifact error,
//! 4 numeric divergence. Internal parallelism honors `RAYON_NUM_THREADS`.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqrec::config::ExperimentConfig;
use seqrec::error::Error;
use seqrec::pipeline::{cmd_evaluate, cmd_preprocess, cmd_sweep, cmd_train, SweepAxis};
use seqrec::synthetic::{generate, SyntheticSpec};

#[derive(Parser)]
#[command(
    name = "seqrec",
    about = "Interval-sliced sequential recommender with denoising and augmentation",
    long_about = None,
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (flat `key = value` text).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the dataset, refine the interval graphs, write artifacts.
    Preprocess {
        #[command(flatten)]
        common: Common,
    },
    /// Train on preprocessed artifacts; writes checkpoint, logs, metrics.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on the held-out targets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (defaults to `<out>/checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated cutoffs, e.g. `5,10,20`.
        #[arg(long)]
        topn: Option<String>,
    },
    /// Run the pipeline once per value of one hyper-parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of: beta, lambda1, min_sim.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `0.3,0.5,0.7`.
        #[arg(long)]
        values: String,
    },
    /// Generate a synthetic interaction log as CSV.
    Synth {
        #[arg(long, default_value_t = 20)]
        users: usize,
        #[arg(long, default_value_t = 30)]
        items: usize,
        #[arg(long, default_value_t = 3)]
        communities: usize,
        /// Input intervals (one extra target interval is generated).
        #[arg(long, default_value_t = 5)]
        intervals: usize,
        #[arg(long, default_value_t = 3)]
        events: usize,
        #[arg(long, default_value_t = 0.9)]
        coverage: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0.0)]
        drift: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    ExperimentConfig::parse(&text)
}

fn parse_topn(spec: &str) -> Result<Vec<usize>, Error> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad topn value {s:?}")))
        })
        .collect()
}

fn parse_values(spec: &str) -> Result<Vec<f64>, Error> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad sweep value {s:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Preprocess { common } => {
            let cfg = load_config(&common.config)?;
            let report = cmd_preprocess(&cfg, &common.out)?;
            println!(
                "preprocessed {} interactions: {} noisy, {} augmented in {:.2}s",
                report.total_initial,
                report.total_noisy,
                report.total_augmented,
                report.wall_time_secs
            );
            println!("artifacts written to {}", common.out.display());
        }
        Command::Train { common } => {
            let cfg = load_config(&common.config)?;
            let outcome = cmd_train(&cfg, &common.out)?;
            if let Some(last) = outcome.logs.last() {
                println!(
                    "trained {} epochs (kept epoch {}), final loss {:.6}",
                    last.epoch, outcome.kept_epoch, last.loss
                );
            }
            println!("{}", outcome.final_metrics.table_string());
        }
        Command::Evaluate {
            common,
            checkpoint,
            topn,
        } => {
            let cfg = load_config(&common.config)?;
            let topn = match topn {
                Some(ref spec) => parse_topn(spec)?,
                None => cfg.topn.clone(),
            };
            let checkpoint = checkpoint.unwrap_or_else(|| common.out.join("checkpoint"));
            let report = cmd_evaluate(&cfg, &common.out, &checkpoint, &topn)?;
            println!("{}", report.table_string());
            println!("{}", serde_json::to_string_pretty(&report.to_json())?);
        }
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let cfg = load_config(&common.config)?;
            let axis: SweepAxis = axis.parse()?;
            let values = parse_values(&values)?;
            let path = cmd_sweep(&cfg, &common.out, axis, &values)?;
            println!("sweep written to {}", path.display());
            print!("{}", fs::read_to_string(&path)?);
        }
        Command::Synth {
            users,
            items,
            communities,
            intervals,
            events,
            coverage,
            noise,
            drift,
            seed,
            out,
        } => {
            let data = generate(&SyntheticSpec {
                num_users: users,
                num_items: items,
                num_communities: communities,
                num_input_intervals: intervals,
                events_per_interval: events,
                coverage,
                noise_rate: noise,
                drift,
                isolate_noise: false,
                seed,
            })?;
            let mut csv = String::from("user,item,timestamp\n");
            for x in &data.log.interactions {
                csv.push_str(&format!("u{},i{},{}\n", x.user, x.item, x.timestamp));
            }
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(&out, csv)?;
            println!(
                "wrote {} interactions ({} users, {} items) to {}",
                data.log.interactions.len(),
                data.log.num_users,
                data.log.num_items,
                out.display()
            );
        }
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Divergence(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
