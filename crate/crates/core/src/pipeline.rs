//! Command-level orchestration shared by the CLI binary and the test suite:
//! preprocess → train → evaluate, plus hyper-parameter sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::corpus::{
    build_interval_graphs, load_graphs, load_target, parse_log, save_graphs, save_target,
    IntervalGraphs, LogFormat, TargetInterval,
};
use crate::error::{Error, Result};
use crate::evaluator::{build_tasks, evaluate, CandidatePolicy, MetricsReport};
use crate::model::Model;
use crate::refine::{refine_all, IntervalStats, RefinementReport};
use crate::tensor::{load_checkpoint, save_checkpoint};
use crate::trainer::{embeddings_for, train, TrainOutcome};

/// Parses the dataset, slices into `intervals + 1` windows, holds out the
/// final window, refines the inputs, and writes all artifacts under `out`.
pub fn cmd_preprocess(cfg: &ExperimentConfig, out: &Path) -> Result<RefinementReport> {
    cfg.validate()?;
    let (inputs, target, report) = preprocess_in_memory(cfg)?;
    fs::create_dir_all(out)?;
    save_graphs(&out.join("graphs"), &inputs)?;
    save_target(&out.join("target.txt"), &target)?;
    fs::write(
        out.join("refinement_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    fs::write(out.join("config.echo"), cfg.to_text())?;
    Ok(report)
}

/// The preprocess pipeline without touching disk.
pub fn preprocess_in_memory(
    cfg: &ExperimentConfig,
) -> Result<(IntervalGraphs, TargetInterval, RefinementReport)> {
    let file = fs::File::open(&cfg.dataset)
        .map_err(|e| Error::Artifact(format!("cannot open {}: {e}", cfg.dataset.display())))?;
    let log = parse_log(file, LogFormat::Csv)?;
    preprocess_log_events(cfg, &log)
}

/// Preprocess from an already-parsed log (synthetic pipelines).
pub fn preprocess_log_events(
    cfg: &ExperimentConfig,
    log: &crate::corpus::InteractionLog,
) -> Result<(IntervalGraphs, TargetInterval, RefinementReport)> {
    let graphs = build_interval_graphs(log, cfg.intervals + 1)?;
    let (mut inputs, target) = crate::corpus::split_target(graphs)?;
    let report = if cfg.disable_refine {
        RefinementReport {
            per_interval: (0..inputs.num_intervals)
                .map(|t| IntervalStats {
                    interval: t,
                    initial_interactions: inputs.user_item[t].num_entries(),
                    noisy_interactions: 0,
                    augmented_interactions: 0,
                })
                .collect(),
            total_initial: inputs.user_item.iter().map(|g| g.num_entries()).sum(),
            total_noisy: 0,
            total_augmented: 0,
            wall_time_secs: 0.0,
        }
    } else {
        refine_all(&mut inputs, &cfg.refine_config())?
    };
    Ok((inputs, target, report))
}

/// Reads artifacts previously written by [`cmd_preprocess`].
pub fn load_artifacts(out: &Path) -> Result<(IntervalGraphs, TargetInterval)> {
    let inputs = load_graphs(&out.join("graphs"))?;
    let target = load_target(&out.join("target.txt"))?;
    Ok((inputs, target))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    kept_epoch: usize,
    epochs_run: usize,
    metrics: &'a serde_json::Value,
}

/// Trains on the preprocessed artifacts under `out`; writes the checkpoint,
/// the per-epoch JSON log, and the final metrics.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (inputs, target) = load_artifacts(out)?;
    let outcome = train(&inputs, &target, cfg.model_config(), &cfg.train_config())?;
    save_checkpoint(&out.join("checkpoint"), &outcome.model.store)?;
    fs::write(
        out.join("train_log.json"),
        serde_json::to_string_pretty(&outcome.logs)?,
    )?;
    let metrics_json = outcome.final_metrics.to_json();
    fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&TrainSummary {
            kept_epoch: outcome.kept_epoch,
            epochs_run: outcome.logs.len(),
            metrics: &metrics_json,
        })?,
    )?;
    fs::write(out.join("config.echo"), cfg.to_text())?;
    Ok(outcome)
}

/// Scores a checkpoint on the held-out targets.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
    topn: &[usize],
) -> Result<MetricsReport> {
    cfg.validate()?;
    let (inputs, target) = load_artifacts(out)?;
    let mut model = Model::init(
        inputs.num_users,
        inputs.num_items,
        inputs.num_intervals,
        cfg.model_config(),
        cfg.seed,
    )?;
    model.load_store(&load_checkpoint(checkpoint)?)?;
    let policy = if cfg.candidate_negatives == 0 {
        CandidatePolicy::FullCatalog
    } else {
        CandidatePolicy::Sampled {
            negatives: cfg.candidate_negatives,
            seed: cfg.seed,
        }
    };
    let tasks = build_tasks(&inputs, &target, policy);
    if tasks.is_empty() {
        return Err(Error::Data("no evaluable users in the target".into()));
    }
    let (_, emb) = embeddings_for(&model, &inputs)?;
    let report = evaluate(|u, j| emb.score(u, j), &tasks, topn)?;
    fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&report.to_json())?,
    )?;
    Ok(report)
}

/// Sweepable hyper-parameter axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Beta,
    Lambda1,
    MinSim,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(Self::Beta),
            "lambda1" => Ok(Self::Lambda1),
            "min_sim" => Ok(Self::MinSim),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {s:?}; expected beta, lambda1, or min_sim"
            ))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Beta => "beta",
            Self::Lambda1 => "lambda1",
            Self::MinSim => "min_sim",
        })
    }
}

/// Runs the full pipeline once per value and writes
/// `sweep_<axis>.csv` with one `value,hr@10,ndcg@10` row each.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    out: &Path,
    axis: SweepAxis,
    values: &[f64],
) -> Result<PathBuf> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    fs::create_dir_all(out)?;
    let mut csv = String::from("axis,value,hr@10,ndcg@10\n");
    for &value in values {
        let mut point = cfg.clone();
        match axis {
            SweepAxis::Beta => point.beta = value,
            SweepAxis::Lambda1 => point.lambda1 = value,
            SweepAxis::MinSim => point.min_sim = value,
        }
        point.validate()?;
        let (inputs, target, _) = preprocess_in_memory(&point)?;
        let outcome = train(&inputs, &target, point.model_config(), &point.train_config())?;
        let hr = outcome.final_metrics.hr_at(10).unwrap_or(0.0);
        let ndcg = outcome.final_metrics.ndcg_at(10).unwrap_or(0.0);
        csv.push_str(&format!("{axis},{value},{hr},{ndcg}\n"));
    }
    let path = out.join(format!("sweep_{axis}.csv"));
    fs::write(&path, &csv)?;
    fs::write(out.join("config.echo"), cfg.to_text())?;
    Ok(path)
}
