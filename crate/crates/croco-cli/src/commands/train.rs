//! `croco train`: resolve the run configuration, load tiles and splits,
//! run the training loop, and persist checkpoints, the CSV log and the
//! resolved config into the run directory.

use std::path::Path;

use anyhow::Context;

use croco_core::sampling::{assign_splits, load_split_spec};
use croco_core::trainer::{train, TrainDataset, TrainError};

use crate::config::{resolve, FileConfig, TrainFlags};
use crate::data::{load_pairs, RunDir};
use crate::CliError;

pub fn run(
    config: Option<&Path>,
    flags: &TrainFlags,
    data_dir: Option<&Path>,
    splits: Option<&Path>,
    run_dir: Option<&Path>,
) -> Result<(), CliError> {
    let file = match config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let resolved = resolve(&file, flags, data_dir, splits)?;
    resolved.train.validate().map_err(usage_if_config)?;

    let run = RunDir::create(run_dir, "train")?;
    resolved.write_resolved(&run.root)?;

    let pairs = load_pairs(&resolved.data_dir)?;
    if pairs.is_empty() {
        return Err(CliError::Usage(format!(
            "no tile pairs found in {}",
            resolved.data_dir.display()
        )));
    }
    let spec = load_split_spec(&resolved.splits).map_err(|e| CliError::Usage(e.to_string()))?;
    let ids: Vec<String> = pairs.iter().map(|p| p.pair_id.clone()).collect();
    let split = assign_splits(&ids, &spec).map_err(|e| CliError::Usage(e.to_string()))?;
    for warning in &split.warnings {
        eprintln!("warning: {warning}");
    }

    let dataset = TrainDataset::prepare(pairs, split, resolved.train.gsd_m)
        .map_err(CliError::runtime)?;
    let outcome = train(&dataset, &resolved.train).map_err(CliError::runtime)?;

    let ckpt_dir = run.checkpoints();
    outcome
        .final_checkpoint
        .save(&ckpt_dir.join("final.ckpt"))
        .map_err(CliError::runtime)?;
    outcome
        .best_checkpoint
        .save(&ckpt_dir.join("best.ckpt"))
        .map_err(CliError::runtime)?;
    let log_path = run.root.join("log.csv");
    outcome
        .log
        .write_csv(&log_path)
        .with_context(|| format!("cannot write {}", log_path.display()))
        .map_err(CliError::runtime)?;

    let last = outcome.log.entries.last().expect("steps >= 1");
    let final_loss = last.loss;
    let (top1, top5) = outcome
        .log
        .entries
        .iter()
        .rev()
        .find_map(|e| e.top1.map(|t1| (t1, e.top5.unwrap_or(f64::NAN))))
        .unwrap_or((f64::NAN, f64::NAN));
    println!(
        "steps={} loss={:.4} top1={:.2} top5={:.2} best_step={} run_dir={}",
        last.step,
        final_loss,
        top1,
        top5,
        outcome
            .best_step
            .map(|s| s.to_string())
            .unwrap_or_else(|| "-".into()),
        run.root.display()
    );
    Ok(())
}

/// Config-shaped failures (bad batch size, momentum, ...) are usage errors;
/// the rest are runtime.
fn usage_if_config(err: TrainError) -> CliError {
    match err {
        TrainError::BatchTooSmall(_)
        | TrainError::NoSteps
        | TrainError::BadMomentum(_)
        | TrainError::BadLearningRate(_)
        | TrainError::BadEvalEvery
        | TrainError::Loss(_) => CliError::Usage(err.to_string()),
        other => CliError::runtime(other),
    }
}
