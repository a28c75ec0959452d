//! `croco ablate`: run the full train+eval pipeline for every cell of a
//! (gsd, patch, batch) x seeds sweep and emit two CSV tables: raw per-run
//! rows plus a mean/std summary per cell. Cell failures are recorded as
//! `nan` rows and the sweep continues.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;

use croco_core::sampling::{assign_splits, load_split_spec};
use croco_core::trainer::{train, TrainDataset};

use crate::config::{resolve, FileConfig, TrainFlags};
use crate::data::{load_pairs, RunDir};
use crate::CliError;

fn parse_list<T: std::str::FromStr>(name: &str, text: Option<&str>) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    match text {
        None => Ok(Vec::new()),
        Some(t) => t
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<T>()
                    .map_err(|e| CliError::Usage(format!("bad {name} value {tok:?}: {e}")))
            })
            .collect(),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    config: Option<&Path>,
    flags: &TrainFlags,
    data_dir: Option<&Path>,
    splits: Option<&Path>,
    batch_sizes: Option<&str>,
    patch_ms: Option<&str>,
    gsds: Option<&str>,
    seeds: Option<&str>,
    run_dir: Option<&Path>,
) -> Result<(), CliError> {
    let file = match config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let resolved = resolve(&file, flags, data_dir, splits)?;

    let batch_list: Vec<usize> = parse_list("batch-sizes", batch_sizes)?;
    let patch_list: Vec<f64> = parse_list("patch-ms", patch_ms)?;
    let gsd_list: Vec<f64> = parse_list("gsds", gsds)?;
    let seed_list: Vec<u64> = parse_list("seeds", seeds)?;
    if batch_list.is_empty() && patch_list.is_empty() && gsd_list.is_empty() && seed_list.is_empty()
    {
        return Err(CliError::Usage(
            "empty sweep spec: pass at least one of --batch-sizes/--patch-ms/--gsds/--seeds".into(),
        ));
    }
    let batch_list = defaulted(batch_list, resolved.train.batch_size);
    let patch_list = defaulted(patch_list, resolved.train.patch_m);
    let gsd_list = defaulted(gsd_list, resolved.train.gsd_m);
    let seed_list = defaulted(seed_list, resolved.train.seed);

    let run = RunDir::create(run_dir, "ablate")?;
    resolved.write_resolved(&run.root)?;

    let raw_pairs = load_pairs(&resolved.data_dir)?;
    let spec = load_split_spec(&resolved.splits).map_err(|e| CliError::Usage(e.to_string()))?;
    let ids: Vec<String> = raw_pairs.iter().map(|p| p.pair_id.clone()).collect();
    let split = assign_splits(&ids, &spec).map_err(|e| CliError::Usage(e.to_string()))?;

    let mut rows_csv = String::from("gsd_m,patch_m,batch_size,seed,top1,top5\n");
    let mut cells: Vec<(f64, f64, usize, Vec<(f64, f64)>)> = Vec::new();
    for &gsd in &gsd_list {
        for &patch_m in &patch_list {
            for &batch in &batch_list {
                let mut scores = Vec::new();
                for &seed in &seed_list {
                    let mut cfg = resolved.train.clone();
                    cfg.gsd_m = gsd;
                    cfg.patch_m = patch_m;
                    cfg.batch_size = batch;
                    cfg.seed = seed;
                    match run_cell(&raw_pairs, &split, &cfg) {
                        Ok((top1, top5)) => {
                            writeln!(
                                rows_csv,
                                "{gsd},{patch_m},{batch},{seed},{top1:.6},{top5:.6}"
                            )
                            .expect("string write");
                            scores.push((top1, top5));
                        }
                        Err(e) => {
                            eprintln!(
                                "cell gsd={gsd} patch={patch_m} batch={batch} seed={seed} failed: {e}"
                            );
                            writeln!(rows_csv, "{gsd},{patch_m},{batch},{seed},nan,nan")
                                .expect("string write");
                        }
                    }
                }
                cells.push((gsd, patch_m, batch, scores));
            }
        }
    }

    let runs_path = run.root.join("ablation_runs.csv");
    std::fs::write(&runs_path, &rows_csv)
        .with_context(|| format!("cannot write {}", runs_path.display()))
        .map_err(CliError::runtime)?;

    let mut summary =
        String::from("gsd_m,patch_m,batch_size,n_seeds,top1_mean,top1_std,top5_mean,top5_std\n");
    for (gsd, patch_m, batch, scores) in &cells {
        let (m1, s1) = mean_std(scores.iter().map(|s| s.0));
        let (m5, s5) = mean_std(scores.iter().map(|s| s.1));
        writeln!(
            summary,
            "{gsd},{patch_m},{batch},{},{m1:.6},{s1:.6},{m5:.6},{s5:.6}",
            scores.len()
        )
        .expect("string write");
    }
    let summary_path = run.root.join("ablation_summary.csv");
    std::fs::write(&summary_path, &summary)
        .with_context(|| format!("cannot write {}", summary_path.display()))
        .map_err(CliError::runtime)?;

    print!("{summary}");
    println!("runs={} summary={}", runs_path.display(), summary_path.display());
    Ok(())
}

fn defaulted<T: Clone>(list: Vec<T>, default: T) -> Vec<T> {
    if list.is_empty() {
        vec![default]
    } else {
        list
    }
}

fn run_cell(
    raw_pairs: &[croco_core::raster::TilePair],
    split: &croco_core::sampling::SplitAssignment,
    cfg: &croco_core::trainer::TrainConfig,
) -> anyhow::Result<(f64, f64)> {
    let dataset = TrainDataset::prepare(raw_pairs.to_vec(), split.clone(), cfg.gsd_m)?;
    let outcome = train(&dataset, cfg)?;
    let scores = outcome
        .log
        .entries
        .iter()
        .rev()
        .find_map(|e| e.top1.map(|t1| (t1, e.top5.unwrap_or(f64::NAN))));
    scores.ok_or_else(|| anyhow::anyhow!("run produced no validation scores (empty val split?)"))
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
    (mean, var.sqrt())
}
