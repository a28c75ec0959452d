//! `croco eval`: score every map cell against its co-located elevation
//! patch, write the JSON report plus error-map figures, and print the
//! `top1=... top5=... n=...` summary line.

use std::path::Path;

use croco_core::evaluator::{evaluate, render_error_map, write_report_json, EvalQuery};
use croco_core::sampling::extract_patch;
use croco_core::seeded::{rng_stream, sample_without_replacement};

use crate::data::{query_context, RunDir};
use crate::CliError;

#[allow(clippy::too_many_arguments)]
pub fn run(
    checkpoint: Option<&Path>,
    oracle_seed: Option<u64>,
    map_path: &Path,
    data_dir: &Path,
    pair: &str,
    max_queries: Option<usize>,
    query_seed: u64,
    run_dir: Option<&Path>,
) -> Result<(), CliError> {
    let ctx = query_context(checkpoint, oracle_seed, map_path, data_dir, pair)?;
    let grid = &ctx.map.grid;

    let mut cell_indices: Vec<usize> = (0..grid.len()).collect();
    if let Some(cap) = max_queries {
        if cap == 0 {
            return Err(CliError::Usage("max-queries must be at least 1".into()));
        }
        if cap < cell_indices.len() {
            let mut rng = rng_stream(query_seed, "eval-queries");
            let mut picks = sample_without_replacement(cell_indices.len(), cap, &mut rng);
            picks.sort_unstable();
            cell_indices = picks;
        }
    }

    let queries: Vec<EvalQuery> = cell_indices
        .iter()
        .map(|&i| {
            let anchor = grid.anchor(i);
            let patch = extract_patch(&ctx.dem, anchor, grid.patch_px)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(EvalQuery {
                patch,
                true_cell: (i / grid.cols, i % grid.cols),
            })
        })
        .collect::<Result<_, CliError>>()?;

    let report = evaluate(&queries, &ctx.encoder, &ctx.map).map_err(CliError::runtime)?;

    let run = RunDir::create(run_dir, "eval")?;
    write_report_json(&report, &run.reports().join(format!("{pair}-eval.json")))
        .map_err(CliError::runtime)?;
    render_error_map(&report, &run.figures().join(format!("{pair}-errors.png")))
        .map_err(CliError::runtime)?;

    println!(
        "top1={:.2} top5={:.2} n={}",
        report.top1, report.top5, report.n_queries
    );
    Ok(())
}
