//! `croco heatmap`: similarity grid of one elevation patch against a map,
//! rendered as a grayscale PNG with the raw scores in a CSV alongside.

use std::path::Path;

use croco_core::localizer::{render_heatmap, similarity_grid};
use croco_core::sampling::extract_patch;

use crate::data::{query_context, RunDir};
use crate::CliError;

#[allow(clippy::too_many_arguments)]
pub fn run(
    checkpoint: Option<&Path>,
    oracle_seed: Option<u64>,
    map_path: &Path,
    data_dir: &Path,
    pair: &str,
    row: usize,
    col: usize,
    out: Option<&Path>,
    run_dir: Option<&Path>,
) -> Result<(), CliError> {
    let ctx = query_context(checkpoint, oracle_seed, map_path, data_dir, pair)?;
    let patch = extract_patch(&ctx.dem, (row, col), ctx.map.grid.patch_px)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let grid = similarity_grid(&patch, &ctx.encoder, &ctx.map).map_err(CliError::runtime)?;

    let png_path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let run = RunDir::create(run_dir, "heatmap")?;
            run.figures().join(format!("heatmap-{pair}-{row}-{col}.png"))
        }
    };
    let (png, csv) = render_heatmap(&grid, &png_path).map_err(CliError::runtime)?;
    let peak = grid.max();
    println!("heatmap={} csv={} max_score={peak:.6}", png.display(), csv.display());
    Ok(())
}
