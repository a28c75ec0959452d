//! `croco localize`: rank feature-map cells for one elevation patch and
//! print the top-k `(rank, row, col, score)` lines.

use std::path::Path;

use croco_core::localizer::localize;
use croco_core::sampling::extract_patch;

use crate::data::query_context;
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
    k: usize,
) -> Result<(), CliError> {
    let ctx = query_context(checkpoint, oracle_seed, map_path, data_dir, pair)?;
    let patch = extract_patch(&ctx.dem, (row, col), ctx.map.grid.patch_px)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let result = localize(&patch, &ctx.encoder, &ctx.map, k).map_err(|e| {
        use croco_core::localizer::LocalizeError as L;
        match e {
            L::KOutOfRange { .. } => CliError::Usage(e.to_string()),
            other => CliError::runtime(other),
        }
    })?;
    for (i, cell) in result.ranking.iter().enumerate() {
        println!("{} {} {} {:.6}", i + 1, cell.row, cell.col, cell.score);
    }
    Ok(())
}
