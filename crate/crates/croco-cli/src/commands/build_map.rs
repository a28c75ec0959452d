//! `croco build-map`: encode one RGB tile's sliding-window grid into a
//! `.crocomap` file, from a checkpoint or in oracle mode.

use std::path::Path;

use croco_core::encoder::Checkpoint;
use croco_core::mapstore::{build_feature_map, save_map};
use croco_core::raster::RasterTile;
use croco_core::sampling::generate_grid;
use croco_core::trainer::TrainConfig;

use crate::data::{
    load_checkpoint, load_tile, oracle_encoders, prepare_tile, self_normalize, RunDir,
};
use crate::CliError;

/// Grid parameters fall back to the checkpoint's training config.
pub fn grid_params(
    ckpt: Option<&Checkpoint>,
    patch_m: Option<f64>,
    stride_m: Option<f64>,
    gsd_m: Option<f64>,
) -> Result<(f64, f64, f64), CliError> {
    let snapshot: Option<TrainConfig> = ckpt
        .and_then(|c| serde_json::from_value(c.config.clone()).ok());
    let defaults = TrainConfig::default();
    let base = snapshot.unwrap_or(defaults);
    Ok((
        patch_m.unwrap_or(base.patch_m),
        stride_m.unwrap_or(base.stride_m),
        gsd_m.unwrap_or(base.gsd_m),
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    checkpoint: Option<&Path>,
    oracle_seed: Option<u64>,
    data_dir: &Path,
    pair: &str,
    patch_m: Option<f64>,
    stride_m: Option<f64>,
    gsd_m: Option<f64>,
    out: Option<&Path>,
    run_dir: Option<&Path>,
) -> Result<(), CliError> {
    let rgb_raw = load_tile(data_dir, &format!("{pair}-rgb"))?;

    let (map, out_path) = match (checkpoint, oracle_seed) {
        (Some(ckpt_path), None) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            let (pm, sm, gm) = grid_params(Some(&ckpt), patch_m, stride_m, gsd_m)?;
            let stats = ckpt
                .rgb_stats
                .clone()
                .ok_or_else(|| CliError::Usage("checkpoint lacks RGB stats".into()))?;
            let rgb = prepare_tile(&rgb_raw, &stats, Some(gm))?;
            let grid = generate_grid(&rgb, pm, sm).map_err(|e| CliError::Usage(e.to_string()))?;
            let mut encoder_branch = ckpt.rgb.clone();
            // The map is stamped with the checkpoint fingerprint, not the
            // single branch's, so eval can verify the whole model.
            let map = build_map_with_fingerprint(&rgb, &grid, &mut encoder_branch, &ckpt)?;
            (map, resolve_out(out, run_dir, pair)?)
        }
        (None, Some(seed)) => {
            let dem_raw = load_tile(data_dir, &format!("{pair}-dem"))?;
            let (pm, sm, gm) = grid_params(None, patch_m, stride_m, gsd_m)?;
            let rgb = self_normalize(&rgb_raw, Some(gm))?;
            let dem = self_normalize(&dem_raw, Some(gm))?;
            let grid = generate_grid(&rgb, pm, sm).map_err(|e| CliError::Usage(e.to_string()))?;
            let (rgb_oracle, _) = oracle_encoders(&rgb, &dem, grid.patch_px, grid.stride_px, seed)?;
            let map = build_feature_map(&rgb, &grid, &rgb_oracle).map_err(CliError::runtime)?;
            (map, resolve_out(out, run_dir, pair)?)
        }
        _ => {
            return Err(CliError::Usage(
                "pass exactly one of --checkpoint or --oracle-seed".into(),
            ))
        }
    };

    save_map(&map, &out_path).map_err(CliError::runtime)?;
    println!(
        "map={} cells={}x{} dim={} patch_px={} stride_px={}",
        out_path.display(),
        map.grid.rows,
        map.grid.cols,
        map.dim,
        map.grid.patch_px,
        map.grid.stride_px
    );
    Ok(())
}

fn build_map_with_fingerprint(
    rgb: &RasterTile,
    grid: &croco_core::sampling::PatchGrid,
    branch: &mut croco_core::encoder::EncoderBranch,
    ckpt: &Checkpoint,
) -> Result<croco_core::mapstore::FeatureMap, CliError> {
    let mut map = build_feature_map(rgb, grid, branch).map_err(CliError::runtime)?;
    map.fingerprint = ckpt.fingerprint();
    Ok(map)
}

fn resolve_out(
    out: Option<&Path>,
    run_dir: Option<&Path>,
    pair: &str,
) -> Result<std::path::PathBuf, CliError> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(CliError::runtime)?;
                }
            }
            Ok(p.to_path_buf())
        }
        None => {
            let run = RunDir::create(run_dir, "build-map")?;
            Ok(run.maps().join(format!("{pair}.crocomap")))
        }
    }
}
