//! `croco synth`: write one synthetic scene pair (and optionally a split
//! spec cutting it into horizontal bands) into a tile directory.

use std::path::Path;

use anyhow::Context;

use croco_core::raster::{write_tile, TilePair};
use croco_core::sampling::Split;
use croco_core::synthgen::{generate_scene, SceneSpec, SynthError};

use crate::CliError;

#[allow(clippy::too_many_arguments)]
pub fn run(
    seed: u64,
    size_px: usize,
    gsd_m: f64,
    n_structures: usize,
    smoothness: f64,
    texture_noise: f64,
    out_dir: &Path,
    split_rows: Option<&str>,
) -> Result<(), CliError> {
    let spec = SceneSpec {
        seed,
        size_px,
        gsd_m,
        n_structures,
        terrain_smoothness: smoothness,
        texture_noise,
    };
    let pair = generate_scene(&spec).map_err(|e| match e {
        SynthError::SceneTooSmall { .. }
        | SynthError::BadGsd(_)
        | SynthError::BadSmoothness(_)
        | SynthError::BadTextureNoise(_) => CliError::Usage(e.to_string()),
        other => CliError::runtime(other),
    })?;

    let bands = match split_rows {
        Some(text) => split_scene(&pair, text, out_dir)?,
        None => {
            write_tile(&pair.rgb, out_dir).map_err(CliError::runtime)?;
            write_tile(&pair.dem, out_dir).map_err(CliError::runtime)?;
            vec![(pair.pair_id.clone(), pair.rgb.height_px)]
        }
    };
    for (id, rows) in &bands {
        println!("tile={id} rows={rows} cols={} gsd={gsd_m}", pair.rgb.width_px);
    }
    Ok(())
}

/// Cut the scene into horizontal bands by row fractions (e.g. "0.75,0.15,0.1"
/// for train/val/test) and write tiles plus `splits.json`.
fn split_scene(
    pair: &TilePair,
    fractions: &str,
    out_dir: &Path,
) -> Result<Vec<(String, usize)>, CliError> {
    let fracs: Vec<f64> = fractions
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Usage(format!("bad split fraction {t:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if fracs.is_empty() || fracs.len() > 3 || fracs.iter().any(|f| *f <= 0.0) {
        return Err(CliError::Usage(
            "split-rows wants 1..=3 positive fractions, e.g. 0.75,0.15,0.10".into(),
        ));
    }
    let total: f64 = fracs.iter().sum();
    let h = pair.rgb.height_px;
    let names = [Split::Train, Split::Val, Split::Test];
    let mut bands = Vec::new();
    let mut splits = serde_json::Map::new();
    let mut row = 0usize;
    for (i, f) in fracs.iter().enumerate() {
        let rows = if i + 1 == fracs.len() {
            h - row
        } else {
            ((f / total) * h as f64).round() as usize
        };
        if rows == 0 {
            return Err(CliError::Usage(format!("split band {i} has zero rows")));
        }
        let band_id = format!("{}-{}", pair.pair_id, split_name(names[i]));
        let rgb = pair
            .rgb
            .crop(format!("{band_id}-rgb"), row, 0, rows, pair.rgb.width_px)
            .map_err(CliError::runtime)?;
        let dem = pair
            .dem
            .crop(format!("{band_id}-dem"), row, 0, rows, pair.dem.width_px)
            .map_err(CliError::runtime)?;
        write_tile(&rgb, out_dir).map_err(CliError::runtime)?;
        write_tile(&dem, out_dir).map_err(CliError::runtime)?;
        splits.insert(
            band_id.clone(),
            serde_json::Value::String(split_name(names[i]).into()),
        );
        bands.push((band_id, rows));
        row += rows;
    }
    let spec_path = out_dir.join("splits.json");
    std::fs::write(
        &spec_path,
        serde_json::to_string_pretty(&serde_json::Value::Object(splits)).expect("serializes"),
    )
    .with_context(|| format!("cannot write {}", spec_path.display()))
    .map_err(CliError::runtime)?;
    Ok(bands)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}
