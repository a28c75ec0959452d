//! Tile-directory handling shared by the commands: discover sidecars, load
//! tiles, group RGB/DEM pairs by the `<pair>-rgb` / `<pair>-dem` naming
//! convention, and prepare encoders from checkpoints or oracle seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;

use croco_core::encoder::{Checkpoint, Encoder, EncoderBranch};
use croco_core::raster::{
    fit_normalization, ingest_tile, normalize, resample, Modality, NormalizationStats, RasterTile,
    TilePair,
};
use croco_core::synthgen::{oracle_encoder_pair, OracleEncoder};

use crate::CliError;

/// Load one tile by id from a data directory.
pub fn load_tile(data_dir: &Path, id: &str) -> Result<RasterTile, CliError> {
    let sidecar = data_dir.join(format!("{id}.json"));
    let payload = data_dir.join(format!("{id}.raw"));
    ingest_tile(&payload, &sidecar)
        .with_context(|| format!("loading tile {id} from {}", data_dir.display()))
        .map_err(CliError::runtime)
}

/// Discover every pair in a data directory.
pub fn load_pairs(data_dir: &Path) -> Result<Vec<TilePair>, CliError> {
    let mut rgb: BTreeMap<String, RasterTile> = BTreeMap::new();
    let mut dem: BTreeMap<String, RasterTile> = BTreeMap::new();
    let entries = std::fs::read_dir(data_dir)
        .with_context(|| format!("cannot list {}", data_dir.display()))
        .map_err(CliError::runtime)?;
    for entry in entries {
        let path = entry.map_err(CliError::runtime)?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if let Some(pair_id) = stem.strip_suffix("-rgb") {
            rgb.insert(pair_id.to_string(), load_tile(data_dir, &stem)?);
        } else if let Some(pair_id) = stem.strip_suffix("-dem") {
            dem.insert(pair_id.to_string(), load_tile(data_dir, &stem)?);
        }
    }
    let mut pairs = Vec::new();
    for (pair_id, rgb_tile) in rgb {
        let Some(dem_tile) = dem.remove(&pair_id) else {
            return Err(CliError::runtime(anyhow::anyhow!(
                "tile {pair_id}-rgb has no matching {pair_id}-dem"
            )));
        };
        pairs.push(TilePair::new(pair_id, rgb_tile, dem_tile).map_err(CliError::runtime)?);
    }
    if let Some(orphan) = dem.keys().next() {
        return Err(CliError::runtime(anyhow::anyhow!(
            "tile {orphan}-dem has no matching {orphan}-rgb"
        )));
    }
    Ok(pairs)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(CliError::runtime)
}

/// Resample to `target_gsd` (when given) and normalize with `stats`.
pub fn prepare_tile(
    tile: &RasterTile,
    stats: &NormalizationStats,
    target_gsd: Option<f64>,
) -> Result<RasterTile, CliError> {
    let tile = match target_gsd {
        Some(gsd) if gsd != tile.gsd_m => resample(tile, gsd).map_err(CliError::runtime)?,
        _ => tile.clone(),
    };
    normalize(&tile, stats).map_err(CliError::runtime)
}

/// Self-contained normalization for oracle mode (statistics fitted on the
/// tile itself; no checkpoint involved).
pub fn self_normalize(tile: &RasterTile, target_gsd: Option<f64>) -> Result<RasterTile, CliError> {
    let tile = match target_gsd {
        Some(gsd) if gsd != tile.gsd_m => resample(tile, gsd).map_err(CliError::runtime)?,
        _ => tile.clone(),
    };
    let stats = fit_normalization(&[&tile]).map_err(CliError::runtime)?;
    normalize(&tile, &stats).map_err(CliError::runtime)
}

/// Either a trained branch or a content-addressed oracle.
pub enum AnyEncoder {
    Branch(Box<EncoderBranch>),
    Oracle(Box<OracleEncoder>),
}

impl Encoder for AnyEncoder {
    fn modality(&self) -> Modality {
        match self {
            AnyEncoder::Branch(b) => b.modality(),
            AnyEncoder::Oracle(o) => o.modality(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            AnyEncoder::Branch(b) => b.dim(),
            AnyEncoder::Oracle(o) => o.dim(),
        }
    }

    fn embed(
        &self,
        patch: &croco_core::sampling::Patch,
    ) -> Result<croco_core::encoder::Embedding, croco_core::encoder::EncoderError> {
        match self {
            AnyEncoder::Branch(b) => b.embed(patch),
            AnyEncoder::Oracle(o) => o.embed(patch),
        }
    }

    fn fingerprint(&self) -> String {
        match self {
            AnyEncoder::Branch(b) => b.fingerprint(),
            AnyEncoder::Oracle(o) => o.fingerprint(),
        }
    }
}

/// Build the oracle pair over normalized tiles of one scene pair.
pub fn oracle_encoders(
    rgb: &RasterTile,
    dem: &RasterTile,
    patch_px: usize,
    stride_px: usize,
    seed: u64,
) -> Result<(AnyEncoder, AnyEncoder), CliError> {
    let (r, d) =
        oracle_encoder_pair(rgb, dem, patch_px, stride_px, seed).map_err(CliError::runtime)?;
    Ok((
        AnyEncoder::Oracle(Box::new(r)),
        AnyEncoder::Oracle(Box::new(d)),
    ))
}

/// Everything a query-side command needs: the loaded map, the normalized
/// elevation tile co-registered with it, and the elevation encoder.
pub struct QueryContext {
    pub map: croco_core::mapstore::FeatureMap,
    pub dem: RasterTile,
    pub encoder: AnyEncoder,
}

/// Load the map plus the elevation side of `pair`, prepared consistently
/// with the map's geometry, from either a checkpoint or an oracle seed.
/// Fingerprint mismatches are surfaced on stderr, not fatal.
pub fn query_context(
    checkpoint: Option<&Path>,
    oracle_seed: Option<u64>,
    map_path: &Path,
    data_dir: &Path,
    pair: &str,
) -> Result<QueryContext, CliError> {
    let map = croco_core::mapstore::load_map(map_path)
        .with_context(|| format!("loading map {}", map_path.display()))
        .map_err(CliError::runtime)?;
    let dem_raw = load_tile(data_dir, &format!("{pair}-dem"))?;

    let (dem, encoder, expected_fp) = match (checkpoint, oracle_seed) {
        (Some(ckpt_path), None) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            let stats = ckpt
                .dem_stats
                .clone()
                .ok_or_else(|| CliError::Usage("checkpoint lacks DEM stats".into()))?;
            let dem = prepare_tile(&dem_raw, &stats, Some(map.gsd_m))?;
            let fp = ckpt.fingerprint();
            (dem, AnyEncoder::Branch(Box::new(ckpt.dem)), fp)
        }
        (None, Some(seed)) => {
            let rgb_raw = load_tile(data_dir, &format!("{pair}-rgb"))?;
            let rgb = self_normalize(&rgb_raw, Some(map.gsd_m))?;
            let dem = self_normalize(&dem_raw, Some(map.gsd_m))?;
            let (_, dem_oracle) =
                oracle_encoder_pair(&rgb, &dem, map.grid.patch_px, map.grid.stride_px, seed)
                    .map_err(CliError::runtime)?;
            let enc = AnyEncoder::Oracle(Box::new(dem_oracle));
            let fp = enc.fingerprint();
            (dem, enc, fp)
        }
        _ => {
            return Err(CliError::Usage(
                "pass exactly one of --checkpoint or --oracle-seed".into(),
            ))
        }
    };
    if let Some(warning) = croco_core::mapstore::fingerprint_warning(&map, &expected_fp) {
        eprintln!("warning: {warning}");
    }
    Ok(QueryContext { map, dem, encoder })
}

/// Fixed run-directory layout.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Use `explicit` when given, otherwise `runs/<timestamp>-<name>`.
    pub fn create(explicit: Option<&Path>, name: &str) -> Result<Self, CliError> {
        let root = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .expect("clock after epoch")
                    .as_secs();
                PathBuf::from("runs").join(format!("{stamp}-{name}"))
            }
        };
        for sub in ["checkpoints", "maps", "reports", "figures"] {
            std::fs::create_dir_all(root.join(sub))
                .with_context(|| format!("cannot create run dir {}", root.display()))
                .map_err(CliError::runtime)?;
        }
        Ok(Self { root })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn maps(&self) -> PathBuf {
        self.root.join("maps")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }
}
