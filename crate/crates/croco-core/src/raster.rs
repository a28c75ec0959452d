//! Georeferenced raster tiles: ingest, resampling, elevation stacking and
//! channel normalization.
//!
//! The canonical on-disk form of a tile is a raw little-endian float32
//! payload (`<id>.raw`, channel-major then row-major) next to a JSON sidecar
//! (`<id>.json`) declaring dims, ground sample distance, origin and modality.
//! Values are `f64` in memory; `write_tile` stores float32, so tiles that are
//! already float32-representable round-trip bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};


/// Relative tolerance when checking that a resampling factor or a
/// meters-to-pixels conversion lands on a whole number.
const INTEGRAL_REL_TOL: f64 = 1e-9;

/// Floor applied to fitted per-channel standard deviations.
pub const STD_EPSILON: f64 = 1e-6;

/// Number of channels every tile carries (RGB triplet or three stacked
/// elevation products).
pub const TILE_CHANNELS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("sidecar parse error on {path}: {message}")]
    Sidecar { path: PathBuf, message: String },
    #[error("payload holds {actual} values but sidecar declares {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("ground sample distance must be positive, got {0}")]
    NonPositiveGsd(f64),
    #[error("tile must have {TILE_CHANNELS} channels, got {0}")]
    BadChannelCount(usize),
    #[error("tile dims must be at least 1x1, got {height}x{width}")]
    EmptyDims { height: usize, width: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("target gsd {target} is not an integer multiple of {current}")]
    NonIntegerFactor { current: f64, target: f64 },
    #[error("upsampling requested: target gsd {target} below tile gsd {current}")]
    Upsample { current: f64, target: f64 },
    #[error("grids are not co-registered: {0}")]
    GridMismatch(String),
    #[error("empty tile set")]
    EmptyInput,
    #[error("mixed modalities in input set")]
    MixedModalities,
    #[error("modality mismatch: tile is {tile:?}, stats are {stats:?}")]
    ModalityMismatch { tile: Modality, stats: Modality },
    #[error("tile {0} is already normalized")]
    AlreadyNormalized(String),
    #[error("crop window out of bounds")]
    CropOutOfBounds,
}

/// Input modality of a tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Dem,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Rgb => write!(f, "rgb"),
            Modality::Dem => write!(f, "dem"),
        }
    }
}

/// A georeferenced multi-channel grid. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterTile {
    pub id: String,
    pub channels: usize,
    pub height_px: usize,
    pub width_px: usize,
    /// Meters of ground per pixel.
    pub gsd_m: f64,
    /// (easting_m, northing_m) of the top-left corner; northing decreases
    /// with increasing row index.
    pub origin: (f64, f64),
    pub modality: Modality,
    /// Set once `normalize` has run; raw tiles are not normalized.
    pub normalized: bool,
    data: Vec<f64>,
}

impl RasterTile {
    pub fn new(
        id: impl Into<String>,
        height_px: usize,
        width_px: usize,
        gsd_m: f64,
        origin: (f64, f64),
        modality: Modality,
        data: Vec<f64>,
    ) -> Result<Self, RasterError> {
        if gsd_m <= 0.0 || !gsd_m.is_finite() {
            return Err(RasterError::NonPositiveGsd(gsd_m));
        }
        if height_px == 0 || width_px == 0 {
            return Err(RasterError::EmptyDims {
                height: height_px,
                width: width_px,
            });
        }
        let expected = TILE_CHANNELS * height_px * width_px;
        if data.len() != expected {
            return Err(RasterError::DimMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(RasterError::NonFinite { index });
        }
        Ok(Self {
            id: id.into(),
            channels: TILE_CHANNELS,
            height_px,
            width_px,
            gsd_m,
            origin,
            modality,
            normalized: false,
            data,
        })
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.height_px + row) * self.width_px + col]
    }

    /// One channel plane, row-major.
    pub fn channel(&self, channel: usize) -> &[f64] {
        let plane = self.height_px * self.width_px;
        &self.data[channel * plane..(channel + 1) * plane]
    }

    /// Full payload, channel-major then row-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Sub-window copy with a shifted origin; used to cut one scene into
    /// geographically disjoint split tiles.
    pub fn crop(
        &self,
        id: impl Into<String>,
        row0: usize,
        col0: usize,
        height_px: usize,
        width_px: usize,
    ) -> Result<Self, RasterError> {
        if height_px == 0
            || width_px == 0
            || row0 + height_px > self.height_px
            || col0 + width_px > self.width_px
        {
            return Err(RasterError::CropOutOfBounds);
        }
        let mut data = Vec::with_capacity(TILE_CHANNELS * height_px * width_px);
        for c in 0..TILE_CHANNELS {
            for r in 0..height_px {
                let src = (c * self.height_px + row0 + r) * self.width_px + col0;
                data.extend_from_slice(&self.data[src..src + width_px]);
            }
        }
        let origin = (
            self.origin.0 + col0 as f64 * self.gsd_m,
            self.origin.1 - row0 as f64 * self.gsd_m,
        );
        let mut tile = Self::new(id, height_px, width_px, self.gsd_m, origin, self.modality, data)?;
        tile.normalized = self.normalized;
        Ok(tile)
    }
}

/// A co-registered RGB/DEM tile pair sharing dims, GSD and origin.
#[derive(Debug, Clone)]
pub struct TilePair {
    /// Split assignment key; tile ids are `<pair_id>-rgb` / `<pair_id>-dem`
    /// by convention.
    pub pair_id: String,
    pub rgb: RasterTile,
    pub dem: RasterTile,
}

impl TilePair {
    pub fn new(pair_id: impl Into<String>, rgb: RasterTile, dem: RasterTile) -> Result<Self, RasterError> {
        if rgb.modality != Modality::Rgb {
            return Err(RasterError::ModalityMismatch {
                tile: rgb.modality,
                stats: Modality::Rgb,
            });
        }
        if dem.modality != Modality::Dem {
            return Err(RasterError::ModalityMismatch {
                tile: dem.modality,
                stats: Modality::Dem,
            });
        }
        check_coregistered(
            (rgb.height_px, rgb.width_px, rgb.gsd_m, rgb.origin),
            (dem.height_px, dem.width_px, dem.gsd_m, dem.origin),
        )?;
        Ok(Self {
            pair_id: pair_id.into(),
            rgb,
            dem,
        })
    }
}

pub(crate) fn check_coregistered(
    a: (usize, usize, f64, (f64, f64)),
    b: (usize, usize, f64, (f64, f64)),
) -> Result<(), RasterError> {
    if a != b {
        return Err(RasterError::GridMismatch(format!(
            "dims/gsd/origin differ: {a:?} vs {b:?}"
        )));
    }
    Ok(())
}

/// Per-channel normalization statistics fitted on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub modality: Modality,
}

/// JSON sidecar schema for the raw payload format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub id: String,
    pub channels: usize,
    pub height_px: usize,
    pub width_px: usize,
    pub gsd_m: f64,
    pub origin: [f64; 2],
    pub modality: Modality,
    pub channel_names: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RasterError + '_ {
    move |source| RasterError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Load a tile from its raw float32 payload and JSON sidecar.
pub fn ingest_tile(payload_path: &Path, sidecar_path: &Path) -> Result<RasterTile, RasterError> {
    let sidecar_text = fs::read_to_string(sidecar_path).map_err(io_err(sidecar_path))?;
    let sidecar: Sidecar =
        serde_json::from_str(&sidecar_text).map_err(|e| RasterError::Sidecar {
            path: sidecar_path.to_path_buf(),
            message: e.to_string(),
        })?;
    if sidecar.channels != TILE_CHANNELS {
        return Err(RasterError::BadChannelCount(sidecar.channels));
    }
    if sidecar.gsd_m <= 0.0 {
        return Err(RasterError::NonPositiveGsd(sidecar.gsd_m));
    }

    let mut file = fs::File::open(payload_path).map_err(io_err(payload_path))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err(payload_path))?;
    let expected = TILE_CHANNELS * sidecar.height_px * sidecar.width_px;
    if bytes.len() != expected * 4 {
        return Err(RasterError::DimMismatch {
            expected,
            actual: bytes.len() / 4,
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();

    RasterTile::new(
        sidecar.id,
        sidecar.height_px,
        sidecar.width_px,
        sidecar.gsd_m,
        (sidecar.origin[0], sidecar.origin[1]),
        sidecar.modality,
        data,
    )
}

/// Standard channel names recorded in sidecars.
pub fn channel_names(modality: Modality) -> Vec<String> {
    match modality {
        Modality::Rgb => vec!["red".into(), "green".into(), "blue".into()],
        Modality::Dem => vec![
            "first_surface".into(),
            "void_filled_bare_earth".into(),
            "hybrid_ground_building".into(),
        ],
    }
}

/// Write `<id>.raw` + `<id>.json` into `dir`; values are stored as float32.
pub fn write_tile(tile: &RasterTile, dir: &Path) -> Result<(PathBuf, PathBuf), RasterError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let raw_path = dir.join(format!("{}.raw", tile.id));
    let json_path = dir.join(format!("{}.json", tile.id));

    let mut bytes = Vec::with_capacity(tile.data.len() * 4);
    for &v in &tile.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(&raw_path).map_err(io_err(&raw_path))?;
    f.write_all(&bytes).map_err(io_err(&raw_path))?;

    let sidecar = Sidecar {
        id: tile.id.clone(),
        channels: tile.channels,
        height_px: tile.height_px,
        width_px: tile.width_px,
        gsd_m: tile.gsd_m,
        origin: [tile.origin.0, tile.origin.1],
        modality: tile.modality,
        channel_names: channel_names(tile.modality),
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&json_path, text).map_err(io_err(&json_path))?;
    Ok((raw_path, json_path))
}

/// Whole-number conversion with a small relative tolerance; `Err` carries
/// nothing, the caller shapes the error.
pub(crate) fn integral_ratio(numerator: f64, denominator: f64) -> Option<usize> {
    let ratio = numerator / denominator;
    let rounded = ratio.round();
    if rounded >= 1.0 && (ratio - rounded).abs() <= INTEGRAL_REL_TOL * ratio.abs().max(1.0) {
        Some(rounded as usize)
    } else {
        None
    }
}

/// Area-mean downsampling by a whole factor. Output dims are
/// `floor(input / factor)`; each output pixel is the mean of its
/// `factor x factor` block, so constant fields and (when dims divide evenly)
/// the global mean are preserved.
pub fn resample(tile: &RasterTile, target_gsd_m: f64) -> Result<RasterTile, RasterError> {
    if target_gsd_m <= 0.0 || !target_gsd_m.is_finite() {
        return Err(RasterError::NonPositiveGsd(target_gsd_m));
    }
    if target_gsd_m < tile.gsd_m * (1.0 - INTEGRAL_REL_TOL) {
        return Err(RasterError::Upsample {
            current: tile.gsd_m,
            target: target_gsd_m,
        });
    }
    let factor = integral_ratio(target_gsd_m, tile.gsd_m).ok_or(RasterError::NonIntegerFactor {
        current: tile.gsd_m,
        target: target_gsd_m,
    })?;
    if factor == 1 {
        return Ok(tile.clone());
    }
    let out_h = tile.height_px / factor;
    let out_w = tile.width_px / factor;
    if out_h == 0 || out_w == 0 {
        return Err(RasterError::EmptyDims {
            height: out_h,
            width: out_w,
        });
    }
    let inv_area = 1.0 / (factor * factor) as f64;
    let mut data = Vec::with_capacity(TILE_CHANNELS * out_h * out_w);
    for c in 0..TILE_CHANNELS {
        let plane = tile.channel(c);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = (oy * factor + dy) * tile.width_px + ox * factor;
                    for dx in 0..factor {
                        acc += plane[row + dx];
                    }
                }
                data.push(acc * inv_area);
            }
        }
    }
    let mut out = RasterTile::new(
        tile.id.clone(),
        out_h,
        out_w,
        tile.gsd_m * factor as f64,
        tile.origin,
        tile.modality,
        data,
    )?;
    out.normalized = tile.normalized;
    Ok(out)
}

/// A single-band elevation product, input to `stack_dem`.
#[derive(Debug, Clone)]
pub struct SingleBandRaster {
    pub id: String,
    pub height_px: usize,
    pub width_px: usize,
    pub gsd_m: f64,
    pub origin: (f64, f64),
    pub data: Vec<f64>,
}

impl SingleBandRaster {
    pub fn new(
        id: impl Into<String>,
        height_px: usize,
        width_px: usize,
        gsd_m: f64,
        origin: (f64, f64),
        data: Vec<f64>,
    ) -> Result<Self, RasterError> {
        if gsd_m <= 0.0 {
            return Err(RasterError::NonPositiveGsd(gsd_m));
        }
        if data.len() != height_px * width_px {
            return Err(RasterError::DimMismatch {
                expected: height_px * width_px,
                actual: data.len(),
            });
        }
        Ok(Self {
            id: id.into(),
            height_px,
            width_px,
            gsd_m,
            origin,
            data,
        })
    }
}

/// Stack three elevation products into one DEM tile. Channel order is fixed:
/// 0 = first-surface model, 1 = void-filled bare earth, 2 = hybrid
/// ground-and-building model.
pub fn stack_dem(
    id: impl Into<String>,
    surface: &SingleBandRaster,
    void_filled: &SingleBandRaster,
    hybrid: &SingleBandRaster,
) -> Result<RasterTile, RasterError> {
    for band in [void_filled, hybrid] {
        check_coregistered(
            (surface.height_px, surface.width_px, surface.gsd_m, surface.origin),
            (band.height_px, band.width_px, band.gsd_m, band.origin),
        )?;
    }
    let mut data = Vec::with_capacity(3 * surface.data.len());
    data.extend_from_slice(&surface.data);
    data.extend_from_slice(&void_filled.data);
    data.extend_from_slice(&hybrid.data);
    RasterTile::new(
        id,
        surface.height_px,
        surface.width_px,
        surface.gsd_m,
        surface.origin,
        Modality::Dem,
        data,
    )
}

/// Fit per-channel mean and population std over every pixel of every tile.
/// Stds are floored at [`STD_EPSILON`].
pub fn fit_normalization(tiles: &[&RasterTile]) -> Result<NormalizationStats, RasterError> {
    let first = tiles.first().ok_or(RasterError::EmptyInput)?;
    let modality = first.modality;
    if tiles.iter().any(|t| t.modality != modality) {
        return Err(RasterError::MixedModalities);
    }
    let mut mean = [0.0f64; 3];
    let mut std = [0.0f64; 3];
    for c in 0..TILE_CHANNELS {
        let mut sum = 0.0;
        let mut count = 0usize;
        for tile in tiles {
            sum += tile.channel(c).iter().sum::<f64>();
            count += tile.channel(c).len();
        }
        let mu = sum / count as f64;
        let mut sq = 0.0;
        for tile in tiles {
            sq += tile.channel(c).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        mean[c] = mu;
        std[c] = (sq / count as f64).sqrt().max(STD_EPSILON);
    }
    Ok(NormalizationStats { mean, std, modality })
}

/// Normalize a raw tile: RGB divides 8-bit values by 255 into [0, 1], DEM
/// applies the per-channel z-score from `stats`.
pub fn normalize(tile: &RasterTile, stats: &NormalizationStats) -> Result<RasterTile, RasterError> {
    if tile.modality != stats.modality {
        return Err(RasterError::ModalityMismatch {
            tile: tile.modality,
            stats: stats.modality,
        });
    }
    if tile.normalized {
        return Err(RasterError::AlreadyNormalized(tile.id.clone()));
    }
    let mut data = Vec::with_capacity(tile.data.len());
    match tile.modality {
        Modality::Rgb => {
            data.extend(tile.data.iter().map(|v| v / 255.0));
        }
        Modality::Dem => {
            for c in 0..TILE_CHANNELS {
                let inv = 1.0 / stats.std[c];
                data.extend(tile.channel(c).iter().map(|v| (v - stats.mean[c]) * inv));
            }
        }
    }
    let mut out = RasterTile::new(
        tile.id.clone(),
        tile.height_px,
        tile.width_px,
        tile.gsd_m,
        tile.origin,
        tile.modality,
        data,
    )?;
    out.normalized = true;
    Ok(out)
}

/// Convenience: fit stats on `fit_tiles` and normalize `apply_tiles`.
pub fn fit_and_normalize(
    fit_tiles: &[&RasterTile],
    apply_tiles: &[&RasterTile],
) -> Result<(NormalizationStats, Vec<RasterTile>), RasterError> {
    let stats = fit_normalization(fit_tiles)?;
    let normalized = apply_tiles
        .iter()
        .map(|t| normalize(t, &stats))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((stats, normalized))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile_from_fn(
        id: &str,
        h: usize,
        w: usize,
        gsd: f64,
        modality: Modality,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> RasterTile {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(c, y, x));
                }
            }
        }
        RasterTile::new(id, h, w, gsd, (0.0, 0.0), modality, data).unwrap()
    }

    #[test]
    fn ingest_round_trips_written_tile() {
        let dir = tempfile::tempdir().unwrap();
        let tile = tile_from_fn("t0", 5, 7, 0.5, Modality::Rgb, |c, y, x| {
            f64::from(((c * 31 + y * 7 + x) % 200) as f32)
        });
        let (raw, json) = write_tile(&tile, dir.path()).unwrap();
        let back = ingest_tile(&raw, &json).unwrap();
        assert_eq!(back.height_px, 5);
        assert_eq!(back.width_px, 7);
        assert_eq!(back.gsd_m, 0.5);
        assert_eq!(back.data(), tile.data());
    }

    #[test]
    fn ingest_declared_dims_must_match_payload() {
        let dir = tempfile::tempdir().unwrap();
        let tile = tile_from_fn("t1", 10, 10, 0.5, Modality::Rgb, |_, _, _| 1.0);
        let (raw, json) = write_tile(&tile, dir.path()).unwrap();
        // Drop the last 4 bytes: payload is now one value short.
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
        match ingest_tile(&raw, &json) {
            Err(RasterError::DimMismatch { expected, actual }) => {
                assert_eq!(expected, 300);
                assert_eq!(actual, 299);
            }
            other => panic!("expected DimMismatch, got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_zero_gsd_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let tile = tile_from_fn("t2", 4, 4, 1.0, Modality::Dem, |_, _, _| 2.0);
        let (raw, json) = write_tile(&tile, dir.path()).unwrap();
        assert!(matches!(
            ingest_tile(Path::new("/nonexistent.raw"), &json),
            Err(RasterError::Io { .. })
        ));
        let text = fs::read_to_string(&json).unwrap().replace("\"gsd_m\": 1.0", "\"gsd_m\": 0.0");
        fs::write(&json, text).unwrap();
        assert!(matches!(
            ingest_tile(&raw, &json),
            Err(RasterError::NonPositiveGsd(_))
        ));
    }

    #[test]
    fn ingest_rejects_nan_payload() {
        let dir = tempfile::tempdir().unwrap();
        let tile = tile_from_fn("t3", 2, 2, 1.0, Modality::Dem, |_, _, _| 0.0);
        let (raw, json) = write_tile(&tile, dir.path()).unwrap();
        let mut bytes = fs::read(&raw).unwrap();
        bytes[0..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&raw, bytes).unwrap();
        assert!(matches!(
            ingest_tile(&raw, &json),
            Err(RasterError::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn resample_640_to_64_by_factor_10() {
        let tile = tile_from_fn("r0", 640, 640, 0.05, Modality::Rgb, |c, y, x| {
            (c + y + x) as f64
        });
        let out = resample(&tile, 0.5).unwrap();
        assert_eq!((out.height_px, out.width_px), (64, 64));
        assert_eq!(out.gsd_m, 0.5);
    }

    #[test]
    fn resample_identity_factor_returns_same_grid() {
        let tile = tile_from_fn("r1", 8, 6, 0.5, Modality::Dem, |c, y, x| (c * y + x) as f64);
        let out = resample(&tile, 0.5).unwrap();
        assert_eq!(out.data(), tile.data());
        assert_eq!(out.gsd_m, tile.gsd_m);
    }

    #[test]
    fn resample_constant_field_preserved() {
        let tile = tile_from_fn("r2", 4, 4, 1.0, Modality::Dem, |_, _, _| 1.0);
        let out = resample(&tile, 2.0).unwrap();
        assert_eq!((out.height_px, out.width_px), (2, 2));
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn resample_rejects_upsampling_and_non_integer_factors() {
        let tile = tile_from_fn("r3", 8, 8, 1.0, Modality::Dem, |_, _, _| 0.0);
        assert!(matches!(resample(&tile, 0.5), Err(RasterError::Upsample { .. })));
        assert!(matches!(
            resample(&tile, 2.5),
            Err(RasterError::NonIntegerFactor { .. })
        ));
    }

    #[test]
    fn resample_compose_matches_single_factor() {
        let tile = tile_from_fn("r4", 24, 24, 1.0, Modality::Dem, |c, y, x| {
            ((c * 131 + y * 17 + x * 29) % 97) as f64 * 0.25
        });
        let two_step = resample(&resample(&tile, 2.0).unwrap(), 6.0).unwrap();
        let one_step = resample(&tile, 6.0).unwrap();
        assert_eq!(two_step.height_px, one_step.height_px);
        for (a, b) in two_step.data().iter().zip(one_step.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn resample_preserves_global_mean_on_even_dims() {
        let tile = tile_from_fn("r5", 12, 12, 1.0, Modality::Dem, |c, y, x| {
            (c as f64) * 3.0 + (y as f64).sin() + (x as f64).cos()
        });
        let out = resample(&tile, 3.0).unwrap();
        let mean_in = tile.data().iter().sum::<f64>() / tile.data().len() as f64;
        let mean_out = out.data().iter().sum::<f64>() / out.data().len() as f64;
        assert!((mean_in - mean_out).abs() < 1e-9);
    }

    fn band(id: &str, h: usize, w: usize, gsd: f64, v: impl Fn(usize, usize) -> f64) -> SingleBandRaster {
        let data = (0..h * w).map(|i| v(i / w, i % w)).collect();
        SingleBandRaster::new(id, h, w, gsd, (0.0, 0.0), data).unwrap()
    }

    #[test]
    fn stack_dem_preserves_channel_order_bit_exactly() {
        let a = band("a", 10, 10, 0.5, |y, x| (y * x) as f64 + 0.125);
        let b = band("b", 10, 10, 0.5, |y, x| (y + x) as f64);
        let c = band("c", 10, 10, 0.5, |y, _| y as f64 * 2.0);
        let tile = stack_dem("abc", &a, &b, &c).unwrap();
        assert_eq!(tile.channel(0), &a.data[..]);
        assert_eq!(tile.channel(1), &b.data[..]);
        assert_eq!(tile.channel(2), &c.data[..]);
    }

    #[test]
    fn stack_dem_equal_inputs_give_equal_channels() {
        let a = band("a", 10, 10, 0.5, |y, x| (y + x) as f64);
        let tile = stack_dem("aaa", &a, &a, &a).unwrap();
        assert_eq!(tile.channel(0), tile.channel(1));
        assert_eq!(tile.channel(1), tile.channel(2));
    }

    #[test]
    fn stack_dem_rejects_gsd_mismatch() {
        let a = band("a", 4, 4, 0.5, |_, _| 0.0);
        let b = band("b", 4, 4, 1.0, |_, _| 0.0);
        assert!(matches!(
            stack_dem("x", &a, &b, &a),
            Err(RasterError::GridMismatch(_))
        ));
    }

    #[test]
    fn fit_constant_channel_floors_std() {
        let tile = tile_from_fn("f0", 3, 3, 1.0, Modality::Dem, |_, _, _| 5.0);
        let stats = fit_normalization(&[&tile]).unwrap();
        assert_eq!(stats.mean[0], 5.0);
        assert_eq!(stats.std[0], STD_EPSILON);
    }

    #[test]
    fn fit_two_pixel_channel_population_std() {
        // Channel values {0, 2}: mean 1, population std 1.
        let tile = tile_from_fn("f1", 1, 2, 1.0, Modality::Dem, |_, _, x| (2 * x) as f64);
        let stats = fit_normalization(&[&tile]).unwrap();
        assert!((stats.mean[0] - 1.0).abs() < 1e-15);
        assert!((stats.std[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fit_is_order_invariant() {
        let a = tile_from_fn("fa", 4, 4, 1.0, Modality::Dem, |c, y, x| (c + y * x) as f64);
        let b = tile_from_fn("fb", 4, 4, 1.0, Modality::Dem, |c, y, x| (c * 2 + y + x) as f64);
        let ab = fit_normalization(&[&a, &b]).unwrap();
        let ba = fit_normalization(&[&b, &a]).unwrap();
        for c in 0..3 {
            assert!((ab.mean[c] - ba.mean[c]).abs() < 1e-12);
            assert!((ab.std[c] - ba.std[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_rejects_empty_and_mixed() {
        assert!(matches!(fit_normalization(&[]), Err(RasterError::EmptyInput)));
        let a = tile_from_fn("ma", 2, 2, 1.0, Modality::Dem, |_, _, _| 0.0);
        let b = tile_from_fn("mb", 2, 2, 1.0, Modality::Rgb, |_, _, _| 0.0);
        assert!(matches!(
            fit_normalization(&[&a, &b]),
            Err(RasterError::MixedModalities)
        ));
    }

    #[test]
    fn normalize_rgb_divides_by_255() {
        let tile = tile_from_fn("n0", 1, 2, 1.0, Modality::Rgb, |_, _, x| (x * 255) as f64);
        let stats = fit_normalization(&[&tile]).unwrap();
        let out = normalize(&tile, &stats).unwrap();
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert_eq!(out.get(0, 0, 1), 1.0);
        assert!(out.normalized);
    }

    #[test]
    fn normalize_dem_zero_at_mean() {
        let tile = tile_from_fn("n1", 1, 2, 1.0, Modality::Dem, |_, _, x| (2 * x) as f64);
        let stats = fit_normalization(&[&tile]).unwrap();
        let out = normalize(&tile, &stats).unwrap();
        // Mean is 1.0; the pixel at value 1.0 does not exist, but check the
        // z-scores of {0, 2} with std 1: {-1, +1}.
        assert!((out.get(0, 0, 0) + 1.0).abs() < 1e-12);
        assert!((out.get(0, 0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_modality_mismatch_and_double_normalize() {
        let tile = tile_from_fn("n2", 2, 2, 1.0, Modality::Dem, |_, _, _| 3.0);
        let rgb_stats = NormalizationStats {
            mean: [0.0; 3],
            std: [1.0; 3],
            modality: Modality::Rgb,
        };
        assert!(matches!(
            normalize(&tile, &rgb_stats),
            Err(RasterError::ModalityMismatch { .. })
        ));
        let stats = fit_normalization(&[&tile]).unwrap();
        let once = normalize(&tile, &stats).unwrap();
        assert!(matches!(
            normalize(&once, &stats),
            Err(RasterError::AlreadyNormalized(_))
        ));
    }

    #[test]
    fn normalize_affine_reparameterization_matches_direct_formula() {
        // normalize(a*x + b) with stats fitted on the transformed data equals
        // normalize(x) with the original stats.
        let (a, b) = (2.5, -7.0);
        let tile = tile_from_fn("n3", 4, 4, 1.0, Modality::Dem, |c, y, x| {
            (c * 5 + y * 3 + x) as f64
        });
        let scaled = tile_from_fn("n3s", 4, 4, 1.0, Modality::Dem, |c, y, x| {
            a * ((c * 5 + y * 3 + x) as f64) + b
        });
        let stats = fit_normalization(&[&tile]).unwrap();
        let stats_scaled = fit_normalization(&[&scaled]).unwrap();
        let out = normalize(&tile, &stats).unwrap();
        let out_scaled = normalize(&scaled, &stats_scaled).unwrap();
        for (u, v) in out.data().iter().zip(out_scaled.data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_fitting_set_has_zero_mean_unit_std() {
        let tile = tile_from_fn("n4", 8, 8, 1.0, Modality::Dem, |c, y, x| {
            ((c * 37 + y * 11 + x * 3) % 23) as f64 - 7.5
        });
        let stats = fit_normalization(&[&tile]).unwrap();
        let out = normalize(&tile, &stats).unwrap();
        for c in 0..3 {
            let vals = out.channel(c);
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd =
                (vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(mu.abs() < 1e-6, "channel {c} mean {mu}");
            assert!((sd - 1.0).abs() < 1e-6, "channel {c} std {sd}");
        }
    }

    #[test]
    fn crop_shifts_origin_and_copies_window() {
        let tile = tile_from_fn("c0", 6, 8, 0.5, Modality::Rgb, |c, y, x| {
            (c * 100 + y * 10 + x) as f64
        });
        let crop = tile.crop("c0-sub", 2, 3, 3, 4).unwrap();
        assert_eq!((crop.height_px, crop.width_px), (3, 4));
        assert_eq!(crop.origin, (1.5, -1.0));
        assert_eq!(crop.get(1, 0, 0), tile.get(1, 2, 3));
        assert_eq!(crop.get(2, 2, 3), tile.get(2, 4, 6));
        assert!(tile.crop("oob", 4, 0, 3, 4).is_err());
    }
}
