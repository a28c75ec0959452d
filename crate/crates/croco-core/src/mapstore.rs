//! The mapping stage: encode every RGB grid patch into a unit-normalized
//! feature map and persist it in the `.crocomap` format.
//!
//! Embeddings are L2-normalized at build time and stored as little-endian
//! float32, so query-time similarity reduces to a dot product and a map
//! written anywhere loads bit-exactly everywhere. Each map carries the
//! fingerprint of the checkpoint (or oracle) that produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderError};
use crate::par;
use crate::raster::{Modality, RasterTile};
use crate::sampling::{extract_patch, PatchGrid, SamplingError};

pub const MAP_MAGIC: &[u8; 9] = b"CROCOMAP1";

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic bytes; not a feature map file")]
    BadMagic,
    #[error("feature map file is truncated or has trailing bytes")]
    Truncated,
    #[error("feature map header is invalid: {0}")]
    Header(String),
    #[error("feature maps are built from RGB tiles, got {0}")]
    WrongTileModality(Modality),
    #[error("encoder modality {0} cannot build an RGB feature map")]
    WrongEncoderModality(Modality),
    #[error("tile {0} must be normalized before encoding")]
    NotNormalized(String),
    #[error("grid belongs to tile {grid_tile}, not {tile}")]
    GridTileMismatch { grid_tile: String, tile: String },
    #[error("embedding count {actual} does not match grid ({expected})")]
    CountMismatch { expected: usize, actual: usize },
    #[error("stored embedding {index} has norm {norm}, expected 1")]
    BadNorm { index: usize, norm: f64 },
    #[error("grid has no cells")]
    EmptyGrid,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// Tolerance on stored embedding norms.
pub const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MapHeader {
    tile_id: String,
    rows: usize,
    cols: usize,
    dim: usize,
    patch_px: usize,
    stride_px: usize,
    patch_m: f64,
    gsd_m: f64,
    origin: [f64; 2],
    fingerprint: String,
}

/// Grid-indexed store of unit RGB descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: PatchGrid,
    pub dim: usize,
    pub gsd_m: f64,
    pub origin: (f64, f64),
    pub fingerprint: String,
    embeddings: Vec<f32>,
}

impl FeatureMap {
    /// Wrap raw unit embeddings (row-major cells, `dim` floats each),
    /// validating count and norms.
    pub fn from_embeddings(
        grid: PatchGrid,
        dim: usize,
        gsd_m: f64,
        origin: (f64, f64),
        fingerprint: String,
        embeddings: Vec<f32>,
    ) -> Result<Self, MapError> {
        if grid.len() == 0 {
            return Err(MapError::EmptyGrid);
        }
        if embeddings.len() != grid.len() * dim {
            return Err(MapError::CountMismatch {
                expected: grid.len() * dim,
                actual: embeddings.len() / dim.max(1),
            });
        }
        let map = Self {
            grid,
            dim,
            gsd_m,
            origin,
            fingerprint,
            embeddings,
        };
        map.check_norms()?;
        Ok(map)
    }

    fn check_norms(&self) -> Result<(), MapError> {
        for index in 0..self.grid.len() {
            let norm = self
                .cell_by_index(index)
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(MapError::BadNorm { index, norm });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn cell_by_index(&self, index: usize) -> &[f32] {
        &self.embeddings[index * self.dim..(index + 1) * self.dim]
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        self.cell_by_index(row * self.grid.cols + col)
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.len() == 0
    }
}

/// Encode every grid anchor of a normalized RGB tile; cells are encoded
/// independently (in parallel by default) and assembled row-major.
pub fn build_feature_map<E: Encoder>(
    tile: &RasterTile,
    grid: &PatchGrid,
    encoder: &E,
) -> Result<FeatureMap, MapError> {
    build_inner(tile, grid, encoder, true)
}

/// Sequential reference twin of [`build_feature_map`]; output is
/// bit-identical.
pub fn build_feature_map_seq<E: Encoder>(
    tile: &RasterTile,
    grid: &PatchGrid,
    encoder: &E,
) -> Result<FeatureMap, MapError> {
    build_inner(tile, grid, encoder, false)
}

fn build_inner<E: Encoder>(
    tile: &RasterTile,
    grid: &PatchGrid,
    encoder: &E,
    parallel: bool,
) -> Result<FeatureMap, MapError> {
    if tile.modality != Modality::Rgb {
        return Err(MapError::WrongTileModality(tile.modality));
    }
    if encoder.modality() != Modality::Rgb {
        return Err(MapError::WrongEncoderModality(encoder.modality()));
    }
    if !tile.normalized {
        return Err(MapError::NotNormalized(tile.id.clone()));
    }
    if grid.tile_id != tile.id {
        return Err(MapError::GridTileMismatch {
            grid_tile: grid.tile_id.clone(),
            tile: tile.id.clone(),
        });
    }
    if grid.len() == 0 {
        return Err(MapError::EmptyGrid);
    }

    let dim = encoder.dim();
    let cells: Vec<Vec<f32>> = par::try_map_index(grid.len(), parallel, |index| {
        let patch = extract_patch(tile, grid.anchor(index), grid.patch_px)?;
        let unit = encoder.embed(&patch)?.normalize()?;
        Ok::<Vec<f32>, MapError>(unit.vector.iter().map(|&v| v as f32).collect())
    })?;
    let mut embeddings = Vec::with_capacity(grid.len() * dim);
    for cell in cells {
        embeddings.extend_from_slice(&cell);
    }
    FeatureMap::from_embeddings(
        grid.clone(),
        dim,
        tile.gsd_m,
        tile.origin,
        encoder.fingerprint().clone(),
        embeddings,
    )
}

/// Warning text when a map's fingerprint does not match the checkpoint in
/// use; `None` means they match.
pub fn fingerprint_warning(map: &FeatureMap, expected: &str) -> Option<String> {
    (map.fingerprint != expected).then(|| {
        format!(
            "feature map was built by checkpoint {} but {} is in use; scores may be meaningless",
            &map.fingerprint[..map.fingerprint.len().min(12)],
            &expected[..expected.len().min(12)],
        )
    })
}

pub fn save_map(map: &FeatureMap, path: &Path) -> Result<(), MapError> {
    let header = MapHeader {
        tile_id: map.grid.tile_id.clone(),
        rows: map.grid.rows,
        cols: map.grid.cols,
        dim: map.dim,
        patch_px: map.grid.patch_px,
        stride_px: map.grid.stride_px,
        patch_m: map.grid.patch_m,
        gsd_m: map.gsd_m,
        origin: [map.origin.0, map.origin.1],
        fingerprint: map.fingerprint.clone(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(13 + header_bytes.len() + map.embeddings.len() * 4);
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for &v in &map.embeddings {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| MapError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, out).map_err(|source| MapError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_map(path: &Path) -> Result<FeatureMap, MapError> {
    let bytes = std::fs::read(path).map_err(|source| MapError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 13 {
        return Err(MapError::Truncated);
    }
    if &bytes[0..9] != MAP_MAGIC {
        return Err(MapError::BadMagic);
    }
    let header_len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let header_end = 13usize.checked_add(header_len).ok_or(MapError::Truncated)?;
    if bytes.len() < header_end {
        return Err(MapError::Truncated);
    }
    let header: MapHeader = serde_json::from_slice(&bytes[13..header_end])
        .map_err(|e| MapError::Header(e.to_string()))?;
    if header.fingerprint.is_empty() {
        return Err(MapError::Header("fingerprint is absent".into()));
    }
    let expected_len = header_end + header.rows * header.cols * header.dim * 4;
    if bytes.len() != expected_len {
        return Err(MapError::Truncated);
    }
    let embeddings: Vec<f32> = bytes[header_end..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    FeatureMap::from_embeddings(
        PatchGrid {
            tile_id: header.tile_id,
            patch_px: header.patch_px,
            stride_px: header.stride_px,
            rows: header.rows,
            cols: header.cols,
            patch_m: header.patch_m,
        },
        header.dim,
        header.gsd_m,
        (header.origin[0], header.origin[1]),
        header.fingerprint,
        embeddings,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_branch, Arch, Encoder};
    use crate::raster::{fit_normalization, normalize};
    use crate::sampling::grid_from_px;
    use crate::seeded::rng_stream;
    use rand::Rng;

    fn normalized_rgb_tile(id: &str, h: usize, w: usize, seed: u64) -> RasterTile {
        let mut rng = rng_stream(seed, "map-tile");
        let data: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(0.0..255.0)).collect();
        let tile = RasterTile::new(id, h, w, 0.5, (0.0, 0.0), Modality::Rgb, data).unwrap();
        let stats = fit_normalization(&[&tile]).unwrap();
        normalize(&tile, &stats).unwrap()
    }

    #[test]
    fn single_anchor_map_equals_normalized_forward() {
        let tile = normalized_rgb_tile("m0", 16, 16, 1);
        let grid = grid_from_px(&tile, 16, 4).unwrap();
        assert_eq!(grid.len(), 1);
        let branch = init_branch(Modality::Rgb, Arch::Desk, 5);
        let map = build_feature_map(&tile, &grid, &branch).unwrap();
        let patch = extract_patch(&tile, (0, 0), 16).unwrap();
        let unit = branch.embed(&patch).unwrap().normalize().unwrap();
        for (a, b) in map.cell(0, 0).iter().zip(&unit.vector) {
            assert_eq!(*a, *b as f32);
        }
    }

    #[test]
    fn build_is_deterministic_and_parallel_matches_serial() {
        let tile = normalized_rgb_tile("m1", 40, 40, 2);
        let grid = grid_from_px(&tile, 16, 8).unwrap();
        let branch = init_branch(Modality::Rgb, Arch::Desk, 6);
        let a = build_feature_map(&tile, &grid, &branch).unwrap();
        let b = build_feature_map(&tile, &grid, &branch).unwrap();
        let s = build_feature_map_seq(&tile, &grid, &branch).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, s);
    }

    #[test]
    fn stored_norms_are_unit() {
        let tile = normalized_rgb_tile("m2", 32, 32, 3);
        let grid = grid_from_px(&tile, 16, 8).unwrap();
        let branch = init_branch(Modality::Rgb, Arch::Desk, 7);
        let map = build_feature_map(&tile, &grid, &branch).unwrap();
        for i in 0..map.len() {
            let norm: f64 = map
                .cell_by_index(i)
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() <= NORM_TOL);
        }
    }

    #[test]
    fn build_rejects_bad_inputs() {
        let tile = normalized_rgb_tile("m3", 16, 16, 4);
        let grid = grid_from_px(&tile, 16, 4).unwrap();
        let dem_branch = init_branch(Modality::Dem, Arch::Desk, 1);
        assert!(matches!(
            build_feature_map(&tile, &grid, &dem_branch),
            Err(MapError::WrongEncoderModality(Modality::Dem))
        ));
        let branch = init_branch(Modality::Rgb, Arch::Desk, 1);
        let mut raw = normalized_rgb_tile("m3", 16, 16, 4);
        raw.normalized = false;
        assert!(matches!(
            build_feature_map(&raw, &grid, &branch),
            Err(MapError::NotNormalized(_))
        ));
    }

    #[test]
    fn map_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let tile = normalized_rgb_tile("m4", 32, 32, 5);
        let grid = grid_from_px(&tile, 16, 8).unwrap();
        let branch = init_branch(Modality::Rgb, Arch::Desk, 8);
        let map = build_feature_map(&tile, &grid, &branch).unwrap();
        let path = dir.path().join("tile.crocomap");
        save_map(&map, &path).unwrap();
        let back = load_map(&path).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn truncated_map_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let tile = normalized_rgb_tile("m5", 16, 16, 6);
        let grid = grid_from_px(&tile, 16, 4).unwrap();
        let branch = init_branch(Modality::Rgb, Arch::Desk, 9);
        let map = build_feature_map(&tile, &grid, &branch).unwrap();
        let path = dir.path().join("t.crocomap");
        save_map(&map, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_map(&path), Err(MapError::Truncated)));
        let mut wrong = bytes.clone();
        wrong[0] = b'Z';
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(load_map(&path), Err(MapError::BadMagic)));
    }

    #[test]
    fn fingerprint_mismatch_surfaces_a_warning() {
        let tile = normalized_rgb_tile("m6", 16, 16, 7);
        let grid = grid_from_px(&tile, 16, 4).unwrap();
        let branch = init_branch(Modality::Rgb, Arch::Desk, 10);
        let map = build_feature_map(&tile, &grid, &branch).unwrap();
        assert!(fingerprint_warning(&map, &branch.fingerprint()).is_none());
        assert!(fingerprint_warning(&map, "deadbeef").is_some());
    }
}
