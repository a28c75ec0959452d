//! Sliding-window patch grids, geographically disjoint splits, patch
//! extraction and positive-pair batch sampling.
//!
//! A grid enumerates anchors row-major over a tile with no partial patches:
//! `floor((H - P) / S) + 1` rows of `floor((W - P) / S) + 1` anchors. The
//! physical stride (for example 2 m) defines the localization granularity of
//! everything downstream: training pairs, feature-map cells and queries.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::raster::{integral_ratio, RasterTile};
use crate::seeded::{rng_stream, sample_without_replacement};

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("patch of {patch_px}px does not fit a {height}x{width} tile")]
    PatchTooLarge {
        patch_px: usize,
        height: usize,
        width: usize,
    },
    #[error("{quantity} of {meters} m is not a whole number of pixels at {gsd} m/px")]
    NonIntegralPixels {
        quantity: &'static str,
        meters: f64,
        gsd: f64,
    },
    #[error("anchor ({row}, {col}) out of bounds for patch {patch_px}px on {height}x{width}")]
    AnchorOutOfBounds {
        row: usize,
        col: usize,
        patch_px: usize,
        height: usize,
        width: usize,
    },
    #[error("batch of {requested} exceeds the {available} available anchors")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("pair batches need at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("grids are not the same lattice: {0}")]
    GridMismatch(String),
    #[error("tile {tile_id} does not match grid {grid_tile_id}")]
    TileGridMismatch { tile_id: String, grid_tile_id: String },
    #[error("tile {0} assigned to more than one split")]
    DuplicateAssignment(String),
    #[error("tile {0} missing from the split spec")]
    MissingAssignment(String),
    #[error("split spec names unknown tile {0}")]
    UnknownTile(String),
    #[error("split leakage: {tile_id} is a training tile but was used for {purpose}")]
    SplitLeakage { tile_id: String, purpose: String },
    #[error("split spec file error: {0}")]
    SpecFile(String),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
}

/// The sliding-window anchor lattice over one tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub tile_id: String,
    pub patch_px: usize,
    pub stride_px: usize,
    pub rows: usize,
    pub cols: usize,
    /// Ground extent of one patch side in meters.
    pub patch_m: f64,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Anchor at a row-major cell index.
    pub fn anchor(&self, index: usize) -> (usize, usize) {
        let (r, c) = (index / self.cols, index % self.cols);
        (r * self.stride_px, c * self.stride_px)
    }

    /// Anchor of grid cell (r, c).
    pub fn anchor_at(&self, r: usize, c: usize) -> (usize, usize) {
        (r * self.stride_px, c * self.stride_px)
    }

    /// All anchors, row-major.
    pub fn anchors(&self) -> Vec<(usize, usize)> {
        (0..self.len()).map(|i| self.anchor(i)).collect()
    }

    /// Checks this grid and `other` describe the same lattice geometry.
    pub fn same_lattice(&self, other: &PatchGrid) -> bool {
        self.patch_px == other.patch_px
            && self.stride_px == other.stride_px
            && self.rows == other.rows
            && self.cols == other.cols
    }
}

/// Build the anchor lattice for a tile from physical patch/stride sizes.
pub fn generate_grid(
    tile: &RasterTile,
    patch_m: f64,
    stride_m: f64,
) -> Result<PatchGrid, SamplingError> {
    let patch_px = integral_ratio(patch_m, tile.gsd_m).ok_or(SamplingError::NonIntegralPixels {
        quantity: "patch",
        meters: patch_m,
        gsd: tile.gsd_m,
    })?;
    let stride_px = integral_ratio(stride_m, tile.gsd_m).ok_or(SamplingError::NonIntegralPixels {
        quantity: "stride",
        meters: stride_m,
        gsd: tile.gsd_m,
    })?;
    grid_from_px(tile, patch_px, stride_px)
}

/// Pixel-space variant of [`generate_grid`].
pub fn grid_from_px(
    tile: &RasterTile,
    patch_px: usize,
    stride_px: usize,
) -> Result<PatchGrid, SamplingError> {
    if patch_px == 0 || patch_px > tile.height_px.min(tile.width_px) {
        return Err(SamplingError::PatchTooLarge {
            patch_px,
            height: tile.height_px,
            width: tile.width_px,
        });
    }
    let stride_px = stride_px.max(1);
    Ok(PatchGrid {
        tile_id: tile.id.clone(),
        patch_px,
        stride_px,
        rows: (tile.height_px - patch_px) / stride_px + 1,
        cols: (tile.width_px - patch_px) / stride_px + 1,
        patch_m: patch_px as f64 * tile.gsd_m,
    })
}

/// A square 3-channel patch tensor, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub channels: usize,
    pub side: usize,
    pub data: Vec<f64>,
}

impl Patch {
    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.side + y) * self.side + x]
    }
}

/// Copy the `3 x patch_px x patch_px` window anchored at `(row, col)`.
pub fn extract_patch(
    tile: &RasterTile,
    anchor: (usize, usize),
    patch_px: usize,
) -> Result<Patch, SamplingError> {
    let (row, col) = anchor;
    if row + patch_px > tile.height_px || col + patch_px > tile.width_px {
        return Err(SamplingError::AnchorOutOfBounds {
            row,
            col,
            patch_px,
            height: tile.height_px,
            width: tile.width_px,
        });
    }
    let mut data = Vec::with_capacity(3 * patch_px * patch_px);
    for c in 0..tile.channels {
        let plane = tile.channel(c);
        for y in 0..patch_px {
            let start = (row + y) * tile.width_px + col;
            data.extend_from_slice(&plane[start..start + patch_px]);
        }
    }
    Ok(Patch {
        channels: 3,
        side: patch_px,
        data,
    })
}

/// Where a training pair came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLocation {
    pub rgb_tile_id: String,
    pub dem_tile_id: String,
    pub row_px: usize,
    pub col_px: usize,
}

/// N co-located RGB/DEM patch pairs; element i of both patch lists shares
/// one anchor.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub rgb_patches: Vec<Patch>,
    pub dem_patches: Vec<Patch>,
    pub locations: Vec<PairLocation>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// Draw `n` distinct anchors uniformly without replacement and extract the
/// co-located patch pair at each. The two grids must be the same lattice
/// over co-registered tiles.
pub fn sample_pair_batch(
    rgb_tile: &RasterTile,
    rgb_grid: &PatchGrid,
    dem_tile: &RasterTile,
    dem_grid: &PatchGrid,
    n: usize,
    seed: u64,
) -> Result<PairBatch, SamplingError> {
    if !rgb_grid.same_lattice(dem_grid) {
        return Err(SamplingError::GridMismatch(format!(
            "{}x{} patch {} stride {} vs {}x{} patch {} stride {}",
            rgb_grid.rows,
            rgb_grid.cols,
            rgb_grid.patch_px,
            rgb_grid.stride_px,
            dem_grid.rows,
            dem_grid.cols,
            dem_grid.patch_px,
            dem_grid.stride_px,
        )));
    }
    for (tile, grid) in [(rgb_tile, rgb_grid), (dem_tile, dem_grid)] {
        if tile.id != grid.tile_id {
            return Err(SamplingError::TileGridMismatch {
                tile_id: tile.id.clone(),
                grid_tile_id: grid.tile_id.clone(),
            });
        }
    }
    crate::raster::check_coregistered(
        (rgb_tile.height_px, rgb_tile.width_px, rgb_tile.gsd_m, rgb_tile.origin),
        (dem_tile.height_px, dem_tile.width_px, dem_tile.gsd_m, dem_tile.origin),
    )?;
    if n < 2 {
        return Err(SamplingError::BatchTooSmall(n));
    }
    if n > rgb_grid.len() {
        return Err(SamplingError::BatchTooLarge {
            requested: n,
            available: rgb_grid.len(),
        });
    }

    let mut rng = rng_stream(seed, "pair-batch");
    let picks = sample_without_replacement(rgb_grid.len(), n, &mut rng);
    let mut batch = PairBatch {
        rgb_patches: Vec::with_capacity(n),
        dem_patches: Vec::with_capacity(n),
        locations: Vec::with_capacity(n),
    };
    for index in picks {
        let anchor = rgb_grid.anchor(index);
        batch
            .rgb_patches
            .push(extract_patch(rgb_tile, anchor, rgb_grid.patch_px)?);
        batch
            .dem_patches
            .push(extract_patch(dem_tile, anchor, dem_grid.patch_px)?);
        batch.locations.push(PairLocation {
            rgb_tile_id: rgb_tile.id.clone(),
            dem_tile_id: dem_tile.id.clone(),
            row_px: anchor.0,
            col_px: anchor.1,
        });
    }
    Ok(batch)
}

/// Which split a tile belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Validated tile-level split: pairwise disjoint, covering the declared set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
    /// Non-fatal findings (e.g. an empty split), surfaced by reports.
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn split_of(&self, tile_id: &str) -> Option<Split> {
        if self.train.contains(tile_id) {
            Some(Split::Train)
        } else if self.val.contains(tile_id) {
            Some(Split::Val)
        } else if self.test.contains(tile_id) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// Validate a tile-to-split mapping against the declared tile set.
/// The spec is a pair list so duplicate assignments are detectable.
pub fn assign_splits(
    tile_ids: &[String],
    spec: &[(String, Split)],
) -> Result<SplitAssignment, SamplingError> {
    let declared: BTreeSet<&str> = tile_ids.iter().map(String::as_str).collect();
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for (id, split) in spec {
        if !declared.contains(id.as_str()) {
            return Err(SamplingError::UnknownTile(id.clone()));
        }
        if seen.insert(id.as_str(), *split).is_some() {
            return Err(SamplingError::DuplicateAssignment(id.clone()));
        }
    }
    for id in &declared {
        if !seen.contains_key(id) {
            return Err(SamplingError::MissingAssignment((*id).to_string()));
        }
    }
    let mut assignment = SplitAssignment {
        train: BTreeSet::new(),
        val: BTreeSet::new(),
        test: BTreeSet::new(),
        warnings: Vec::new(),
    };
    for (id, split) in seen {
        let set = match split {
            Split::Train => &mut assignment.train,
            Split::Val => &mut assignment.val,
            Split::Test => &mut assignment.test,
        };
        set.insert(id.to_string());
    }
    for (name, set) in [
        ("train", &assignment.train),
        ("val", &assignment.val),
        ("test", &assignment.test),
    ] {
        if set.is_empty() {
            assignment.warnings.push(format!("{name} split is empty"));
        }
    }
    Ok(assignment)
}

/// Load a split spec file: a JSON object mapping tile id to
/// `"train" | "val" | "test"`.
pub fn load_split_spec(path: &Path) -> Result<Vec<(String, Split)>, SamplingError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SamplingError::SpecFile(format!("{}: {e}", path.display())))?;
    let map: BTreeMap<String, Split> = serde_json::from_str(&text)
        .map_err(|e| SamplingError::SpecFile(format!("{}: {e}", path.display())))?;
    Ok(map.into_iter().collect())
}

/// The executable split-leakage guard: refuses to use a training tile for
/// evaluation purposes.
pub fn assert_no_leakage(
    assignment: &SplitAssignment,
    tile_id: &str,
    purpose: &str,
) -> Result<(), SamplingError> {
    if assignment.train.contains(tile_id) {
        return Err(SamplingError::SplitLeakage {
            tile_id: tile_id.to_string(),
            purpose: purpose.to_string(),
        });
    }
    Ok(())
}
