//! The localization stage: score an elevation-patch descriptor against every
//! feature-map cell, rank cells by cosine similarity, and render similarity
//! heatmaps.
//!
//! Scoring is exhaustive and exact; ties resolve to the lowest row-major
//! cell index, so rankings are fully deterministic.

use std::path::{Path, PathBuf};

use crate::encoder::{Encoder, EncoderError};
use crate::mapstore::{FeatureMap, MapError};
use crate::raster::Modality;
use crate::sampling::Patch;

#[derive(Debug, thiserror::Error)]
pub enum LocalizeError {
    #[error("k must be between 1 and {cells}, got {k}")]
    KOutOfRange { k: usize, cells: usize },
    #[error("queries are elevation patches; encoder modality is {0}")]
    WrongEncoderModality(Modality),
    #[error("query vector has dim {actual}, map stores dim {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image encode error: {0}")]
    Image(String),
    #[error("grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// One ranked feature-map cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCell {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Ranking returned by [`localize`]: scores non-increasing, cells distinct.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    /// Ground-truth cell when known (evaluation); `None` for live queries.
    pub query_cell: Option<(usize, usize)>,
    pub ranking: Vec<RankedCell>,
    pub k: usize,
}

/// Raw similarity scores of one query against a whole map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ScoreGrid {
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Dot a unit query vector against every stored cell. Scores are clamped to
/// [-1, 1] (float32 storage can overshoot by an ulp).
pub fn score_cells(map: &FeatureMap, unit_query: &[f64]) -> Result<Vec<f64>, LocalizeError> {
    if unit_query.len() != map.dim {
        return Err(LocalizeError::DimMismatch {
            expected: map.dim,
            actual: unit_query.len(),
        });
    }
    Ok((0..map.len())
        .map(|i| {
            let cell = map.cell_by_index(i);
            let s: f64 = cell
                .iter()
                .zip(unit_query)
                .map(|(&a, &b)| f64::from(a) * b)
                .sum();
            s.clamp(-1.0, 1.0)
        })
        .collect())
}

/// Top-k cells by score, ties broken toward the lower row-major index.
pub fn top_k_cells(scores: &[f64], cols: usize, k: usize) -> Vec<RankedCell> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(k)
        .map(|i| RankedCell {
            row: i / cols,
            col: i % cols,
            score: scores[i],
        })
        .collect()
}

/// Rank of one cell under the same ordering `top_k_cells` uses (1-based).
pub fn rank_of_cell(scores: &[f64], cell_index: usize) -> usize {
    let target = scores[cell_index];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if s > target || (s == target && i < cell_index) {
            rank += 1;
        }
    }
    rank
}

/// Encode an elevation patch and return the k best map cells.
pub fn localize<E: Encoder>(
    patch: &Patch,
    encoder: &E,
    map: &FeatureMap,
    k: usize,
) -> Result<RetrievalResult, LocalizeError> {
    if encoder.modality() != Modality::Dem {
        return Err(LocalizeError::WrongEncoderModality(encoder.modality()));
    }
    if k < 1 || k > map.len() {
        return Err(LocalizeError::KOutOfRange { k, cells: map.len() });
    }
    let unit = encoder.embed(patch)?.normalize()?;
    let scores = score_cells(map, &unit.vector)?;
    Ok(RetrievalResult {
        query_cell: None,
        ranking: top_k_cells(&scores, map.grid.cols, k),
        k,
    })
}

/// Raw per-cell similarity grid for one query (heatmap input). Values are
/// exactly the scores `localize` ranks.
pub fn similarity_grid<E: Encoder>(
    patch: &Patch,
    encoder: &E,
    map: &FeatureMap,
) -> Result<ScoreGrid, LocalizeError> {
    if encoder.modality() != Modality::Dem {
        return Err(LocalizeError::WrongEncoderModality(encoder.modality()));
    }
    let unit = encoder.embed(patch)?.normalize()?;
    let values = score_cells(map, &unit.vector)?;
    Ok(ScoreGrid {
        rows: map.grid.rows,
        cols: map.grid.cols,
        values,
    })
}

/// Write a grayscale heatmap PNG (min-max rescaled to 0..255; constant grids
/// render mid-gray 128) plus a CSV of the raw scores alongside.
/// Returns `(png_path, csv_path)`.
pub fn render_heatmap(grid: &ScoreGrid, png_path: &Path) -> Result<(PathBuf, PathBuf), LocalizeError> {
    if grid.values.is_empty() {
        return Err(LocalizeError::EmptyGrid);
    }
    let lo = grid.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.max();
    let pixels: Vec<u8> = if hi > lo {
        let scale = 255.0 / (hi - lo);
        grid.values
            .iter()
            .map(|v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8)
            .collect()
    } else {
        vec![128u8; grid.values.len()]
    };
    let image = image::GrayImage::from_raw(grid.cols as u32, grid.rows as u32, pixels)
        .expect("pixel buffer matches dims");
    if let Some(parent) = png_path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| LocalizeError::Io {
            path: png_path.to_path_buf(),
            source,
        })?;
    }
    image
        .save_with_format(png_path, image::ImageFormat::Png)
        .map_err(|e| LocalizeError::Image(e.to_string()))?;

    let csv_path = png_path.with_extension("csv");
    let mut text = String::new();
    for r in 0..grid.rows {
        let row: Vec<String> = (0..grid.cols)
            .map(|c| format!("{:.9e}", grid.values[r * grid.cols + c]))
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(&csv_path, text).map_err(|source| LocalizeError::Io {
        path: csv_path.clone(),
        source,
    })?;
    Ok((png_path.to_path_buf(), csv_path))
}

/// Parse a heatmap CSV back into a grid (test and tooling support).
pub fn read_heatmap_csv(path: &Path) -> Result<ScoreGrid, LocalizeError> {
    let text = std::fs::read_to_string(path).map_err(|source| LocalizeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut values = Vec::new();
    let mut cols = 0;
    let mut rows = 0;
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.parse::<f64>().map_err(|e| LocalizeError::Image(e.to_string())))
            .collect::<Result<_, _>>()?;
        cols = row.len();
        rows += 1;
        values.extend(row);
    }
    Ok(ScoreGrid { rows, cols, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::PatchGrid;
    use crate::seeded::{rng_stream, unit_vector};

    fn grid_meta(rows: usize, cols: usize) -> PatchGrid {
        PatchGrid {
            tile_id: "t".into(),
            patch_px: 8,
            stride_px: 4,
            rows,
            cols,
            patch_m: 4.0,
        }
    }

    fn map_from_unit_vectors(rows: usize, cols: usize, dim: usize, seed: u64) -> FeatureMap {
        let mut rng = rng_stream(seed, "map");
        let mut embeddings = Vec::with_capacity(rows * cols * dim);
        for _ in 0..rows * cols {
            let v = unit_vector(dim, &mut rng);
            embeddings.extend(v.iter().map(|&x| x as f32));
        }
        FeatureMap::from_embeddings(
            grid_meta(rows, cols),
            dim,
            0.5,
            (0.0, 0.0),
            "test".into(),
            embeddings,
        )
        .unwrap()
    }

    #[test]
    fn exact_match_ranks_first_with_score_one() {
        let dim = 16;
        let mut embeddings = vec![0.0f32; 4 * dim];
        for (i, e) in embeddings.chunks_exact_mut(dim).enumerate() {
            e[i] = 1.0;
        }
        let map = FeatureMap::from_embeddings(
            grid_meta(2, 2),
            dim,
            0.5,
            (0.0, 0.0),
            "t".into(),
            embeddings,
        )
        .unwrap();
        let mut q = vec![0.0f64; dim];
        q[2] = 1.0;
        let scores = score_cells(&map, &q).unwrap();
        let top = top_k_cells(&scores, 2, 1);
        assert_eq!((top[0].row, top[0].col), (1, 0));
        assert_eq!(top[0].score, 1.0);
    }

    #[test]
    fn full_k_returns_total_ordering_matching_sort_oracle() {
        let mut rng = rng_stream(3, "query");
        for trial in 0..20 {
            let map = map_from_unit_vectors(4, 4, 8, 100 + trial);
            let q = unit_vector(8, &mut rng);
            let scores = score_cells(&map, &q).unwrap();
            let ranking = top_k_cells(&scores, 4, 16);
            // Oracle: stable sort of (score desc, index asc).
            let mut oracle: Vec<(usize, f64)> =
                scores.iter().cloned().enumerate().collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (rc, (idx, score)) in ranking.iter().zip(&oracle) {
                assert_eq!(rc.row * 4 + rc.col, *idx);
                assert_eq!(rc.score, *score);
            }
            // Scores are non-increasing and within [-1, 1].
            for w in ranking.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
            assert!(ranking.iter().all(|r| (-1.0..=1.0).contains(&r.score)));
        }
    }

    #[test]
    fn ties_resolve_to_lower_row_major_index() {
        let dim = 4;
        let cell = [0.5f32, 0.5, 0.5, 0.5];
        let mut embeddings = Vec::new();
        for _ in 0..4 {
            embeddings.extend_from_slice(&cell);
        }
        let map = FeatureMap::from_embeddings(
            grid_meta(2, 2),
            dim,
            0.5,
            (0.0, 0.0),
            "t".into(),
            embeddings,
        )
        .unwrap();
        let q = vec![0.5f64; 4];
        let scores = score_cells(&map, &q).unwrap();
        let ranking = top_k_cells(&scores, 2, 4);
        let cells: Vec<(usize, usize)> = ranking.iter().map(|r| (r.row, r.col)).collect();
        assert_eq!(cells, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        for idx in 0..4 {
            assert_eq!(rank_of_cell(&scores, idx), idx + 1);
        }
    }

    #[test]
    fn rank_of_cell_matches_position_in_full_ordering() {
        let map = map_from_unit_vectors(5, 3, 8, 9);
        let mut rng = rng_stream(10, "rk");
        let q = unit_vector(8, &mut rng);
        let scores = score_cells(&map, &q).unwrap();
        let ranking = top_k_cells(&scores, 3, 15);
        for (pos, cell) in ranking.iter().enumerate() {
            assert_eq!(rank_of_cell(&scores, cell.row * 3 + cell.col), pos + 1);
        }
    }

    struct SliceEncoder {
        dim: usize,
    }

    impl crate::encoder::Encoder for SliceEncoder {
        fn modality(&self) -> crate::raster::Modality {
            crate::raster::Modality::Dem
        }
        fn dim(&self) -> usize {
            self.dim
        }
        fn embed(
            &self,
            patch: &crate::sampling::Patch,
        ) -> Result<crate::encoder::Embedding, crate::encoder::EncoderError> {
            Ok(crate::encoder::Embedding::raw(patch.data[..self.dim].to_vec()))
        }
        fn fingerprint(&self) -> String {
            "slice".into()
        }
    }

    fn query_patch(v: &[f64]) -> crate::sampling::Patch {
        let side = 8;
        let mut data = vec![0.0; 3 * side * side];
        data[..v.len()].copy_from_slice(v);
        crate::sampling::Patch {
            channels: 3,
            side,
            data,
        }
    }

    #[test]
    fn similarity_grid_peak_equals_top1_and_k1_heads_k5() {
        let map = map_from_unit_vectors(4, 5, 8, 21);
        let encoder = SliceEncoder { dim: 8 };
        let mut rng = rng_stream(22, "sg");
        let patch = query_patch(&unit_vector(8, &mut rng));
        let grid = similarity_grid(&patch, &encoder, &map).unwrap();
        let top1 = localize(&patch, &encoder, &map, 1).unwrap();
        let top5 = localize(&patch, &encoder, &map, 5).unwrap();
        assert_eq!(grid.max(), top1.ranking[0].score);
        assert_eq!(top1.ranking[0], top5.ranking[0]);
        assert!(grid.values.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_map_cells_give_constant_grid() {
        let dim = 8;
        let cell: Vec<f32> = {
            let mut rng = rng_stream(23, "const");
            unit_vector(dim, &mut rng).iter().map(|&x| x as f32).collect()
        };
        let mut embeddings = Vec::new();
        for _ in 0..6 {
            embeddings.extend_from_slice(&cell);
        }
        let map = FeatureMap::from_embeddings(
            grid_meta(2, 3),
            dim,
            0.5,
            (0.0, 0.0),
            "t".into(),
            embeddings,
        )
        .unwrap();
        let encoder = SliceEncoder { dim };
        let mut rng = rng_stream(24, "q");
        let patch = query_patch(&unit_vector(dim, &mut rng));
        let grid = similarity_grid(&patch, &encoder, &map).unwrap();
        assert!(grid.values.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn heatmap_rescale_and_constant_convention() {
        let dir = tempfile::tempdir().unwrap();
        let grid = ScoreGrid {
            rows: 2,
            cols: 2,
            values: vec![0.0, 1.0, 1.0, 0.0],
        };
        let (png, csv) = render_heatmap(&grid, &dir.path().join("h.png")).unwrap();
        let img = image::open(&png).unwrap().into_luma8();
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert_eq!(img.get_pixel(1, 0).0[0], 255);
        assert_eq!(img.get_pixel(0, 1).0[0], 255);
        assert_eq!(img.get_pixel(1, 1).0[0], 0);
        let back = read_heatmap_csv(&csv).unwrap();
        for (a, b) in back.values.iter().zip(&grid.values) {
            assert!((a - b).abs() < 1e-6);
        }

        let constant = ScoreGrid {
            rows: 2,
            cols: 2,
            values: vec![0.25; 4],
        };
        let (png2, _) = render_heatmap(&constant, &dir.path().join("c.png")).unwrap();
        let img2 = image::open(&png2).unwrap().into_luma8();
        assert!(img2.pixels().all(|p| p.0[0] == 128));
    }
}
