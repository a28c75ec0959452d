//! Retrieval scoring: Top-1/Top-5 over a query set, per-query ranks of the
//! true cell, and color-coded error maps.
//!
//! A query counts as correct when its true grid cell ranks first in the full
//! ordering; the error-map image additionally overlays Top-5 outcomes
//! (orange = missed Top-1 but hit Top-5). Queries are independent and run in
//! parallel by default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderError};
use crate::localizer::{rank_of_cell, score_cells, LocalizeError};
use crate::mapstore::FeatureMap;
use crate::par;
use crate::raster::Modality;
use crate::sampling::Patch;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("query {index} names cell ({row}, {col}) outside the {rows}x{cols} grid")]
    QueryOutsideGrid {
        index: usize,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("queries are elevation patches; encoder modality is {0}")]
    WrongEncoderModality(Modality),
    #[error("no queries supplied")]
    NoQueries,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image encode error: {0}")]
    Image(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Localize(#[from] LocalizeError),
}

/// An elevation patch with its ground-truth grid cell.
#[derive(Debug, Clone)]
pub struct EvalQuery {
    pub patch: Patch,
    pub true_cell: (usize, usize),
}

/// Outcome of one query: the rank of its true cell (1 = correct Top-1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub row: usize,
    pub col: usize,
    pub rank: usize,
}

/// Error-map cell states.
pub const CELL_UNQUERIED: u8 = 0;
pub const CELL_CORRECT: u8 = 1;
pub const CELL_WRONG: u8 = 2;

/// Aggregate retrieval report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub n_top1: usize,
    pub n_top5: usize,
    pub top1: f64,
    pub top5: f64,
    pub rows: usize,
    pub cols: usize,
    pub outcomes: Vec<QueryOutcome>,
    /// Row-major ternary grid: 0 unqueried, 1 correct (rank 1), 2 wrong.
    pub error_map: Vec<u8>,
}

/// Rank every query's true cell and aggregate Top-1/Top-5.
pub fn evaluate<E: Encoder>(
    queries: &[EvalQuery],
    encoder: &E,
    map: &FeatureMap,
) -> Result<EvalReport, EvalError> {
    evaluate_inner(queries, encoder, map, true)
}

/// Sequential reference twin of [`evaluate`].
pub fn evaluate_seq<E: Encoder>(
    queries: &[EvalQuery],
    encoder: &E,
    map: &FeatureMap,
) -> Result<EvalReport, EvalError> {
    evaluate_inner(queries, encoder, map, false)
}

fn evaluate_inner<E: Encoder>(
    queries: &[EvalQuery],
    encoder: &E,
    map: &FeatureMap,
    parallel: bool,
) -> Result<EvalReport, EvalError> {
    if encoder.modality() != Modality::Dem {
        return Err(EvalError::WrongEncoderModality(encoder.modality()));
    }
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let (rows, cols) = (map.grid.rows, map.grid.cols);
    for (index, q) in queries.iter().enumerate() {
        let (row, col) = q.true_cell;
        if row >= rows || col >= cols {
            return Err(EvalError::QueryOutsideGrid {
                index,
                row,
                col,
                rows,
                cols,
            });
        }
    }

    let outcomes: Vec<QueryOutcome> = par::try_map_index(queries.len(), parallel, |i| {
        let q = &queries[i];
        let unit = encoder.embed(&q.patch)?.normalize()?;
        let scores = score_cells(map, &unit.vector)?;
        let cell_index = q.true_cell.0 * cols + q.true_cell.1;
        Ok::<QueryOutcome, EvalError>(QueryOutcome {
            row: q.true_cell.0,
            col: q.true_cell.1,
            rank: rank_of_cell(&scores, cell_index),
        })
    })?;

    let n_top1 = outcomes.iter().filter(|o| o.rank == 1).count();
    let n_top5 = outcomes.iter().filter(|o| o.rank <= 5).count();
    let n = outcomes.len();
    let mut error_map = vec![CELL_UNQUERIED; rows * cols];
    for o in &outcomes {
        error_map[o.row * cols + o.col] = if o.rank == 1 { CELL_CORRECT } else { CELL_WRONG };
    }
    let report = EvalReport {
        n_queries: n,
        n_top1,
        n_top5,
        top1: n_top1 as f64 / n as f64,
        top5: n_top5 as f64 / n as f64,
        rows,
        cols,
        outcomes,
        error_map,
    };
    debug_assert!(report.top1 <= report.top5 + 1e-15);
    Ok(report)
}

/// Render the error map: green = Top-1 correct, orange = wrong Top-1 but
/// within Top-5, red = outside Top-5, gray = unqueried. One pixel per grid
/// cell; a CSV of per-query outcomes lands alongside. Returns
/// `(png_path, csv_path)`.
pub fn render_error_map(report: &EvalReport, png_path: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    const GRAY: [u8; 3] = [128, 128, 128];
    const GREEN: [u8; 3] = [0, 176, 48];
    const ORANGE: [u8; 3] = [240, 176, 0];
    const RED: [u8; 3] = [208, 32, 32];

    let mut pixels = vec![0u8; report.rows * report.cols * 3];
    for px in pixels.chunks_exact_mut(3) {
        px.copy_from_slice(&GRAY);
    }
    for o in &report.outcomes {
        let color = if o.rank == 1 {
            GREEN
        } else if o.rank <= 5 {
            ORANGE
        } else {
            RED
        };
        let at = (o.row * report.cols + o.col) * 3;
        pixels[at..at + 3].copy_from_slice(&color);
    }
    let image = image::RgbImage::from_raw(report.cols as u32, report.rows as u32, pixels)
        .expect("pixel buffer matches dims");
    if let Some(parent) = png_path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| EvalError::Io {
            path: png_path.to_path_buf(),
            source,
        })?;
    }
    image
        .save_with_format(png_path, image::ImageFormat::Png)
        .map_err(|e| EvalError::Image(e.to_string()))?;

    let csv_path = png_path.with_extension("csv");
    let mut text = String::from("row,col,rank\n");
    for o in &report.outcomes {
        text.push_str(&format!("{},{},{}\n", o.row, o.col, o.rank));
    }
    std::fs::write(&csv_path, text).map_err(|source| EvalError::Io {
        path: csv_path.clone(),
        source,
    })?;
    Ok((png_path.to_path_buf(), csv_path))
}

/// Persist the report as JSON.
pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}
