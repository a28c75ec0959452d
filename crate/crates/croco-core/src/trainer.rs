//! Joint optimization of both branches against the NT-Xent loss over sampled
//! positive-pair batches, with periodic validation scoring, best-checkpoint
//! tracking and CSV logging.
//!
//! One step: sample N anchors uniformly without replacement from the pooled
//! training grids, forward both branches, backpropagate the loss, apply one
//! optimizer update to every block of both branches, then round parameters
//! to float32 so checkpoints stay bit-exact. Batch forwards and per-patch
//! backwards run data-parallel; gradient accumulation uses fixed-size chunks
//! combined in order, so the loss trace is bit-identical for any worker
//! count. Validation builds a feature map per held-out tile and scores every
//! anchor; the split-leakage guard runs on each of those builds.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::contrastive::{nt_xent, nt_xent_grad, LossConfig, LossError, NegativeSet};
use crate::encoder::{
    backward, forward_cached, init_branch, Arch, Checkpoint, CheckpointError, EncoderBranch,
    EncoderError, ForwardCache, Grads,
};
use crate::evaluator::{evaluate, EvalError, EvalQuery};
use crate::mapstore::{build_feature_map, MapError};
use crate::par;
use crate::raster::{
    fit_normalization, normalize, resample, Modality, NormalizationStats, RasterError, TilePair,
};
use crate::sampling::{
    assert_no_leakage, extract_patch, generate_grid, PairBatch, PairLocation, PatchGrid,
    SamplingError, SplitAssignment,
};
use crate::seeded::{quantize_f32, rng_stream, sample_without_replacement};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("steps must be at least 1")]
    NoSteps,
    #[error("momentum must lie in [0, 1), got {0}")]
    BadMomentum(f64),
    #[error("learning rate must be finite and non-negative, got {0}")]
    BadLearningRate(f64),
    #[error("eval_every must be at least 1")]
    BadEvalEvery,
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("training pool has {available} anchors, batch needs {needed}")]
    PoolTooSmall { available: usize, needed: usize },
    #[error("pair {0} is not assigned to any split")]
    UnassignedPair(String),
    #[error("parameter and gradient shapes differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("tile {0} must be normalized")]
    NotNormalized(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Optimizer selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    SgdMomentum,
    Lars,
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub optimizer: Optimizer,
    /// LARS trust coefficient; ignored by SGD-momentum.
    pub trust_coefficient: f64,
    pub temperature: f64,
    pub negative_set: NegativeSet,
    pub patch_m: f64,
    pub stride_m: f64,
    pub gsd_m: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub arch: Arch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 500,
            learning_rate: 1e-2,
            momentum: 0.9,
            optimizer: Optimizer::SgdMomentum,
            trust_coefficient: 0.01,
            temperature: 0.5,
            negative_set: NegativeSet::All2N,
            patch_m: 16.0,
            stride_m: 2.0,
            gsd_m: 0.5,
            seed: 0,
            eval_every: 100,
            arch: Arch::Desk,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::BatchTooSmall(self.batch_size));
        }
        if self.steps < 1 {
            return Err(TrainError::NoSteps);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::BadMomentum(self.momentum));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::BadLearningRate(self.learning_rate));
        }
        if self.eval_every < 1 {
            return Err(TrainError::BadEvalEvery);
        }
        self.loss_config().validate_public()?;
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            negative_set: self.negative_set,
        }
    }
}

// LossConfig::validate is private to contrastive; re-check here.
trait ValidatePublic {
    fn validate_public(&self) -> Result<(), LossError>;
}

impl ValidatePublic for LossConfig {
    fn validate_public(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(LossError::BadTemperature(self.temperature));
        }
        Ok(())
    }
}

// ── optimizers ───────────────────────────────────────────────────────────────

/// SGD with classical momentum: `v <- m v + g; w <- w - lr v`.
pub fn sgd_momentum_update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::ShapeMismatch(params.len(), grads.len()));
    }
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
    Ok(())
}

/// Layer-wise adaptive rate scaling: the block's learning rate is
/// `trust * |w| / (|g| + eps)`, making the update magnitude invariant to
/// gradient rescaling. Zero-norm blocks (fresh biases) fall back to a local
/// rate of 1 so they can leave zero.
pub fn lars_update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    trust_coefficient: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::ShapeMismatch(params.len(), grads.len()));
    }
    const EPS: f64 = 1e-12;
    let w_norm = params.iter().map(|x| x * x).sum::<f64>().sqrt();
    let g_norm = grads.iter().map(|x| x * x).sum::<f64>().sqrt();
    let local_rate = if w_norm > 0.0 {
        trust_coefficient * w_norm / (g_norm + EPS)
    } else {
        1.0
    };
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] + local_rate * grads[i];
        params[i] -= lr * velocity[i];
    }
    Ok(())
}

// ── train state and step ─────────────────────────────────────────────────────

/// Mutable training state: both branches plus per-block momentum buffers.
pub struct TrainState {
    pub rgb: EncoderBranch,
    pub dem: EncoderBranch,
    vel_rgb: Grads,
    vel_dem: Grads,
    pub cfg: TrainConfig,
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let rgb = init_branch(Modality::Rgb, cfg.arch, cfg.seed);
        let dem = init_branch(Modality::Dem, cfg.arch, cfg.seed);
        let vel_rgb = rgb.zero_grads();
        let vel_dem = dem.zero_grads();
        Ok(Self {
            rgb,
            dem,
            vel_rgb,
            vel_dem,
            cfg,
        })
    }
}

/// Accumulate per-patch parameter gradients with a deterministic reduction.
fn batch_grads(
    branch: &EncoderBranch,
    caches: &[ForwardCache],
    d_embeddings: &[Vec<f64>],
) -> Grads {
    let items: Vec<usize> = (0..caches.len()).collect();
    par::chunked_reduce(
        &items,
        cfg!(feature = "parallel"),
        || branch.zero_grads(),
        |acc: &mut Grads, &i| {
            let g = backward(branch, &caches[i], &d_embeddings[i])
                .expect("embedding gradients have the branch's output dim");
            for (a, b) in acc.iter_mut().zip(&g) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        },
        |acc, other| {
            for (a, b) in acc.iter_mut().zip(&other) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        },
    )
}

fn apply_update(
    branch: &mut EncoderBranch,
    grads: &Grads,
    velocity: &mut Grads,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for (block_idx, block) in branch.blocks_mut().iter_mut().enumerate() {
        match cfg.optimizer {
            Optimizer::SgdMomentum => sgd_momentum_update(
                &mut block.data,
                &grads[block_idx],
                &mut velocity[block_idx],
                cfg.learning_rate,
                cfg.momentum,
            )?,
            Optimizer::Lars => lars_update(
                &mut block.data,
                &grads[block_idx],
                &mut velocity[block_idx],
                cfg.learning_rate,
                cfg.trust_coefficient,
                cfg.momentum,
            )?,
        }
        quantize_f32(&mut block.data);
    }
    Ok(())
}

/// One optimization step on a pair batch. Returns the pre-update loss.
pub fn train_step(state: &mut TrainState, batch: &PairBatch) -> Result<f64, TrainError> {
    let n = batch.len();
    if n < 2 {
        return Err(TrainError::BatchTooSmall(n));
    }
    let parallel = cfg!(feature = "parallel");

    let rgb_passes: Vec<(Vec<f64>, ForwardCache)> = par::try_map_index(n, parallel, |i| {
        forward_cached(&state.rgb, &batch.rgb_patches[i]).map(|(e, c)| (e.vector, c))
    })?;
    let dem_passes: Vec<(Vec<f64>, ForwardCache)> = par::try_map_index(n, parallel, |i| {
        forward_cached(&state.dem, &batch.dem_patches[i]).map(|(e, c)| (e.vector, c))
    })?;
    let (rgb_embs, rgb_caches): (Vec<_>, Vec<_>) = rgb_passes.into_iter().unzip();
    let (dem_embs, dem_caches): (Vec<_>, Vec<_>) = dem_passes.into_iter().unzip();

    let loss_cfg = state.cfg.loss_config();
    let loss = nt_xent(&rgb_embs, &dem_embs, &loss_cfg)?.loss;
    let emb_grads = nt_xent_grad(&rgb_embs, &dem_embs, &loss_cfg)?;

    let rgb_grads = batch_grads(&state.rgb, &rgb_caches, &emb_grads.rgb);
    let dem_grads = batch_grads(&state.dem, &dem_caches, &emb_grads.dem);

    let cfg = state.cfg.clone();
    apply_update(&mut state.rgb, &rgb_grads, &mut state.vel_rgb, &cfg)?;
    apply_update(&mut state.dem, &dem_grads, &mut state.vel_dem, &cfg)?;
    Ok(loss)
}

// ── dataset ──────────────────────────────────────────────────────────────────

/// Normalized tile pairs with their split and the fitted statistics.
#[derive(Debug, Clone)]
pub struct TrainDataset {
    pub pairs: Vec<TilePair>,
    pub split: SplitAssignment,
    pub rgb_stats: NormalizationStats,
    pub dem_stats: NormalizationStats,
}

impl TrainDataset {
    /// Resample raw pairs to the working GSD, fit normalization statistics
    /// on the training split only, and normalize every tile.
    pub fn prepare(
        raw_pairs: Vec<TilePair>,
        split: SplitAssignment,
        target_gsd_m: f64,
    ) -> Result<Self, TrainError> {
        for pair in &raw_pairs {
            if split.split_of(&pair.pair_id).is_none() {
                return Err(TrainError::UnassignedPair(pair.pair_id.clone()));
            }
        }
        let resampled: Vec<TilePair> = raw_pairs
            .into_iter()
            .map(|p| {
                Ok(TilePair {
                    pair_id: p.pair_id,
                    rgb: resample(&p.rgb, target_gsd_m)?,
                    dem: resample(&p.dem, target_gsd_m)?,
                })
            })
            .collect::<Result<_, TrainError>>()?;

        let train_rgb: Vec<&crate::raster::RasterTile> = resampled
            .iter()
            .filter(|p| split.train.contains(&p.pair_id))
            .map(|p| &p.rgb)
            .collect();
        let train_dem: Vec<&crate::raster::RasterTile> = resampled
            .iter()
            .filter(|p| split.train.contains(&p.pair_id))
            .map(|p| &p.dem)
            .collect();
        if train_rgb.is_empty() {
            return Err(TrainError::EmptyTrainSplit);
        }
        let rgb_stats = fit_normalization(&train_rgb)?;
        let dem_stats = fit_normalization(&train_dem)?;

        let pairs: Vec<TilePair> = resampled
            .into_iter()
            .map(|p| {
                Ok(TilePair {
                    pair_id: p.pair_id,
                    rgb: normalize(&p.rgb, &rgb_stats)?,
                    dem: normalize(&p.dem, &dem_stats)?,
                })
            })
            .collect::<Result<_, TrainError>>()?;
        Ok(Self {
            pairs,
            split,
            rgb_stats,
            dem_stats,
        })
    }

    fn pairs_in<'a>(&'a self, ids: &'a std::collections::BTreeSet<String>) -> Vec<&'a TilePair> {
        self.pairs.iter().filter(|p| ids.contains(&p.pair_id)).collect()
    }
}

// ── log ──────────────────────────────────────────────────────────────────────

/// One row of the training log; validation columns are present on the steps
/// where validation ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub loss: f64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    /// Step with the highest validation Top-1 (earliest wins ties).
    pub fn best_validation_step(&self) -> Option<u64> {
        let mut best: Option<(f64, u64)> = None;
        for e in &self.entries {
            if let Some(top1) = e.top1 {
                let better = match best {
                    None => true,
                    Some((b, _)) => top1 > b,
                };
                if better {
                    best = Some((top1, e.step));
                }
            }
        }
        best.map(|(_, step)| step)
    }

    /// CSV with the fixed header `step,loss,top1,top5,seconds`.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut text = String::from("step,loss,top1,top5,seconds\n");
        for e in &self.entries {
            let top1 = e.top1.map(|v| format!("{v:.6}")).unwrap_or_default();
            let top5 = e.top5.map(|v| format!("{v:.6}")).unwrap_or_default();
            text.push_str(&format!(
                "{},{:.9e},{},{},{:.6}\n",
                e.step, e.loss, top1, top5, e.seconds
            ));
        }
        std::fs::write(path, text)
    }
}

// ── full training loop ───────────────────────────────────────────────────────

/// Everything `train` produces: final and best-validation checkpoints plus
/// the per-step log.
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub best_step: Option<u64>,
    pub log: TrainLog,
}

struct AnchorPool {
    /// (pair index, anchor row, anchor col)
    entries: Vec<(usize, usize, usize)>,
}

fn build_pool(
    dataset: &TrainDataset,
    cfg: &TrainConfig,
) -> Result<(AnchorPool, BTreeMap<usize, PatchGrid>), TrainError> {
    let mut entries = Vec::new();
    let mut grids = BTreeMap::new();
    for (idx, pair) in dataset.pairs.iter().enumerate() {
        if !dataset.split.train.contains(&pair.pair_id) {
            continue;
        }
        let grid = generate_grid(&pair.rgb, cfg.patch_m, cfg.stride_m)?;
        let dem_grid = generate_grid(&pair.dem, cfg.patch_m, cfg.stride_m)?;
        debug_assert!(grid.same_lattice(&dem_grid));
        for i in 0..grid.len() {
            let (r, c) = grid.anchor(i);
            entries.push((idx, r, c));
        }
        grids.insert(idx, grid);
    }
    if entries.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    Ok((AnchorPool { entries }, grids))
}

fn assemble_batch(
    dataset: &TrainDataset,
    pool: &AnchorPool,
    picks: &[usize],
    patch_px: usize,
) -> Result<PairBatch, TrainError> {
    let mut batch = PairBatch {
        rgb_patches: Vec::with_capacity(picks.len()),
        dem_patches: Vec::with_capacity(picks.len()),
        locations: Vec::with_capacity(picks.len()),
    };
    for &p in picks {
        let (pair_idx, row, col) = pool.entries[p];
        let pair = &dataset.pairs[pair_idx];
        batch
            .rgb_patches
            .push(extract_patch(&pair.rgb, (row, col), patch_px)?);
        batch
            .dem_patches
            .push(extract_patch(&pair.dem, (row, col), patch_px)?);
        batch.locations.push(PairLocation {
            rgb_tile_id: pair.rgb.id.clone(),
            dem_tile_id: pair.dem.id.clone(),
            row_px: row,
            col_px: col,
        });
    }
    Ok(batch)
}

/// Score the current branches on every anchor of every validation tile.
/// Returns `(top1, top5, n_queries)`.
pub fn validate_branches(
    dataset: &TrainDataset,
    rgb: &EncoderBranch,
    dem: &EncoderBranch,
    cfg: &TrainConfig,
) -> Result<Option<(f64, f64, usize)>, TrainError> {
    let val_pairs = dataset.pairs_in(&dataset.split.val);
    if val_pairs.is_empty() {
        return Ok(None);
    }
    let mut n_top1 = 0usize;
    let mut n_top5 = 0usize;
    let mut n = 0usize;
    for pair in val_pairs {
        assert_no_leakage(&dataset.split, &pair.pair_id, "validation feature map")?;
        let grid = generate_grid(&pair.rgb, cfg.patch_m, cfg.stride_m)?;
        let map = build_feature_map(&pair.rgb, &grid, rgb)?;
        let queries: Vec<EvalQuery> = (0..grid.len())
            .map(|i| {
                let anchor = grid.anchor(i);
                Ok(EvalQuery {
                    patch: extract_patch(&pair.dem, anchor, grid.patch_px)?,
                    true_cell: (i / grid.cols, i % grid.cols),
                })
            })
            .collect::<Result<_, TrainError>>()?;
        let report = evaluate(&queries, dem, &map)?;
        n_top1 += report.n_top1;
        n_top5 += report.n_top5;
        n += report.n_queries;
    }
    Ok(Some((n_top1 as f64 / n as f64, n_top5 as f64 / n as f64, n)))
}

fn make_checkpoint(
    state: &TrainState,
    dataset: &TrainDataset,
    step: u64,
) -> Result<Checkpoint, TrainError> {
    Ok(Checkpoint::new(
        state.rgb.clone(),
        state.dem.clone(),
        Some(dataset.rgb_stats.clone()),
        Some(dataset.dem_stats.clone()),
        step,
        serde_json::to_value(&state.cfg).expect("config serializes"),
    )?)
}

/// Run the full training loop over the dataset's training split, validating
/// every `eval_every` steps and at the final step.
pub fn train(dataset: &TrainDataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    for pair in &dataset.pairs {
        if !pair.rgb.normalized {
            return Err(TrainError::NotNormalized(pair.rgb.id.clone()));
        }
        if !pair.dem.normalized {
            return Err(TrainError::NotNormalized(pair.dem.id.clone()));
        }
    }
    let (pool, grids) = build_pool(dataset, cfg)?;
    if pool.entries.len() < cfg.batch_size {
        return Err(TrainError::PoolTooSmall {
            available: pool.entries.len(),
            needed: cfg.batch_size,
        });
    }
    let patch_px = grids.values().next().expect("pool non-empty").patch_px;

    let mut state = TrainState::new(cfg.clone())?;
    let mut rng = rng_stream(cfg.seed, "train-batches");
    let mut log = TrainLog::default();
    let mut best: Option<(f64, u64, Checkpoint)> = None;

    for step in 1..=cfg.steps {
        let t0 = Instant::now();
        let picks = sample_without_replacement(pool.entries.len(), cfg.batch_size, &mut rng);
        let batch = assemble_batch(dataset, &pool, &picks, patch_px)?;
        let loss = train_step(&mut state, &batch)?;
        debug_assert!(loss >= 0.0 && loss.is_finite(), "loss {loss} out of range");

        let mut entry = TrainLogEntry {
            step,
            loss,
            top1: None,
            top5: None,
            seconds: 0.0,
        };
        if step % cfg.eval_every == 0 || step == cfg.steps {
            if let Some((top1, top5, _)) = validate_branches(dataset, &state.rgb, &state.dem, cfg)? {
                entry.top1 = Some(top1);
                entry.top5 = Some(top5);
                let better = match &best {
                    None => true,
                    Some((b, _, _)) => top1 > *b,
                };
                if better {
                    best = Some((top1, step, make_checkpoint(&state, dataset, step)?));
                }
            }
        }
        entry.seconds = t0.elapsed().as_secs_f64();
        log.entries.push(entry);
    }

    let final_checkpoint = make_checkpoint(&state, dataset, cfg.steps)?;
    let (best_step, best_checkpoint) = match best {
        Some((_, step, ckpt)) => (Some(step), ckpt),
        None => (None, final_checkpoint.clone()),
    };
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint,
        best_step,
        log,
    })
}
