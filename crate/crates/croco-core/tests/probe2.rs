// Temporary A10 calibration probe; deleted before final delivery.
use std::time::Instant;

use croco_core::raster::TilePair;
use croco_core::sampling::{assign_splits, Split};
use croco_core::synthgen::{generate_scene, SceneSpec};
use croco_core::trainer::{train, Optimizer, TrainConfig, TrainDataset};

fn dataset(scene_seed: u64, train_rows: usize) -> TrainDataset {
    let spec = SceneSpec {
        seed: scene_seed,
        size_px: 256,
        gsd_m: 0.5,
        n_structures: 24,
        terrain_smoothness: 24.0,
        texture_noise: 0.05,
    };
    let pair = generate_scene(&spec).unwrap();
    let h = 256;
    let pairs = vec![
        TilePair {
            pair_id: "train".into(),
            rgb: pair.rgb.crop("train-rgb", 0, 0, train_rows, 256).unwrap(),
            dem: pair.dem.crop("train-dem", 0, 0, train_rows, 256).unwrap(),
        },
        TilePair {
            pair_id: "val".into(),
            rgb: pair.rgb.crop("val-rgb", train_rows, 0, h - train_rows, 256).unwrap(),
            dem: pair.dem.crop("val-dem", train_rows, 0, h - train_rows, 256).unwrap(),
        },
    ];
    let split = assign_splits(
        &["train".into(), "val".into()],
        &[("train".into(), Split::Train), ("val".into(), Split::Val)],
    )
    .unwrap();
    TrainDataset::prepare(pairs, split, 0.5).unwrap()
}

fn run_arm(ds: &TrainDataset, batch: usize, patch_m: f64, steps: u64, seed: u64) -> (f64, f64, f64) {
    let lr = std::env::var("PROBE_LR").ok().and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let trust = std::env::var("PROBE_TRUST").ok().and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let cfg = TrainConfig {
        batch_size: batch,
        steps,
        learning_rate: lr,
        momentum: 0.9,
        optimizer: Optimizer::Lars,
        trust_coefficient: trust,
        temperature: 0.2,
        patch_m,
        stride_m: 4.0,
        gsd_m: 0.5,
        seed,
        eval_every: steps,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train(ds, &cfg).unwrap();
    let wall = t0.elapsed().as_secs_f64();
    let losses: Vec<f64> = out.log.entries.iter().map(|e| e.loss).collect();
    let every = (losses.len() / 8).max(1);
    let trace: Vec<f64> = losses.iter().step_by(every).map(|l| (l * 100.0).round() / 100.0).collect();
    println!("    loss trace: {trace:?}");
    let last = out.log.entries.iter().rev().find_map(|e| e.top1.map(|t| (t, e.top5.unwrap()))).unwrap();
    (last.0, last.1, wall)
}

#[test]
#[ignore]
fn probe_batch_trend() {
    let ds = dataset(11, 192);
    for seed in [1u64, 2] {
        let small = run_arm(&ds, 8, 8.0, 200, seed);
        let large = run_arm(&ds, 64, 8.0, 200, seed);
        println!("seed={seed} batch8 -> {small:?}  batch64 -> {large:?}");
    }
}

#[test]
#[ignore]
fn probe_patch_trend() {
    let ds = dataset(12, 160);
    let steps: u64 = std::env::var("PROBE_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(200);
    for seed in [1u64] {
        let large = run_arm(&ds, 8, 32.0, steps, seed);
        println!("seed={seed} patch32m -> {large:?}");
        let small = run_arm(&ds, 8, 8.0, steps, seed);
        println!("seed={seed} patch8m -> {small:?}");
    }
}
