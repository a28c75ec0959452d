//! Run configuration: a TOML config file plus `--kebab-case` flag overrides,
//! resolved into one struct that is persisted verbatim into the run
//! directory so any run can be reproduced from its artifacts.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use croco_core::contrastive::NegativeSet;
use croco_core::encoder::Arch;
use croco_core::trainer::{Optimizer, TrainConfig};

use crate::CliError;

/// Optional overrides shared by `train` and `ablate`; every field mirrors a
/// config-file key.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<Optimizer>,
    #[arg(long)]
    pub trust_coefficient: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_parser = parse_negative_set)]
    pub negative_set: Option<NegativeSet>,
    #[arg(long)]
    pub patch_m: Option<f64>,
    #[arg(long)]
    pub stride_m: Option<f64>,
    #[arg(long)]
    pub gsd_m: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long, value_parser = parse_arch)]
    pub arch: Option<Arch>,
}

fn parse_optimizer(s: &str) -> Result<Optimizer, String> {
    match s {
        "sgd_momentum" => Ok(Optimizer::SgdMomentum),
        "lars" => Ok(Optimizer::Lars),
        other => Err(format!("unknown optimizer {other:?} (sgd_momentum | lars)")),
    }
}

fn parse_negative_set(s: &str) -> Result<NegativeSet, String> {
    match s {
        "all_2n" => Ok(NegativeSet::All2N),
        "cross_modal_only" => Ok(NegativeSet::CrossModalOnly),
        other => Err(format!(
            "unknown negative set {other:?} (all_2n | cross_modal_only)"
        )),
    }
}

pub fn parse_arch(s: &str) -> Result<Arch, String> {
    match s {
        "desk" => Ok(Arch::Desk),
        "deep" => Ok(Arch::Deep),
        other => Err(format!("unknown arch {other:?} (desk | deep)")),
    }
}

/// Config-file schema: every key optional, flat TOML.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub batch_size: Option<usize>,
    pub steps: Option<u64>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub optimizer: Option<Optimizer>,
    pub trust_coefficient: Option<f64>,
    pub tau: Option<f64>,
    pub negative_set: Option<NegativeSet>,
    pub patch_m: Option<f64>,
    pub stride_m: Option<f64>,
    pub gsd_m: Option<f64>,
    pub seed: Option<u64>,
    pub eval_every: Option<u64>,
    pub arch: Option<Arch>,
    pub data_dir: Option<PathBuf>,
    pub splits: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .map_err(|e| CliError::Usage(format!("{e:#}")))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// The fully resolved configuration persisted as `config.resolved`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub splits: PathBuf,
}

/// defaults <- file <- flags.
pub fn resolve(
    file: &FileConfig,
    flags: &TrainFlags,
    data_dir: Option<&Path>,
    splits: Option<&Path>,
) -> Result<RunConfig, CliError> {
    let d = TrainConfig::default();
    let train = TrainConfig {
        batch_size: flags.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        steps: flags.steps.or(file.steps).unwrap_or(d.steps),
        learning_rate: flags
            .learning_rate
            .or(file.learning_rate)
            .unwrap_or(d.learning_rate),
        momentum: flags.momentum.or(file.momentum).unwrap_or(d.momentum),
        optimizer: flags.optimizer.or(file.optimizer).unwrap_or(d.optimizer),
        trust_coefficient: flags
            .trust_coefficient
            .or(file.trust_coefficient)
            .unwrap_or(d.trust_coefficient),
        temperature: flags.tau.or(file.tau).unwrap_or(d.temperature),
        negative_set: flags
            .negative_set
            .or(file.negative_set)
            .unwrap_or(d.negative_set),
        patch_m: flags.patch_m.or(file.patch_m).unwrap_or(d.patch_m),
        stride_m: flags.stride_m.or(file.stride_m).unwrap_or(d.stride_m),
        gsd_m: flags.gsd_m.or(file.gsd_m).unwrap_or(d.gsd_m),
        seed: flags.seed.or(file.seed).unwrap_or(d.seed),
        eval_every: flags.eval_every.or(file.eval_every).unwrap_or(d.eval_every),
        arch: flags.arch.or(file.arch).unwrap_or(d.arch),
    };
    let data_dir = data_dir
        .map(Path::to_path_buf)
        .or_else(|| file.data_dir.clone())
        .ok_or_else(|| CliError::Usage("no data dir: pass --data-dir or set data_dir".into()))?;
    let splits = splits
        .map(Path::to_path_buf)
        .or_else(|| file.splits.clone())
        .ok_or_else(|| CliError::Usage("no split spec: pass --splits or set splits".into()))?;
    Ok(RunConfig {
        train,
        data_dir,
        splits,
    })
}

impl RunConfig {
    pub fn write_resolved(&self, run_dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(run_dir)
            .with_context(|| format!("cannot create {}", run_dir.display()))
            .map_err(CliError::runtime)?;
        let path = run_dir.join("config.resolved");
        let text = toml::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(CliError::runtime)?;
        Ok(path)
    }
}
