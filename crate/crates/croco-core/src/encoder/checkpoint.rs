//! Versioned binary checkpoints holding both branches, the normalization
//! statistics and a training-config snapshot.
//!
//! Layout: 9 magic bytes, version u32 LE, header length u32 LE, JSON header,
//! then every parameter block as little-endian float32 (RGB branch first,
//! then the elevation branch). Branch parameters are float32-representable
//! by construction, so save/load round-trips are bit-exact and a loaded
//! checkpoint reproduces every forward output exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::raster::{Modality, NormalizationStats};

use super::{hex_digest, Arch, EncoderBranch, ParamBlock};

pub const CKPT_MAGIC: &[u8; 9] = b"CROCOCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("checkpoint header is invalid: {0}")]
    Header(String),
    #[error("parameter blocks do not match the declared layout: {0}")]
    BlockMismatch(String),
    #[error("branches must share one architecture, got {0} and {1}")]
    MixedArch(Arch, Arch),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockMeta {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    arch: Arch,
    step: u64,
    rgb_stats: Option<NormalizationStats>,
    dem_stats: Option<NormalizationStats>,
    config: serde_json::Value,
    blocks: Vec<BlockMeta>,
}

/// A trained (or in-training) model state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub rgb: EncoderBranch,
    pub dem: EncoderBranch,
    pub rgb_stats: Option<NormalizationStats>,
    pub dem_stats: Option<NormalizationStats>,
    pub step: u64,
    /// Opaque snapshot of the training configuration that produced this
    /// state; the trainer owns the schema.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(
        rgb: EncoderBranch,
        dem: EncoderBranch,
        rgb_stats: Option<NormalizationStats>,
        dem_stats: Option<NormalizationStats>,
        step: u64,
        config: serde_json::Value,
    ) -> Result<Self, CheckpointError> {
        if rgb.arch != dem.arch {
            return Err(CheckpointError::MixedArch(rgb.arch, dem.arch));
        }
        Ok(Self {
            rgb,
            dem,
            rgb_stats,
            dem_stats,
            step,
            config,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            arch: self.rgb.arch,
            step: self.step,
            rgb_stats: self.rgb_stats.clone(),
            dem_stats: self.dem_stats.clone(),
            config: self.config.clone(),
            blocks: self
                .rgb
                .blocks()
                .iter()
                .map(|b| BlockMeta {
                    name: b.name.clone(),
                    len: b.data.len(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let param_count: usize = self
            .rgb
            .blocks()
            .iter()
            .chain(self.dem.blocks().iter())
            .map(|b| b.data.len())
            .sum();
        let mut out = Vec::with_capacity(17 + header_bytes.len() + param_count * 4);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for block in self.rgb.blocks().iter().chain(self.dem.blocks().iter()) {
            for &v in &block.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 17 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[0..9] != CKPT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
        let header_end = 17usize.checked_add(header_len).ok_or(CheckpointError::Truncated)?;
        if bytes.len() < header_end {
            return Err(CheckpointError::Truncated);
        }
        let header: Header = serde_json::from_slice(&bytes[17..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;

        let branch_params: usize = header.blocks.iter().map(|b| b.len).sum();
        let expected_len = header_end + 2 * branch_params * 4;
        if bytes.len() != expected_len {
            return Err(CheckpointError::Truncated);
        }

        let mut offset = header_end;
        let mut read_branch = |modality: Modality| -> Result<EncoderBranch, CheckpointError> {
            let mut blocks = Vec::with_capacity(header.blocks.len());
            for meta in &header.blocks {
                let n_bytes = meta.len * 4;
                let data: Vec<f64> = bytes[offset..offset + n_bytes]
                    .chunks_exact(4)
                    .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                    .collect();
                offset += n_bytes;
                blocks.push(ParamBlock {
                    name: meta.name.clone(),
                    data,
                });
            }
            EncoderBranch::from_blocks(modality, header.arch, blocks)
        };
        let rgb = read_branch(Modality::Rgb)?;
        let dem = read_branch(Modality::Dem)?;
        Ok(Self {
            rgb,
            dem,
            rgb_stats: header.rgb_stats,
            dem_stats: header.dem_stats,
            step: header.step,
            config: header.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| CheckpointError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized bytes; stamped into feature maps built from
    /// this checkpoint.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_bytes());
        hex_digest(hasher)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{forward, init_branch};
    use crate::raster::Modality;
    use crate::sampling::Patch;
    use crate::seeded::rng_stream;
    use rand::Rng;

    fn sample_checkpoint() -> Checkpoint {
        Checkpoint::new(
            init_branch(Modality::Rgb, Arch::Desk, 4),
            init_branch(Modality::Dem, Arch::Desk, 4),
            None,
            Some(NormalizationStats {
                mean: [1.0, 2.0, 3.0],
                std: [0.5, 0.25, 2.0],
                modality: Modality::Dem,
            }),
            42,
            serde_json::json!({"steps": 10, "batch_size": 8}),
        )
        .unwrap()
    }

    fn patch(seed: u64) -> Patch {
        let mut rng = rng_stream(seed, "ckpt-patch");
        Patch {
            channels: 3,
            side: 16,
            data: (0..3 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact_and_preserves_forwards() {
        let ckpt = sample_checkpoint();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt.rgb, back.rgb);
        assert_eq!(ckpt.dem, back.dem);
        assert_eq!(ckpt.dem_stats, back.dem_stats);
        assert_eq!(ckpt.step, back.step);
        assert_eq!(bytes, back.to_bytes());

        let p = patch(9);
        let before = forward(&ckpt.rgb, &p).unwrap();
        let after = forward(&back.rgb, &p).unwrap();
        for (a, b) in before.vector.iter().zip(&after.vector) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn file_round_trip_and_fingerprint_stability() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt.fingerprint(), back.fingerprint());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample_checkpoint().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated)
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..20]),
            Err(CheckpointError::Truncated)
        ));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes[9..13].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion(99))
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Truncated)
        ));
    }
}
