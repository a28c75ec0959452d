//! The two branch networks: a convolutional backbone plus a single affine
//! projection head mapping into the 128-dimensional descriptor space.
//!
//! Branches never share parameter storage; the RGB and elevation networks
//! are initialized and updated independently. Two backbones are provided
//! behind the same interface: the default `desk` stack (four stride-2
//! 3x3 blocks, widths 32/64/128/256) small enough to train on a CPU in
//! minutes, and a `deep` residual stack in the ResNet-18 depth class.
//! Inference always runs the full network including the projection head.
//!
//! Parameter values are kept float32-representable (initialization and
//! every optimizer update round to the nearest f32), so the float32
//! checkpoint payload round-trips bit-exactly while forward math runs in f64.

mod checkpoint;
mod layers;

pub use checkpoint::{Checkpoint, CheckpointError, CKPT_MAGIC, CKPT_VERSION};

use serde::{Deserialize, Serialize};

use crate::par;
use crate::raster::Modality;
use crate::sampling::Patch;
use crate::seeded::{quantize_f32, rng_stream};
use layers::{
    conv_backward, conv_forward, gap_backward, gap_forward, linear_backward, linear_forward,
    relu_backward, relu_in_place, ConvSpec, Grid3,
};
use rand::Rng;

/// Descriptor dimensionality of both branches.
pub const EMBED_DIM: usize = 128;

/// Patch sides the backbones accept.
pub const SUPPORTED_PATCH_SIZES: [usize; 4] = [8, 16, 32, 64];

const DESK_WIDTHS: [usize; 4] = [32, 64, 128, 256];
const DEEP_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const DEEP_BLOCKS_PER_STAGE: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("unsupported patch size {0}; supported: {SUPPORTED_PATCH_SIZES:?}")]
    UnsupportedPatchSize(usize),
    #[error("patch must have 3 channels, got {0}")]
    BadPatchChannels(usize),
    #[error("patch contains non-finite values")]
    NonFinitePatch,
    #[error("embedding is the zero vector and cannot be normalized")]
    ZeroEmbedding,
    #[error("gradient blocks do not match parameter blocks: {0}")]
    GradShapeMismatch(String),
}

/// Backbone selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Four stride-2 conv blocks; the default CPU-scale backbone.
    Desk,
    /// Residual backbone in the ResNet-18 depth class.
    Deep,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::Desk => write!(f, "desk"),
            Arch::Deep => write!(f, "deep"),
        }
    }
}

/// One named parameter block (a conv/linear weight tensor or a bias vector).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub data: Vec<f64>,
}

/// A branch descriptor vector produced by `forward`; normalization is
/// explicit and tracked.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub normalized: bool,
}

impl Embedding {
    pub fn raw(vector: Vec<f64>) -> Self {
        Self {
            vector,
            normalized: false,
        }
    }

    /// L2-normalize; errors on the zero vector.
    pub fn normalize(&self) -> Result<Embedding, EncoderError> {
        let norm = self.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EncoderError::ZeroEmbedding);
        }
        Ok(Embedding {
            vector: self.vector.iter().map(|x| x / norm).collect(),
            normalized: true,
        })
    }
}

/// Anything that maps a patch to a descriptor: a trained branch or a test
/// oracle.
pub trait Encoder: Sync {
    fn modality(&self) -> Modality;
    fn dim(&self) -> usize;
    fn embed(&self, patch: &Patch) -> Result<Embedding, EncoderError>;
    /// Identity of the parameters behind this encoder, stamped into feature
    /// maps so stale map/checkpoint combinations are detectable.
    fn fingerprint(&self) -> String;
}

// ── parameter layout ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
enum ParamKind {
    ConvWeight(ConvSpec),
    Bias(usize),
    LinearWeight { in_dim: usize, out_dim: usize },
}

impl ParamKind {
    fn len(&self) -> usize {
        match self {
            ParamKind::ConvWeight(spec) => spec.weight_len(),
            ParamKind::Bias(len) => *len,
            ParamKind::LinearWeight { in_dim, out_dim } => in_dim * out_dim,
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            ParamKind::ConvWeight(spec) => spec.in_ch * spec.kernel * spec.kernel,
            ParamKind::Bias(_) => 0,
            ParamKind::LinearWeight { in_dim, .. } => *in_dim,
        }
    }
}

fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> ConvSpec {
    ConvSpec {
        in_ch,
        out_ch,
        kernel,
        stride,
    }
}

fn param_layout(arch: Arch) -> Vec<(String, ParamKind)> {
    let mut layout = Vec::new();
    let push_conv = |layout: &mut Vec<(String, ParamKind)>, name: &str, spec: ConvSpec| {
        layout.push((format!("{name}.weight"), ParamKind::ConvWeight(spec)));
        layout.push((format!("{name}.bias"), ParamKind::Bias(spec.out_ch)));
    };
    match arch {
        Arch::Desk => {
            let mut in_ch = 3;
            for (i, &width) in DESK_WIDTHS.iter().enumerate() {
                push_conv(&mut layout, &format!("conv{}", i + 1), conv(in_ch, width, 3, 2));
                in_ch = width;
            }
            layout.push((
                "proj.weight".into(),
                ParamKind::LinearWeight {
                    in_dim: DESK_WIDTHS[3],
                    out_dim: EMBED_DIM,
                },
            ));
            layout.push(("proj.bias".into(), ParamKind::Bias(EMBED_DIM)));
        }
        Arch::Deep => {
            push_conv(&mut layout, "stem", conv(3, DEEP_WIDTHS[0], 3, 1));
            let mut in_ch = DEEP_WIDTHS[0];
            for (stage, &width) in DEEP_WIDTHS.iter().enumerate() {
                for block in 0..DEEP_BLOCKS_PER_STAGE {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    let name = format!("s{}b{}", stage + 1, block + 1);
                    push_conv(&mut layout, &format!("{name}.conv1"), conv(in_ch, width, 3, stride));
                    push_conv(&mut layout, &format!("{name}.conv2"), conv(width, width, 3, 1));
                    if stride != 1 || in_ch != width {
                        push_conv(&mut layout, &format!("{name}.skip"), conv(in_ch, width, 1, stride));
                    }
                    in_ch = width;
                }
            }
            layout.push((
                "proj.weight".into(),
                ParamKind::LinearWeight {
                    in_dim: DEEP_WIDTHS[3],
                    out_dim: EMBED_DIM,
                },
            ));
            layout.push(("proj.bias".into(), ParamKind::Bias(EMBED_DIM)));
        }
    }
    layout
}

// ── branch ───────────────────────────────────────────────────────────────────

/// Parameters of one branch: backbone plus projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBranch {
    pub modality: Modality,
    pub arch: Arch,
    blocks: Vec<ParamBlock>,
}

/// Per-block gradients aligned with [`EncoderBranch::blocks`].
pub type Grads = Vec<Vec<f64>>;

/// Deterministically initialize one branch: fan-in-scaled uniform weights,
/// zero biases. Same arguments give bit-identical parameters; the two
/// modalities draw from separate streams.
pub fn init_branch(modality: Modality, arch: Arch, seed: u64) -> EncoderBranch {
    let mut rng = rng_stream(seed, &format!("init-{modality}"));
    let mut blocks = Vec::new();
    for (name, kind) in param_layout(arch) {
        let mut data = match kind {
            ParamKind::Bias(len) => vec![0.0f64; len],
            _ => {
                let bound = (6.0 / kind.fan_in() as f64).sqrt();
                (0..kind.len()).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        quantize_f32(&mut data);
        blocks.push(ParamBlock { name, data });
    }
    EncoderBranch {
        modality,
        arch,
        blocks,
    }
}

impl EncoderBranch {
    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    /// Mutable access for optimizers; callers must preserve block shapes.
    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub(crate) fn from_blocks(
        modality: Modality,
        arch: Arch,
        blocks: Vec<ParamBlock>,
    ) -> Result<Self, CheckpointError> {
        let layout = param_layout(arch);
        if layout.len() != blocks.len() {
            return Err(CheckpointError::BlockMismatch(format!(
                "expected {} blocks, got {}",
                layout.len(),
                blocks.len()
            )));
        }
        for ((name, kind), block) in layout.iter().zip(&blocks) {
            if *name != block.name || kind.len() != block.data.len() {
                return Err(CheckpointError::BlockMismatch(format!(
                    "block {} (len {}) does not match layout entry {} (len {})",
                    block.name,
                    block.data.len(),
                    name,
                    kind.len()
                )));
            }
        }
        Ok(Self {
            modality,
            arch,
            blocks,
        })
    }

    /// Zero gradients shaped like this branch.
    pub fn zero_grads(&self) -> Grads {
        self.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect()
    }

    fn block(&self, idx: usize) -> &[f64] {
        &self.blocks[idx].data
    }
}

fn validate_patch(patch: &Patch) -> Result<(), EncoderError> {
    if patch.channels != 3 {
        return Err(EncoderError::BadPatchChannels(patch.channels));
    }
    if !SUPPORTED_PATCH_SIZES.contains(&patch.side) {
        return Err(EncoderError::UnsupportedPatchSize(patch.side));
    }
    if patch.data.iter().any(|v| !v.is_finite()) {
        return Err(EncoderError::NonFinitePatch);
    }
    Ok(())
}

fn patch_grid(patch: &Patch) -> Grid3 {
    Grid3 {
        ch: patch.channels,
        h: patch.side,
        w: patch.side,
        data: patch.data.clone(),
    }
}

/// Activation record of one forward pass, consumed by [`backward`].
pub struct ForwardCache {
    grids: Vec<Grid3>,
    pooled: Vec<f64>,
}

/// Run one patch through a branch. The output is *not* normalized;
/// normalization happens inside similarity scoring and at feature-map build.
pub fn forward(branch: &EncoderBranch, patch: &Patch) -> Result<Embedding, EncoderError> {
    validate_patch(patch)?;
    let (z, _) = run_forward(branch, patch, false);
    Ok(Embedding::raw(z))
}

/// Forward pass that records activations for the reverse pass.
pub fn forward_cached(
    branch: &EncoderBranch,
    patch: &Patch,
) -> Result<(Embedding, ForwardCache), EncoderError> {
    validate_patch(patch)?;
    let (z, cache) = run_forward(branch, patch, true);
    Ok((Embedding::raw(z), cache.expect("cache requested")))
}

fn run_forward(
    branch: &EncoderBranch,
    patch: &Patch,
    keep_cache: bool,
) -> (Vec<f64>, Option<ForwardCache>) {
    let mut grids: Vec<Grid3> = Vec::new();
    let mut x = patch_grid(patch);
    let layout = param_layout(branch.arch);

    match branch.arch {
        Arch::Desk => {
            if keep_cache {
                grids.push(x.clone());
            }
            for i in 0..4 {
                let ParamKind::ConvWeight(spec) = layout[2 * i].1 else {
                    unreachable!()
                };
                let mut y = conv_forward(&spec, branch.block(2 * i), branch.block(2 * i + 1), &x);
                relu_in_place(&mut y);
                if keep_cache {
                    grids.push(y.clone());
                }
                x = y;
            }
        }
        Arch::Deep => {
            if keep_cache {
                grids.push(x.clone());
            }
            let mut idx = 0;
            let ParamKind::ConvWeight(stem) = layout[idx].1 else {
                unreachable!()
            };
            let mut y = conv_forward(&stem, branch.block(idx), branch.block(idx + 1), &x);
            relu_in_place(&mut y);
            idx += 2;
            if keep_cache {
                grids.push(y.clone());
            }
            x = y;
            while idx < layout.len() - 2 {
                let ParamKind::ConvWeight(spec1) = layout[idx].1 else {
                    unreachable!()
                };
                let mut a = conv_forward(&spec1, branch.block(idx), branch.block(idx + 1), &x);
                relu_in_place(&mut a);
                let ParamKind::ConvWeight(spec2) = layout[idx + 2].1 else {
                    unreachable!()
                };
                let mut out = conv_forward(&spec2, branch.block(idx + 2), branch.block(idx + 3), &a);
                let has_skip = layout
                    .get(idx + 4)
                    .map(|(name, _)| name.ends_with("skip.weight"))
                    .unwrap_or(false);
                if has_skip {
                    let ParamKind::ConvWeight(skip) = layout[idx + 4].1 else {
                        unreachable!()
                    };
                    let sc = conv_forward(&skip, branch.block(idx + 4), branch.block(idx + 5), &x);
                    for (o, s) in out.data.iter_mut().zip(&sc.data) {
                        *o += s;
                    }
                    idx += 6;
                } else {
                    for (o, s) in out.data.iter_mut().zip(&x.data) {
                        *o += s;
                    }
                    idx += 4;
                }
                relu_in_place(&mut out);
                if keep_cache {
                    grids.push(a.clone());
                    grids.push(out.clone());
                } else {
                    drop(a);
                }
                x = out;
            }
        }
    }

    let pooled = gap_forward(&x);
    let n = layout.len();
    let proj_w = branch.block(n - 2);
    let proj_b = branch.block(n - 1);
    let z = linear_forward(proj_w, proj_b, &pooled);
    let cache = keep_cache.then_some(ForwardCache { grids, pooled });
    (z, cache)
}

/// Reverse pass: parameter gradients for one patch given the loss gradient
/// w.r.t. its raw embedding.
pub fn backward(
    branch: &EncoderBranch,
    cache: &ForwardCache,
    d_embedding: &[f64],
) -> Result<Grads, EncoderError> {
    if d_embedding.len() != EMBED_DIM {
        return Err(EncoderError::GradShapeMismatch(format!(
            "d_embedding has len {}, expected {EMBED_DIM}",
            d_embedding.len()
        )));
    }
    let layout = param_layout(branch.arch);
    let n = layout.len();
    let mut grads = branch.zero_grads();

    let (d_proj_w, d_proj_b, d_pooled) =
        linear_backward(branch.block(n - 2), &cache.pooled, d_embedding);
    grads[n - 2] = d_proj_w;
    grads[n - 1] = d_proj_b;

    let last = cache.grids.last().expect("cache has activations");
    let mut d_x = gap_backward(&d_pooled, last.ch, last.h, last.w);

    match branch.arch {
        Arch::Desk => {
            // grids: [input, act1, act2, act3, act4]
            for i in (0..4).rev() {
                let post = &cache.grids[i + 1];
                let d_post = relu_backward(post, &d_x);
                let ParamKind::ConvWeight(spec) = layout[2 * i].1 else {
                    unreachable!()
                };
                let (d_w, d_b, d_in) =
                    conv_backward(&spec, branch.block(2 * i), &cache.grids[i], &d_post);
                grads[2 * i] = d_w;
                grads[2 * i + 1] = d_b;
                d_x = d_in;
            }
        }
        Arch::Deep => {
            // grids: [input, stem_act, (a, y) per block]; rebuild the block
            // index ranges by walking the layout forward once.
            struct BlockIdx {
                base: usize,
                has_skip: bool,
            }
            let mut blocks_idx = Vec::new();
            let mut idx = 2;
            while idx < n - 2 {
                let has_skip = layout
                    .get(idx + 4)
                    .map(|(name, _)| name.ends_with("skip.weight"))
                    .unwrap_or(false);
                blocks_idx.push(BlockIdx {
                    base: idx,
                    has_skip,
                });
                idx += if has_skip { 6 } else { 4 };
            }

            for (b, binfo) in blocks_idx.iter().enumerate().rev() {
                let x_in = if b == 0 { &cache.grids[1] } else { &cache.grids[1 + 2 * b] };
                let a = &cache.grids[2 + 2 * b];
                let y = &cache.grids[3 + 2 * b];
                let d_sum = relu_backward(y, &d_x);

                let ParamKind::ConvWeight(spec2) = layout[binfo.base + 2].1 else {
                    unreachable!()
                };
                let (d_w2, d_b2, d_a_post) =
                    conv_backward(&spec2, branch.block(binfo.base + 2), a, &d_sum);
                grads[binfo.base + 2] = d_w2;
                grads[binfo.base + 3] = d_b2;

                let d_a = relu_backward(a, &d_a_post);
                let ParamKind::ConvWeight(spec1) = layout[binfo.base].1 else {
                    unreachable!()
                };
                let (d_w1, d_b1, mut d_in) =
                    conv_backward(&spec1, branch.block(binfo.base), x_in, &d_a);
                grads[binfo.base] = d_w1;
                grads[binfo.base + 1] = d_b1;

                if binfo.has_skip {
                    let ParamKind::ConvWeight(skip) = layout[binfo.base + 4].1 else {
                        unreachable!()
                    };
                    let (d_ws, d_bs, d_in_skip) =
                        conv_backward(&skip, branch.block(binfo.base + 4), x_in, &d_sum);
                    grads[binfo.base + 4] = d_ws;
                    grads[binfo.base + 5] = d_bs;
                    for (acc, v) in d_in.data.iter_mut().zip(&d_in_skip.data) {
                        *acc += v;
                    }
                } else {
                    for (acc, v) in d_in.data.iter_mut().zip(&d_sum.data) {
                        *acc += v;
                    }
                }
                d_x = d_in;
            }

            let stem_act = &cache.grids[1];
            let d_post = relu_backward(stem_act, &d_x);
            let ParamKind::ConvWeight(stem) = layout[0].1 else {
                unreachable!()
            };
            let (d_w, d_b, _) = conv_backward(&stem, branch.block(0), &cache.grids[0], &d_post);
            grads[0] = d_w;
            grads[1] = d_b;
        }
    }
    Ok(grads)
}

/// Encode a batch of patches; the default build runs patches in parallel,
/// element i always equals an independent `forward` of patch i.
pub fn forward_batch(
    branch: &EncoderBranch,
    patches: &[Patch],
) -> Result<Vec<Embedding>, EncoderError> {
    forward_batch_inner(branch, patches, true)
}

/// Sequential reference twin of [`forward_batch`].
pub fn forward_batch_seq(
    branch: &EncoderBranch,
    patches: &[Patch],
) -> Result<Vec<Embedding>, EncoderError> {
    forward_batch_inner(branch, patches, false)
}

fn forward_batch_inner(
    branch: &EncoderBranch,
    patches: &[Patch],
    parallel: bool,
) -> Result<Vec<Embedding>, EncoderError> {
    par::try_map_index(patches.len(), parallel, |i| forward(branch, &patches[i]))
}

impl Encoder for EncoderBranch {
    fn modality(&self) -> Modality {
        self.modality
    }

    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed(&self, patch: &Patch) -> Result<Embedding, EncoderError> {
        forward(self, patch)
    }

    fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(format!("branch:{}:{}", self.arch, self.modality).as_bytes());
        for block in &self.blocks {
            hasher.update(block.name.as_bytes());
            for v in &block.data {
                hasher.update((*v as f32).to_le_bytes());
            }
        }
        hex_digest(hasher)
    }
}

pub(crate) fn hex_digest(hasher: sha2::Sha256) -> String {
    use sha2::Digest;
    let bytes = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded::rng_stream;
    use rand::Rng;

    pub(crate) fn random_patch(side: usize, seed: u64) -> Patch {
        let mut rng = rng_stream(seed, "patch");
        let mut data: Vec<f64> = (0..3 * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
        quantize_f32(&mut data);
        Patch {
            channels: 3,
            side,
            data,
        }
    }

    #[test]
    fn init_is_deterministic_and_branches_are_independent() {
        let a = init_branch(Modality::Rgb, Arch::Desk, 7);
        let b = init_branch(Modality::Rgb, Arch::Desk, 7);
        assert_eq!(a, b);
        let mut rgb = init_branch(Modality::Rgb, Arch::Desk, 7);
        let dem = init_branch(Modality::Dem, Arch::Desk, 7);
        let dem_before = dem.clone();
        rgb.blocks_mut()[0].data[0] += 1.0;
        assert_eq!(dem, dem_before);
    }

    #[test]
    fn desk_forward_gives_128_vector_for_all_supported_sizes() {
        let branch = init_branch(Modality::Rgb, Arch::Desk, 1);
        for side in SUPPORTED_PATCH_SIZES {
            let z = forward(&branch, &random_patch(side, side as u64)).unwrap();
            assert_eq!(z.vector.len(), EMBED_DIM);
            assert!(!z.normalized);
            assert!(z.vector.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn deep_forward_gives_128_vector() {
        let branch = init_branch(Modality::Dem, Arch::Deep, 3);
        let z = forward(&branch, &random_patch(16, 9)).unwrap();
        assert_eq!(z.vector.len(), EMBED_DIM);
        assert!(z.vector.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_bad_patches() {
        let branch = init_branch(Modality::Rgb, Arch::Desk, 1);
        assert!(matches!(
            forward(&branch, &random_patch(12, 0)),
            Err(EncoderError::UnsupportedPatchSize(12))
        ));
        let mut patch = random_patch(8, 0);
        patch.data[5] = f64::NAN;
        assert!(matches!(
            forward(&branch, &patch),
            Err(EncoderError::NonFinitePatch)
        ));
    }

    #[test]
    fn zeroed_projection_yields_zero_vector() {
        let mut branch = init_branch(Modality::Rgb, Arch::Desk, 2);
        let n = branch.blocks().len();
        for idx in [n - 2, n - 1] {
            branch.blocks_mut()[idx].data.iter_mut().for_each(|v| *v = 0.0);
        }
        let z = forward(&branch, &random_patch(16, 4)).unwrap();
        assert!(z.vector.iter().all(|&v| v == 0.0));
        assert!(matches!(z.normalize(), Err(EncoderError::ZeroEmbedding)));
    }

    #[test]
    fn forward_is_deterministic() {
        let branch = init_branch(Modality::Rgb, Arch::Desk, 5);
        let patch = random_patch(32, 11);
        let a = forward(&branch, &patch).unwrap();
        let b = forward(&branch, &patch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batched_forward_equals_independent_forwards() {
        let branch = init_branch(Modality::Rgb, Arch::Desk, 6);
        let patches: Vec<Patch> = (0..9).map(|i| random_patch(16, 100 + i)).collect();
        let batch = forward_batch(&branch, &patches).unwrap();
        let seq = forward_batch_seq(&branch, &patches).unwrap();
        for (i, patch) in patches.iter().enumerate() {
            let single = forward(&branch, patch).unwrap();
            for d in 0..EMBED_DIM {
                assert!((batch[i].vector[d] - single.vector[d]).abs() < 1e-6);
                assert_eq!(batch[i].vector[d].to_bits(), seq[i].vector[d].to_bits());
            }
        }
    }

    /// End-to-end parameter gradient check against central differences on a
    /// scalar objective (weighted sum of embedding entries).
    fn check_param_gradients(arch: Arch, side: usize, n_probes: usize, tol: f64) {
        let mut branch = init_branch(Modality::Rgb, arch, 13);
        let patch = random_patch(side, 21);
        let mut rng = rng_stream(77, "obj");
        let coefs: Vec<f64> = (0..EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let (_, cache) = forward_cached(&branch, &patch).unwrap();
        let grads = backward(&branch, &cache, &coefs).unwrap();

        let objective = |branch: &EncoderBranch| -> f64 {
            forward(branch, &patch)
                .unwrap()
                .vector
                .iter()
                .zip(&coefs)
                .map(|(a, c)| a * c)
                .sum()
        };

        let step = 1e-5;
        let n_blocks = branch.blocks().len();
        let mut checked = 0;
        let mut probe_rng = rng_stream(78, "probe");
        while checked < n_probes {
            let bi = probe_rng.gen_range(0..n_blocks);
            let len = branch.blocks()[bi].data.len();
            let pi = probe_rng.gen_range(0..len);
            let orig = branch.blocks()[bi].data[pi];
            branch.blocks_mut()[bi].data[pi] = orig + step;
            let up = objective(&branch);
            branch.blocks_mut()[bi].data[pi] = orig - step;
            let down = objective(&branch);
            branch.blocks_mut()[bi].data[pi] = orig;
            let fd = (up - down) / (2.0 * step);
            let analytic = grads[bi][pi];
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (fd - analytic).abs() / denom < tol,
                "block {bi} param {pi}: fd {fd} vs analytic {analytic}"
            );
            checked += 1;
        }
    }

    #[test]
    fn desk_param_gradients_match_finite_differences() {
        check_param_gradients(Arch::Desk, 8, 40, 1e-4);
    }

    #[test]
    fn deep_param_gradients_match_finite_differences() {
        check_param_gradients(Arch::Deep, 8, 12, 1e-3);
    }

    #[test]
    fn deep_and_desk_layouts_have_expected_block_counts() {
        assert_eq!(param_layout(Arch::Desk).len(), 10);
        // stem(2) + 8 blocks * 4 + 3 skip convs * 2 + proj(2)
        assert_eq!(param_layout(Arch::Deep).len(), 2 + 32 + 6 + 2);
    }
}
