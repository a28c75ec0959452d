//! Seeded synthetic scenes: co-registered RGB/elevation tile pairs with
//! cross-modal structure by construction, plus oracle encoders that localize
//! perfectly. Both exist so the mapping/retrieval pipeline can be tested
//! end to end without real data or training.
//!
//! A scene is built from one latent heightfield (smoothed integer-seeded
//! value noise, plateau-clipped so flat homogeneous regions exist) with
//! raised rectangular structures. The elevation tile stacks
//! (terrain + structures, terrain only, smoothed hybrid); the RGB tile is a
//! slope-shaded rendering of the surface with a structure-dependent hue and
//! bounded per-pixel texture noise. Everything derives from the seed; no
//! ambient randomness.

use std::collections::HashMap;

use rand::Rng;

use crate::encoder::{Embedding, Encoder, EncoderError, EMBED_DIM};
use crate::raster::{Modality, RasterTile, RasterError, TilePair};
use crate::sampling::{extract_patch, grid_from_px, PatchGrid, SamplingError};
use crate::seeded::{fnv1a64, mix64, quantize_f32, rng_stream, unit_vector};

/// Vertical relief of the latent terrain in meters.
const RELIEF_M: f64 = 12.0;
/// Fraction of the noise range clipped to flat plateaus.
const PLATEAU_LEVEL: f64 = 0.45;
/// Millimeter-scale relief tied to `texture_noise`; keeps patch content
/// unique for content-addressed oracles without visibly changing the scene.
const MICRO_RELIEF_M: f64 = 0.02;

const GROUND_COLOR: [f64; 3] = [0.30, 0.42, 0.24];
const STRUCTURE_COLOR: [f64; 3] = [0.44, 0.34, 0.30];

/// Fixed light direction for slope shading (unit vector).
const LIGHT: [f64; 3] = [0.424_264_068_711_928_5, -0.424_264_068_711_928_5, 0.8];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("size_px must be at least {min}, got {got}")]
    SceneTooSmall { min: usize, got: usize },
    #[error("gsd must be positive, got {0}")]
    BadGsd(f64),
    #[error("terrain_smoothness must be positive, got {0}")]
    BadSmoothness(f64),
    #[error("texture_noise must lie in [0, 1), got {0}")]
    BadTextureNoise(f64),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// Parameters of one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub size_px: usize,
    pub gsd_m: f64,
    pub n_structures: usize,
    /// Characteristic terrain feature size in pixels; `f64::INFINITY` gives
    /// perfectly flat terrain.
    pub terrain_smoothness: f64,
    pub texture_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size_px: 512,
            gsd_m: 0.5,
            n_structures: 40,
            terrain_smoothness: 48.0,
            texture_noise: 0.05,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<(), SynthError> {
        // Twice the largest supported patch side.
        let min = 2 * crate::encoder::SUPPORTED_PATCH_SIZES[3];
        if self.size_px < min {
            return Err(SynthError::SceneTooSmall {
                min,
                got: self.size_px,
            });
        }
        if !(self.gsd_m > 0.0) || !self.gsd_m.is_finite() {
            return Err(SynthError::BadGsd(self.gsd_m));
        }
        if !(self.terrain_smoothness > 0.0) {
            return Err(SynthError::BadSmoothness(self.terrain_smoothness));
        }
        if !(0.0..1.0).contains(&self.texture_noise) {
            return Err(SynthError::BadTextureNoise(self.texture_noise));
        }
        Ok(())
    }
}

/// Hash-derived uniform in [0, 1); platform-independent random access.
fn hash01(seed: u64, ix: i64, iy: i64, salt: u64) -> f64 {
    let h = mix64(
        mix64(seed ^ salt)
            ^ (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ (iy as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise on an integer lattice.
fn value_noise(seed: u64, x: f64, y: f64, salt: u64) -> f64 {
    let ix = x.floor();
    let iy = y.floor();
    let fx = smoothstep(x - ix);
    let fy = smoothstep(y - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let v00 = hash01(seed, ix, iy, salt);
    let v10 = hash01(seed, ix + 1, iy, salt);
    let v01 = hash01(seed, ix, iy + 1, salt);
    let v11 = hash01(seed, ix + 1, iy + 1, salt);
    let a = v00 + (v10 - v00) * fx;
    let b = v01 + (v11 - v01) * fx;
    a + (b - a) * fy
}

/// Four-octave fractal value noise, normalized to [0, 1].
fn fbm(seed: u64, x: f64, y: f64, salt: u64) -> f64 {
    let mut total = 0.0;
    let mut amplitude = 1.0;
    let mut frequency = 1.0;
    let mut norm = 0.0;
    for octave in 0..4u64 {
        total += amplitude * value_noise(seed, x * frequency, y * frequency, salt ^ (octave << 8));
        norm += amplitude;
        amplitude *= 0.5;
        frequency *= 2.0;
    }
    total / norm
}

/// One raised rectangular structure.
#[derive(Debug, Clone)]
struct Structure {
    row0: usize,
    col0: usize,
    rows: usize,
    cols: usize,
    height_m: f64,
}

fn place_structures(spec: &SceneSpec) -> Vec<Structure> {
    let mut rng = rng_stream(spec.seed, "structures");
    let size = spec.size_px;
    let lo = (size / 32).max(4);
    let hi = (size / 8).max(lo + 1);
    (0..spec.n_structures)
        .map(|_| {
            let rows = rng.gen_range(lo..hi);
            let cols = rng.gen_range(lo..hi);
            Structure {
                row0: rng.gen_range(0..=size - rows),
                col0: rng.gen_range(0..=size - cols),
                rows,
                cols,
                height_m: rng.gen_range(3.0..12.0),
            }
        })
        .collect()
}

/// Generate a co-registered RGB/elevation pair. Same spec, same bytes.
pub fn generate_scene(spec: &SceneSpec) -> Result<TilePair, SynthError> {
    spec.validate()?;
    let size = spec.size_px;
    let n = size * size;
    let inv_smooth = if spec.terrain_smoothness.is_finite() {
        1.0 / spec.terrain_smoothness
    } else {
        0.0
    };

    // Latent ground: plateau-clipped fractal noise plus micro relief.
    let mut ground = vec![0.0f64; n];
    for r in 0..size {
        for c in 0..size {
            let t = fbm(spec.seed, c as f64 * inv_smooth, r as f64 * inv_smooth, 0x7e72);
            let base = (t.max(PLATEAU_LEVEL) - PLATEAU_LEVEL) / (1.0 - PLATEAU_LEVEL) * RELIEF_M;
            let micro =
                spec.texture_noise * MICRO_RELIEF_M * hash01(spec.seed, c as i64, r as i64, 0x6d72);
            ground[r * size + c] = base + micro;
        }
    }

    // Structure prisms; overlaps keep the tallest.
    let mut prism = vec![0.0f64; n];
    for s in place_structures(spec) {
        for r in s.row0..s.row0 + s.rows {
            for c in s.col0..s.col0 + s.cols {
                let v = &mut prism[r * size + c];
                *v = v.max(s.height_m);
            }
        }
    }

    // Elevation channels: first surface, bare earth, smoothed hybrid.
    let surface: Vec<f64> = ground.iter().zip(&prism).map(|(g, p)| g + p).collect();
    let bare = ground.clone();
    let mut hybrid = vec![0.0f64; n];
    for r in 0..size {
        for c in 0..size {
            let mut acc = 0.0;
            let mut count = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = r as i64 + dr;
                    let cc = c as i64 + dc;
                    if rr >= 0 && cc >= 0 && rr < size as i64 && cc < size as i64 {
                        acc += prism[rr as usize * size + cc as usize];
                        count += 1.0;
                    }
                }
            }
            hybrid[r * size + c] = ground[r * size + c] + acc / count;
        }
    }

    // RGB: Lambertian slope shading of the first surface, hue switched on
    // structure footprints, plus bounded texture noise. Raw 8-bit range.
    let slope_at = |field: &[f64], r: usize, c: usize| -> (f64, f64) {
        let read = |rr: i64, cc: i64| {
            let rr = rr.clamp(0, size as i64 - 1) as usize;
            let cc = cc.clamp(0, size as i64 - 1) as usize;
            field[rr * size + cc]
        };
        let dzdx = (read(r as i64, c as i64 + 1) - read(r as i64, c as i64 - 1)) / (2.0 * spec.gsd_m);
        let dzdy = (read(r as i64 + 1, c as i64) - read(r as i64 - 1, c as i64)) / (2.0 * spec.gsd_m);
        (dzdx, dzdy)
    };
    let mut rgb = vec![0.0f64; 3 * n];
    for r in 0..size {
        for c in 0..size {
            let (dzdx, dzdy) = slope_at(&surface, r, c);
            let inv_len = 1.0 / (1.0 + dzdx * dzdx + dzdy * dzdy).sqrt();
            let shade =
                ((-dzdx * LIGHT[0] - dzdy * LIGHT[1] + LIGHT[2]) * inv_len).max(0.0);
            let base = if prism[r * size + c] > 0.0 {
                STRUCTURE_COLOR
            } else {
                GROUND_COLOR
            };
            for ch in 0..3 {
                let noise = spec.texture_noise
                    * (hash01(spec.seed, c as i64, r as i64, 0x52_47_42 + ch as u64) - 0.5);
                let value = (base[ch] * (0.25 + 0.75 * shade) + noise).clamp(0.0, 1.0) * 255.0;
                rgb[ch * n + r * size + c] = value;
            }
        }
    }

    let mut dem = Vec::with_capacity(3 * n);
    dem.extend_from_slice(&surface);
    dem.extend_from_slice(&bare);
    dem.extend_from_slice(&hybrid);
    quantize_f32(&mut dem);
    quantize_f32(&mut rgb);

    let pair_id = format!("scene{}", spec.seed);
    let origin = (0.0, 0.0);
    let rgb_tile = RasterTile::new(
        format!("{pair_id}-rgb"),
        size,
        size,
        spec.gsd_m,
        origin,
        Modality::Rgb,
        rgb,
    )?;
    let dem_tile = RasterTile::new(
        format!("{pair_id}-dem"),
        size,
        size,
        spec.gsd_m,
        origin,
        Modality::Dem,
        dem,
    )?;
    Ok(TilePair::new(pair_id, rgb_tile, dem_tile)?)
}

/// A content-addressed perfect encoder: patches seen at grid build time map
/// to a fixed random unit vector keyed by their anchor, so co-located
/// patches of both modalities agree exactly and distinct anchors are nearly
/// orthogonal at dim 128. Unknown content falls back to a content-hash
/// vector (near-zero similarity to everything).
pub struct OracleEncoder {
    modality: Modality,
    seed: u64,
    index: HashMap<u64, (usize, usize)>,
}

fn patch_content_hash(patch: &crate::sampling::Patch) -> u64 {
    let mut bytes = Vec::with_capacity(patch.data.len() * 8);
    for v in &patch.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a64(&bytes)
}

fn anchor_vector(seed: u64, row: usize, col: usize) -> Vec<f64> {
    let key = mix64(seed ^ ((row as u64) << 32 | col as u64));
    unit_vector(EMBED_DIM, &mut rng_stream(key, "oracle-anchor"))
}

impl OracleEncoder {
    fn build(
        tile: &RasterTile,
        grid: &PatchGrid,
        seed: u64,
    ) -> Result<Self, SynthError> {
        let mut index = HashMap::with_capacity(grid.len());
        for i in 0..grid.len() {
            let anchor = grid.anchor(i);
            let patch = extract_patch(tile, anchor, grid.patch_px)?;
            index.entry(patch_content_hash(&patch)).or_insert(anchor);
        }
        Ok(Self {
            modality: tile.modality,
            seed,
            index,
        })
    }
}

impl Encoder for OracleEncoder {
    fn modality(&self) -> Modality {
        self.modality
    }

    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed(&self, patch: &crate::sampling::Patch) -> Result<Embedding, EncoderError> {
        let hash = patch_content_hash(patch);
        let vector = match self.index.get(&hash) {
            Some(&(row, col)) => anchor_vector(self.seed, row, col),
            None => unit_vector(EMBED_DIM, &mut rng_stream(hash ^ self.seed, "oracle-miss")),
        };
        Ok(Embedding::raw(vector))
    }

    fn fingerprint(&self) -> String {
        format!("oracle-{}-{}", self.seed, self.modality)
    }
}

/// Build the RGB/DEM oracle pair over one lattice of a scene. Both tiles
/// must be in the same state (raw or normalized) that later queries use.
pub fn oracle_encoder_pair(
    pair_rgb: &RasterTile,
    pair_dem: &RasterTile,
    patch_px: usize,
    stride_px: usize,
    seed: u64,
) -> Result<(OracleEncoder, OracleEncoder), SynthError> {
    let rgb_grid = grid_from_px(pair_rgb, patch_px, stride_px)?;
    let dem_grid = grid_from_px(pair_dem, patch_px, stride_px)?;
    let rgb = OracleEncoder::build(pair_rgb, &rgb_grid, seed)?;
    let dem = OracleEncoder::build(pair_dem, &dem_grid, seed)?;
    Ok((rgb, dem))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::sim;

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            size_px: 160,
            gsd_m: 0.5,
            n_structures: 8,
            terrain_smoothness: 24.0,
            texture_noise: 0.05,
        }
    }

    #[test]
    fn scenes_are_seed_deterministic() {
        let a = generate_scene(&small_spec(7)).unwrap();
        let b = generate_scene(&small_spec(7)).unwrap();
        assert_eq!(a.rgb.data(), b.rgb.data());
        assert_eq!(a.dem.data(), b.dem.data());
        let c = generate_scene(&small_spec(8)).unwrap();
        assert_ne!(a.dem.data(), c.dem.data());
    }

    #[test]
    fn degenerate_scene_is_constant() {
        let spec = SceneSpec {
            seed: 1,
            size_px: 128,
            gsd_m: 1.0,
            n_structures: 0,
            terrain_smoothness: f64::INFINITY,
            texture_noise: 0.0,
        };
        let pair = generate_scene(&spec).unwrap();
        for c in 0..3 {
            let plane = pair.rgb.channel(c);
            assert!(plane.iter().all(|&v| v == plane[0]));
            let dem_plane = pair.dem.channel(c);
            assert!(dem_plane.iter().all(|&v| v == dem_plane[0]));
        }
    }

    #[test]
    fn surface_minus_bare_is_nonzero_exactly_on_footprints() {
        let pair = generate_scene(&small_spec(3)).unwrap();
        let surface = pair.dem.channel(0);
        let bare = pair.dem.channel(1);
        let mut on = 0usize;
        for (s, b) in surface.iter().zip(bare) {
            let diff = s - b;
            // Structure heights start at 3 m; anything between 0 and 3 would
            // betray leakage between the channels.
            assert!(diff == 0.0 || diff >= 2.9, "unexpected diff {diff}");
            if diff > 0.0 {
                on += 1;
            }
        }
        assert!(on > 0, "no structures landed");
    }

    #[test]
    fn rgb_intensity_correlates_with_surface_shading() {
        let pair = generate_scene(&small_spec(11)).unwrap();
        let size = pair.rgb.width_px;
        let n = size * size;
        // Reconstruct shade from the DEM first-surface channel.
        let surface = pair.dem.channel(0);
        let mut shade = Vec::with_capacity(n);
        for r in 0..size {
            for c in 0..size {
                let read = |rr: i64, cc: i64| {
                    let rr = rr.clamp(0, size as i64 - 1) as usize;
                    let cc = cc.clamp(0, size as i64 - 1) as usize;
                    surface[rr * size + cc]
                };
                let dzdx =
                    (read(r as i64, c as i64 + 1) - read(r as i64, c as i64 - 1)) / (2.0 * 0.5);
                let dzdy =
                    (read(r as i64 + 1, c as i64) - read(r as i64 - 1, c as i64)) / (2.0 * 0.5);
                let inv_len = 1.0 / (1.0 + dzdx * dzdx + dzdy * dzdy).sqrt();
                shade.push(((-dzdx * LIGHT[0] - dzdy * LIGHT[1] + LIGHT[2]) * inv_len).max(0.0));
            }
        }
        let intensity: Vec<f64> = (0..n)
            .map(|i| {
                (pair.rgb.channel(0)[i] + pair.rgb.channel(1)[i] + pair.rgb.channel(2)[i]) / 3.0
            })
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ms, mi) = (mean(&shade), mean(&intensity));
        let mut cov = 0.0;
        let mut vs = 0.0;
        let mut vi = 0.0;
        for i in 0..n {
            let a = shade[i] - ms;
            let b = intensity[i] - mi;
            cov += a * b;
            vs += a * a;
            vi += b * b;
        }
        let r = cov / (vs.sqrt() * vi.sqrt());
        assert!(r > 0.8, "Pearson r = {r}");
    }

    #[test]
    fn spec_validation_rejects_bad_parameters() {
        let mut spec = small_spec(0);
        spec.size_px = 100;
        assert!(matches!(
            generate_scene(&spec),
            Err(SynthError::SceneTooSmall { .. })
        ));
        let mut spec = small_spec(0);
        spec.texture_noise = 1.0;
        assert!(matches!(
            generate_scene(&spec),
            Err(SynthError::BadTextureNoise(_))
        ));
        let mut spec = small_spec(0);
        spec.terrain_smoothness = 0.0;
        assert!(matches!(
            generate_scene(&spec),
            Err(SynthError::BadSmoothness(_))
        ));
    }

    #[test]
    fn oracle_pair_agrees_on_co_located_patches() {
        let pair = generate_scene(&small_spec(21)).unwrap();
        let (rgb_oracle, dem_oracle) =
            oracle_encoder_pair(&pair.rgb, &pair.dem, 32, 16, 77).unwrap();
        let grid = grid_from_px(&pair.rgb, 32, 16).unwrap();
        for index in [0, grid.len() / 2, grid.len() - 1] {
            let anchor = grid.anchor(index);
            let rp = extract_patch(&pair.rgb, anchor, 32).unwrap();
            let dp = extract_patch(&pair.dem, anchor, 32).unwrap();
            let zr = rgb_oracle.embed(&rp).unwrap();
            let zd = dem_oracle.embed(&dp).unwrap();
            let s = sim(&zr.vector, &zd.vector).unwrap();
            assert!((s - 1.0).abs() < 1e-12, "sim {s} at {anchor:?}");
        }
    }

    #[test]
    fn oracle_distinct_anchors_are_nearly_orthogonal() {
        let pair = generate_scene(&small_spec(23)).unwrap();
        let (rgb_oracle, dem_oracle) =
            oracle_encoder_pair(&pair.rgb, &pair.dem, 32, 8, 5).unwrap();
        let grid = grid_from_px(&pair.rgb, 32, 8).unwrap();
        let mut checked = 0;
        let mut max_abs: f64 = 0.0;
        for i in (0..grid.len()).step_by(7) {
            let j = (i + grid.len() / 2 + 1) % grid.len();
            if i == j {
                continue;
            }
            let zi = rgb_oracle
                .embed(&extract_patch(&pair.rgb, grid.anchor(i), 32).unwrap())
                .unwrap();
            let zj = dem_oracle
                .embed(&extract_patch(&pair.dem, grid.anchor(j), 32).unwrap())
                .unwrap();
            let s = sim(&zi.vector, &zj.vector).unwrap();
            max_abs = max_abs.max(s.abs());
            checked += 1;
        }
        assert!(checked > 20);
        assert!(max_abs < 0.5, "max |sim| {max_abs}");
    }

    #[test]
    fn oracle_unknown_content_falls_back_to_low_similarity() {
        let pair = generate_scene(&small_spec(29)).unwrap();
        let (_, dem_oracle) = oracle_encoder_pair(&pair.rgb, &pair.dem, 32, 32, 1).unwrap();
        // A patch off the lattice: content unseen at build time.
        let patch = extract_patch(&pair.dem, (3, 5), 32).unwrap();
        let z = dem_oracle.embed(&patch).unwrap();
        let grid = grid_from_px(&pair.dem, 32, 32).unwrap();
        let known = dem_oracle
            .embed(&extract_patch(&pair.dem, grid.anchor(0), 32).unwrap())
            .unwrap();
        assert!(sim(&z.vector, &known.vector).unwrap().abs() < 0.5);
    }
}
