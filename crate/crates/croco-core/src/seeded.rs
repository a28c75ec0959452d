//! Deterministic, platform-independent randomness helpers.
//!
//! Everything downstream (parameter init, batch sampling, scene generation)
//! derives its stream from a `u64` seed plus a domain label, so independent
//! consumers never share a stream and reruns are bit-identical.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche, stable across platforms.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// FNV-1a over a byte slice; used for content-addressed lookups.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A ChaCha8 stream derived from a seed and a domain label.
pub fn rng_stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let a = mix64(seed);
    let b = mix64(a ^ fnv1a64(label.as_bytes()));
    let c = mix64(b);
    let d = mix64(c);
    key[0..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&d.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Draw `k` distinct indices from `0..n` uniformly without replacement
/// (partial Fisher-Yates). Panics if `k > n`.
pub fn sample_without_replacement(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(k <= n, "cannot draw {k} from {n} without replacement");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Standard normal draw via Box-Muller on the uniform stream.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A random 128-class unit vector of the given dimension.
pub fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Round every value to the nearest f32; keeps in-memory state losslessly
/// representable in float32 payload formats.
pub fn quantize_f32(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = f64::from(*v as f32);
    }
}
