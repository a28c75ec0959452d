//! Cosine similarity and the normalized temperature-scaled cross-entropy
//! (NT-Xent) loss over a cross-modal batch, with analytic gradients.
//!
//! For N positive pairs the 2N embeddings are ordered `[rgb_0..rgb_N-1,
//! dem_0..dem_N-1]`; the positive of anchor `i` is `(i + N) mod 2N`. Each
//! anchor's term is
//!
//! ```text
//! l_i = -log( exp(sim(z_i, z_p)/tau) / sum_{k in D(i)} exp(sim(z_i, z_k)/tau) )
//! ```
//!
//! where the denominator set `D(i)` is every other embedding
//! ([`NegativeSet::All2N`]) or only the opposite-modality half
//! ([`NegativeSet::CrossModalOnly`], the "(N-1) negatives" counting). The
//! loss is the unweighted mean over all 2N anchors and both directions.
//! Log-sum-exp is computed with a max shift, and embeddings are prescaled by
//! their max component before normalization, so norms anywhere in
//! `[1e-20, 1e+20]` stay finite.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("need at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("rgb and dem embedding counts differ: {rgb} vs {dem}")]
    PairCountMismatch { rgb: usize, dem: usize },
    #[error("embedding {index} has dimension {actual}, expected {expected}")]
    DimMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("embedding {0} is the zero vector; its direction is undefined")]
    ZeroVector(usize),
    #[error("embedding {0} has non-finite entries")]
    NonFinite(usize),
    #[error("vectors have different dimensions: {0} vs {1}")]
    SimDimMismatch(usize, usize),
}

/// Which embeddings appear in each anchor's denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSet {
    /// All 2N embeddings except the anchor itself (2N - 1 terms).
    All2N,
    /// Only the opposite-modality half: the positive plus N - 1 negatives.
    CrossModalOnly,
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub negative_set: NegativeSet,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            negative_set: NegativeSet::All2N,
        }
    }
}

impl LossConfig {
    fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(LossError::BadTemperature(self.temperature));
        }
        Ok(())
    }
}

/// Direction of a nonzero vector, robust across extreme magnitudes.
fn unit(v: &[f64], index: usize) -> Result<(Vec<f64>, f64), LossError> {
    let mut max_abs = 0.0f64;
    for &x in v {
        if !x.is_finite() {
            return Err(LossError::NonFinite(index));
        }
        max_abs = max_abs.max(x.abs());
    }
    if max_abs == 0.0 {
        return Err(LossError::ZeroVector(index));
    }
    let inv = 1.0 / max_abs;
    let mut u: Vec<f64> = v.iter().map(|x| x * inv).collect();
    let scaled_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let inv_norm = 1.0 / scaled_norm;
    for x in &mut u {
        *x *= inv_norm;
    }
    // True Euclidean norm of v; may be huge or tiny but stays finite.
    Ok((u, scaled_norm * max_abs))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity: the dot product of the two normalized vectors.
pub fn sim(u: &[f64], v: &[f64]) -> Result<f64, LossError> {
    if u.len() != v.len() {
        return Err(LossError::SimDimMismatch(u.len(), v.len()));
    }
    let (uu, _) = unit(u, 0)?;
    let (vv, _) = unit(v, 1)?;
    Ok(dot(&uu, &vv).clamp(-1.0, 1.0))
}

/// NT-Xent loss value plus the per-anchor terms (`[rgb anchors, dem anchors]`).
#[derive(Debug, Clone)]
pub struct NtXentOutput {
    pub loss: f64,
    pub per_anchor: Vec<f64>,
}

/// Gradients of the mean loss w.r.t. both raw (unnormalized) embedding sets.
#[derive(Debug, Clone)]
pub struct NtXentGrads {
    pub rgb: Vec<Vec<f64>>,
    pub dem: Vec<Vec<f64>>,
}

struct Prepared {
    units: Vec<Vec<f64>>,
    norms: Vec<f64>,
    n: usize,
    dim: usize,
}

fn prepare(rgb: &[Vec<f64>], dem: &[Vec<f64>]) -> Result<Prepared, LossError> {
    let n = rgb.len();
    if n != dem.len() {
        return Err(LossError::PairCountMismatch {
            rgb: n,
            dem: dem.len(),
        });
    }
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    let dim = rgb[0].len();
    let mut units = Vec::with_capacity(2 * n);
    let mut norms = Vec::with_capacity(2 * n);
    for (index, v) in rgb.iter().chain(dem.iter()).enumerate() {
        if v.len() != dim {
            return Err(LossError::DimMismatch {
                index,
                expected: dim,
                actual: v.len(),
            });
        }
        let (u, norm) = unit(v, index)?;
        units.push(u);
        norms.push(norm);
    }
    Ok(Prepared { units, norms, n, dim })
}

/// Denominator membership: is `k` in `D(i)`?
#[inline]
fn in_denominator(mode: NegativeSet, n: usize, i: usize, k: usize) -> bool {
    if i == k {
        return false;
    }
    match mode {
        NegativeSet::All2N => true,
        NegativeSet::CrossModalOnly => (i < n) != (k < n),
    }
}

fn similarity_matrix(p: &Prepared) -> Vec<f64> {
    let m = 2 * p.n;
    let mut s = vec![0.0f64; m * m];
    for i in 0..m {
        for k in (i + 1)..m {
            let v = dot(&p.units[i], &p.units[k]);
            s[i * m + k] = v;
            s[k * m + i] = v;
        }
        s[i * m + i] = 1.0;
    }
    s
}

/// The NT-Xent loss over a batch of N cross-modal pairs.
pub fn nt_xent(
    rgb: &[Vec<f64>],
    dem: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<NtXentOutput, LossError> {
    cfg.validate()?;
    let p = prepare(rgb, dem)?;
    let m = 2 * p.n;
    let s = similarity_matrix(&p);
    let inv_tau = 1.0 / cfg.temperature;

    let mut per_anchor = Vec::with_capacity(m);
    for i in 0..m {
        let positive = (i + p.n) % m;
        let row = &s[i * m..(i + 1) * m];
        let mut max_logit = f64::NEG_INFINITY;
        for k in 0..m {
            if in_denominator(cfg.negative_set, p.n, i, k) {
                max_logit = max_logit.max(row[k] * inv_tau);
            }
        }
        let mut sum_exp = 0.0;
        for k in 0..m {
            if in_denominator(cfg.negative_set, p.n, i, k) {
                sum_exp += (row[k] * inv_tau - max_logit).exp();
            }
        }
        let lse = max_logit + sum_exp.ln();
        // Non-negative in exact arithmetic (the positive term is inside the
        // denominator); clamp absorbs last-ulp rounding only.
        per_anchor.push((lse - row[positive] * inv_tau).max(0.0));
    }
    let loss = per_anchor.iter().sum::<f64>() / m as f64;
    Ok(NtXentOutput { loss, per_anchor })
}

/// Analytic gradient of the mean NT-Xent loss w.r.t. both embedding sets.
pub fn nt_xent_grad(
    rgb: &[Vec<f64>],
    dem: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<NtXentGrads, LossError> {
    cfg.validate()?;
    let p = prepare(rgb, dem)?;
    let m = 2 * p.n;
    let s = similarity_matrix(&p);
    let inv_tau = 1.0 / cfg.temperature;

    // Softmax weights q[i][k] over each anchor's denominator set.
    let mut q = vec![0.0f64; m * m];
    for i in 0..m {
        let row = &s[i * m..(i + 1) * m];
        let mut max_logit = f64::NEG_INFINITY;
        for k in 0..m {
            if in_denominator(cfg.negative_set, p.n, i, k) {
                max_logit = max_logit.max(row[k] * inv_tau);
            }
        }
        let mut sum_exp = 0.0;
        for k in 0..m {
            if in_denominator(cfg.negative_set, p.n, i, k) {
                sum_exp += (row[k] * inv_tau - max_logit).exp();
            }
        }
        for k in 0..m {
            if in_denominator(cfg.negative_set, p.n, i, k) {
                q[i * m + k] = (row[k] * inv_tau - max_logit).exp() / sum_exp;
            }
        }
    }

    // dL/ds[i][k], accumulating the (i,k) and (k,i) anchor terms. The mean
    // over 2N anchors and the 1/tau chain factor fold into `scale`.
    let scale = inv_tau / m as f64;
    let mut g_s = vec![0.0f64; m * m];
    for i in 0..m {
        let positive = (i + p.n) % m;
        for k in 0..m {
            if i == k {
                continue;
            }
            let mut g = 0.0;
            if in_denominator(cfg.negative_set, p.n, i, k) {
                g += q[i * m + k];
            }
            if k == positive {
                g -= 1.0;
            }
            g_s[i * m + k] += scale * g;
            g_s[k * m + i] += scale * g;
        }
    }

    // Chain through cosine similarity: ds[i][k]/de_i = (u_k - s_ik u_i)/|e_i|.
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(m);
    for i in 0..m {
        let mut g = vec![0.0f64; p.dim];
        let ui = &p.units[i];
        let mut radial = 0.0;
        for k in 0..m {
            if i == k {
                continue;
            }
            let w = g_s[i * m + k];
            if w == 0.0 {
                continue;
            }
            let uk = &p.units[k];
            for d in 0..p.dim {
                g[d] += w * uk[d];
            }
            radial += w * s[i * m + k];
        }
        let inv_norm = 1.0 / p.norms[i];
        for d in 0..p.dim {
            g[d] = (g[d] - radial * ui[d]) * inv_norm;
        }
        grads.push(g);
    }
    let dem_grads = grads.split_off(p.n);
    Ok(NtXentGrads {
        rgb: grads,
        dem: dem_grads,
    })
}
