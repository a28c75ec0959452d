//! Dense primitives for the branch networks: im2col convolution, ReLU,
//! global average pooling and the affine head, each with a reverse pass.
//!
//! Convolutions keep spatial extent at stride 1 and halve it (rounding up)
//! at stride 2; padding is always `(kernel - 1) / 2`. All math is f64.

/// A channel-major 3-D activation grid.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Grid3 {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid3 {
    pub fn zeros(ch: usize, h: usize, w: usize) -> Self {
        Self {
            ch,
            h,
            w,
            data: vec![0.0; ch * h * w],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = (self.kernel - 1) / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }
}

/// Output-pixel count below which the transposed kernels are used: with few
/// output pixels the per-pixel dot over the long K axis vectorizes, while
/// the K x M axpy form degenerates into tiny inner loops.
const SMALL_M: usize = 32;

/// Four-lane dot product with a fixed combination order (platform
/// independent, auto-vectorizable).
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let chunks = n / 4;
    let mut acc = [0.0f64; 4];
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(acc: &mut [f64], coeff: f64, values: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(values) {
        *a += coeff * v;
    }
}

/// Unfold the input into a `(in_ch * k * k) x (oh * ow)` matrix so the
/// convolution becomes one dense multiply. Out-of-bounds taps stay zero.
fn im2col(spec: &ConvSpec, x: &Grid3) -> (Vec<f64>, usize, usize) {
    let k = spec.kernel;
    let pad = (k - 1) / 2;
    let (oh, ow) = spec.out_dims(x.h, x.w);
    let m = oh * ow;
    let mut cols = vec![0.0f64; spec.in_ch * k * k * m];
    for c in 0..spec.in_ch {
        let plane = &x.data[c * x.h * x.w..(c + 1) * x.h * x.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[(c * k * k + ky * k + kx) * m..][..m];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = iy as usize * x.w;
                    let dst = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < x.w as isize {
                            row[dst + ox] = plane[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Scatter-add the column-space gradient back onto the input grid.
fn col2im(spec: &ConvSpec, d_cols: &[f64], oh: usize, ow: usize, in_h: usize, in_w: usize) -> Grid3 {
    let k = spec.kernel;
    let pad = (k - 1) / 2;
    let m = oh * ow;
    let mut d_in = Grid3::zeros(spec.in_ch, in_h, in_w);
    for c in 0..spec.in_ch {
        let plane = &mut d_in.data[c * in_h * in_w..(c + 1) * in_h * in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &d_cols[(c * k * k + ky * k + kx) * m..][..m];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    let dst = iy as usize * in_w;
                    let src = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < in_w as isize {
                            plane[dst + ix as usize] += row[src + ox];
                        }
                    }
                }
            }
        }
    }
    d_in
}

/// Transpose a K x M matrix into M x K.
fn transpose(mat: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0f64; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = mat[r * cols + c];
        }
    }
    t
}

pub(crate) fn conv_forward(spec: &ConvSpec, w: &[f64], b: &[f64], x: &Grid3) -> Grid3 {
    debug_assert_eq!(w.len(), spec.weight_len());
    debug_assert_eq!(b.len(), spec.out_ch);
    debug_assert_eq!(x.ch, spec.in_ch);
    let (cols, oh, ow) = im2col(spec, x);
    let m = oh * ow;
    let kk = spec.in_ch * spec.kernel * spec.kernel;
    let mut out = vec![0.0f64; spec.out_ch * m];
    if m >= SMALL_M {
        for o in 0..spec.out_ch {
            let orow = &mut out[o * m..][..m];
            orow.fill(b[o]);
            let wrow = &w[o * kk..][..kk];
            for (kidx, &coeff) in wrow.iter().enumerate() {
                axpy(orow, coeff, &cols[kidx * m..][..m]);
            }
        }
    } else {
        let cols_t = transpose(&cols, kk, m);
        for o in 0..spec.out_ch {
            let wrow = &w[o * kk..][..kk];
            for mm in 0..m {
                out[o * m + mm] = b[o] + dot4(wrow, &cols_t[mm * kk..][..kk]);
            }
        }
    }
    Grid3 {
        ch: spec.out_ch,
        h: oh,
        w: ow,
        data: out,
    }
}

/// Reverse pass of one convolution. `x` is the grid the forward pass saw;
/// its columns are recomputed here rather than cached.
pub(crate) fn conv_backward(
    spec: &ConvSpec,
    w: &[f64],
    x: &Grid3,
    d_out: &Grid3,
) -> (Vec<f64>, Vec<f64>, Grid3) {
    let (cols, oh, ow) = im2col(spec, x);
    debug_assert_eq!((d_out.h, d_out.w), (oh, ow));
    let m = oh * ow;
    let kk = spec.in_ch * spec.kernel * spec.kernel;

    let mut d_b = vec![0.0f64; spec.out_ch];
    let mut d_w = vec![0.0f64; spec.weight_len()];
    let mut d_cols = vec![0.0f64; kk * m];
    if m >= SMALL_M {
        for o in 0..spec.out_ch {
            let drow = &d_out.data[o * m..][..m];
            d_b[o] = drow.iter().sum();
            let wgrad = &mut d_w[o * kk..][..kk];
            for (kidx, slot) in wgrad.iter_mut().enumerate() {
                *slot = dot4(drow, &cols[kidx * m..][..m]);
            }
            let wrow = &w[o * kk..][..kk];
            for (kidx, &coeff) in wrow.iter().enumerate() {
                axpy(&mut d_cols[kidx * m..][..m], coeff, drow);
            }
        }
        let d_in = col2im(spec, &d_cols, oh, ow, x.h, x.w);
        return (d_w, d_b, d_in);
    }

    // Few output pixels: run the K axis innermost so loops stay long.
    let cols_t = transpose(&cols, kk, m);
    let mut d_cols_t = vec![0.0f64; m * kk];
    for o in 0..spec.out_ch {
        let drow = &d_out.data[o * m..][..m];
        d_b[o] = drow.iter().sum();
        let wgrad = &mut d_w[o * kk..][..kk];
        let wrow = &w[o * kk..][..kk];
        for mm in 0..m {
            let g = drow[mm];
            axpy(wgrad, g, &cols_t[mm * kk..][..kk]);
            axpy(&mut d_cols_t[mm * kk..][..kk], g, wrow);
        }
    }
    for kidx in 0..kk {
        for mm in 0..m {
            d_cols[kidx * m + mm] = d_cols_t[mm * kk + kidx];
        }
    }
    let d_in = col2im(spec, &d_cols, oh, ow, x.h, x.w);
    (d_w, d_b, d_in)
}

pub(crate) fn relu_in_place(g: &mut Grid3) {
    for v in &mut g.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through ReLU using the post-activation values as the mask.
pub(crate) fn relu_backward(post: &Grid3, d_post: &Grid3) -> Grid3 {
    let mut d_pre = d_post.clone();
    for (g, &p) in d_pre.data.iter_mut().zip(&post.data) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    d_pre
}

pub(crate) fn gap_forward(x: &Grid3) -> Vec<f64> {
    let area = (x.h * x.w) as f64;
    (0..x.ch)
        .map(|c| x.data[c * x.h * x.w..(c + 1) * x.h * x.w].iter().sum::<f64>() / area)
        .collect()
}

pub(crate) fn gap_backward(d_pooled: &[f64], ch: usize, h: usize, w: usize) -> Grid3 {
    let inv_area = 1.0 / (h * w) as f64;
    let mut g = Grid3::zeros(ch, h, w);
    for c in 0..ch {
        let v = d_pooled[c] * inv_area;
        for slot in &mut g.data[c * h * w..(c + 1) * h * w] {
            *slot = v;
        }
    }
    g
}

pub(crate) fn linear_forward(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let in_dim = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| bias + dot4(&w[o * in_dim..(o + 1) * in_dim], x))
        .collect()
}

pub(crate) fn linear_backward(
    w: &[f64],
    x: &[f64],
    d_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_dim = x.len();
    let out_dim = d_out.len();
    let mut d_w = vec![0.0f64; out_dim * in_dim];
    let mut d_x = vec![0.0f64; in_dim];
    for o in 0..out_dim {
        let g = d_out[o];
        let wrow = &w[o * in_dim..][..in_dim];
        let grow = &mut d_w[o * in_dim..][..in_dim];
        for i in 0..in_dim {
            grow[i] = g * x[i];
            d_x[i] += g * wrow[i];
        }
    }
    (d_w, d_out.to_vec(), d_x)
}
