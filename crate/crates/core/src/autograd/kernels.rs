//! Dense compute kernels. Every inner loop runs over a contiguous row so the
//! compiler can vectorize it; reductions use split accumulators.

use super::Scalar;

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Geometry of a square-kernel, same-padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Self { c_in, h, w, k, stride, pad, h_out, w_out }
    }

    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` is in bounds.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx { (self.pad - kx).div_ceil(self.stride) } else { 0 };
        let hi_in = self.w as isize - 1 + self.pad as isize - kx as isize;
        let hi = if hi_in < 0 { 0 } else { (hi_in as usize / self.stride + 1).min(self.w_out) };
        (lo, hi.max(lo))
    }
}

/// Unfolds one image `[C, H, W]` into `[C*k*k, Ho*Wo]` patch columns.
pub fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let n = g.cols();
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * n..(r + 1) * n];
                row.fill(T::zero());
                let (lo, hi) = g.ox_range(kx);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut row[oy * g.w_out..(oy + 1) * g.w_out];
                    for ox in lo..hi {
                        dst[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-column gradients back onto `[C, H, W]`.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], grad_input: &mut [T]) {
    let n = g.cols();
    for ci in 0..g.c_in {
        let plane = &mut grad_input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * n..(r + 1) * n];
                let (lo, hi) = g.ox_range(kx);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &row[oy * g.w_out..(oy + 1) * g.w_out];
                    for ox in lo..hi {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// `out[Co, n] = bias + weight[Co, r] * cols[r, n]`.
pub fn conv_gemm<T: Scalar>(weight: &[T], bias: &[T], cols: &[T], rows: usize, n: usize, out: &mut [T]) {
    for (co, out_row) in out.chunks_exact_mut(n).enumerate() {
        out_row.fill(bias[co]);
        let wrow = &weight[co * rows..(co + 1) * rows];
        for (r, &wv) in wrow.iter().enumerate() {
            if wv != T::zero() {
                axpy(wv, &cols[r * n..(r + 1) * n], out_row);
            }
        }
    }
}

/// Single-head softmax attention on channel-major tokens.
///
/// `q` is `[d, L]`, `k` and `v` are `[d, M]`; returns `out` as `[d, L]` and the
/// row-stochastic probabilities `p` as `[L, M]`.
pub fn attention_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], d: usize, l: usize, m: usize, out: &mut [T], p: &mut [T]) {
    let scale = T::one() / T::of(d as f64).sqrt();
    // Scores accumulate as S[i, :] += q[c, i] * k[c, :].
    p.fill(T::zero());
    for c in 0..d {
        let krow = &k[c * m..(c + 1) * m];
        for i in 0..l {
            let qi = q[c * l + i] * scale;
            axpy(qi, krow, &mut p[i * m..(i + 1) * m]);
        }
    }
    for row in p.chunks_exact_mut(m) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let inv = T::one() / sum;
        for s in row.iter_mut() {
            *s *= inv;
        }
    }
    for c in 0..d {
        let vrow = &v[c * m..(c + 1) * m];
        for i in 0..l {
            out[c * l + i] = dot(vrow, &p[i * m..(i + 1) * m]);
        }
    }
}

/// Gradients of [`attention_forward`]; accumulates into `gq`, `gk`, `gv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    p: &[T],
    gout: &[T],
    d: usize,
    l: usize,
    m: usize,
    gq: Option<&mut [T]>,
    gk: Option<&mut [T]>,
    gv: Option<&mut [T]>,
) {
    let scale = T::one() / T::of(d as f64).sqrt();
    if let Some(gv) = gv {
        for c in 0..d {
            let grow = &mut gv[c * m..(c + 1) * m];
            for i in 0..l {
                axpy(gout[c * l + i], &p[i * m..(i + 1) * m], grow);
            }
        }
    }
    if gq.is_none() && gk.is_none() {
        return;
    }
    // dP[i, :] = sum_c gout[c, i] * v[c, :], then dS = P * (dP - <dP, P>).
    let mut ds = vec![T::zero(); l * m];
    for c in 0..d {
        let vrow = &v[c * m..(c + 1) * m];
        for i in 0..l {
            axpy(gout[c * l + i], vrow, &mut ds[i * m..(i + 1) * m]);
        }
    }
    for (row, prow) in ds.chunks_exact_mut(m).zip(p.chunks_exact(m)) {
        let inner = dot(row, prow);
        for (s, &pv) in row.iter_mut().zip(prow) {
            *s = pv * (*s - inner) * scale;
        }
    }
    if let Some(gq) = gq {
        for c in 0..d {
            let krow = &k[c * m..(c + 1) * m];
            for i in 0..l {
                gq[c * l + i] += dot(&ds[i * m..(i + 1) * m], krow);
            }
        }
    }
    if let Some(gk) = gk {
        for c in 0..d {
            let grow = &mut gk[c * m..(c + 1) * m];
            for i in 0..l {
                axpy(q[c * l + i], &ds[i * m..(i + 1) * m], grow);
            }
        }
    }
}
