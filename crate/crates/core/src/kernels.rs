//! Slice-level numeric kernels shared by the tape ops.
//!
//! Loop orders are fixed so results are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators (fixed reduction order).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for q in 0..chunks {
        let i = q * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one image `[c_in, h, w]` into `[c_in·k·k, oh·ow]`.
pub fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let p = g.col_cols();
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into an image gradient.
pub fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let p = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Catmull-Rom style cubic with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Sparse 1-D resampling weights for `in_len -> out_len`.
///
/// When shrinking, the kernel is stretched by the scale so every output
/// integrates over its input footprint. Taps falling outside the signal are
/// dropped and the remaining weights renormalized, so constants are preserved.
#[derive(Clone, Debug)]
pub struct Resample1d {
    pub in_len: usize,
    pub out_len: usize,
    /// `(first input index, weights)` per output sample.
    pub taps: Vec<(usize, Vec<f64>)>,
}

impl Resample1d {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let filter_scale = if scale > 1.0 { scale } else { 1.0 };
        let support = 2.0 * filter_scale;
        let mut taps = Vec::with_capacity(out_len);
        for i in 0..out_len {
            let center = (i as f64 + 0.5) * scale;
            let lo = libm::floor(center - support + 0.5).max(0.0) as usize;
            let hi = (libm::floor(center + support + 0.5) as usize).min(in_len);
            let mut w: Vec<f64> = (lo..hi)
                .map(|j| cubic((j as f64 - center + 0.5) / filter_scale))
                .collect();
            let total: f64 = w.iter().sum();
            if total != 0.0 {
                for v in &mut w {
                    *v /= total;
                }
            }
            taps.push((lo, w));
        }
        Self {
            in_len,
            out_len,
            taps,
        }
    }

    /// Resample rows of a `[planes, h, w]` block along the last axis.
    pub fn apply_rows(&self, src: &[f64], rows: usize, dst: &mut [f64]) {
        for r in 0..rows {
            let s = &src[r * self.in_len..(r + 1) * self.in_len];
            let d = &mut dst[r * self.out_len..(r + 1) * self.out_len];
            for (o, (lo, w)) in d.iter_mut().zip(&self.taps) {
                *o = w.iter().zip(&s[*lo..]).map(|(a, b)| a * b).sum();
            }
        }
    }

    /// Adjoint of [`Self::apply_rows`].
    pub fn apply_rows_t(&self, grad: &[f64], rows: usize, dst: &mut [f64]) {
        for r in 0..rows {
            let g = &grad[r * self.out_len..(r + 1) * self.out_len];
            let d = &mut dst[r * self.in_len..(r + 1) * self.in_len];
            for (gv, (lo, w)) in g.iter().zip(&self.taps) {
                for (j, wv) in w.iter().enumerate() {
                    d[lo + j] += gv * wv;
                }
            }
        }
    }

    /// Resample columns of `planes` images of shape `[in_len, width]`.
    pub fn apply_cols(&self, src: &[f64], planes: usize, width: usize, dst: &mut [f64]) {
        for p in 0..planes {
            let s = &src[p * self.in_len * width..(p + 1) * self.in_len * width];
            let d = &mut dst[p * self.out_len * width..(p + 1) * self.out_len * width];
            for (o, (lo, w)) in self.taps.iter().enumerate() {
                let drow = &mut d[o * width..(o + 1) * width];
                drow.fill(0.0);
                for (j, wv) in w.iter().enumerate() {
                    let srow = &s[(lo + j) * width..(lo + j + 1) * width];
                    for (dv, sv) in drow.iter_mut().zip(srow) {
                        *dv += wv * sv;
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::apply_cols`].
    pub fn apply_cols_t(&self, grad: &[f64], planes: usize, width: usize, dst: &mut [f64]) {
        for p in 0..planes {
            let g = &grad[p * self.out_len * width..(p + 1) * self.out_len * width];
            let d = &mut dst[p * self.in_len * width..(p + 1) * self.in_len * width];
            for (o, (lo, w)) in self.taps.iter().enumerate() {
                let grow = &g[o * width..(o + 1) * width];
                for (j, wv) in w.iter().enumerate() {
                    let drow = &mut d[(lo + j) * width..(lo + j + 1) * width];
                    for (dv, gv) in drow.iter_mut().zip(grow) {
                        *dv += wv * gv;
                    }
                }
            }
        }
    }
}

/// Separable bicubic resize of `planes` images `[h, w] -> [oh, ow]`.
pub fn resize_planes(src: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let rx = Resample1d::new(w, ow);
    let ry = Resample1d::new(h, oh);
    let mut tmp = vec![0.0; planes * h * ow];
    rx.apply_rows(src, planes * h, &mut tmp);
    let mut out = vec![0.0; planes * oh * ow];
    ry.apply_cols(&tmp, planes, ow, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_interpolates_integers() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(-2.0), 0.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-15);
    }

    #[test]
    fn resample_weights_sum_to_one() {
        for (i, o) in [(16, 4), (10, 10), (8, 32), (7, 3)] {
            let r = Resample1d::new(i, o);
            for (_, w) in &r.taps {
                let s: f64 = w.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c1 = vec![0.0; 8];
        gemm_nn(2, 3, 4, &a, &b, &mut c1);
        // bt is 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm_nt(2, 3, 4, &a, &bt, &mut c2);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c3 = vec![0.0; 8];
        gemm_tn(2, 3, 4, &at, &b, &mut c3);
        assert_eq!(c1, c2);
        assert_eq!(c1, c3);
    }
}
