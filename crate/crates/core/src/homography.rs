//! Planar homographies: normalized DLT estimation and bilinear warping.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// 3×3 projective transform, row-major, normalized so `h33 = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography([f64; 9]);

/// A point correspondence `source -> target`.
pub type Correspondence = ((f64, f64), (f64, f64));

const MIN_DET: f64 = 1e-12;

impl Homography {
    pub fn identity() -> Self {
        Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self([1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0])
    }

    /// Normalizes by `m[8]` and checks invertibility.
    pub fn new(m: [f64; 9]) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) || m[8].abs() < 1e-15 {
            return Err(Error::Estimation(format!("cannot normalize homography {:?}", m)));
        }
        let s = m[8];
        let h = Self(m.map(|v| v / s));
        if h.det().abs() <= MIN_DET {
            return Err(Error::Estimation(String::from("singular homography")));
        }
        Ok(h)
    }

    pub fn matrix(&self) -> &[f64; 9] {
        &self.0
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let w = m[6] * x + m[7] * y + m[8];
        ((m[0] * x + m[1] * y + m[2]) / w, (m[3] * x + m[4] * y + m[5]) / w)
    }

    /// Inverse via the adjugate (exact for translations).
    pub fn inverse(&self) -> Result<Self> {
        let m = &self.0;
        let adj = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        Self::new(adj)
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        let (a, b) = (&self.0, &other.0);
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
            }
        }
        Self::new(out)
    }

    /// Mean displacement `‖H(p) − p‖` over the four corners of a `w × h` frame.
    pub fn mean_corner_displacement(&self, w: f64, h: f64) -> f64 {
        let corners = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)];
        corners
            .iter()
            .map(|&(x, y)| {
                let (u, v) = self.apply(x, y);
                libm::hypot(u - x, v - y)
            })
            .sum::<f64>()
            / 4.0
    }
}

/// Result of [`estimate_homography`].
#[derive(Clone, Debug, PartialEq)]
pub struct HomographyFit {
    pub homography: Homography,
    /// RMS reprojection error of the correspondences, pixels.
    pub rms: f64,
}

/// Similarity transform moving the centroid to the origin with mean distance √2.
fn hartley(points: &[(f64, f64)]) -> Result<[f64; 9]> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mean = points.iter().map(|p| libm::hypot(p.0 - cx, p.1 - cy)).sum::<f64>() / n;
    if !(mean > 1e-12) {
        return Err(Error::Estimation(String::from("all points coincide")));
    }
    let s = libm::sqrt(2.0) / mean;
    Ok([s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0])
}

fn apply_raw(m: &[f64; 9], p: (f64, f64)) -> (f64, f64) {
    let w = m[6] * p.0 + m[7] * p.1 + m[8];
    ((m[0] * p.0 + m[1] * p.1 + m[2]) / w, (m[3] * p.0 + m[4] * p.1 + m[5]) / w)
}

/// One-sided Jacobi SVD of a `rows × 9` matrix. Returns singular values and
/// right singular vectors (columns of `V`, row-major 9×9), unsorted.
fn svd_right(a: &mut [f64], rows: usize) -> ([f64; 9], [f64; 81]) {
    const N: usize = 9;
    let mut v = [0.0; 81];
    for i in 0..N {
        v[i * N + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..N - 1 {
            for q in p + 1..N {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..rows {
                    let (x, y) = (a[r * N + p], a[r * N + q]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() <= 1e-15 * libm::sqrt(alpha * beta) || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                for r in 0..rows {
                    let (x, y) = (a[r * N + p], a[r * N + q]);
                    a[r * N + p] = c * x - s * y;
                    a[r * N + q] = s * x + c * y;
                }
                for r in 0..N {
                    let (x, y) = (v[r * N + p], v[r * N + q]);
                    v[r * N + p] = c * x - s * y;
                    v[r * N + q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv = [0.0; N];
    for (c, s) in sv.iter_mut().enumerate() {
        *s = libm::sqrt((0..rows).map(|r| a[r * N + c] * a[r * N + c]).sum::<f64>());
    }
    (sv, v)
}

/// Least-squares homography from `source -> target` correspondences by the
/// Hartley-normalized direct linear transform.
pub fn estimate_homography(corr: &[Correspondence]) -> Result<HomographyFit> {
    if corr.len() < 4 {
        return Err(Error::Estimation(format!(
            "need at least 4 correspondences, got {}",
            corr.len()
        )));
    }
    if corr
        .iter()
        .any(|(a, b)| !(a.0.is_finite() && a.1.is_finite() && b.0.is_finite() && b.1.is_finite()))
    {
        return Err(Error::Estimation(String::from("non-finite correspondence")));
    }
    let src: Vec<(f64, f64)> = corr.iter().map(|c| c.0).collect();
    let dst: Vec<(f64, f64)> = corr.iter().map(|c| c.1).collect();
    let ts = hartley(&src)?;
    let td = hartley(&dst)?;
    let rows = 2 * corr.len().max(5);
    let mut a = vec![0.0; rows * 9];
    for (k, (s, d)) in src.iter().zip(&dst).enumerate() {
        let (x, y) = apply_raw(&ts, *s);
        let (u, v) = apply_raw(&td, *d);
        a[(2 * k) * 9..(2 * k + 1) * 9].copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a[(2 * k + 1) * 9..(2 * k + 2) * 9].copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let (sv, v) = svd_right(&mut a, rows);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| sv[i].partial_cmp(&sv[j]).unwrap_or(core::cmp::Ordering::Equal));
    let (smallest, second) = (order[0], order[1]);
    let largest = sv[order[8]];
    if sv[second] <= 1e-9 * largest {
        return Err(Error::Estimation(String::from(
            "degenerate configuration (collinear or repeated points)",
        )));
    }
    let hn: [f64; 9] = core::array::from_fn(|r| v[r * 9 + smallest]);
    // H = Td⁻¹ · Hn · Ts
    let td_inv = Homography(td).inverse()?;
    let hn = Homography::new(hn)?;
    let h = td_inv.compose(&hn)?.compose(&Homography(ts))?;
    let sq: f64 = corr
        .iter()
        .map(|(s, d)| {
            let (u, v) = h.apply(s.0, s.1);
            (u - d.0) * (u - d.0) + (v - d.1) * (v - d.1)
        })
        .sum();
    Ok(HomographyFit {
        homography: h,
        rms: libm::sqrt(sq / corr.len() as f64),
    })
}

/// Output of [`warp`]: the resampled image and which pixels had a source.
#[derive(Clone, Debug, PartialEq)]
pub struct Warped {
    pub image: RgbImage,
    pub valid: Vec<bool>,
}

fn snap(v: f64) -> f64 {
    let r = libm::round(v);
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Resamples `image` so that `out(h(p)) = image(p)`, by inverse mapping with
/// bilinear interpolation. Pixels without a source are zero and invalid.
pub fn warp(image: &RgbImage, h: &Homography, out_w: usize, out_h: usize) -> Result<Warped> {
    let inv = h.inverse()?;
    let mut data = vec![0.0; 3 * out_w * out_h];
    let mut valid = vec![false; out_w * out_h];
    let plane = out_w * out_h;
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            let (sx, sy) = (snap(sx), snap(sy));
            if let Some(r) = image.sample_bilinear(0, sx, sy) {
                let i = y * out_w + x;
                valid[i] = true;
                data[i] = r;
                data[plane + i] = image.sample_bilinear(1, sx, sy).unwrap_or(0.0);
                data[2 * plane + i] = image.sample_bilinear(2, sx, sy).unwrap_or(0.0);
            }
        }
    }
    Ok(Warped {
        image: RgbImage::new(out_w, out_h, data, image.provenance())?,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_from_fixed_corners() {
        let c = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0)];
        let corr: Vec<Correspondence> = c.iter().map(|&p| (p, p)).collect();
        let fit = estimate_homography(&corr).unwrap();
        let id = Homography::identity();
        for (a, b) in fit.homography.matrix().iter().zip(id.matrix()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(fit.rms < 1e-9);
    }

    #[test]
    fn translation_recovered() {
        let pts = [(1.0, 2.0), (30.0, 4.0), (7.0, 25.0), (40.0, 33.0), (15.0, 15.0)];
        let corr: Vec<Correspondence> = pts.iter().map(|&(x, y)| ((x, y), (x + 5.0, y - 3.0))).collect();
        let h = estimate_homography(&corr).unwrap().homography;
        let m = h.matrix();
        assert!((m[2] - 5.0).abs() < 1e-9);
        assert!((m[5] + 3.0).abs() < 1e-9);
        assert!((m[0] - 1.0).abs() < 1e-9 && m[1].abs() < 1e-9);
    }

    #[test]
    fn too_few_or_degenerate_points() {
        let three: Vec<Correspondence> = (0..3).map(|i| ((i as f64, 0.0), (i as f64, 1.0))).collect();
        assert!(matches!(estimate_homography(&three), Err(Error::Estimation(_))));
        let collinear: Vec<Correspondence> = (0..6)
            .map(|i| ((i as f64, 2.0 * i as f64), (i as f64 + 1.0, 2.0 * i as f64)))
            .collect();
        assert!(matches!(estimate_homography(&collinear), Err(Error::Estimation(_))));
        // three of four collinear
        let c = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (0.0, 5.0)];
        let corr: Vec<Correspondence> = c.iter().map(|&p| (p, p)).collect();
        assert!(estimate_homography(&corr).is_err());
    }

    #[test]
    fn inverse_and_compose() {
        let h = Homography::new([1.02, 0.01, 3.0, -0.015, 0.99, -2.0, 1e-4, -2e-4, 1.0]).unwrap();
        let id = h.compose(&h.inverse().unwrap()).unwrap();
        for (a, b) in id.matrix().iter().zip(Homography::identity().matrix()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(Homography::new([1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn warp_identity_and_integer_shift() {
        let img = RgbImage::from_fn(12, 9, |c, x, y| ((c * 31 + x * 7 + y * 13) % 17) as f64 / 16.0);
        let same = warp(&img, &Homography::identity(), 12, 9).unwrap();
        assert_eq!(same.image, img);
        assert!(same.valid.iter().all(|&v| v));
        let shifted = warp(&img, &Homography::translation(2.0, -1.0), 12, 9).unwrap();
        for y in 0..8 {
            for x in 2..12 {
                for c in 0..3 {
                    assert_eq!(shifted.image.get(c, x, y), img.get(c, x - 2, y + 1));
                }
            }
        }
        assert!(!shifted.valid[0]);
        assert_eq!(shifted.image.get(0, 0, 0), 0.0);
    }
}
