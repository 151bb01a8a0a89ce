//! PSNR, SSIM and a feature-space distance.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::features::{Extractor, Group};
use crate::image::{Provenance, RgbImage};

/// Reported PSNR when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

fn same_size(op: &'static str, a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.size() != b.size() {
        return Err(dim_err(op, format!("{:?} vs {:?}", a.size(), b.size())));
    }
    Ok(())
}

/// Peak implied by where the data came from: 255 for 8-bit sources, 1 otherwise.
pub fn peak_for(p: Provenance) -> f64 {
    match p {
        Provenance::Srgb8 => 255.0,
        Provenance::Synthetic => 1.0,
    }
}

/// `10·log10(peak² / MSE)` over all three channels, with both images read on
/// a `[0, peak]` scale. Identical images give [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage, peak: f64) -> Result<f64> {
    same_size("psnr", a, b)?;
    if !(peak > 0.0) {
        return Err(Error::Range(format!("peak must be positive, got {}", peak)));
    }
    let n = a.data().len();
    if n == 0 {
        return Err(dim_err("psnr", String::from("empty image")));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (x - y) * peak;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(peak * peak / mse)).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the luma values.
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    /// Normalized 1-D Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                libm::exp(-d * d / (2.0 * self.sigma * self.sigma))
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Valid-mode separable filtering of a `h × w` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(j, t)| t * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM of the Rec. 601 luma over all fully covered windows.
pub fn ssim_with(a: &RgbImage, b: &RgbImage, cfg: &SsimConfig) -> Result<f64> {
    same_size("ssim", a, b)?;
    let (w, h) = a.size();
    if cfg.window == 0 || w < cfg.window || h < cfg.window {
        return Err(dim_err(
            "ssim",
            format!("{}×{} image is smaller than the {}×{} window", w, h, cfg.window, cfg.window),
        ));
    }
    let taps = cfg.taps();
    let (ya, yb) = (a.luma(), b.luma());
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let cross: Vec<f64> = ya.iter().zip(&yb).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(&ya, w, h, &taps);
    let mu_b = filter_valid(&yb, w, h, &taps);
    let ea2 = filter_valid(&sq(&ya), w, h, &taps);
    let eb2 = filter_valid(&sq(&yb), w, h, &taps);
    let eab = filter_valid(&cross, w, h, &taps);
    let c1 = (cfg.k1 * cfg.data_range) * (cfg.k1 * cfg.data_range);
    let c2 = (cfg.k2 * cfg.data_range) * (cfg.k2 * cfg.data_range);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = ea2[i] - ma * ma;
            let vb = eb2[i] - mb * mb;
            let cov = eab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

/// Mean per-site L2 distance between the Φ2 grids of two equally sized
/// images, averaged over layers.
pub fn feat_dist(a: &RgbImage, b: &RgbImage, extractor: &Extractor) -> Result<f64> {
    same_size("feat_dist", a, b)?;
    let fa = extractor.extract(a, Group::Phi2)?;
    let fb = extractor.extract(b, Group::Phi2)?;
    let mut sum = 0.0;
    for (la, lb) in fa.layers.iter().zip(&fb.layers) {
        let per_site: f64 = (0..la.len())
            .map(|i| {
                let d: f64 = la.vector(i).iter().zip(lb.vector(i)).map(|(x, y)| (x - y) * (x - y)).sum();
                libm::sqrt(d)
            })
            .sum();
        sum += per_site / la.len() as f64;
    }
    Ok(sum / fa.layers.len() as f64)
}

/// Scores of one output frame against a reference.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub label: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub feat_dist: Option<f64>,
}

/// Per-frame scores plus their arithmetic means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    /// Peak used for PSNR (255 for 8-bit sources, 1 for float data).
    pub peak: f64,
    pub frames: Vec<FrameMetrics>,
}

impl MetricReport {
    pub fn new(peak: f64) -> Self {
        Self {
            peak,
            frames: Vec::new(),
        }
    }

    /// Scores `output` against `reference` and appends the row.
    pub fn push(&mut self, label: &str, output: &RgbImage, reference: &RgbImage, extractor: Option<&Extractor>) -> Result<()> {
        let row = FrameMetrics {
            label: String::from(label),
            psnr_db: psnr(output, reference, self.peak)?,
            ssim: ssim(output, reference)?,
            feat_dist: extractor.map(|e| feat_dist(output, reference, e)).transpose()?,
        };
        self.frames.push(row);
        Ok(())
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean(|f| Some(f.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean(|f| Some(f.ssim))
    }

    /// Mean feature distance, if every frame has one.
    pub fn mean_feat_dist(&self) -> Option<f64> {
        if self.frames.is_empty() || self.frames.iter().any(|f| f.feat_dist.is_none()) {
            return None;
        }
        Some(self.mean(|f| f.feat_dist))
    }

    fn mean(&self, f: impl Fn(&FrameMetrics) -> Option<f64>) -> f64 {
        if self.frames.is_empty() {
            return f64::NAN;
        }
        self.frames.iter().filter_map(f).sum::<f64>() / self.frames.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(w: usize, h: usize, seed: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |c, x, y| ((x * 7 + y * 13 + c * 5 + seed * 3) % 11) as f64 / 10.0)
    }

    #[test]
    fn psnr_closed_form() {
        let a = RgbImage::filled(8, 8, [100.0 / 255.0; 3]);
        let b = RgbImage::filled(8, 8, [116.0 / 255.0; 3]);
        let p = psnr(&a, &b, 255.0).unwrap();
        assert!((p - 24.0484).abs() < 1e-3);
        assert_eq!(p, psnr(&b, &a, 255.0).unwrap());
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = pattern(24, 20, 1);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let bin = RgbImage::from_fn(24, 24, |_, x, y| ((x / 3 + y / 2) % 2) as f64);
        let inv = RgbImage::from_fn(24, 24, |c, x, y| 1.0 - bin.get(c, x, y));
        assert!(ssim(&bin, &inv).unwrap() < 0.0);
        assert!(ssim(&RgbImage::filled(8, 12, [0.0; 3]), &RgbImage::filled(8, 12, [0.0; 3])).is_err());
    }

    #[test]
    fn report_means() {
        let a = pattern(16, 16, 0);
        let b = pattern(16, 16, 1);
        let mut r = MetricReport::new(1.0);
        r.push("x", &a, &a, None).unwrap();
        r.push("y", &a, &b, None).unwrap();
        let want = (PSNR_CAP + psnr(&a, &b, 1.0).unwrap()) / 2.0;
        assert!((r.mean_psnr() - want).abs() < 1e-12);
        assert!(r.mean_feat_dist().is_none());
    }
}
