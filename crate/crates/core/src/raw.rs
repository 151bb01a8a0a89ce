//! Raw Bayer frames, photometric alignment, packing, FoV matching and
//! consecutive-patch cropping.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::homography::Homography;
use crate::image::{Provenance, RgbImage};
use crate::tensor::Tensor;

pub const WHITE_LEVEL: u16 = u16::MAX;

/// Colour of a site in the RGGB pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Site {
    R,
    G1,
    G2,
    B,
}

impl Site {
    #[inline]
    pub fn at(x: usize, y: usize) -> Site {
        match (y & 1, x & 1) {
            (0, 0) => Site::R,
            (0, _) => Site::G1,
            (_, 0) => Site::G2,
            _ => Site::B,
        }
    }

    /// Packed channel index (R, G1, G2, B).
    pub fn channel(self) -> usize {
        self as usize
    }

    /// RGB plane the site measures.
    pub fn rgb(self) -> usize {
        match self {
            Site::R => 0,
            Site::G1 | Site::G2 => 1,
            Site::B => 2,
        }
    }
}

/// Single 16-bit RGGB raw frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BayerFrame {
    width: usize,
    height: usize,
    samples: Vec<u16>,
    pub black_level: u16,
    /// `(r_red, r_blue)` white-balance gains.
    pub wb_ratios: (f64, f64),
}

fn check_even(op: &'static str, w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 || w % 2 != 0 || h % 2 != 0 {
        return Err(dim_err(op, format!("dimensions {}×{} must be even and non-zero", w, h)));
    }
    Ok(())
}

impl BayerFrame {
    pub fn new(width: usize, height: usize, samples: Vec<u16>, black_level: u16, wb_ratios: (f64, f64)) -> Result<Self> {
        check_even("bayer_frame", width, height)?;
        if samples.len() != width * height {
            return Err(dim_err(
                "bayer_frame",
                format!("{} samples for {}×{}", samples.len(), width, height),
            ));
        }
        if black_level == WHITE_LEVEL {
            return Err(Error::Range(String::from("black level must be below the white level")));
        }
        Ok(Self {
            width,
            height,
            samples,
            black_level,
            wb_ratios,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[u16] {
        &self.samples
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.samples[y * self.width + x]
    }

    /// Crop that keeps the RGGB phase, so offsets and sizes must be even.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        check_even("bayer_crop", w, h)?;
        if x0 % 2 != 0 || y0 % 2 != 0 {
            return Err(dim_err("bayer_crop", format!("odd offset ({}, {}) breaks the CFA phase", x0, y0)));
        }
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Range(format!(
                "crop {}×{}+{}+{} outside {}×{}",
                w, h, x0, y0, self.width, self.height
            )));
        }
        let mut samples = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            samples.extend_from_slice(&self.samples[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Self {
            width: w,
            height: h,
            samples,
            black_level: self.black_level,
            wb_ratios: self.wb_ratios,
        })
    }
}

/// Black level estimated from a dark frame: the rounded sample mean.
pub fn black_level_from_dark(dark: &BayerFrame) -> u16 {
    let sum: u64 = dark.samples.iter().map(|&s| u64::from(s)).sum();
    let n = dark.samples.len() as u64;
    ((sum + n / 2) / n) as u16
}

/// Black-subtracted, white-balanced and normalized mosaic (one value per site).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMosaic {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl LinearMosaic {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Half-resolution RGB: `(R, (G1 + G2) / 2, B)` per tile.
    pub fn half_res_rgb(&self) -> RgbImage {
        let (w, h) = (self.width / 2, self.height / 2);
        RgbImage::from_fn(w, h, |c, x, y| {
            let (sx, sy) = (2 * x, 2 * y);
            match c {
                0 => self.get(sx, sy),
                1 => 0.5 * (self.get(sx + 1, sy) + self.get(sx, sy + 1)),
                _ => self.get(sx + 1, sy + 1),
            }
        })
    }

    /// RGB at mosaic resolution: half-resolution RGB upsampled ×2 (no demosaicing).
    pub fn to_rgb(&self) -> RgbImage {
        self.half_res_rgb().resize_bicubic(self.width, self.height)
    }
}

/// Applies black-level subtraction, white-balance ratios and normalization.
pub fn photometric_align(frame: &BayerFrame) -> Result<LinearMosaic> {
    let (rr, rb) = frame.wb_ratios;
    if !(rr > 0.0 && rb > 0.0 && rr.is_finite() && rb.is_finite()) {
        return Err(Error::Range(format!("white-balance ratios must be positive, got ({}, {})", rr, rb)));
    }
    let black = f64::from(frame.black_level);
    let norm = 1.0 / (f64::from(WHITE_LEVEL) - black);
    let mut data = Vec::with_capacity(frame.samples.len());
    for y in 0..frame.height {
        for x in 0..frame.width {
            let v = (f64::from(frame.get(x, y)) - black).max(0.0) * norm;
            let gain = match Site::at(x, y) {
                Site::R => rr,
                Site::B => rb,
                _ => 1.0,
            };
            data.push(v * gain);
        }
    }
    Ok(LinearMosaic {
        width: frame.width,
        height: frame.height,
        data,
    })
}

/// Packs an RGGB mosaic into a `(1, 4, H/2, W/2)` tensor with channels
/// `[R, G1, G2, B]`.
pub fn pack_bayer(m: &LinearMosaic) -> Result<Tensor> {
    check_even("pack_bayer", m.width, m.height)?;
    let (w, h) = (m.width / 2, m.height / 2);
    let mut data = vec![0.0; 4 * w * h];
    for y in 0..m.height {
        for x in 0..m.width {
            let c = Site::at(x, y).channel();
            data[(c * h + y / 2) * w + x / 2] = m.get(x, y);
        }
    }
    Tensor::new(vec![1, 4, h, w], data)
}

/// Inverse of [`pack_bayer`].
pub fn unpack_bayer(t: &Tensor) -> Result<LinearMosaic> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 4 {
        return Err(dim_err("unpack_bayer", format!("expected (1, 4, H, W), got {:?}", t.shape())));
    }
    let (mw, mh) = (2 * w, 2 * h);
    let mut data = vec![0.0; mw * mh];
    for y in 0..mh {
        for x in 0..mw {
            let ch = Site::at(x, y).channel();
            data[y * mw + x] = t.data()[(ch * h + y / 2) * w + x / 2];
        }
    }
    Ok(LinearMosaic {
        width: mw,
        height: mh,
        data,
    })
}

/// Region of the LR frame that the HR camera sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FovWindow {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

/// Central window of an `lr_w × lr_h` frame covered by a lens with
/// `focal_ratio` times the focal length. Offsets and sizes are even so the
/// window starts on an R site.
pub fn fov_window(lr_w: usize, lr_h: usize, focal_ratio: f64) -> Result<FovWindow> {
    if !(focal_ratio >= 1.0) || !focal_ratio.is_finite() {
        return Err(Error::Range(format!("focal ratio must be ≥ 1, got {}", focal_ratio)));
    }
    let even = |v: usize| v & !1;
    let width = even(libm::round(lr_w as f64 / focal_ratio) as usize);
    let height = even(libm::round(lr_h as f64 / focal_ratio) as usize);
    if width == 0 || height == 0 || width > lr_w || height > lr_h {
        return Err(Error::Range(format!(
            "FoV window {}×{} does not fit {}×{}",
            width, height, lr_w, lr_h
        )));
    }
    Ok(FovWindow {
        x0: even((lr_w - width) / 2),
        y0: even((lr_h - height) / 2),
        width,
        height,
    })
}

/// FoV matching: the LR window covered by the HR frame, and the HR frame
/// rescaled (if needed) to exactly `zoom ×` that window.
pub fn match_fov(lr_size: (usize, usize), hr: &RgbImage, focal_ratio: f64, zoom: usize) -> Result<(FovWindow, RgbImage)> {
    let win = fov_window(lr_size.0, lr_size.1, focal_ratio)?;
    let target = (win.width * zoom, win.height * zoom);
    let hr = if hr.size() == target {
        hr.clone()
    } else {
        hr.resize_bicubic(target.0, target.1)
    };
    Ok((win, hr))
}

/// Synchronized LR raw and HR sRGB sequences with alignment metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPair {
    pub lr_frames: Vec<BayerFrame>,
    pub hr_frames: Vec<RgbImage>,
    pub fps: f64,
    /// Transform taking captured HR coordinates onto the LR-aligned grid.
    pub homography: Homography,
    pub scale_offset: f64,
    pub zoom_ratio: f64,
    /// Fully valid HR rectangle `(x0, y0, x1, y1)` after warping, if any
    /// part of the HR grid has no source.
    pub valid: Option<ValidRect>,
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValidRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Greedy inscribed rectangle of a validity mask: repeatedly drops the
/// border line with the most invalid pixels until none remain.
pub fn valid_rect(mask: &[bool], w: usize, h: usize) -> Option<ValidRect> {
    let (mut x0, mut y0, mut x1, mut y1) = (0, 0, w, h);
    while x0 < x1 && y0 < y1 {
        let row_bad = |y: usize| (x0..x1).filter(|&x| !mask[y * w + x]).count();
        let col_bad = |x: usize| (y0..y1).filter(|&y| !mask[y * w + x]).count();
        let lines = [row_bad(y0), row_bad(y1 - 1), col_bad(x0), col_bad(x1 - 1)];
        let (worst, &bad) = lines.iter().enumerate().max_by_key(|(i, &b)| (b, core::cmp::Reverse(*i)))?;
        if bad == 0 {
            return Some(ValidRect { x0, y0, x1, y1 });
        }
        match worst {
            0 => y0 += 1,
            1 => y1 -= 1,
            2 => x0 += 1,
            _ => x1 -= 1,
        }
    }
    None
}

impl ClipPair {
    pub fn validate(&self) -> Result<()> {
        if self.lr_frames.len() != self.hr_frames.len() {
            return Err(Error::Contract(format!(
                "{} LR frames but {} HR frames",
                self.lr_frames.len(),
                self.hr_frames.len()
            )));
        }
        if self.lr_frames.is_empty() {
            return Err(Error::Contract(String::from("empty clip")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lr_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr_frames.is_empty()
    }

    pub fn fov(&self) -> Result<FovWindow> {
        let f = &self.lr_frames[0];
        fov_window(f.width(), f.height(), self.zoom_ratio)
    }

    /// Warps every HR frame by `h` onto the FoV-matched grid and records it.
    pub fn aligned(&self, h: &Homography, zoom: usize) -> Result<ClipPair> {
        self.validate()?;
        let win = self.fov()?;
        let (w, hh) = (win.width * zoom, win.height * zoom);
        let mut mask = vec![true; w * hh];
        let mut hr_frames = Vec::with_capacity(self.hr_frames.len());
        for f in &self.hr_frames {
            let warped = crate::homography::warp(f, h, w, hh)?;
            mask.iter_mut().zip(&warped.valid).for_each(|(m, v)| *m &= *v);
            hr_frames.push(warped.image);
        }
        let rect = valid_rect(&mask, w, hh)
            .ok_or_else(|| Error::Estimation(String::from("warped HR frames have no valid region")))?;
        let full = ValidRect { x0: 0, y0: 0, x1: w, y1: hh };
        Ok(ClipPair {
            hr_frames,
            homography: *h,
            valid: (rect != full).then_some(rect),
            ..self.clone()
        })
    }
}

/// How to cut consecutive training samples from a clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSpec {
    /// LR patch side in mosaic pixels (even).
    pub lr_patch: usize,
    /// HR pixels per LR mosaic pixel.
    pub zoom: usize,
    /// Temporal radius `T`.
    pub radius: usize,
    pub count: usize,
    pub seed: u64,
}

/// One LR patch with its HR patches at offsets `−T..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub frame: usize,
    /// Patch origin inside the LR FoV window, mosaic pixels.
    pub lr_origin: (usize, usize),
    pub lr: BayerFrame,
    pub hr: Vec<RgbImage>,
}

impl TrainingSample {
    pub fn radius(&self) -> usize {
        self.hr.len() / 2
    }

    /// HR patch at temporal offset `t`.
    pub fn hr_at(&self, t: i32) -> Option<&RgbImage> {
        let i = self.radius() as i64 + i64::from(t);
        usize::try_from(i).ok().and_then(|i| self.hr.get(i))
    }
}

/// Random consecutive patches from an FoV-matched, aligned clip. The LR
/// window lies inside the FoV window and the HR window is its `zoom ×` image
/// in every neighbouring frame.
pub fn crop_patches(pair: &ClipPair, spec: &PatchSpec) -> Result<Vec<TrainingSample>> {
    pair.validate()?;
    let span = 2 * spec.radius + 1;
    if pair.len() < span {
        return Err(Error::Contract(format!(
            "clip has {} frames, temporal radius {} needs {}",
            pair.len(),
            spec.radius,
            span
        )));
    }
    if spec.lr_patch == 0 || spec.lr_patch % 2 != 0 || spec.zoom == 0 {
        return Err(Error::Config(format!(
            "LR patch must be even and positive (got {}), zoom positive (got {})",
            spec.lr_patch, spec.zoom
        )));
    }
    let win = pair.fov()?;
    let hr_size = (win.width * spec.zoom, win.height * spec.zoom);
    if let Some(bad) = pair.hr_frames.iter().find(|f| f.size() != hr_size) {
        return Err(dim_err(
            "crop_patches",
            format!("HR frame {:?} is not FoV-matched to {:?}", bad.size(), hr_size),
        ));
    }
    let hp = spec.lr_patch * spec.zoom;
    let rect = pair.valid.unwrap_or(ValidRect {
        x0: 0,
        y0: 0,
        x1: hr_size.0,
        y1: hr_size.1,
    });
    // Even LR offsets whose HR window lies inside the valid rectangle.
    let range = |lo: usize, hi: usize| -> Result<(usize, usize)> {
        let first = lo.div_ceil(2 * spec.zoom);
        let last = match hi.checked_sub(hp) {
            Some(v) => v / (2 * spec.zoom),
            None => 0,
        };
        if hi < lo + hp || first > last {
            return Err(Error::Range(format!(
                "LR patch {} (HR {}) does not fit the valid region {:?} of {}×{}",
                spec.lr_patch, hp, rect, hr_size.0, hr_size.1
            )));
        }
        Ok((first, last))
    };
    let (fx, lx) = range(rect.x0, rect.x1)?;
    let (fy, ly) = range(rect.y0, rect.y1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let frame = rng.gen_range(spec.radius..pair.len() - spec.radius);
        let ox = 2 * rng.gen_range(fx..=lx);
        let oy = 2 * rng.gen_range(fy..=ly);
        let lr = pair.lr_frames[frame].crop(win.x0 + ox, win.y0 + oy, spec.lr_patch, spec.lr_patch)?;
        let hr = (frame - spec.radius..=frame + spec.radius)
            .map(|f| pair.hr_frames[f].crop(ox * spec.zoom, oy * spec.zoom, hp, hp))
            .collect::<Result<Vec<_>>>()?;
        out.push(TrainingSample {
            frame,
            lr_origin: (ox, oy),
            lr,
            hr,
        });
    }
    Ok(out)
}

/// Bicubic baseline: the half-resolution RGB of the aligned mosaic upsampled
/// to `zoom ×` the mosaic size.
pub fn bicubic_upscale(frame: &BayerFrame, zoom: usize) -> Result<RgbImage> {
    let m = photometric_align(frame)?;
    Ok(m
        .half_res_rgb()
        .resize_bicubic(m.width * zoom, m.height * zoom)
        .clamped()
        .with_provenance(Provenance::Synthetic))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(w: usize, h: usize, f: impl Fn(usize, usize) -> u16) -> BayerFrame {
        let s = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        BayerFrame::new(w, h, s, 0, (1.0, 1.0)).unwrap()
    }

    #[test]
    fn align_examples() {
        let mut f = frame(2, 2, |_, _| 64);
        f.black_level = 64;
        assert!(photometric_align(&f).unwrap().data.iter().all(|&v| v == 0.0));
        let g = frame(2, 2, |x, _| if x == 1 { 1000 } else { 0 });
        assert_eq!(photometric_align(&g).unwrap().get(1, 0), 1000.0 / 65535.0);
        let mut r = frame(2, 2, |_, _| 1024);
        r.black_level = 64;
        r.wb_ratios = (1.5, 2.0);
        let a = photometric_align(&r).unwrap();
        assert!((a.get(0, 0) - 960.0 * 1.5 / 65471.0).abs() < 1e-15);
        assert!((a.get(0, 0) - 0.021995).abs() < 1e-6);
        r.wb_ratios = (0.0, 1.0);
        assert!(photometric_align(&r).is_err());
    }

    #[test]
    fn pack_tile_and_round_trip() {
        let f = frame(2, 2, |x, y| (1 + x + 2 * y) as u16);
        let m = photometric_align(&f).unwrap();
        let t = pack_bayer(&m).unwrap();
        assert_eq!(t.shape(), &[1, 4, 1, 1]);
        let want: Vec<f64> = (1..=4).map(|v| v as f64 / 65535.0).collect();
        assert_eq!(t.data(), &want[..]);
        let big = frame(8, 6, |x, y| (x * 37 + y * 101) as u16);
        let m = photometric_align(&big).unwrap();
        assert_eq!(unpack_bayer(&pack_bayer(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(BayerFrame::new(3, 2, vec![0; 6], 0, (1.0, 1.0)).is_err());
        let m = LinearMosaic {
            width: 3,
            height: 2,
            data: vec![0.0; 6],
        };
        assert!(pack_bayer(&m).is_err());
    }

    #[test]
    fn fov_examples() {
        let w = fov_window(1384, 1032, 4.0).unwrap();
        assert_eq!((w.width, w.height), (346, 258));
        let ideal = (1384.0 - 346.0) / 2.0;
        let right = (1384 - w.x0 - w.width) as f64;
        assert!((w.x0 as f64 - ideal).abs() <= 1.0 && (right - ideal).abs() <= 1.0);
        assert_eq!(fov_window(64, 48, 1.0).unwrap(), FovWindow { x0: 0, y0: 0, width: 64, height: 48 });
        assert!(fov_window(64, 48, 0.5).is_err());
    }

    #[test]
    fn valid_rect_of_shifted_mask() {
        let (w, h) = (10, 8);
        let mask: Vec<bool> = (0..w * h).map(|i| i % w >= 3 && i / w < 6).collect();
        assert_eq!(valid_rect(&mask, w, h), Some(ValidRect { x0: 3, y0: 0, x1: 10, y1: 6 }));
        assert_eq!(valid_rect(&[false; 4], 2, 2), None);
    }

    #[test]
    fn dark_frame_mean() {
        let d = frame(4, 2, |x, _| 60 + x as u16);
        assert_eq!(black_level_from_dark(&d), 62);
    }
}
