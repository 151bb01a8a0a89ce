use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Where an image's values came from; decides the PSNR peak.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    /// Decoded from 8-bit sRGB, values are multiples of 1/255.
    Srgb8,
    /// Computed in floating point (renders, network outputs, linear raw).
    Synthetic,
}

/// Planar `3 × H × W` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
    provenance: Provenance,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(dim_err(
                "rgb_image",
                format!("{}×{}×3 needs {} values, got {}", width, height, 3 * width * height, data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
            provenance,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for v in rgb {
            data.extend(core::iter::repeat(v).take(width * height));
        }
        Self {
            width,
            height,
            data,
            provenance: Provenance::Synthetic,
        }
    }

    /// Builds an image from `f(channel, x, y)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, x, y));
                }
            }
        }
        Self {
            width,
            height,
            data,
            provenance: Provenance::Synthetic,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = p;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// `(1, 3, H, W)` tensor view (copied).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone()).expect("consistent dims")
    }

    /// Inverse of [`Self::to_tensor`].
    pub fn from_tensor(t: &Tensor, provenance: Provenance) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 3 {
            return Err(dim_err("rgb_image", format!("expected (1, 3, H, W), got {:?}", t.shape())));
        }
        Self::new(w, h, t.data().to_vec(), provenance)
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Range(format!(
                "crop {}×{}+{}+{} outside {}×{}",
                w, h, x0, y0, self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Self::new(w, h, data, self.provenance)
    }

    /// Separable cubic (a = −0.5) resize, antialiased when shrinking.
    pub fn resize_bicubic(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.size() {
            return self.clone();
        }
        let data = kernels::resize_planes(&self.data, 3, self.height, self.width, height, width);
        Self {
            width,
            height,
            data,
            provenance: Provenance::Synthetic,
        }
    }

    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Clamps to `[0, 1]` and rounds to the 8-bit grid (round half up).
    pub fn quantized_8bit(&self) -> Self {
        let mut out = self.clone();
        out.data
            .iter_mut()
            .for_each(|v| *v = f64::from(quantize_u8(*v)) / 255.0);
        out.provenance = Provenance::Srgb8;
        out
    }

    /// Interleaved 8-bit RGB bytes.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push(quantize_u8(self.data[c * n + i]));
            }
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let n = width * height;
        if bytes.len() != 3 * n {
            return Err(dim_err("rgb_image", format!("{} bytes for {}×{} RGB", bytes.len(), width, height)));
        }
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = f64::from(bytes[3 * i + c]) / 255.0;
            }
        }
        Self::new(width, height, data, Provenance::Srgb8)
    }

    /// Rec. 601 luma `0.299 R + 0.587 G + 0.114 B`, row-major `H × W`.
    pub fn luma(&self) -> Vec<f64> {
        let n = self.width * self.height;
        (0..n)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
            .collect()
    }

    /// Bilinear sample of channel `c` at continuous pixel coordinates
    /// (pixel centres at integers). `None` outside `[0, w-1] × [0, h-1]`.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> Option<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
            return None;
        }
        let x0 = libm::floor(x) as usize;
        let y0 = libm::floor(y) as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(c, x0, y0) * (1.0 - fx) + self.get(c, x1, y0) * fx;
        let bot = self.get(c, x0, y1) * (1.0 - fx) + self.get(c, x1, y1) * fx;
        Some(top * (1.0 - fy) + bot * fy)
    }
}

/// Clamp to `[0, 1]` and round half up onto `0..=255`.
pub fn quantize_u8(v: f64) -> u8 {
    libm::floor(v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

/// Clamp to `[0, 1]` and round half up onto `0..=65535`.
pub fn quantize_u16(v: f64) -> u16 {
    libm::floor(v.clamp(0.0, 1.0) * 65535.0 + 0.5) as u16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let img = RgbImage::from_fn(4, 3, |c, x, y| (c * 100 + y * 10 + x) as f64 / 300.0);
        let back = RgbImage::from_tensor(&img.to_tensor(), Provenance::Synthetic).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize_u8(0.5 / 255.0), 1);
        assert_eq!(quantize_u8(-0.2), 0);
        assert_eq!(quantize_u8(1.7), 255);
        assert_eq!(quantize_u16(1.0), 65535);
    }

    #[test]
    fn rgb8_round_trip() {
        let bytes: Vec<u8> = (0..24).map(|v| (v * 10) as u8).collect();
        let img = RgbImage::from_rgb8(4, 2, &bytes).unwrap();
        assert_eq!(img.to_rgb8(), bytes);
    }

    #[test]
    fn resize_preserves_constants() {
        let img = RgbImage::filled(8, 6, [0.25, 0.5, 0.75]);
        let up = img.resize_bicubic(32, 24);
        assert!(up.data().iter().take(32 * 24).all(|v| (v - 0.25).abs() < 1e-12));
        let down = img.resize_bicubic(4, 3);
        assert!(down.plane(2).iter().all(|v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn crop_out_of_bounds_is_an_error() {
        let img = RgbImage::filled(4, 4, [0.0; 3]);
        assert!(img.crop(2, 2, 3, 1).is_err());
        assert_eq!(img.crop(1, 1, 3, 3).unwrap().size(), (3, 3));
    }
}
