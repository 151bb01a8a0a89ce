//! Coordinate-tagged feature grids from a fixed convolutional stack.
//!
//! The stack is split into two scale groups. `Phi2` is the shallow, fine
//! group used against HR frames; `Phi1` continues on top of it with coarser
//! strides and is used at LR scale. Each designated layer yields one
//! [`LayerGrid`]: one unit vector per spatial site after subtracting the
//! layer's per-channel mean.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::image::RgbImage;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    /// Deep, coarse layers (LR-scale alignment).
    Phi1,
    /// Shallow, fine layers (HR-scale reference and temporal terms).
    Phi2,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Phi1 => "PHI1",
            Group::Phi2 => "PHI2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "PHI1" | "phi1" => Some(Group::Phi1),
            "PHI2" | "phi2" => Some(Group::Phi2),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            channels,
            kernel,
            stride,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// Seeded random orthogonal convolution stack.
    BuiltinRandom,
    /// Grids are computed elsewhere and imported from files.
    ExternalFile,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorSpec {
    pub seed: u64,
    /// Shallow group, applied first to the RGB input.
    pub phi2: Vec<LayerSpec>,
    /// Deep group, applied to the output of the last `phi2` layer.
    pub phi1: Vec<LayerSpec>,
    pub source: FeatureSource,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            phi2: vec![
                LayerSpec::new(16, 3, 1),
                LayerSpec::new(32, 3, 2),
                LayerSpec::new(64, 3, 2),
            ],
            phi1: vec![LayerSpec::new(96, 3, 2), LayerSpec::new(96, 3, 2)],
            source: FeatureSource::BuiltinRandom,
        }
    }
}

impl ExtractorSpec {
    /// Cumulative stride after each layer of the full stack (`phi2` then `phi1`).
    pub fn cumulative_strides(&self) -> Vec<usize> {
        let mut acc = 1;
        self.phi2
            .iter()
            .chain(&self.phi1)
            .map(|l| {
                acc *= l.stride;
                acc
            })
            .collect()
    }

    /// Indices into the full stack of the layers that make up `group`.
    pub fn group_layers(&self, group: Group) -> core::ops::Range<usize> {
        match group {
            Group::Phi2 => 0..self.phi2.len(),
            Group::Phi1 => self.phi2.len()..self.phi2.len() + self.phi1.len(),
        }
    }

    /// Smallest square input for which every layer of `group` has at least
    /// one site per stride step.
    pub fn min_input(&self, group: Group) -> usize {
        let strides = self.cumulative_strides();
        self.group_layers(group)
            .last()
            .map_or(1, |i| strides[i])
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

/// Immutable feature extractor; safe to share across threads.
#[derive(Clone, Debug)]
pub struct Extractor {
    spec: ExtractorSpec,
    layers: Vec<ConvLayer>,
}

/// One layer's unit feature vectors, shape `(n, dim)`, with site coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrid {
    pub coords: Vec<(u32, u32)>,
    pub vectors: Tensor,
}

impl LayerGrid {
    pub fn new(coords: Vec<(u32, u32)>, vectors: Tensor) -> Result<Self> {
        let (n, _) = vectors.dims2()?;
        if n != coords.len() {
            return Err(dim_err(
                "layer_grid",
                format!("{} coordinates for {} vectors", coords.len(), n),
            ));
        }
        Ok(Self { coords, vectors })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[i * d..(i + 1) * d]
    }
}

/// Feature grid of one scale group, one [`LayerGrid`] per designated layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub group: Group,
    /// `(height, width)` of the image the grid was extracted from.
    pub source_size: (usize, usize),
    pub layers: Vec<LayerGrid>,
}

impl FeatureGrid {
    /// Total number of entries across layers.
    pub fn len(&self) -> usize {
        self.layers.iter().map(LayerGrid::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records the grid on `tape` (as params when `trainable`).
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> TapeGrid {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let v = if trainable {
                    tape.param(l.vectors.clone())
                } else {
                    tape.constant(l.vectors.clone())
                };
                TapeLayer {
                    coords: l.coords.clone(),
                    features: v,
                }
            })
            .collect();
        TapeGrid {
            group: self.group,
            source_size: self.source_size,
            layers,
        }
    }
}

/// A layer grid whose vectors live on a [`Tape`].
#[derive(Clone, Debug)]
pub struct TapeLayer {
    pub coords: Vec<(u32, u32)>,
    pub features: Var,
}

/// A [`FeatureGrid`] recorded on a tape, so losses can differentiate through it.
#[derive(Clone, Debug)]
pub struct TapeGrid {
    pub group: Group,
    pub source_size: (usize, usize),
    pub layers: Vec<TapeLayer>,
}

impl TapeGrid {
    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.coords.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies values off the tape.
    pub fn detach(&self, tape: &Tape) -> FeatureGrid {
        FeatureGrid {
            group: self.group,
            source_size: self.source_size,
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrid {
                    coords: l.coords.clone(),
                    vectors: tape.value(l.features).clone(),
                })
                .collect(),
        }
    }

    /// Keeps the listed sites of each layer (`sites[layer]`).
    pub fn select(&self, tape: &mut Tape, sites: &[Vec<usize>]) -> Result<TapeGrid> {
        if sites.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "{} site lists for {} layers",
                sites.len(),
                self.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, rows) in self.layers.iter().zip(sites) {
            let features = tape.gather_rows(l.features, rows)?;
            let coords = rows.iter().map(|&r| l.coords[r]).collect();
            layers.push(TapeLayer { coords, features });
        }
        Ok(TapeGrid {
            group: self.group,
            source_size: self.source_size,
            layers,
        })
    }
}

/// One layer of uncentred activations.
#[derive(Clone, Debug)]
pub struct RawLayer {
    pub coords: Vec<(u32, u32)>,
    /// `(sites, channels)`.
    pub rows: Var,
}

/// Uncentred activations of a scale group, for losses that centre one
/// image's features on another image's channel means.
#[derive(Clone, Debug)]
pub struct RawGrid {
    pub group: Group,
    pub source_size: (usize, usize),
    pub layers: Vec<RawLayer>,
}

impl RawGrid {
    /// Per-layer channel means over all sites.
    pub fn channel_means(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.layers.iter().map(|l| tape.mean_axis0(l.rows)).collect()
    }

    /// Keeps the listed sites of each layer.
    pub fn select(&self, tape: &mut Tape, sites: &[Vec<usize>]) -> Result<RawGrid> {
        if sites.len() != self.layers.len() {
            return Err(Error::Contract(format!("{} site lists for {} layers", sites.len(), self.layers.len())));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, idx) in self.layers.iter().zip(sites) {
            layers.push(RawLayer {
                coords: idx.iter().map(|&r| l.coords[r]).collect(),
                rows: tape.gather_rows(l.rows, idx)?,
            });
        }
        Ok(RawGrid {
            group: self.group,
            source_size: self.source_size,
            layers,
        })
    }

    /// Subtracts `means[layer]` and normalizes every site to unit length.
    pub fn centered(&self, tape: &mut Tape, means: &[Var]) -> Result<TapeGrid> {
        if means.len() != self.layers.len() {
            return Err(Error::Contract(format!("{} mean vectors for {} layers", means.len(), self.layers.len())));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, &m) in self.layers.iter().zip(means) {
            let centered = tape.sub_row(l.rows, m)?;
            layers.push(TapeLayer {
                coords: l.coords.clone(),
                features: tape.normalize_rows(centered)?,
            });
        }
        Ok(TapeGrid {
            group: self.group,
            source_size: self.source_size,
            layers,
        })
    }

    /// Centred on its own channel means.
    pub fn self_centered(&self, tape: &mut Tape) -> Result<TapeGrid> {
        let means = self.channel_means(tape)?;
        self.centered(tape, &means)
    }
}

/// Orthonormal rows (or columns, when there are more rows than columns) of a
/// Gaussian matrix, by modified Gram-Schmidt.
fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut m: Vec<f64> = (0..r * c).map(|_| StandardNormal.sample(rng)).collect();
    for i in 0..r {
        for j in 0..i {
            let d: f64 = (0..c).map(|t| m[i * c + t] * m[j * c + t]).sum();
            for t in 0..c {
                m[i * c + t] -= d * m[j * c + t];
            }
        }
        let norm = libm::sqrt((0..c).map(|t| m[i * c + t] * m[i * c + t]).sum::<f64>());
        for t in 0..c {
            m[i * c + t] /= norm;
        }
    }
    if !transpose {
        return m;
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..r {
        for j in 0..c {
            out[j * cols + i] = m[i * c + j];
        }
    }
    out
}

impl Extractor {
    /// Builds the stack with orthogonal weights drawn from `spec.seed`.
    pub fn build(spec: ExtractorSpec) -> Result<Self> {
        if spec.phi1.is_empty() || spec.phi2.is_empty() {
            return Err(Error::Config(String::from(
                "each scale group needs at least one layer",
            )));
        }
        if let Some(l) = spec
            .phi2
            .iter()
            .chain(&spec.phi1)
            .find(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0)
        {
            return Err(Error::Config(format!("degenerate layer {:?}", l)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut c_in = 3;
        let gain = libm::sqrt(2.0);
        let layers = spec
            .phi2
            .iter()
            .chain(&spec.phi1)
            .map(|l| {
                let fan_in = c_in * l.kernel * l.kernel;
                let mut w = orthogonal(l.channels, fan_in, &mut rng);
                w.iter_mut().for_each(|v| *v *= gain);
                let weight = Tensor::new(vec![l.channels, c_in, l.kernel, l.kernel], w).expect("shape");
                c_in = l.channels;
                ConvLayer {
                    weight,
                    bias: Tensor::zeros(&[l.channels]),
                    stride: l.stride,
                    padding: l.kernel / 2,
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    /// Weight tensors of every layer, in stack order.
    pub fn weights(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().map(|l| &l.weight)
    }

    /// Runs the stack on `image: (1, 3, H, W)` recorded on `tape` and returns
    /// the grid for `group`, each layer centred on its own channel mean.
    /// Gradients flow back to `image`.
    pub fn extract_on(&self, tape: &mut Tape, image: Var, group: Group) -> Result<TapeGrid> {
        self.activations_on(tape, image, group)?.self_centered(tape)
    }

    /// Uncentred activations of the group's layers as `(sites, channels)`
    /// matrices.
    pub fn activations_on(&self, tape: &mut Tape, image: Var, group: Group) -> Result<RawGrid> {
        let (n, c, h, w) = tape.value(image).dims4()?;
        if n != 1 || c != 3 {
            return Err(dim_err("extract", format!("expected (1, 3, H, W), got {:?}", tape.shape(image))));
        }
        let min = self.spec.min_input(group);
        if h < min || w < min {
            return Err(dim_err(
                "extract",
                format!("{}×{} image smaller than {} group minimum {}", w, h, group.as_str(), min),
            ));
        }
        let wanted = self.spec.group_layers(group);
        let mut x = image;
        let mut out = Vec::with_capacity(wanted.len());
        for (i, layer) in self.layers.iter().enumerate().take(wanted.end) {
            let wv = tape.constant(layer.weight.clone());
            let bv = tape.constant(layer.bias.clone());
            let conv = tape.conv2d(x, wv, layer.stride, layer.padding)?;
            let biased = tape.channel_bias(conv, bv)?;
            x = tape.relu(biased)?;
            if wanted.contains(&i) {
                let (_, c, lh, lw) = tape.value(x).dims4()?;
                let flat = tape.reshape(x, &[c, lh * lw])?;
                let rows = tape.transpose(flat)?;
                let coords = (0..lh * lw).map(|i| ((i % lw) as u32, (i / lw) as u32)).collect();
                out.push(RawLayer { coords, rows });
            }
        }
        Ok(RawGrid {
            group,
            source_size: (h, w),
            layers: out,
        })
    }

    /// Non-differentiable extraction.
    pub fn extract(&self, image: &RgbImage, group: Group) -> Result<FeatureGrid> {
        let mut tape = Tape::new();
        let x = tape.constant(image.to_tensor());
        let grid = self.extract_on(&mut tape, x, group)?;
        Ok(grid.detach(&tape))
    }

    /// Spatial size of every layer of `group` for an `h × w` input.
    pub fn layer_sizes(&self, h: usize, w: usize, group: Group) -> Vec<(usize, usize)> {
        let (mut hh, mut ww) = (h, w);
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate().take(self.spec.group_layers(group).end) {
            let k = l.weight.shape()[2];
            hh = (hh + 2 * l.padding - k) / l.stride + 1;
            ww = (ww + 2 * l.padding - k) / l.stride + 1;
            if self.spec.group_layers(group).contains(&i) {
                out.push((hh, ww));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |c, x, y| {
            0.5 + 0.4 * libm::sin(0.7 * x as f64 + 1.3 * c as f64) * libm::cos(0.45 * y as f64)
        })
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Extractor::build(ExtractorSpec::default()).unwrap();
        let b = Extractor::build(ExtractorSpec::default()).unwrap();
        assert!(a.weights().zip(b.weights()).all(|(x, y)| x == y));
        let c = Extractor::build(ExtractorSpec {
            seed: 2,
            ..ExtractorSpec::default()
        })
        .unwrap();
        let d = Extractor::build(ExtractorSpec {
            seed: 1,
            ..ExtractorSpec::default()
        })
        .unwrap();
        assert!(c.weights().zip(d.weights()).any(|(x, y)| x != y));
    }

    #[test]
    fn default_strides() {
        assert_eq!(ExtractorSpec::default().cumulative_strides(), vec![1, 2, 4, 8, 16]);
        let spec = ExtractorSpec::default();
        let channels: Vec<usize> = spec.phi2.iter().chain(&spec.phi1).map(|l| l.channels).collect();
        assert_eq!(channels, vec![16, 32, 64, 96, 96]);
    }

    #[test]
    fn empty_group_is_config_error() {
        let spec = ExtractorSpec {
            phi1: vec![],
            ..ExtractorSpec::default()
        };
        assert!(matches!(Extractor::build(spec), Err(Error::Config(_))));
    }

    #[test]
    fn weights_have_orthonormal_rows() {
        let ex = Extractor::build(ExtractorSpec::default()).unwrap();
        let w = ex.weights().nth(1).unwrap();
        let (co, ci, k, _) = w.dims4().unwrap();
        let fan = ci * k * k;
        let g = libm::sqrt(2.0);
        for i in 0..co {
            for j in 0..co {
                let d: f64 = (0..fan).map(|t| w.data()[i * fan + t] * w.data()[j * fan + t]).sum::<f64>() / (g * g);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn grid_entry_count_and_unit_norm() {
        let ex = Extractor::build(ExtractorSpec::default()).unwrap();
        let img = test_image(32, 24);
        let g2 = ex.extract(&img, Group::Phi2).unwrap();
        // strides 1, 2, 4 with same padding
        assert_eq!(g2.len(), 32 * 24 + 16 * 12 + 8 * 6);
        let g1 = ex.extract(&img, Group::Phi1).unwrap();
        assert_eq!(g1.len(), 4 * 3 + 2 * 2);
        assert_eq!(ex.layer_sizes(24, 32, Group::Phi1), vec![(3, 4), (2, 2)]);
        for layer in g2.layers.iter().chain(&g1.layers) {
            for i in 0..layer.len() {
                let v = layer.vector(i);
                let n: f64 = v.iter().map(|x| x * x).sum();
                assert!((libm::sqrt(n) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_small_image_is_rejected() {
        let ex = Extractor::build(ExtractorSpec::default()).unwrap();
        let img = test_image(8, 8);
        assert!(matches!(ex.extract(&img, Group::Phi1), Err(Error::Dimension { .. })));
        assert!(ex.extract(&img, Group::Phi2).is_ok());
    }

    #[test]
    fn extraction_is_deterministic() {
        let ex = Extractor::build(ExtractorSpec::default()).unwrap();
        let img = test_image(16, 16);
        assert_eq!(ex.extract(&img, Group::Phi2).unwrap(), ex.extract(&img, Group::Phi2).unwrap());
    }

    #[test]
    fn constant_image_gives_identical_interior_features() {
        let ex = Extractor::build(ExtractorSpec::default()).unwrap();
        let img = RgbImage::filled(24, 24, [0.3, 0.6, 0.2]);
        let g = ex.extract(&img, Group::Phi2).unwrap();
        // first layer: 3×3 kernel, sites at least 1 px from the border
        let l0 = &g.layers[0];
        let reference = l0.vector(24 + 1).to_vec();
        for (i, &(x, y)) in l0.coords.iter().enumerate() {
            if (1..23).contains(&x) && (1..23).contains(&y) {
                let v = l0.vector(i);
                assert!(v.iter().zip(&reference).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
    }
}
