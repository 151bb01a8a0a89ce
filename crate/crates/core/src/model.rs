//! Residual super-resolution network on packed Bayer input.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::image::{Provenance, RgbImage};
use crate::optim::{ModelParams, Param};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Number of ×2 pixel-shuffle stages; packed half-resolution to 4× mosaic.
pub const UPSAMPLE_STAGES: usize = 3;
const KERNEL: usize = 3;
const RESIDUAL_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub blocks: usize,
    pub width: usize,
    /// Adds the bicubic upsample of the packed input to the tail output, so
    /// the convolutional path learns a residual.
    pub global_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            width: 32,
            global_skip: true,
        }
    }
}

impl ModelConfig {
    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (b, w, k2) = (self.blocks, self.width, KERNEL * KERNEL);
        let head = 4 * w * k2 + w;
        let body = b * 2 * (w * w * k2 + w);
        let up = UPSAMPLE_STAGES * (w * 4 * w * k2 + 4 * w);
        let tail = w * 3 * k2 + 3;
        head + body + up + tail
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config(String::from("model width must be positive")));
        }
        Ok(())
    }
}

/// Head conv, `B` conv-relu-conv residual blocks, three conv + shuffle ×2
/// stages and a tail conv to RGB. No normalization layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SrModel {
    pub config: ModelConfig,
}

fn conv_param(rng: &mut ChaCha8Rng, name: &str, c_out: usize, c_in: usize, gain: f64) -> [Param; 2] {
    let fan_in = (c_in * KERNEL * KERNEL) as f64;
    let std = gain / libm::sqrt(fan_in);
    let n = c_out * c_in * KERNEL * KERNEL;
    let w: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    [
        Param {
            name: format!("{}.weight", name),
            value: Tensor::new(vec![c_out, c_in, KERNEL, KERNEL], w).expect("consistent dims"),
        },
        Param {
            name: format!("{}.bias", name),
            value: Tensor::zeros(&[c_out]),
        },
    ]
}

/// `[R, (G1 + G2) / 2, B]` of a packed tensor, bicubically resized ×8.
fn bicubic_base(packed: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = packed.dims4()?;
    let d = packed.data();
    let plane = |c: usize, i: usize| d[c * h * w + i];
    let mut rgb = Vec::with_capacity(3 * h * w);
    rgb.extend((0..h * w).map(|i| plane(0, i)));
    rgb.extend((0..h * w).map(|i| 0.5 * (plane(1, i) + plane(2, i))));
    rgb.extend((0..h * w).map(|i| plane(3, i)));
    let half = RgbImage::new(w, h, rgb, Provenance::Synthetic)?;
    let scale = 1 << UPSAMPLE_STAGES;
    Ok(half.resize_bicubic(w * scale, h * scale).to_tensor())
}

impl SrModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Kaiming-normal initialization with residual branches scaled down.
    /// With the global skip the tail starts at zero, so an untrained model
    /// reproduces the bicubic base exactly; without it the tail bias starts
    /// at mid-grey.
    pub fn init(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = self.config.width;
        let relu_gain = libm::sqrt(2.0);
        let mut params = Vec::new();
        params.extend(conv_param(&mut rng, "head", w, 4, relu_gain));
        for b in 0..self.config.blocks {
            params.extend(conv_param(&mut rng, &format!("block{}.conv1", b), w, w, relu_gain));
            params.extend(conv_param(&mut rng, &format!("block{}.conv2", b), w, w, relu_gain * RESIDUAL_SCALE));
        }
        for s in 0..UPSAMPLE_STAGES {
            params.extend(conv_param(&mut rng, &format!("up{}", s), 4 * w, w, relu_gain));
        }
        let mut tail = conv_param(&mut rng, "tail", 3, w, 1.0);
        if self.config.global_skip {
            tail[0].value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        } else {
            tail[1].value = Tensor::full(&[3], 0.5);
        }
        params.extend(tail);
        ModelParams::new(params)
    }

    fn conv(tape: &mut Tape, x: Var, p: &[Var], i: &mut usize) -> Result<Var> {
        let y = tape.conv2d(x, p[*i], 1, KERNEL / 2)?;
        let y = tape.channel_bias(y, p[*i + 1])?;
        *i += 2;
        Ok(y)
    }

    /// `(1, 4, h, w)` packed input to `(1, 3, 8h, 8w)` output, unclamped.
    /// The skip path treats the input as data: no gradient reaches `input`
    /// through it.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var> {
        let expected = 2 * (2 + 2 * self.config.blocks + UPSAMPLE_STAGES);
        if params.len() != expected {
            return Err(dim_err("sr_forward", format!("{} parameter tensors, expected {}", params.len(), expected)));
        }
        let shape = tape.shape(input);
        if shape.len() != 4 || shape[0] != 1 || shape[1] != 4 {
            return Err(dim_err("sr_forward", format!("input {:?}, expected (1, 4, H/2, W/2)", shape)));
        }
        let mut i = 0;
        let head = Self::conv(tape, input, params, &mut i)?;
        let mut x = tape.relu(head)?;
        for _ in 0..self.config.blocks {
            let r = Self::conv(tape, x, params, &mut i)?;
            let r = tape.relu(r)?;
            let r = Self::conv(tape, r, params, &mut i)?;
            x = tape.add(x, r)?;
        }
        for _ in 0..UPSAMPLE_STAGES {
            let y = Self::conv(tape, x, params, &mut i)?;
            let y = tape.pixel_shuffle(y, 2)?;
            x = tape.relu(y)?;
        }
        let out = Self::conv(tape, x, params, &mut i)?;
        if !self.config.global_skip {
            return Ok(out);
        }
        let base = tape.constant(bicubic_base(tape.value(input))?);
        tape.add(out, base)
    }

    /// Inference on a packed tensor; output clamped to `[0, 1]`.
    pub fn predict(&self, params: &ModelParams, packed: &Tensor) -> Result<RgbImage> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let input = tape.constant(packed.clone());
        let out = self.forward(&mut tape, &vars, input)?;
        Ok(RgbImage::from_tensor(tape.value(out), Provenance::Synthetic)?.clamped())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_is_four_times_the_mosaic() {
        let m = SrModel::new(ModelConfig { blocks: 1, width: 4, global_skip: true }).unwrap();
        let p = m.init(1);
        let out = m.predict(&p, &Tensor::full(&[1, 4, 3, 5], 0.3)).unwrap();
        assert_eq!(out.size(), (4 * 10, 4 * 6));
    }

    #[test]
    fn parameter_count_formula() {
        for cfg in [ModelConfig::default(), ModelConfig { blocks: 3, width: 64, global_skip: false }, ModelConfig { blocks: 0, width: 5, global_skip: true }] {
            let counted: usize = SrModel::new(cfg).unwrap().init(0).params.iter().map(|p| p.value.numel()).sum();
            assert_eq!(counted, cfg.param_count());
        }
    }

    #[test]
    fn zero_tail_gives_bias() {
        let m = SrModel::new(ModelConfig { blocks: 2, width: 4, global_skip: false }).unwrap();
        let mut p = m.init(3);
        let n = p.params.len();
        p.params[n - 2].value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        p.params[n - 1].value = Tensor::new(vec![3], vec![0.1, 0.2, 0.9]).unwrap();
        let out = m.predict(&p, &Tensor::full(&[1, 4, 2, 2], 0.7)).unwrap();
        for c in 0..3 {
            assert!(out.plane(c).iter().all(|&v| v == [0.1, 0.2, 0.9][c]));
        }
    }

    #[test]
    fn fresh_model_with_skip_is_bicubic_of_packed_input() {
        let m = SrModel::new(ModelConfig { blocks: 1, width: 4, global_skip: true }).unwrap();
        let p = m.init(3);
        let mut packed = Tensor::zeros(&[1, 4, 2, 2]);
        for (c, v) in [0.2, 0.4, 0.6, 0.9].iter().enumerate() {
            packed.data_mut()[c * 4..c * 4 + 4].iter_mut().for_each(|x| *x = *v);
        }
        let out = m.predict(&p, &packed).unwrap();
        for (c, want) in [0.2, 0.5, 0.9].iter().enumerate() {
            assert!(out.plane(c).iter().all(|v| (v - want).abs() < 1e-12));
        }
    }

    #[test]
    fn wrong_input_rejected() {
        let m = SrModel::new(ModelConfig::default()).unwrap();
        let p = m.init(0);
        assert!(m.predict(&p, &Tensor::zeros(&[1, 3, 4, 4])).is_err());
    }
}
