//! Training and evaluation of the SR model under the four loss arms.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{Extractor, ExtractorSpec, Group, RawGrid, TapeGrid};
use crate::image::RgbImage;
use crate::loss::{compose, cx, loss_a, loss_c, LossBreakdown, LossValues, StclConfig};
use crate::metrics::{peak_for, MetricReport};
use crate::model::{ModelConfig, SrModel};
use crate::optim::{adam_step, AdamConfig, ModelParams};
use crate::raw::{crop_patches, pack_bayer, photometric_align, BayerFrame, ClipPair, PatchSpec, TrainingSample};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossMode {
    /// Pixel MSE against the paired (misaligned) HR frame.
    L2,
    /// Contextual loss against the paired HR frame only.
    Cx,
    /// Alignment + reference terms (λ = 0).
    Spatial,
    /// Alignment + reference + temporal terms.
    Stcl,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::L2, LossMode::Cx, LossMode::Spatial, LossMode::Stcl];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::L2 => "l2",
            LossMode::Cx => "cx",
            LossMode::Spatial => "spatial",
            LossMode::Stcl => "stcl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str().eq_ignore_ascii_case(s))
    }

    pub fn uses_alignment(self) -> bool {
        matches!(self, LossMode::Spatial | LossMode::Stcl)
    }

    pub fn uses_temporal(self) -> bool {
        self == LossMode::Stcl
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub stcl: StclConfig,
    pub adam: AdamConfig,
    pub iterations: u64,
    pub val_every: u64,
    pub batch: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub extractor: ExtractorSpec,
    /// LR patch side in mosaic pixels.
    pub lr_patch: usize,
    pub zoom: usize,
    /// Cap on feature sites per layer entering a contextual term (0 = all).
    /// The same random sites are kept on both sides of each term.
    pub max_sites: usize,
    pub centering: Centering,
}

/// Which channel means the contextual terms subtract before normalizing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Centering {
    /// Both sides of a term use the reference image's means.
    #[default]
    Reference,
    /// Every image uses its own means.
    PerImage,
}

impl Centering {
    pub fn as_str(self) -> &'static str {
        match self {
            Centering::Reference => "reference",
            Centering::PerImage => "per_image",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reference" => Some(Centering::Reference),
            "per_image" | "per-image" => Some(Centering::PerImage),
            _ => None,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::Stcl,
            stcl: StclConfig::default(),
            adam: AdamConfig::default(),
            iterations: 2000,
            val_every: 100,
            batch: 1,
            seed: 0,
            model: ModelConfig::default(),
            extractor: ExtractorSpec::default(),
            lr_patch: 16,
            zoom: 4,
            max_sites: 1024,
            centering: Centering::Reference,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch != 1 {
            return Err(Error::Config(format!("batch size must be 1, got {}", self.batch)));
        }
        if self.val_every == 0 {
            return Err(Error::Config(String::from("val_every must be positive")));
        }
        if self.zoom == 0 || self.lr_patch == 0 || self.lr_patch % 2 != 0 {
            return Err(Error::Config(format!(
                "LR patch {} must be even and positive, zoom {} positive",
                self.lr_patch, self.zoom
            )));
        }
        if self.loss_mode.uses_alignment() {
            let need = self.extractor.min_input(Group::Phi1);
            if self.lr_patch < need {
                return Err(Error::Config(format!(
                    "LR patch {} is smaller than the Phi1 receptive field {}",
                    self.lr_patch, need
                )));
            }
        }
        self.stcl.validate()?;
        self.model.validate()
    }

    /// Temporal radius of the sampled windows; zero for arms that only
    /// read the paired frame.
    pub fn radius(&self) -> usize {
        if self.loss_mode.uses_temporal() {
            self.stcl.radius
        } else {
            0
        }
    }

    /// λ actually applied: zero outside the temporal arm.
    pub fn effective_lambda(&self) -> f64 {
        if self.loss_mode.uses_temporal() {
            self.stcl.lambda
        } else {
            0.0
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of iteration `iter`; makes runs resumable at any iteration.
pub fn iteration_seed(seed: u64, iter: u64) -> u64 {
    mix(mix(seed, 0x7ea1), iter)
}

/// Packs the photometrically aligned mosaic for the network.
pub fn network_input(lr: &BayerFrame) -> Result<Tensor> {
    pack_bayer(&photometric_align(lr)?)
}

pub struct Trainer {
    config: TrainConfig,
    model: SrModel,
    extractor: Extractor,
    pub params: ModelParams,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = SrModel::new(config.model)?;
        let params = model.init(mix(config.seed, 0x1417));
        Self::with_params(config, params)
    }

    /// Resumes from saved parameters (with their optimizer state).
    pub fn with_params(config: TrainConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let model = SrModel::new(config.model)?;
        let reference = model.init(0);
        params.validate()?;
        let shapes_match = reference.params.len() == params.params.len()
            && reference
                .params
                .iter()
                .zip(&params.params)
                .all(|(a, b)| a.value.shape() == b.value.shape() && a.name == b.name);
        if !shapes_match {
            return Err(Error::Config(String::from("parameters do not match the model configuration")));
        }
        let extractor = Extractor::build(config.extractor.clone())?;
        Ok(Self {
            config,
            model,
            extractor,
            params,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &SrModel {
        &self.model
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    /// Training sample of iteration `iter`: a clip chosen uniformly, then one
    /// random consecutive patch window.
    pub fn sample(&self, clips: &[ClipPair], iter: u64) -> Result<TrainingSample> {
        if clips.is_empty() {
            return Err(Error::Contract(String::from("no training clips")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(self.config.seed, iter));
        let clip = &clips[rng.gen_range(0..clips.len())];
        let spec = PatchSpec {
            lr_patch: self.config.lr_patch,
            zoom: self.config.zoom,
            radius: self.config.radius(),
            count: 1,
            seed: rng.gen(),
        };
        crop_patches(clip, &spec)?
            .pop()
            .ok_or_else(|| Error::Contract(String::from("patch sampler returned nothing")))
    }

    fn hr_tensor(&self, img: &RgbImage, h: usize, w: usize) -> Tensor {
        if img.size() == (w, h) {
            img.to_tensor()
        } else {
            img.resize_bicubic(w, h).to_tensor()
        }
    }

    fn shared_sites(&self, grid: &RawGrid, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<usize>>> {
        let cap = self.config.max_sites;
        if cap == 0 || grid.layers.iter().all(|l| l.coords.len() <= cap) {
            return None;
        }
        Some(
            grid.layers
                .iter()
                .map(|l| {
                    let n = l.coords.len();
                    if n <= cap {
                        (0..n).collect()
                    } else {
                        let mut idx = sample(rng, n, cap).into_vec();
                        idx.sort_unstable();
                        idx
                    }
                })
                .collect(),
        )
    }

    /// Records the selected loss for one sample; `params` are the model
    /// parameters already placed on `tape`.
    pub fn loss(&self, tape: &mut Tape, params: &[Var], sample: &TrainingSample, iter: u64) -> Result<LossBreakdown> {
        let cfg = &self.config;
        let mode = cfg.loss_mode;
        if mode.uses_temporal() && sample.radius() < cfg.radius() {
            return Err(Error::Config(format!(
                "temporal loss needs HR neighbours at ±{}, sample has radius {}",
                cfg.radius(),
                sample.radius()
            )));
        }
        let h0 = sample
            .hr_at(0)
            .ok_or_else(|| Error::Contract(String::from("sample has no centre HR frame")))?;
        let input = tape.constant(network_input(&sample.lr)?);
        let sr = self.model.forward(tape, params, input)?;
        let (_, _, oh, ow) = tape.value(sr).dims4()?;
        let zero = |tape: &mut Tape| tape.constant(Tensor::scalar(0.0));

        if mode == LossMode::L2 {
            let target = tape.constant(self.hr_tensor(h0, oh, ow));
            let diff = tape.sub(sr, target)?;
            let sq = tape.mul(diff, diff)?;
            let mse = tape.mean(sq)?;
            let (a, t) = (zero(tape), zero(tape));
            return compose(tape, a, mse, t, BTreeMap::new(), 0.0);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(mix(iteration_seed(cfg.seed, iter), 0x517e));
        let s_raw = self.extractor.activations_on(tape, sr, Group::Phi2)?;
        let sites = self.shared_sites(&s_raw, &mut rng);
        let s_sel = match &sites {
            Some(idx) => s_raw.select(tape, idx)?,
            None => s_raw.clone(),
        };
        // Centres `reference` (sites subsampled) and the matching SR sites on
        // the reference means, or each on its own under per-image centering.
        let centred_pair = |tape: &mut Tape, img: &RgbImage| -> Result<(TapeGrid, TapeGrid)> {
            let v = tape.constant(self.hr_tensor(img, oh, ow));
            let raw = self.extractor.activations_on(tape, v, Group::Phi2)?;
            let means = raw.channel_means(tape)?;
            let sel = match &sites {
                Some(idx) => raw.select(tape, idx)?,
                None => raw,
            };
            let reference = sel.centered(tape, &means)?;
            let generated = match cfg.centering {
                Centering::Reference => s_sel.centered(tape, &means)?,
                Centering::PerImage => {
                    let own = s_raw.channel_means(tape)?;
                    s_sel.centered(tape, &own)?
                }
            };
            Ok((reference, generated))
        };
        let (h0_grid, s_r) = centred_pair(tape, h0)?;
        let lr_term = cx(tape, &h0_grid, &s_r, &cfg.stcl)?;

        let a_term = if mode.uses_alignment() {
            let lr_rgb = photometric_align(&sample.lr)?.to_rgb();
            let l_var = tape.constant(lr_rgb.to_tensor());
            let l_raw = self.extractor.activations_on(tape, l_var, Group::Phi1)?;
            let down = tape.downsample_bicubic(sr, cfg.zoom)?;
            let lp_raw = self.extractor.activations_on(tape, down, Group::Phi1)?;
            let l_means = l_raw.channel_means(tape)?;
            let lp_means = match cfg.centering {
                Centering::Reference => l_means.clone(),
                Centering::PerImage => lp_raw.channel_means(tape)?,
            };
            let l = l_raw.centered(tape, &l_means)?;
            let lp = lp_raw.centered(tape, &lp_means)?;
            loss_a(tape, &l, &lp, &cfg.stcl)?
        } else {
            zero(tape)
        };

        if mode.uses_temporal() {
            let mut terms = BTreeMap::new();
            let mut lt: Option<Var> = None;
            for t in cfg.stcl.offsets() {
                let img = sample
                    .hr_at(t)
                    .ok_or_else(|| Error::Config(format!("missing HR neighbour at offset {}", t)))?;
                let (ht, s_t) = centred_pair(tape, img)?;
                let c = loss_c(tape, &ht, &s_t, t, &cfg.stcl)?;
                terms.insert(t, c);
                lt = Some(match lt {
                    Some(acc) => tape.add(acc, c)?,
                    None => c,
                });
            }
            let lt = match lt {
                Some(v) => v,
                None => zero(tape),
            };
            compose(tape, a_term, lr_term, lt, terms, cfg.stcl.lambda)
        } else {
            let t = zero(tape);
            compose(tape, a_term, lr_term, t, BTreeMap::new(), 0.0)
        }
    }

    /// One optimization step on `sample`.
    pub fn step(&mut self, sample: &TrainingSample, iter: u64) -> Result<LossValues> {
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let vars: Vec<Var> = self.params.params.iter().map(|p| tape.param(p.value.clone())).collect();
        let breakdown = self.loss(&mut tape, &vars, sample, iter)?;
        let values = breakdown.values(&tape);
        if !values.total.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let mut grads = tape.backward(breakdown.total)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect();
        adam_step(&mut self.params, &grads, &self.config.adam)?;
        Ok(values)
    }

    /// Runs iterations `start..end`, calling `on_iter` after each.
    pub fn train<F>(&mut self, clips: &[ClipPair], start: u64, end: u64, mut on_iter: F) -> Result<()>
    where
        F: FnMut(u64, &LossValues, &Trainer) -> Result<()>,
    {
        for iter in start..end {
            let sample = self.sample(clips, iter)?;
            let values = self.step(&sample, iter)?;
            on_iter(iter, &values, self)?;
        }
        Ok(())
    }

    /// SR output for a full LR frame, clamped to `[0, 1]`.
    pub fn predict(&self, lr: &BayerFrame) -> Result<RgbImage> {
        self.model.predict(&self.params, &network_input(lr)?)
    }
}

/// One evaluation frame: the FoV-matched LR mosaic, the true aligned HR and
/// the captured (misaligned) HR.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalFrame {
    pub label: String,
    pub lr: BayerFrame,
    pub truth: RgbImage,
    pub captured: RgbImage,
}

/// Scores of one method against both references.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub method: String,
    pub vs_truth: MetricReport,
    pub vs_captured: MetricReport,
}

/// Runs `predict` on every frame and scores it.
pub fn evaluate<F>(method: &str, frames: &[EvalFrame], extractor: Option<&Extractor>, predict: F) -> Result<Evaluation>
where
    F: Fn(&BayerFrame) -> Result<RgbImage>,
{
    let peak = frames.first().map(|f| peak_for(f.truth.provenance())).unwrap_or(1.0);
    let mut vs_truth = MetricReport::new(peak);
    let mut vs_captured = MetricReport::new(peak);
    for f in frames {
        let out = predict(&f.lr)?;
        vs_truth.push(&f.label, &out, &f.truth, extractor)?;
        vs_captured.push(&f.label, &out, &f.captured, extractor)?;
    }
    Ok(Evaluation {
        method: String::from(method),
        vs_truth,
        vs_captured,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in LossMode::ALL {
            assert_eq!(LossMode::parse(m.as_str()), Some(m));
        }
        assert_eq!(LossMode::parse("STCL"), Some(LossMode::Stcl));
        assert!(LossMode::parse("gan").is_none());
    }

    #[test]
    fn config_rules() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.batch = 2;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            lr_patch: 8,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            lr_patch: 8,
            loss_mode: LossMode::L2,
            ..TrainConfig::default()
        };
        c.validate().unwrap();
    }

    #[test]
    fn iteration_seeds_differ() {
        assert_ne!(iteration_seed(1, 0), iteration_seed(1, 1));
        assert_eq!(iteration_seed(5, 9), iteration_seed(5, 9));
    }
}
