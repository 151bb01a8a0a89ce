//! Key-value forms of the core configuration types.

use stcl_core::features::{ExtractorSpec, FeatureSource, LayerSpec};
use stcl_core::loss::{CxVariant, StclConfig};
use stcl_core::model::ModelConfig;
use stcl_core::optim::AdamConfig;
use stcl_core::synth::RigSpec;
use stcl_core::train::{Centering, LossMode, TrainConfig};

use crate::error::{Error, Result};
use crate::kv::{fmt_f64, fmt_floats, KvMap};

fn cx_name(v: CxVariant) -> &'static str {
    match v {
        CxVariant::MinForm => "min_form",
        CxVariant::NormalizedCx => "normalized_cx",
    }
}

fn parse_cx(s: &str) -> Result<CxVariant> {
    match s {
        "min_form" => Ok(CxVariant::MinForm),
        "normalized_cx" => Ok(CxVariant::NormalizedCx),
        _ => Err(Error::Config(format!("unknown cx variant `{}`", s))),
    }
}

fn layers_text(layers: &[LayerSpec]) -> String {
    layers
        .iter()
        .map(|l| format!("{}x{}s{}", l.channels, l.kernel, l.stride))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_layers(s: &str) -> Result<Vec<LayerSpec>> {
    let bad = || Error::Config(format!("layer list `{}`: expected entries like 16x3s1", s));
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let (c, rest) = t.trim().split_once('x').ok_or_else(bad)?;
            let (k, st) = rest.split_once('s').ok_or_else(bad)?;
            Ok(LayerSpec::new(
                c.parse().map_err(|_| bad())?,
                k.parse().map_err(|_| bad())?,
                st.parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

pub fn stcl_to_kv(c: &StclConfig, kv: &mut KvMap) {
    kv.set("stcl.mu", fmt_f64(c.mu));
    kv.set("stcl.sigma", fmt_f64(c.sigma));
    kv.set("stcl.lambda", fmt_f64(c.lambda));
    kv.set("stcl.radius", c.radius);
    let weights: Vec<String> = c.weights.iter().map(|(t, w)| format!("{}:{}", t, fmt_f64(*w))).collect();
    kv.set("stcl.weights", weights.join(","));
    kv.set("stcl.cx_variant", cx_name(c.cx_variant));
    kv.set("stcl.cx_bandwidth", fmt_f64(c.cx_bandwidth));
}

pub const STCL_KEYS: &[&str] = &[
    "stcl.mu",
    "stcl.sigma",
    "stcl.lambda",
    "stcl.radius",
    "stcl.weights",
    "stcl.cx_variant",
    "stcl.cx_bandwidth",
];

/// Applies the `stcl.*` keys present in `kv` on top of `c`.
pub fn stcl_from_kv(kv: &KvMap, c: &mut StclConfig) -> Result<()> {
    if let Some(v) = kv.parse("stcl.mu")? {
        c.mu = v;
    }
    if let Some(v) = kv.parse("stcl.sigma")? {
        c.sigma = v;
    }
    if let Some(v) = kv.parse("stcl.lambda")? {
        c.lambda = v;
    }
    if let Some(v) = kv.parse("stcl.radius")? {
        c.radius = v;
    }
    if let Some(w) = kv.get("stcl.weights") {
        c.weights.clear();
        for item in w.split(',').filter(|s| !s.trim().is_empty()) {
            let (t, v) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("stcl.weights entry `{}`: expected offset:weight", item)))?;
            let t: i32 = t.trim().parse().map_err(|_| Error::Config(format!("bad offset `{}`", t)))?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Config(format!("bad weight `{}`", v)))?;
            c.weights.insert(t, v);
        }
    }
    if let Some(v) = kv.get("stcl.cx_variant") {
        c.cx_variant = parse_cx(v)?;
    }
    if let Some(v) = kv.parse("stcl.cx_bandwidth")? {
        c.cx_bandwidth = v;
    }
    c.validate()?;
    Ok(())
}

pub const TRAIN_KEYS: &[&str] = &[
    "loss_mode",
    "iterations",
    "val_every",
    "batch",
    "seed",
    "adam.lr",
    "adam.beta1",
    "adam.beta2",
    "adam.eps",
    "model.blocks",
    "model.width",
    "model.global_skip",
    "extractor.seed",
    "extractor.phi2",
    "extractor.phi1",
    "extractor.source",
    "lr_patch",
    "zoom",
    "max_sites",
    "centering",
];

pub fn train_to_kv(c: &TrainConfig) -> KvMap {
    let mut kv = KvMap::new();
    kv.set("loss_mode", c.loss_mode.as_str());
    kv.set("iterations", c.iterations);
    kv.set("val_every", c.val_every);
    kv.set("batch", c.batch);
    kv.set("seed", c.seed);
    kv.set("adam.lr", fmt_f64(c.adam.lr));
    kv.set("adam.beta1", fmt_f64(c.adam.beta1));
    kv.set("adam.beta2", fmt_f64(c.adam.beta2));
    kv.set("adam.eps", fmt_f64(c.adam.eps));
    kv.set("model.blocks", c.model.blocks);
    kv.set("model.width", c.model.width);
    kv.set("model.global_skip", c.model.global_skip);
    kv.set("extractor.seed", c.extractor.seed);
    kv.set("extractor.phi2", layers_text(&c.extractor.phi2));
    kv.set("extractor.phi1", layers_text(&c.extractor.phi1));
    kv.set(
        "extractor.source",
        match c.extractor.source {
            FeatureSource::BuiltinRandom => "builtin_random",
            FeatureSource::ExternalFile => "external_file",
        },
    );
    kv.set("lr_patch", c.lr_patch);
    kv.set("zoom", c.zoom);
    kv.set("max_sites", c.max_sites);
    kv.set("centering", c.centering.as_str());
    stcl_to_kv(&c.stcl, &mut kv);
    kv
}

/// Applies every recognised key of `kv` on top of `c`; unknown keys fail.
pub fn train_from_kv(kv: &KvMap, c: &mut TrainConfig) -> Result<()> {
    let allowed: Vec<&str> = TRAIN_KEYS.iter().chain(STCL_KEYS).copied().collect();
    kv.reject_unknown(&allowed)?;
    if let Some(v) = kv.get("loss_mode") {
        c.loss_mode = LossMode::parse(v).ok_or_else(|| Error::Config(format!("unknown loss mode `{}`", v)))?;
    }
    macro_rules! field {
        ($key:literal, $slot:expr) => {
            if let Some(v) = kv.parse($key)? {
                $slot = v;
            }
        };
    }
    field!("iterations", c.iterations);
    field!("val_every", c.val_every);
    field!("batch", c.batch);
    field!("seed", c.seed);
    let mut adam: AdamConfig = c.adam;
    field!("adam.lr", adam.lr);
    field!("adam.beta1", adam.beta1);
    field!("adam.beta2", adam.beta2);
    field!("adam.eps", adam.eps);
    c.adam = adam;
    let mut model: ModelConfig = c.model;
    field!("model.blocks", model.blocks);
    field!("model.width", model.width);
    field!("model.global_skip", model.global_skip);
    c.model = model;
    let mut ex: ExtractorSpec = c.extractor.clone();
    field!("extractor.seed", ex.seed);
    if let Some(v) = kv.get("extractor.phi2") {
        ex.phi2 = parse_layers(v)?;
    }
    if let Some(v) = kv.get("extractor.phi1") {
        ex.phi1 = parse_layers(v)?;
    }
    if let Some(v) = kv.get("extractor.source") {
        ex.source = match v {
            "builtin_random" => FeatureSource::BuiltinRandom,
            "external_file" => FeatureSource::ExternalFile,
            _ => return Err(Error::Config(format!("unknown extractor source `{}`", v))),
        };
    }
    c.extractor = ex;
    field!("lr_patch", c.lr_patch);
    field!("zoom", c.zoom);
    field!("max_sites", c.max_sites);
    if let Some(v) = kv.get("centering") {
        c.centering = Centering::parse(v).ok_or_else(|| Error::Config(format!("unknown centering `{}`", v)))?;
    }
    stcl_from_kv(kv, &mut c.stcl)?;
    c.validate()?;
    Ok(())
}

pub const RIG_KEYS: &[&str] = &[
    "rig.zoom_ratio",
    "rig.shift_range",
    "rig.perspective",
    "rig.read_noise",
    "rig.shot_noise",
    "rig.black_level",
    "rig.wb_ratios",
    "rig.hr_gain",
    "rig.hr_bias",
    "rig.seed",
];

pub fn rig_to_kv(r: &RigSpec, kv: &mut KvMap) {
    kv.set("rig.zoom_ratio", r.zoom_ratio);
    kv.set("rig.shift_range", fmt_floats(&[r.shift_range.0, r.shift_range.1]));
    kv.set("rig.perspective", fmt_f64(r.perspective));
    kv.set("rig.read_noise", fmt_f64(r.read_noise));
    kv.set("rig.shot_noise", fmt_f64(r.shot_noise));
    kv.set("rig.black_level", r.black_level);
    kv.set("rig.wb_ratios", fmt_floats(&[r.wb_ratios.0, r.wb_ratios.1]));
    kv.set("rig.hr_gain", fmt_floats(&r.hr_gain));
    kv.set("rig.hr_bias", fmt_f64(r.hr_bias));
    kv.set("rig.seed", r.seed);
}

fn fixed<const N: usize>(kv: &KvMap, key: &str) -> Result<Option<[f64; N]>> {
    match kv.floats(key)? {
        None => Ok(None),
        Some(v) => <[f64; N]>::try_from(v)
            .map(Some)
            .map_err(|v| Error::Config(format!("key `{}`: expected {} numbers, got {}", key, N, v.len()))),
    }
}

pub fn rig_from_kv(kv: &KvMap, r: &mut RigSpec) -> Result<()> {
    if let Some(v) = kv.parse("rig.zoom_ratio")? {
        r.zoom_ratio = v;
    }
    if let Some([lo, hi]) = fixed::<2>(kv, "rig.shift_range")? {
        r.shift_range = (lo, hi);
    }
    if let Some(v) = kv.parse("rig.perspective")? {
        r.perspective = v;
    }
    if let Some(v) = kv.parse("rig.read_noise")? {
        r.read_noise = v;
    }
    if let Some(v) = kv.parse("rig.shot_noise")? {
        r.shot_noise = v;
    }
    if let Some(v) = kv.parse("rig.black_level")? {
        r.black_level = v;
    }
    if let Some([a, b]) = fixed::<2>(kv, "rig.wb_ratios")? {
        r.wb_ratios = (a, b);
    }
    if let Some(g) = fixed::<3>(kv, "rig.hr_gain")? {
        r.hr_gain = g;
    }
    if let Some(v) = kv.parse("rig.hr_bias")? {
        r.hr_bias = v;
    }
    if let Some(v) = kv.parse("rig.seed")? {
        r.seed = v;
    }
    r.validate()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_config_round_trip() {
        let mut c = TrainConfig {
            loss_mode: LossMode::Spatial,
            seed: 99,
            centering: Centering::PerImage,
            ..TrainConfig::default()
        };
        c.stcl.cx_variant = CxVariant::NormalizedCx;
        c.stcl.weights.insert(-1, 0.25);
        let kv = train_to_kv(&c);
        let mut back = TrainConfig::default();
        train_from_kv(&kv, &mut back).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_rejected() {
        let kv = KvMap::from_text("loss_mode = l2\nlearning_rate = 3\n").unwrap();
        assert!(train_from_kv(&kv, &mut TrainConfig::default()).is_err());
    }

    #[test]
    fn rig_round_trip() {
        let r = RigSpec {
            hr_gain: [1.1, 0.9, 1.0],
            shift_range: (12.0, 18.5),
            ..RigSpec::default()
        };
        let mut kv = KvMap::new();
        rig_to_kv(&r, &mut kv);
        let mut back = RigSpec::ideal();
        rig_from_kv(&kv, &mut back).unwrap();
        assert_eq!(back, r);
    }
}
