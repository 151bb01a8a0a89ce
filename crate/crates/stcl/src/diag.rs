//! Loss-unit diagnostics on random feature grids.

use std::collections::BTreeMap;

use stcl_core::features::{FeatureGrid, Group, LayerGrid};
use stcl_core::loss::{self, spatial_kernel, LossValues, StclConfig, StclInputs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stcl_core::tape::Tape;
use stcl_core::tensor::Tensor;

use crate::error::Result;

/// Random unit vectors on a `w × h` site grid.
pub fn random_layer(rng: &mut ChaCha8Rng, w: u32, h: u32, dim: usize) -> LayerGrid {
    let coords: Vec<(u32, u32)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
    let mut data = Vec::with_capacity(coords.len() * dim);
    for _ in 0..coords.len() {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        data.extend(v.iter().map(|x| x / n));
    }
    let vectors = Tensor::new(vec![coords.len(), dim], data).expect("consistent dims");
    LayerGrid::new(coords, vectors).expect("one coordinate per row")
}

/// A grid of `dims.len()` layers with shared random site-grid sizes.
pub fn random_grid(rng: &mut ChaCha8Rng, group: Group, sizes: &[(u32, u32)], dims: &[usize]) -> FeatureGrid {
    FeatureGrid {
        group,
        source_size: (0, 0),
        layers: sizes.iter().zip(dims).map(|(&(w, h), &d)| random_layer(rng, w, h, d)).collect(),
    }
}

/// Random inputs for one composite-loss evaluation.
pub struct Instance {
    pub lr: FeatureGrid,
    pub lr_prime: FeatureGrid,
    pub h0: FeatureGrid,
    pub sr: FeatureGrid,
    pub neighbors: BTreeMap<i32, FeatureGrid>,
}

pub fn random_instance(rng: &mut ChaCha8Rng, cfg: &StclConfig) -> Instance {
    let phi1_layers = rng.gen_range(1..=2);
    let phi2_layers = rng.gen_range(1..=3);
    let mut pick = |n: usize, max: u32| -> (Vec<(u32, u32)>, Vec<usize>) {
        (0..n)
            .map(|_| ((rng.gen_range(1..=max), rng.gen_range(1..=max)), rng.gen_range(2..=8)))
            .unzip()
    };
    let (s1, d1) = pick(phi1_layers, 5);
    let (s2, d2) = pick(phi2_layers, 7);
    let mut grid = |g: Group, s: &[(u32, u32)], d: &[usize]| random_grid(rng, g, s, d);
    let lr = grid(Group::Phi1, &s1, &d1);
    let lr_prime = grid(Group::Phi1, &s1, &d1);
    let h0 = grid(Group::Phi2, &s2, &d2);
    let sr = grid(Group::Phi2, &s2, &d2);
    let neighbors = cfg.offsets().into_iter().map(|t| (t, grid(Group::Phi2, &s2, &d2))).collect();
    Instance {
        lr,
        lr_prime,
        h0,
        sr,
        neighbors,
    }
}

/// Composite loss values plus each `cx(H_t, S)` computed on its own.
pub fn evaluate_instance(inst: &Instance, cfg: &StclConfig) -> Result<(LossValues, BTreeMap<i32, f64>)> {
    let mut tape = Tape::new();
    let lr = inst.lr.to_tape(&mut tape, false);
    let lp = inst.lr_prime.to_tape(&mut tape, false);
    let h0 = inst.h0.to_tape(&mut tape, false);
    let sr = inst.sr.to_tape(&mut tape, false);
    let neighbors: BTreeMap<i32, _> = inst.neighbors.iter().map(|(t, g)| (*t, g.to_tape(&mut tape, false))).collect();
    let inputs = StclInputs {
        lr: &lr,
        lr_prime: &lp,
        h0: &h0,
        sr: &sr,
        neighbors: &neighbors,
    };
    let values = loss::stcl_total(&mut tape, &inputs, cfg)?.values(&tape);
    let mut cx = BTreeMap::new();
    for (t, g) in &neighbors {
        let v = loss::cx(&mut tape, g, &sr, cfg)?;
        cx.insert(*t, tape.value(v).data()[0]);
    }
    Ok((values, cx))
}

#[derive(Clone, Debug, Default)]
pub struct LossCheckReport {
    pub instances: usize,
    /// Largest `|total − (a + r + λ·t)|`.
    pub composition_err: f64,
    /// Largest `|loss_t − Σ w_t·cx_t|`.
    pub temporal_err: f64,
    /// Largest self-match total (should be exactly zero under min-form).
    pub self_match_max: f64,
    /// `(D′, κ, expected)` for the kernel probes.
    pub kernel: Vec<(f64, f64, f64)>,
    pub example: Option<LossValues>,
}

impl LossCheckReport {
    pub fn kernel_err(&self) -> f64 {
        self.kernel.iter().map(|(_, k, e)| (k - e).abs()).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.composition_err <= tol && self.temporal_err <= tol && self.kernel_err() <= tol && self.self_match_max == 0.0
    }
}

/// Checks the composite identities on `instances` random inputs, the
/// self-match zero and the kernel at `D′ ∈ {0, 2, 4}`.
pub fn loss_check(seed: u64, instances: usize, cfg: &StclConfig) -> Result<LossCheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = LossCheckReport {
        instances,
        ..LossCheckReport::default()
    };
    for i in 0..instances {
        let inst = random_instance(&mut rng, cfg);
        let (v, cx) = evaluate_instance(&inst, cfg)?;
        let composed = v.loss_a + v.loss_r + cfg.lambda * v.loss_t;
        rep.composition_err = rep.composition_err.max((v.total - composed).abs());
        let mut weighted = 0.0;
        for (t, c) in &cx {
            weighted += cfg.weight(*t)? * c;
        }
        rep.temporal_err = rep.temporal_err.max((v.loss_t - weighted).abs());
        let same = Instance {
            lr_prime: inst.lr.clone(),
            h0: inst.sr.clone(),
            neighbors: inst.neighbors.keys().map(|t| (*t, inst.sr.clone())).collect(),
            ..inst
        };
        let (sv, _) = evaluate_instance(&same, cfg)?;
        rep.self_match_max = rep.self_match_max.max(sv.total.abs());
        if i == 0 {
            rep.example = Some(v);
        }
    }
    let probes = [0u32, 2, 4];
    let coords: Vec<(u32, u32)> = probes.iter().map(|&x| (x, 0)).collect();
    let k = spatial_kernel(&[(0, 0)], &coords, cfg.mu, cfg.sigma)?;
    for (j, &d) in probes.iter().enumerate() {
        let d = f64::from(d);
        let expected = (-(d - cfg.mu).powi(2) / (2.0 * cfg.sigma * cfg.sigma)).exp();
        rep.kernel.push((d, k.data()[j], expected));
    }
    Ok(rep)
}

/// `key=value` rendering of a loss breakdown.
pub fn format_values(v: &LossValues) -> String {
    let mut s = format!("loss_a={:e} loss_r={:e} loss_t={:e} total={:e}", v.loss_a, v.loss_r, v.loss_t, v.total);
    for (t, c) in &v.loss_c {
        s.push_str(&format!(" loss_c[{}]={:e}", t, c));
    }
    s
}
