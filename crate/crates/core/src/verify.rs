//! Finite-difference gradient sweeps over the differentiable surface: every
//! tape op, the loss family through the extractor, and a tiny model.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::features::{Extractor, ExtractorSpec, Group, LayerSpec};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::loss::{self, CxVariant, StclConfig, StclInputs};
use crate::image::{Provenance, RgbImage};
use crate::model::ModelConfig;
use crate::raw::{BayerFrame, TrainingSample};
use crate::train::{LossMode, TrainConfig, Trainer};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Tolerance for single primitive ops.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Tolerance for composite paths.
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Diffcore,
    Stcl,
    Trainer,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Diffcore, Suite::Stcl, Suite::Trainer];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Diffcore => "diffcore",
            Suite::Stcl => "stcl",
            Suite::Trainer => "trainer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

type Body = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Check {
    name: &'static str,
    inputs: Vec<Tensor>,
    tol: f64,
    coord_fraction: Option<f64>,
    body: Body,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("consistent dims")
}

/// Values in `±[lo, hi]`, keeping clear of zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent dims")
}

/// Reduces any output to a scalar with fixed pseudo-random weights, so that
/// every output element contributes a distinct amount.
fn probe(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 7919 + 13) % 101) as f64 / 101.0).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

fn check(name: &'static str, inputs: Vec<Tensor>, body: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Check {
    Check {
        name,
        inputs,
        tol: PRIMITIVE_TOL,
        coord_fraction: None,
        body: Box::new(body),
    }
}

fn diffcore_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut v = Vec::new();
    v.push(check(
        "conv2d",
        vec![uniform(rng, &[1, 3, 6, 5], -1.0, 1.0), uniform(rng, &[4, 3, 3, 3], -0.5, 0.5)],
        |t, x| {
            let y = t.conv2d(x[0], x[1], 1, 1)?;
            probe(t, y)
        },
    ));
    v.push(check(
        "conv2d_stride2",
        vec![uniform(rng, &[1, 2, 7, 6], -1.0, 1.0), uniform(rng, &[3, 2, 3, 3], -0.5, 0.5)],
        |t, x| {
            let y = t.conv2d(x[0], x[1], 2, 1)?;
            probe(t, y)
        },
    ));
    v.push(check(
        "channel_bias",
        vec![uniform(rng, &[1, 3, 4, 4], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0)],
        |t, x| {
            let y = t.channel_bias(x[0], x[1])?;
            probe(t, y)
        },
    ));
    v.push(check("relu", vec![away_from_zero(rng, &[3, 5], 0.05, 1.0)], |t, x| {
        let y = t.relu(x[0])?;
        probe(t, y)
    }));
    v.push(check("pixel_shuffle", vec![uniform(rng, &[1, 8, 3, 2], -1.0, 1.0)], |t, x| {
        let y = t.pixel_shuffle(x[0], 2)?;
        probe(t, y)
    }));
    v.push(check("pixel_unshuffle", vec![uniform(rng, &[1, 2, 4, 6], -1.0, 1.0)], |t, x| {
        let y = t.pixel_unshuffle(x[0], 2)?;
        probe(t, y)
    }));
    v.push(check("downsample_bicubic", vec![uniform(rng, &[1, 2, 8, 12], 0.0, 1.0)], |t, x| {
        let y = t.downsample_bicubic(x[0], 4)?;
        probe(t, y)
    }));
    let pair = |rng: &mut ChaCha8Rng| vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)];
    v.push(check("add", pair(rng), |t, x| {
        let y = t.add(x[0], x[1])?;
        probe(t, y)
    }));
    v.push(check("sub", pair(rng), |t, x| {
        let y = t.sub(x[0], x[1])?;
        probe(t, y)
    }));
    v.push(check("mul", pair(rng), |t, x| {
        let y = t.mul(x[0], x[1])?;
        probe(t, y)
    }));
    v.push(check(
        "div",
        vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], 0.5, 2.0)],
        |t, x| {
            let y = t.div(x[0], x[1])?;
            probe(t, y)
        },
    ));
    v.push(check("scale", vec![uniform(rng, &[5], -1.0, 1.0)], |t, x| {
        let y = t.scale(x[0], -2.5)?;
        probe(t, y)
    }));
    v.push(check("add_scalar", vec![uniform(rng, &[5], -1.0, 1.0)], |t, x| {
        let y = t.add_scalar(x[0], 0.75)?;
        probe(t, y)
    }));
    v.push(check("exp", vec![uniform(rng, &[6], -2.0, 1.0)], |t, x| {
        let y = t.exp(x[0])?;
        probe(t, y)
    }));
    v.push(check("ln", vec![uniform(rng, &[6], 0.5, 3.0)], |t, x| {
        let y = t.ln(x[0])?;
        probe(t, y)
    }));
    v.push(check("sqrt", vec![uniform(rng, &[6], 0.5, 3.0)], |t, x| {
        let y = t.sqrt(x[0])?;
        probe(t, y)
    }));
    v.push(check("sum", vec![uniform(rng, &[2, 3], -1.0, 1.0)], |t, x| {
        let s = t.sum(x[0])?;
        t.mul(s, s)
    }));
    v.push(check("mean", vec![uniform(rng, &[2, 3], -1.0, 1.0)], |t, x| {
        let s = t.mean(x[0])?;
        t.mul(s, s)
    }));
    v.push(check("mean_axis0", vec![uniform(rng, &[4, 3], -1.0, 1.0)], |t, x| {
        let y = t.mean_axis0(x[0])?;
        probe(t, y)
    }));
    v.push(check("sum_axis1", vec![uniform(rng, &[4, 3], -1.0, 1.0)], |t, x| {
        let y = t.sum_axis1(x[0])?;
        probe(t, y)
    }));
    v.push(check(
        "sub_row",
        vec![uniform(rng, &[4, 3], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0)],
        |t, x| {
            let y = t.sub_row(x[0], x[1])?;
            probe(t, y)
        },
    ));
    v.push(check(
        "div_col",
        vec![uniform(rng, &[4, 3], -1.0, 1.0), uniform(rng, &[4], 0.5, 2.0)],
        |t, x| {
            let y = t.div_col(x[0], x[1])?;
            probe(t, y)
        },
    ));
    v.push(check("min_rows", vec![uniform(rng, &[5, 4], -1.0, 1.0)], |t, x| {
        let y = t.min_rows(x[0])?;
        probe(t, y)
    }));
    v.push(check(
        "min_match",
        vec![uniform(rng, &[5, 3], -1.0, 1.0), uniform(rng, &[6, 3], -1.0, 1.0)],
        |t, x| {
            let y = t.min_match(x[0], x[1], None)?;
            probe(t, y)
        },
    ));
    let kappa = uniform(rng, &[5, 6], 0.1, 1.0);
    v.push(check(
        "min_match_kernel",
        vec![uniform(rng, &[5, 3], -1.0, 1.0), uniform(rng, &[6, 3], -1.0, 1.0)],
        move |t, x| {
            let y = t.min_match(x[0], x[1], Some(kappa.clone()))?;
            probe(t, y)
        },
    ));
    v.push(check("gather_rows", vec![uniform(rng, &[5, 3], -1.0, 1.0)], |t, x| {
        let y = t.gather_rows(x[0], &[4, 0, 2, 2])?;
        probe(t, y)
    }));
    v.push(check("normalize_rows", vec![away_from_zero(rng, &[4, 3], 0.2, 1.0)], |t, x| {
        let y = t.normalize_rows(x[0])?;
        probe(t, y)
    }));
    v.push(check(
        "matmul",
        vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 2], -1.0, 1.0)],
        |t, x| {
            let y = t.matmul(x[0], x[1])?;
            probe(t, y)
        },
    ));
    v.push(check("reshape", vec![uniform(rng, &[2, 6], -1.0, 1.0)], |t, x| {
        let y = t.reshape(x[0], &[3, 4])?;
        probe(t, y)
    }));
    v.push(check("permute", vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], |t, x| {
        let y = t.permute(x[0], &[2, 0, 1])?;
        probe(t, y)
    }));
    v.push(check("transpose", vec![uniform(rng, &[3, 5], -1.0, 1.0)], |t, x| {
        let y = t.transpose(x[0])?;
        probe(t, y)
    }));
    v
}

fn small_extractor(seed: u64) -> Result<Extractor> {
    Extractor::build(ExtractorSpec {
        seed,
        phi2: vec![LayerSpec::new(6, 3, 1), LayerSpec::new(8, 3, 2)],
        phi1: vec![LayerSpec::new(8, 3, 2)],
        ..ExtractorSpec::default()
    })
}

fn stcl_checks(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<Check>> {
    let ex = small_extractor(seed)?;
    let mut v = Vec::new();
    let img = |rng: &mut ChaCha8Rng, s: usize| uniform(rng, &[1, 3, s, s], 0.0, 1.0);

    let e = ex.clone();
    v.push(Check {
        name: "extract_phi2",
        inputs: vec![img(rng, 8)],
        tol: PRIMITIVE_TOL,
        coord_fraction: None,
        body: Box::new(move |t, x| {
            let g = e.extract_on(t, x[0], Group::Phi2)?;
            let mut acc = probe(t, g.layers[0].features)?;
            for l in &g.layers[1..] {
                let p = probe(t, l.features)?;
                acc = t.add(acc, p)?;
            }
            Ok(acc)
        }),
    });

    let cfg = StclConfig::default();
    let (e, c) = (ex.clone(), cfg.clone());
    let reference = img(rng, 8);
    v.push(Check {
        name: "cx_min_form",
        inputs: vec![img(rng, 8)],
        tol: COMPOSITE_TOL,
        coord_fraction: None,
        body: Box::new(move |t, x| {
            let r = t.constant(reference.clone());
            let p = e.extract_on(t, r, Group::Phi2)?;
            let q = e.extract_on(t, x[0], Group::Phi2)?;
            loss::cx(t, &p, &q, &c)
        }),
    });

    let c = StclConfig {
        cx_variant: CxVariant::NormalizedCx,
        ..cfg.clone()
    };
    let e = ex.clone();
    let reference = img(rng, 8);
    v.push(Check {
        name: "cx_normalized",
        inputs: vec![img(rng, 8)],
        tol: COMPOSITE_TOL,
        coord_fraction: None,
        body: Box::new(move |t, x| {
            let r = t.constant(reference.clone());
            let p = e.extract_on(t, r, Group::Phi2)?;
            let q = e.extract_on(t, x[0], Group::Phi2)?;
            loss::cx(t, &p, &q, &c)
        }),
    });

    let (e, c) = (ex.clone(), cfg.clone());
    let lr = img(rng, 8);
    v.push(Check {
        name: "loss_a",
        inputs: vec![img(rng, 16)],
        tol: COMPOSITE_TOL,
        coord_fraction: None,
        body: Box::new(move |t, x| {
            let l_var = t.constant(lr.clone());
            let l = e.extract_on(t, l_var, Group::Phi1)?;
            let down = t.downsample_bicubic(x[0], 2)?;
            let lp = e.extract_on(t, down, Group::Phi1)?;
            loss::loss_a(t, &l, &lp, &c)
        }),
    });

    let (e, c) = (ex, cfg);
    let lr = img(rng, 4);
    let frames: Vec<Tensor> = (0..3).map(|_| img(rng, 8)).collect();
    v.push(Check {
        name: "stcl_total",
        inputs: vec![img(rng, 8)],
        tol: COMPOSITE_TOL,
        coord_fraction: None,
        body: Box::new(move |t, x| {
            let l_var = t.constant(lr.clone());
            let l = e.extract_on(t, l_var, Group::Phi1)?;
            let down = t.downsample_bicubic(x[0], 2)?;
            let lp = e.extract_on(t, down, Group::Phi1)?;
            let s = e.extract_on(t, x[0], Group::Phi2)?;
            let mut grids = Vec::new();
            for f in &frames {
                let fv = t.constant(f.clone());
                grids.push(e.extract_on(t, fv, Group::Phi2)?);
            }
            let mut neighbors = BTreeMap::new();
            neighbors.insert(-1, grids[0].clone());
            neighbors.insert(1, grids[2].clone());
            let inputs = StclInputs {
                lr: &l,
                lr_prime: &lp,
                h0: &grids[1],
                sr: &s,
                neighbors: &neighbors,
            };
            Ok(loss::stcl_total(t, &inputs, &c)?.total)
        }),
    });
    Ok(v)
}

fn trainer_checks(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<Check>> {
    let small = small_extractor(seed)?;
    let config = TrainConfig {
        loss_mode: LossMode::Stcl,
        seed,
        model: ModelConfig { blocks: 1, width: 4, global_skip: true },
        extractor: small.spec().clone(),
        lr_patch: 16,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(config)?;
    let mut inputs = trainer.params.values();
    // A zero tail would block every gradient upstream of it.
    let tail = inputs.len() - 2;
    let shape = inputs[tail].shape().to_vec();
    inputs[tail] = uniform(rng, &shape, -0.3, 0.3);
    // 16×16 mosaic patch packed to 8×8, SR output 64×64.
    let mosaic: Vec<u16> = (0..256).map(|_| rng.gen_range(256..60000)).collect();
    let lr = BayerFrame::new(16, 16, mosaic, 256, (1.9, 1.6))?;
    let mut hr = Vec::new();
    for _ in 0..3 {
        hr.push(RgbImage::from_tensor(&uniform(rng, &[1, 3, 64, 64], 0.0, 1.0), Provenance::Synthetic)?);
    }
    let sample = TrainingSample {
        frame: 1,
        lr_origin: (0, 0),
        lr,
        hr,
    };
    let body = move |t: &mut Tape, x: &[Var]| -> Result<Var> { Ok(trainer.loss(t, x, &sample, 0)?.total) };
    Ok(vec![Check {
        name: "sr_model_stcl",
        inputs,
        tol: COMPOSITE_TOL,
        coord_fraction: Some(0.01),
        body: Box::new(body),
    }])
}

/// Runs one suite. `fault` names a check whose analytic gradient is
/// deliberately scaled, to exercise failure reporting.
pub fn run_suite(suite: Suite, seed: u64, fault: Option<&str>) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks = match suite {
        Suite::Diffcore => diffcore_checks(&mut rng),
        Suite::Stcl => stcl_checks(&mut rng, seed)?,
        Suite::Trainer => trainer_checks(&mut rng, seed)?,
    };
    let mut out = Vec::with_capacity(checks.len());
    for c in checks {
        let cfg = GradCheckConfig {
            seed,
            coord_fraction: c.coord_fraction,
            corrupt_analytic: (fault == Some(c.name)).then_some(1.5),
            ..GradCheckConfig::default()
        };
        let report = grad_check(c.name, &c.inputs, &cfg, |t, x| (c.body)(t, x))?;
        out.push(CheckOutcome { report, tolerance: c.tol });
    }
    Ok(out)
}

/// Names of the checks in a suite, in run order.
pub fn check_names(suite: Suite) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let checks = match suite {
        Suite::Diffcore => diffcore_checks(&mut rng),
        Suite::Stcl => stcl_checks(&mut rng, 0).unwrap_or_default(),
        Suite::Trainer => trainer_checks(&mut rng, 0).unwrap_or_default(),
    };
    checks.iter().map(|c| c.name.to_string()).collect()
}

/// One report line per check.
pub fn format_outcome(o: &CheckOutcome) -> String {
    format!(
        "{:<20} {} max_rel_err={:.3e} tol={:.0e} checked={} skipped={}",
        o.report.name,
        if o.passed() { "PASS" } else { "FAIL" },
        o.report.max_rel_err,
        o.tolerance,
        o.report.checked,
        o.report.skipped
    )
}
