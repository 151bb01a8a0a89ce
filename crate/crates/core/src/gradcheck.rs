//! Central finite-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Check at most this many coordinates per input (sampled), `None` = all.
    pub max_coords: Option<usize>,
    /// Check this fraction of each input's coordinates (rounded up, sampled).
    pub coord_fraction: Option<f64>,
    /// Seed for coordinate sampling.
    pub seed: u64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Test hook: scales analytic gradients to simulate a faulty backward.
    pub corrupt_analytic: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords: None,
            coord_fraction: None,
            seed: 0,
            floor: 1e-8,
            corrupt_analytic: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because a perturbation changed a discrete choice.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `d f / d inputs` from the tape against central differences.
///
/// `f` records a scalar function of its inputs (registered as params, in
/// order). A coordinate is skipped when either perturbed evaluation records a
/// different [`Tape::discrete_signature`] than the base point.
pub fn grad_check<F>(name: &str, inputs: &[Tensor], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item()?, tape.discrete_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let base_sig = tape.discrete_signature();
    let grads = tape.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        name: String::from(name),
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let g = match grads.get(*var) {
            Some(g) => g.clone(),
            None => continue,
        };
        let n = inputs[k].numel();
        let by_fraction = cfg.coord_fraction.map(|f| libm::ceil(f * n as f64).max(1.0) as usize);
        let limit = match (cfg.max_coords, by_fraction) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        let coords: Vec<usize> = match limit {
            Some(m) if m < n => {
                let mut v = index::sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + cfg.step;
            let (fp, sp) = eval(&work)?;
            work[k].data_mut()[i] = orig - cfg.step;
            let (fm, sm) = eval(&work)?;
            work[k].data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let analytic = g.data()[i] * cfg.corrupt_analytic.unwrap_or(1.0);
            let err = relative_error(analytic, numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((k, i));
            }
        }
    }
    Ok(report)
}
