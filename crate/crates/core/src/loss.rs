//! The spatio-temporal coupling loss family.
//!
//! ```text
//! total  = loss_a(L, L') + loss_r(H0, S) + λ · loss_t
//! loss_t = Σ_{t ∈ [-T, T], t ≠ 0} w_t · cx(H_t, S)
//! ```
//!
//! Every term is computed per layer of the feature group and averaged over
//! layers. Row minima use a frozen argmin (lowest index on ties).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::features::{FeatureGrid, Group, LayerGrid, TapeGrid, TapeLayer};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Contextual term used for `loss_r` and the temporal terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CxVariant {
    /// `(1/K) Σ_i min_j D(p_i, q_j)`.
    MinForm,
    /// Bandwidth-normalized contextual similarity, `-ln CX`.
    NormalizedCx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StclConfig {
    /// Kernel centre, feature-map units.
    pub mu: f64,
    /// Kernel width.
    pub sigma: f64,
    /// Temporal weight λ.
    pub lambda: f64,
    /// Temporal radius T.
    pub radius: usize,
    /// Per-offset weights `w_t`.
    pub weights: BTreeMap<i32, f64>,
    pub cx_variant: CxVariant,
    pub cx_bandwidth: f64,
}

impl Default for StclConfig {
    fn default() -> Self {
        let mut weights = BTreeMap::new();
        weights.insert(-1, 0.1);
        weights.insert(1, 0.1);
        Self {
            mu: 0.0,
            sigma: 2.0,
            lambda: 1.0,
            radius: 1,
            weights,
            cx_variant: CxVariant::MinForm,
            cx_bandwidth: 0.5,
        }
    }
}

impl StclConfig {
    /// Temporal offsets `[-T, T] \ {0}` in ascending order.
    pub fn offsets(&self) -> Vec<i32> {
        let t = self.radius as i32;
        (-t..=t).filter(|&o| o != 0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.cx_variant == CxVariant::NormalizedCx && !(self.cx_bandwidth > 0.0) {
            return Err(Error::Config(format!(
                "cx_bandwidth must be > 0, got {}",
                self.cx_bandwidth
            )));
        }
        for t in self.offsets() {
            match self.weights.get(&t) {
                Some(w) if *w >= 0.0 && w.is_finite() => {}
                Some(w) => return Err(Error::Config(format!("w[{}] = {} is negative", t, w))),
                None => return Err(Error::Config(format!("missing temporal weight w[{}]", t))),
            }
        }
        Ok(())
    }

    pub fn weight(&self, t: i32) -> Result<f64> {
        self.weights
            .get(&t)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing temporal weight w[{}]", t)))
    }
}

/// Loss components as tape handles.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub loss_a: Var,
    pub loss_r: Var,
    pub loss_c: BTreeMap<i32, Var>,
    pub loss_t: Var,
    pub total: Var,
}

/// Plain values of a [`LossBreakdown`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossValues {
    pub loss_a: f64,
    pub loss_r: f64,
    pub loss_c: BTreeMap<i32, f64>,
    pub loss_t: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let get = |v: Var| tape.value(v).data()[0];
        LossValues {
            loss_a: get(self.loss_a),
            loss_r: get(self.loss_r),
            loss_c: self.loss_c.iter().map(|(t, v)| (*t, get(*v))).collect(),
            loss_t: get(self.loss_t),
            total: get(self.total),
        }
    }
}

/// Cosine distances `D[i][j] = 1 − a_i·b_j`, one matrix per layer.
pub fn cosine_distance_matrix(a: &FeatureGrid, b: &FeatureGrid) -> Result<Vec<Tensor>> {
    if a.group != b.group {
        return Err(Error::Contract(format!(
            "grids from different groups ({} vs {})",
            a.group.as_str(),
            b.group.as_str()
        )));
    }
    if a.layers.len() != b.layers.len() {
        return Err(dim_err(
            "cosine_distance_matrix",
            format!("{} vs {} layers", a.layers.len(), b.layers.len()),
        ));
    }
    a.layers
        .iter()
        .zip(&b.layers)
        .map(|(la, lb)| layer_distance_matrix(la, lb))
        .collect()
}

/// Cosine distance matrix of a single layer.
pub fn layer_distance_matrix(a: &LayerGrid, b: &LayerGrid) -> Result<Tensor> {
    if a.dim() != b.dim() {
        return Err(dim_err(
            "cosine_distance_matrix",
            format!("vector dims {} vs {}", a.dim(), b.dim()),
        ));
    }
    let (n, m) = (a.len(), b.len());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = a.vector(i);
        for j in 0..m {
            let d: f64 = ai.iter().zip(b.vector(j)).map(|(x, y)| x * y).sum();
            out.push(1.0 - d);
        }
    }
    Tensor::new(alloc::vec![n, m], out)
}

/// Gaussian spatial kernel `κ[i][j] = exp(−(‖p_i − q_j‖ − μ)² / 2σ²)`.
pub fn spatial_kernel(coords_a: &[(u32, u32)], coords_b: &[(u32, u32)], mu: f64, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be > 0, got {}", sigma)));
    }
    let denom = 2.0 * sigma * sigma;
    let mut out = Vec::with_capacity(coords_a.len() * coords_b.len());
    for &(xa, ya) in coords_a {
        for &(xb, yb) in coords_b {
            let dx = f64::from(xa) - f64::from(xb);
            let dy = f64::from(ya) - f64::from(yb);
            let d = libm::sqrt(dx * dx + dy * dy) - mu;
            out.push(libm::exp(-d * d / denom));
        }
    }
    Tensor::new(alloc::vec![coords_a.len(), coords_b.len()], out)
}

/// `(1/N) Σ_i min_j κ[i][j]·D[i][j]` from explicit matrices.
pub fn kernel_min_mean(d: &Tensor, kappa: &Tensor) -> Result<f64> {
    let (n, m) = d.dims2()?;
    if kappa.shape() != d.shape() {
        return Err(dim_err(
            "kernel_min_mean",
            format!("{:?} vs {:?}", d.shape(), kappa.shape()),
        ));
    }
    if n == 0 || m == 0 {
        return Err(dim_err("kernel_min_mean", String::from("empty matrix")));
    }
    let total: f64 = (0..n)
        .map(|i| {
            (0..m)
                .map(|j| kappa.data()[i * m + j] * d.data()[i * m + j])
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / n as f64)
}

fn check_pair(op: &'static str, tape: &Tape, a: &TapeGrid, b: &TapeGrid) -> Result<()> {
    if a.group != b.group {
        return Err(Error::Contract(format!(
            "{}: grids from different groups ({} vs {})",
            op,
            a.group.as_str(),
            b.group.as_str()
        )));
    }
    if a.layers.len() != b.layers.len() || a.layers.is_empty() {
        return Err(dim_err(op, format!("{} vs {} layers", a.layers.len(), b.layers.len())));
    }
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        if la.coords.is_empty() || lb.coords.is_empty() {
            return Err(dim_err(op, String::from("empty feature grid")));
        }
        let (da, db) = (tape.shape(la.features)[1], tape.shape(lb.features)[1]);
        if da != db {
            return Err(dim_err(op, format!("vector dims {} vs {}", da, db)));
        }
    }
    Ok(())
}

/// Mean over layers of per-layer scalars.
fn layer_average(tape: &mut Tape, per_layer: Vec<Var>) -> Result<Var> {
    let n = per_layer.len();
    let mut it = per_layer.into_iter();
    let mut acc = it.next().ok_or_else(|| dim_err("layer_average", String::from("no layers")))?;
    for v in it {
        acc = tape.add(acc, v)?;
    }
    if n == 1 {
        Ok(acc)
    } else {
        tape.scale(acc, 1.0 / n as f64)
    }
}

/// Alignment loss between LR features `l` and downsampled-SR features `lp`.
pub fn loss_a(tape: &mut Tape, l: &TapeGrid, lp: &TapeGrid, cfg: &StclConfig) -> Result<Var> {
    check_pair("loss_a", tape, l, lp)?;
    let mut per_layer = Vec::with_capacity(l.layers.len());
    for (a, b) in l.layers.iter().zip(&lp.layers) {
        let kappa = spatial_kernel(&a.coords, &b.coords, cfg.mu, cfg.sigma)?;
        let mins = tape.min_match(a.features, b.features, Some(kappa))?;
        per_layer.push(tape.mean(mins)?);
    }
    layer_average(tape, per_layer)
}

/// Contextual term between reference features `p` and generated features `q`.
pub fn cx(tape: &mut Tape, p: &TapeGrid, q: &TapeGrid, cfg: &StclConfig) -> Result<Var> {
    check_pair("cx", tape, p, q)?;
    let mut per_layer = Vec::with_capacity(p.layers.len());
    for (a, b) in p.layers.iter().zip(&q.layers) {
        let v = match cfg.cx_variant {
            CxVariant::MinForm => {
                let mins = tape.min_match(a.features, b.features, None)?;
                tape.mean(mins)?
            }
            CxVariant::NormalizedCx => normalized_cx(tape, a, b, cfg.cx_bandwidth)?,
        };
        per_layer.push(v);
    }
    layer_average(tape, per_layer)
}

/// `-ln CX(q, p)` with distances normalized by each generated feature's
/// nearest reference and converted to similarities with bandwidth `h`.
fn normalized_cx(tape: &mut Tape, reference: &TapeLayer, generated: &TapeLayer, h: f64) -> Result<Var> {
    const EPS: f64 = 1e-5;
    let pt = tape.transpose(reference.features)?;
    let sim = tape.matmul(generated.features, pt)?; // (m_gen, n_ref)
    let neg = tape.scale(sim, -1.0)?;
    let dist = tape.add_scalar(neg, 1.0)?;
    let row_min = tape.min_rows(dist)?;
    let denom = tape.add_scalar(row_min, EPS)?;
    let rel = tape.div_col(dist, denom)?;
    let neg_rel = tape.scale(rel, -1.0 / h)?;
    let logits = tape.add_scalar(neg_rel, 1.0 / h)?;
    let w = tape.exp(logits)?;
    let wsum = tape.sum_axis1(w)?;
    let cx_ij = tape.div_col(w, wsum)?;
    let by_ref = tape.transpose(cx_ij)?; // (n_ref, m_gen)
    let neg_cx = tape.scale(by_ref, -1.0)?;
    let neg_max = tape.min_rows(neg_cx)?;
    let max = tape.scale(neg_max, -1.0)?;
    let cx = tape.mean(max)?;
    let ln = tape.ln(cx)?;
    tape.scale(ln, -1.0)
}

/// Reference loss: `cx(H0, S)` on `Phi2` features.
pub fn loss_r(tape: &mut Tape, h0: &TapeGrid, s: &TapeGrid, cfg: &StclConfig) -> Result<Var> {
    cx(tape, h0, s, cfg)
}

/// Compensation loss for neighbour offset `t`: `w_t · cx(H_t, S)`.
pub fn loss_c(tape: &mut Tape, ht: &TapeGrid, s: &TapeGrid, t: i32, cfg: &StclConfig) -> Result<Var> {
    if t == 0 {
        return Err(Error::Contract(String::from(
            "compensation loss is defined for neighbour offsets t ≠ 0",
        )));
    }
    let w = cfg.weight(t)?;
    let c = cx(tape, ht, s, cfg)?;
    tape.scale(c, w)
}

/// Temporal loss `Σ_t loss_c(H_t, S)` over `[-T, T] \ {0}`; also returns the
/// individual terms.
pub fn loss_t(
    tape: &mut Tape,
    neighbors: &BTreeMap<i32, TapeGrid>,
    s: &TapeGrid,
    cfg: &StclConfig,
) -> Result<(Var, BTreeMap<i32, Var>)> {
    let mut terms = BTreeMap::new();
    let mut total: Option<Var> = None;
    for t in cfg.offsets() {
        let ht = neighbors
            .get(&t)
            .ok_or_else(|| Error::Config(format!("missing neighbour frame at offset {}", t)))?;
        let c = loss_c(tape, ht, s, t, cfg)?;
        terms.insert(t, c);
        total = Some(match total {
            Some(acc) => tape.add(acc, c)?,
            None => c,
        });
    }
    let total = match total {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok((total, terms))
}

/// Feature grids feeding [`stcl_total`].
#[derive(Clone, Debug)]
pub struct StclInputs<'a> {
    /// `Phi1` features of the LR frame.
    pub lr: &'a TapeGrid,
    /// `Phi1` features of the downsampled SR output.
    pub lr_prime: &'a TapeGrid,
    /// `Phi2` features of the paired HR frame.
    pub h0: &'a TapeGrid,
    /// `Phi2` features of the SR output.
    pub sr: &'a TapeGrid,
    /// `Phi2` features of the neighbouring HR frames by offset.
    pub neighbors: &'a BTreeMap<i32, TapeGrid>,
}

/// Full composite loss.
pub fn stcl_total(tape: &mut Tape, inputs: &StclInputs<'_>, cfg: &StclConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    if inputs.lr.group != Group::Phi1 || inputs.h0.group != Group::Phi2 {
        return Err(Error::Contract(String::from(
            "alignment terms take Phi1 grids, reference and temporal terms Phi2 grids",
        )));
    }
    let la = loss_a(tape, inputs.lr, inputs.lr_prime, cfg)?;
    let lr = loss_r(tape, inputs.h0, inputs.sr, cfg)?;
    let (lt, lc) = loss_t(tape, inputs.neighbors, inputs.sr, cfg)?;
    compose(tape, la, lr, lt, lc, cfg.lambda)
}

/// `total = loss_a + loss_r + λ·loss_t`.
pub fn compose(
    tape: &mut Tape,
    loss_a: Var,
    loss_r: Var,
    loss_t: Var,
    loss_c: BTreeMap<i32, Var>,
    lambda: f64,
) -> Result<LossBreakdown> {
    let spatial = tape.add(loss_a, loss_r)?;
    let weighted = tape.scale(loss_t, lambda)?;
    let total = tape.add(spatial, weighted)?;
    Ok(LossBreakdown {
        loss_a,
        loss_r,
        loss_c,
        loss_t,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn grid(group: Group, coords: Vec<(u32, u32)>, vecs: Vec<Vec<f64>>) -> FeatureGrid {
        let dim = vecs[0].len();
        let n = vecs.len();
        let data = vecs
            .into_iter()
            .flat_map(|v| {
                let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
                v.into_iter().map(move |x| x / norm)
            })
            .collect();
        FeatureGrid {
            group,
            source_size: (1, 1),
            layers: vec![LayerGrid::new(coords, Tensor::new(vec![n, dim], data).unwrap()).unwrap()],
        }
    }

    #[test]
    fn cosine_distance_examples() {
        let a = grid(Group::Phi2, vec![(0, 0), (1, 0)], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = grid(Group::Phi2, vec![(0, 0)], vec![vec![1.0, 1.0]]);
        let d = &cosine_distance_matrix(&a, &a).unwrap()[0];
        assert_eq!(d.data(), &[0.0, 1.0, 1.0, 0.0]);
        let d = &cosine_distance_matrix(&a, &b).unwrap()[0];
        assert!((d.data()[0] - (1.0 - 1.0 / libm::sqrt(2.0))).abs() < 1e-12);
        assert!((d.data()[0] - 0.29289).abs() < 1e-5);
    }

    #[test]
    fn cosine_distance_dimension_mismatch() {
        let a = grid(Group::Phi2, vec![(0, 0)], vec![vec![1.0, 0.0]]);
        let b = grid(Group::Phi2, vec![(0, 0)], vec![vec![1.0, 0.0, 0.0]]);
        assert!(matches!(cosine_distance_matrix(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn kernel_values() {
        let k = spatial_kernel(&[(0, 0)], &[(0, 0), (2, 0), (0, 4)], 0.0, 2.0).unwrap();
        assert_eq!(k.data()[0], 1.0);
        assert!((k.data()[1] - libm::exp(-0.5)).abs() < 1e-12);
        assert!((k.data()[1] - 0.606531).abs() < 1e-6);
        assert!((k.data()[2] - libm::exp(-2.0)).abs() < 1e-12);
        assert!((k.data()[2] - 0.135335).abs() < 1e-6);
        assert!(spatial_kernel(&[(0, 0)], &[(0, 0)], 0.0, 0.0).is_err());
    }

    #[test]
    fn kernel_min_mean_hand_example() {
        let d = Tensor::new(vec![2, 2], vec![0.5, 0.2, 0.3, 0.4]).unwrap();
        let k = Tensor::new(vec![2, 2], vec![1.0, 0.1, 0.1, 1.0]).unwrap();
        assert!((kernel_min_mean(&d, &k).unwrap() - 0.025).abs() < 1e-15);
    }

    #[test]
    fn cx_single_min() {
        // one reference feature, two candidates at distances 0.7 and 0.3
        let angle = |d: f64| libm::acos(1.0 - d);
        let p = grid(Group::Phi2, vec![(0, 0)], vec![vec![1.0, 0.0]]);
        let q = grid(
            Group::Phi2,
            vec![(0, 0), (1, 0)],
            vec![
                vec![libm::cos(angle(0.7)), libm::sin(angle(0.7))],
                vec![libm::cos(angle(0.3)), libm::sin(angle(0.3))],
            ],
        );
        let mut tape = Tape::new();
        let (tp, tq) = (p.to_tape(&mut tape, false), q.to_tape(&mut tape, false));
        let v = cx(&mut tape, &tp, &tq, &StclConfig::default()).unwrap();
        assert!((tape.value(v).data()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn loss_c_contract_and_weights() {
        let p = grid(Group::Phi2, vec![(0, 0)], vec![vec![1.0, 0.0]]);
        let mut tape = Tape::new();
        let tp = p.to_tape(&mut tape, false);
        let cfg = StclConfig::default();
        assert!(matches!(loss_c(&mut tape, &tp, &tp, 0, &cfg), Err(Error::Contract(_))));
        assert!(matches!(loss_c(&mut tape, &tp, &tp, 2, &cfg), Err(Error::Config(_))));
        let v = loss_c(&mut tape, &tp, &tp, 1, &cfg).unwrap();
        assert_eq!(tape.value(v).data()[0], 0.0);
    }

    #[test]
    fn loss_t_missing_offset_and_empty_radius() {
        let p = grid(Group::Phi2, vec![(0, 0)], vec![vec![1.0, 0.0]]);
        let mut tape = Tape::new();
        let tp = p.to_tape(&mut tape, false);
        let mut nb = BTreeMap::new();
        nb.insert(-1, tp.clone());
        let cfg = StclConfig::default();
        assert!(matches!(loss_t(&mut tape, &nb, &tp, &cfg), Err(Error::Config(_))));
        let cfg0 = StclConfig {
            radius: 0,
            ..StclConfig::default()
        };
        let (v, terms) = loss_t(&mut tape, &BTreeMap::new(), &tp, &cfg0).unwrap();
        assert!(terms.is_empty());
        assert_eq!(tape.value(v).data()[0], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(StclConfig::default().validate().is_ok());
        let mut c = StclConfig::default();
        c.sigma = 0.0;
        assert!(c.validate().is_err());
        let mut c = StclConfig::default();
        c.weights.remove(&1);
        assert!(c.validate().is_err());
        let mut c = StclConfig::default();
        c.weights.insert(-1, -0.5);
        assert!(c.validate().is_err());
        assert_eq!(StclConfig::default().offsets(), vec![-1, 1]);
    }

    #[test]
    fn group_mismatch_is_rejected() {
        let p = grid(Group::Phi2, vec![(0, 0)], vec![vec![1.0, 0.0]]);
        let q = grid(Group::Phi1, vec![(0, 0)], vec![vec![1.0, 0.0]]);
        let mut tape = Tape::new();
        let (tp, tq) = (p.to_tape(&mut tape, false), q.to_tape(&mut tape, false));
        assert!(cx(&mut tape, &tp, &tq, &StclConfig::default()).is_err());
    }
}
