//! Reverse-mode differentiation over a closed set of tensor ops.
//!
//! A [`Tape`] records every op in evaluation order, so node indices are a
//! valid topological order by construction. [`Tape::backward`] may be called
//! once per recording; call [`Tape::reset`] to start a new one.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom, Resample1d};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Relu(Var),
    PixelShuffle {
        input: Var,
        factor: usize,
    },
    PixelUnshuffle {
        input: Var,
        factor: usize,
    },
    Downsample {
        input: Var,
        rx: Resample1d,
        ry: Resample1d,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis0(Var),
    SumAxis1(Var),
    SubRow(Var, Var),
    DivCol(Var, Var),
    MinRows {
        input: Var,
        argmin: Vec<usize>,
    },
    MinMatch {
        a: Var,
        b: Var,
        kappa: Option<Vec<f64>>,
        argmin: Vec<usize>,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    Matmul(Var, Var),
    Reshape(Var),
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Relu(_) => "relu",
            Op::PixelShuffle { .. } => "pixel_shuffle",
            Op::PixelUnshuffle { .. } => "pixel_unshuffle",
            Op::Downsample { .. } => "downsample_bicubic",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sqrt(_) => "sqrt",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanAxis0(_) => "mean_axis0",
            Op::SumAxis1(_) => "sum_axis1",
            Op::SubRow(..) => "sub_row",
            Op::DivCol(..) => "div_col",
            Op::MinRows { .. } => "min_rows",
            Op::MinMatch { .. } => "min_match",
            Op::GatherRows { .. } => "gather_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Matmul(..) => "matmul",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, .. } => vec![*input, *weight],
            Op::ChannelBias { input, bias } => vec![*input, *bias],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::SubRow(a, b)
            | Op::DivCol(a, b)
            | Op::Matmul(a, b) => vec![*a, *b],
            Op::MinMatch { a, b, .. } => vec![*a, *b],
            Op::Relu(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Sqrt(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanAxis0(x)
            | Op::SumAxis1(x)
            | Op::Reshape(x) => vec![*x],
            Op::PixelShuffle { input, .. }
            | Op::PixelUnshuffle { input, .. }
            | Op::Downsample { input, .. }
            | Op::MinRows { input, .. }
            | Op::GatherRows { input, .. }
            | Op::NormalizeRows { input, .. }
            | Op::Permute { input, .. } => vec![*input],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`, `None` if `v` does not require grad.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves the gradient of `v` out of the map.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Records ops and differentiates a scalar root.
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Tolerance below which a row is treated as the zero vector.
pub const ZERO_NORM: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enable or disable the NaN/Inf check run after every op.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Clears all recorded nodes; previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Checks that every node's inputs were recorded before it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.inputs().iter().all(|v| v.0 < i))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::Contract(String::from(
                "tape already differentiated; reset before recording",
            )));
        }
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push(t, op)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, op)
    }

    // ---- convolution family -------------------------------------------

    /// 2-D cross-correlation, `input: (N, C_in, H, W)`, `weight: (C_out, C_in, k, k)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (co, ci, kh, kw) = self.value(weight).dims4().map_err(|_| {
            dim_err(
                "conv2d",
                format!(
                    "input {:?}, weight {:?} (want C_out×C_in×k×k)",
                    self.shape(input),
                    self.shape(weight)
                ),
            )
        })?;
        if ci != c || kh != kw {
            return Err(dim_err(
                "conv2d",
                format!("input {:?}, weight {:?}", self.shape(input), self.shape(weight)),
            ));
        }
        let geom = ConvGeom::new(c, h, w, kh, stride, padding).ok_or_else(|| {
            dim_err(
                "conv2d",
                format!(
                    "input {:?} too small for kernel {} (stride {}, padding {})",
                    self.shape(input),
                    kh,
                    stride,
                    padding
                ),
            )
        })?;
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; n * rows * p];
        let mut out = vec![0.0; n * co * p];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            for b in 0..n {
                let colb = &mut cols[b * rows * p..(b + 1) * rows * p];
                kernels::im2col(&geom, &x[b * c * h * w..(b + 1) * c * h * w], colb);
                kernels::gemm_nn(co, rows, p, wt, colb, &mut out[b * co * p..(b + 1) * co * p]);
            }
        }
        let t = Tensor::new(vec![n, co, geom.oh, geom.ow], out)?;
        self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            },
        )
    }

    /// Adds a per-channel bias `(C)` to an `(N, C, H, W)` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.shape(bias) != [c] {
            return Err(dim_err(
                "channel_bias",
                format!("input {:?}, bias {:?}", self.shape(input), self.shape(bias)),
            ));
        }
        let mut data = self.value(input).data().to_vec();
        let b = self.value(bias).data();
        for (i, chunk) in data.chunks_mut(h * w).enumerate() {
            let bv = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let t = Tensor::new(vec![n, c, h, w], data)?;
        self.push(t, Op::ChannelBias { input, bias })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    /// `(N, C·r², H, W) -> (N, C, H·r, W·r)`.
    pub fn pixel_shuffle(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let r2 = factor * factor;
        if factor == 0 || c % r2 != 0 {
            return Err(dim_err(
                "pixel_shuffle",
                format!("{} channels not divisible by factor² = {}", c, r2),
            ));
        }
        let out = shuffle(self.value(input).data(), n, c / r2, h, w, factor, false);
        let t = Tensor::new(vec![n, c / r2, h * factor, w * factor], out)?;
        self.push(t, Op::PixelShuffle { input, factor })
    }

    /// `(N, C, H·r, W·r) -> (N, C·r², H, W)`, inverse of [`Self::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(dim_err(
                "pixel_unshuffle",
                format!("spatial {}×{} not divisible by {}", h, w, factor),
            ));
        }
        let out = shuffle(self.value(input).data(), n, c, h / factor, w / factor, factor, true);
        let t = Tensor::new(vec![n, c * factor * factor, h / factor, w / factor], out)?;
        self.push(t, Op::PixelUnshuffle { input, factor })
    }

    /// Antialiased cubic (a = −0.5) downsample by an integer factor.
    pub fn downsample_bicubic(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(dim_err(
                "downsample_bicubic",
                format!("spatial {}×{} not divisible by {}", h, w, factor),
            ));
        }
        let (oh, ow) = (h / factor, w / factor);
        let rx = Resample1d::new(w, ow);
        let ry = Resample1d::new(h, oh);
        let mut tmp = vec![0.0; n * c * h * ow];
        rx.apply_rows(self.value(input).data(), n * c * h, &mut tmp);
        let mut out = vec![0.0; n * c * oh * ow];
        ry.apply_cols(&tmp, n * c, ow, &mut out);
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(t, Op::Downsample { input, rx, ry })
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, libm::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, libm::log, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, libm::sqrt, Op::Sqrt(x))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(dim_err("mean", String::from("empty tensor")));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Column means of an `(n, c)` matrix, shape `(c)`.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if n == 0 {
            return Err(dim_err("mean_axis0", String::from("no rows")));
        }
        let mut acc = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        self.push(Tensor::new(vec![c], acc)?, Op::MeanAxis0(x))
    }

    /// Row sums of an `(n, c)` matrix, shape `(n)`.
    pub fn sum_axis1(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        let out: Vec<f64> = if c == 0 {
            vec![0.0; n]
        } else {
            self.value(x).data().chunks(c).map(|r| r.iter().sum()).collect()
        };
        self.push(Tensor::new(vec![n], out)?, Op::SumAxis1(x))
    }

    /// `x[i, j] - row[j]` for `x: (n, c)`, `row: (c)`.
    pub fn sub_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if self.shape(row) != [c] {
            return Err(dim_err(
                "sub_row",
                format!("{:?} vs {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (v, rv) in chunk.iter_mut().zip(r) {
                *v -= rv;
            }
        }
        self.push(Tensor::new(vec![n, c], data)?, Op::SubRow(x, row))
    }

    /// `x[i, j] / col[i]` for `x: (n, c)`, `col: (n)`.
    pub fn div_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if self.shape(col) != [n] {
            return Err(dim_err(
                "div_col",
                format!("{:?} vs {:?}", self.shape(x), self.shape(col)),
            ));
        }
        let d = self.value(col).data();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(c.max(1)).enumerate() {
            chunk.iter_mut().for_each(|v| *v /= d[i]);
        }
        self.push(Tensor::new(vec![n, c], data)?, Op::DivCol(x, col))
    }

    /// Row minima of an `(n, m)` matrix. The argmin (lowest index on ties) is
    /// frozen for the backward pass.
    pub fn min_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if m == 0 {
            return Err(dim_err("min_rows", String::from("no columns")));
        }
        let mut argmin = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for row in self.value(x).data().chunks(m) {
            let (j, v) = argmin_of(row);
            argmin.push(j);
            out.push(v);
        }
        self.push(Tensor::new(vec![n], out)?, Op::MinRows { input: x, argmin })
    }

    /// Fused cosine matching: `out[i] = min_j κ[i,j]·D(a_i, b_j)` for
    /// `a: (n, d)`, `b: (m, d)` and an optional constant `κ: (n, m)`
    /// (all ones when `None`). The selected `j` is frozen for backward.
    ///
    /// `D(a, b) = ½‖a − b‖²`, which equals the cosine distance `1 − a·b` for
    /// unit vectors while staying exactly zero for identical rows.
    pub fn min_match(&mut self, a: Var, b: Var, kappa: Option<Tensor>) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        let (m, d2) = self.value(b).dims2()?;
        if d != d2 {
            return Err(dim_err(
                "min_match",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        if n == 0 || m == 0 {
            return Err(dim_err("min_match", String::from("empty feature set")));
        }
        let kappa = match kappa {
            Some(k) => {
                if k.shape() != [n, m] {
                    return Err(dim_err(
                        "min_match",
                        format!("kernel {:?}, want [{}, {}]", k.shape(), n, m),
                    ));
                }
                Some(k.into_data())
            }
            None => None,
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut argmin = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        let mut row = vec![0.0; m];
        for i in 0..n {
            let ai = &av[i * d..(i + 1) * d];
            for (j, r) in row.iter_mut().enumerate() {
                let dist = half_sq_dist(ai, &bv[j * d..(j + 1) * d]);
                *r = match &kappa {
                    Some(k) => k[i * m + j] * dist,
                    None => dist,
                };
            }
            let (j, v) = argmin_of(&row);
            argmin.push(j);
            out.push(v);
        }
        self.push(
            Tensor::new(vec![n], out)?,
            Op::MinMatch {
                a,
                b,
                kappa,
                argmin,
            },
        )
    }

    /// Selects rows of an `(n, c)` matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(dim_err(
                "gather_rows",
                format!("row {} out of range for {} rows", bad, n),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        self.push(
            Tensor::new(vec![rows.len(), c], data)?,
            Op::GatherRows {
                input: x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Scales each row of `(n, c)` to unit L2 norm. Rows with norm below
    /// [`ZERO_NORM`] become the first basis vector and pass no gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if c == 0 {
            return Err(dim_err("normalize_rows", String::from("zero-width rows")));
        }
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in data.chunks_mut(c) {
            let norm = libm::sqrt(kernels::dot(row, row));
            if norm < ZERO_NORM {
                row.fill(0.0);
                row[0] = 1.0;
                norms.push(0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
                norms.push(norm);
            }
        }
        self.push(
            Tensor::new(vec![n, c], data)?,
            Op::NormalizeRows { input: x, norms },
        )
    }

    // ---- linear algebra and layout -------------------------------------

    /// `(m, k) · (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err(
                "matmul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(x))
    }

    /// General axis permutation; `out.shape[i] = in.shape[perm[i]]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
            return Err(dim_err(
                "permute",
                format!("invalid permutation {:?} for shape {:?}", perm, shape),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(x).data(), &shape, perm, false);
        self.push(Tensor::new(out_shape, data)?, Op::Permute { input: x, perm: perm.to_vec() })
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims2()?;
        self.permute(x, &[1, 0])
    }

    /// Fingerprint of every discrete choice made while recording: relu
    /// activation masks, frozen argmins and zero-row substitutions. Finite
    /// differences are only meaningful between recordings with equal
    /// signatures.
    pub fn discrete_signature(&self) -> u64 {
        let mut h = Fnv::default();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => {
                    for &v in node.value.data() {
                        h.write(u64::from(v > 0.0));
                    }
                }
                Op::MinRows { argmin, .. } | Op::MinMatch { argmin, .. } => {
                    argmin.iter().for_each(|&j| h.write(j as u64));
                }
                Op::NormalizeRows { norms, .. } => {
                    norms.iter().for_each(|&n| h.write(u64::from(n == 0.0)));
                }
                _ => {}
            }
        }
        h.0
    }

    // ---- backward ----------------------------------------------------

    /// Differentiates the scalar `root` w.r.t. every node that requires grad.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract(String::from(
                "backward already run on this tape; reset before reuse",
            )));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let out = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match g {
                Some(g) if node.requires_grad => Tensor::new(node.value.shape().to_vec(), g).ok(),
                _ if node.requires_grad => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let (co, ..) = self.value(*weight).dims4()?;
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                if self.requires_grad(*weight) {
                    let gw = acc(grads, *weight, self.value(*weight).numel());
                    for b in 0..n {
                        kernels::gemm_nt(
                            co,
                            p,
                            rows,
                            &g[b * co * p..(b + 1) * co * p],
                            &cols[b * rows * p..(b + 1) * rows * p],
                            gw,
                        );
                    }
                }
                if self.requires_grad(*input) {
                    let wt = self.value(*weight).data();
                    let mut dcols = vec![0.0; rows * p];
                    let gi = acc(grads, *input, n * c * h * w);
                    for b in 0..n {
                        dcols.fill(0.0);
                        kernels::gemm_tn(rows, co, p, wt, &g[b * co * p..(b + 1) * co * p], &mut dcols);
                        kernels::col2im(geom, &dcols, &mut gi[b * c * h * w..(b + 1) * c * h * w]);
                    }
                }
            }
            Op::ChannelBias { input, bias } => {
                let (_, c, h, w) = self.value(*input).dims4()?;
                add_into(grads, *input, g, self);
                if self.requires_grad(*bias) {
                    let gb = acc(grads, *bias, c);
                    for (i, chunk) in g.chunks(h * w).enumerate() {
                        gb[i % c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if self.requires_grad(*x) {
                    let gx = acc(grads, *x, xv.len());
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(xv) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::PixelShuffle { input, factor } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let back = shuffle(g, n, c / (factor * factor), h, w, *factor, true);
                add_into(grads, *input, &back, self);
            }
            Op::PixelUnshuffle { input, factor } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let back = shuffle(g, n, c, h / factor, w / factor, *factor, false);
                add_into(grads, *input, &back, self);
            }
            Op::Downsample { input, rx, ry } => {
                let (n, c, h, _) = self.value(*input).dims4()?;
                let ow = rx.out_len;
                let mut tmp = vec![0.0; n * c * h * ow];
                ry.apply_cols_t(g, n * c, ow, &mut tmp);
                if self.requires_grad(*input) {
                    let gi = acc(grads, *input, self.value(*input).numel());
                    rx.apply_rows_t(&tmp, n * c * h, gi);
                }
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g, self);
                add_into(grads, *b, g, self);
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g, self);
                if self.requires_grad(*b) {
                    let gb = acc(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let ga = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.requires_grad(*b) {
                    let gb = acc(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let ga = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / bv[i];
                    }
                }
                if self.requires_grad(*b) {
                    let gb = acc(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] -= g[i] * val[i] / bv[i];
                    }
                }
            }
            Op::Scale(x, f) => {
                if self.requires_grad(*x) {
                    let gx = acc(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v * f);
                }
            }
            Op::AddScalar(x) => add_into(grads, *x, g, self),
            Op::Exp(x) => {
                if self.requires_grad(*x) {
                    let gx = acc(grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * val[i];
                    }
                }
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                if self.requires_grad(*x) {
                    let gx = acc(grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] / xv[i];
                    }
                }
            }
            Op::Sqrt(x) => {
                if self.requires_grad(*x) {
                    let gx = acc(grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * 0.5 / val[i];
                    }
                }
            }
            Op::Sum(x) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).numel();
                    acc(grads, *x, n).iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).numel();
                    let s = g[0] / n as f64;
                    acc(grads, *x, n).iter_mut().for_each(|o| *o += s);
                }
            }
            Op::MeanAxis0(x) => {
                let (n, c) = self.value(*x).dims2()?;
                if self.requires_grad(*x) {
                    let gx = acc(grads, *x, n * c);
                    for row in gx.chunks_mut(c) {
                        for (o, v) in row.iter_mut().zip(g) {
                            *o += v / n as f64;
                        }
                    }
                }
            }
            Op::SumAxis1(x) => {
                let (n, c) = self.value(*x).dims2()?;
                if self.requires_grad(*x) && c > 0 {
                    let gx = acc(grads, *x, n * c);
                    for (i, row) in gx.chunks_mut(c).enumerate() {
                        row.iter_mut().for_each(|o| *o += g[i]);
                    }
                }
            }
            Op::SubRow(x, row) => {
                let (_, c) = self.value(*x).dims2()?;
                add_into(grads, *x, g, self);
                if self.requires_grad(*row) && c > 0 {
                    let gr = acc(grads, *row, c);
                    for chunk in g.chunks(c) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o -= v;
                        }
                    }
                }
            }
            Op::DivCol(x, col) => {
                let (n, c) = self.value(*x).dims2()?;
                let d = self.value(*col).data();
                if self.requires_grad(*x) && c > 0 {
                    let gx = acc(grads, *x, n * c);
                    for i in 0..n {
                        for j in 0..c {
                            gx[i * c + j] += g[i * c + j] / d[i];
                        }
                    }
                }
                if self.requires_grad(*col) && c > 0 {
                    let gc = acc(grads, *col, n);
                    for i in 0..n {
                        let s: f64 = (0..c).map(|j| g[i * c + j] * val[i * c + j]).sum();
                        gc[i] -= s / d[i];
                    }
                }
            }
            Op::MinRows { input, argmin } => {
                let (n, m) = self.value(*input).dims2()?;
                if self.requires_grad(*input) {
                    let gx = acc(grads, *input, n * m);
                    for (i, &j) in argmin.iter().enumerate() {
                        gx[i * m + j] += g[i];
                    }
                }
            }
            Op::MinMatch {
                a,
                b,
                kappa,
                argmin,
            } => {
                let (n, d) = self.value(*a).dims2()?;
                let (m, _) = self.value(*b).dims2()?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let weight = |i: usize, j: usize| kappa.as_ref().map_or(1.0, |k| k[i * m + j]);
                if self.requires_grad(*a) {
                    let ga = acc(grads, *a, n * d);
                    for (i, &j) in argmin.iter().enumerate() {
                        let s = g[i] * weight(i, j);
                        for t in 0..d {
                            ga[i * d + t] += s * (av[i * d + t] - bv[j * d + t]);
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let gb = acc(grads, *b, m * d);
                    for (i, &j) in argmin.iter().enumerate() {
                        let s = g[i] * weight(i, j);
                        for t in 0..d {
                            gb[j * d + t] += s * (bv[j * d + t] - av[i * d + t]);
                        }
                    }
                }
            }
            Op::GatherRows { input, rows } => {
                let (n, c) = self.value(*input).dims2()?;
                if self.requires_grad(*input) {
                    let gx = acc(grads, *input, n * c);
                    for (k, &r) in rows.iter().enumerate() {
                        for t in 0..c {
                            gx[r * c + t] += g[k * c + t];
                        }
                    }
                }
            }
            Op::NormalizeRows { input, norms } => {
                let (n, c) = self.value(*input).dims2()?;
                if self.requires_grad(*input) {
                    let gx = acc(grads, *input, n * c);
                    for i in 0..n {
                        if norms[i] == 0.0 {
                            continue;
                        }
                        let y = &val[i * c..(i + 1) * c];
                        let gi = &g[i * c..(i + 1) * c];
                        let proj = kernels::dot(y, gi);
                        for t in 0..c {
                            gx[i * c + t] += (gi[t] - y[t] * proj) / norms[i];
                        }
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.requires_grad(*a) {
                    let ga = acc(grads, *a, m * k);
                    kernels::gemm_nt(m, n, k, g, self.value(*b).data(), ga);
                }
                if self.requires_grad(*b) {
                    let gb = acc(grads, *b, k * n);
                    kernels::gemm_tn(k, m, n, self.value(*a).data(), g, gb);
                }
            }
            Op::Reshape(x) => add_into(grads, *x, g, self),
            Op::Permute { input, perm } => {
                let shape = self.shape(*input).to_vec();
                let back = permute_data(g, &shape, perm, true);
                add_into(grads, *input, &back, self);
            }
        }
        Ok(())
    }
}

#[inline]
fn half_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for q in 0..chunks {
        let i = q * 4;
        let d0 = a[i] - b[i];
        let d1 = a[i + 1] - b[i + 1];
        let d2 = a[i + 2] - b[i + 2];
        let d3 = a[i + 3] - b[i + 3];
        acc[0] += d0 * d0;
        acc[1] += d1 * d1;
        acc[2] += d2 * d2;
        acc[3] += d3 * d3;
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        let d = a[i] - b[i];
        tail += d * d;
    }
    0.5 * ((acc[0] + acc[1]) + (acc[2] + acc[3]) + tail)
}

fn argmin_of(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v < best.1 {
            best = (j, v);
        }
    }
    best
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], tape: &Tape) {
    if !tape.requires_grad(v) {
        return;
    }
    let dst = acc(grads, v, g.len());
    dst.iter_mut().zip(g).for_each(|(o, x)| *o += x);
}

/// Pixel (un)shuffle on raw data. `c` is the *output* channel count of the
/// shuffle direction and `h, w` the low-resolution spatial size.
fn shuffle(src: &[f64], n: usize, c: usize, h: usize, w: usize, r: usize, unshuffle: bool) -> Vec<f64> {
    let (hh, ww) = (h * r, w * r);
    let mut out = vec![0.0; n * c * r * r * h * w];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let lo_c = ch * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            let lo = ((b * c * r * r + lo_c) * h + y) * w + x;
                            let hi = ((b * c + ch) * hh + y * r + i) * ww + x * r + j;
                            if unshuffle {
                                out[lo] = src[hi];
                            } else {
                                out[hi] = src[lo];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Permutes `data` laid out with `shape`. With `inverse`, `data` is laid out
/// in the permuted shape and is mapped back to `shape`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize], inverse: bool) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for (o, _) in data.iter().enumerate() {
        let src_off: usize = (0..rank).map(|a| idx[a] * in_strides[perm[a]]).sum();
        if inverse {
            out[src_off] = data[o];
        } else {
            out[o] = data[src_off];
        }
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}
