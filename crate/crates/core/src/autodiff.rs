//! Arena-backed reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; nodes only reference
//! earlier nodes, so the arena order is a topological order and the
//! backward sweep simply walks it in reverse.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use crate::wavelet::{self, Band};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    RmsRows(Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    MeanRows(Var),
    AddChannel(Var, Var),
    Conv3x3(Var, Var),
    ApplyFilters(Var, Var),
    AvgPool2(Var),
    HaarBand(Var, Band),
    HaarSynth([Var; 4]),
    ExpandParent(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumSq(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; exactly zero when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.unary(a, v, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.unary(a, v, Op::AddConst(a))
    }

    /// Tensor times a single-element variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale_by", format!("scalar expected, got {:?}", self.shape(s))));
        }
        let sv = self.item(s);
        let v = self.value(a).scale(sv);
        Ok(self.binary(a, s, v, Op::ScaleBy(a, s)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.unary(a, v, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.unary(a, v, Op::Reshape(a)))
    }

    /// `C×H×W` map to `(H·W)×C` tokens.
    pub fn to_tokens(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3("to_tokens")?;
        let r = self.reshape(a, &[c, h * w])?;
        self.transpose(r)
    }

    /// `(H·W)×C` tokens back to a `C×H×W` map.
    pub fn from_tokens(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (t, c) = self.value(a).dims2("from_tokens")?;
        if t != h * w {
            return Err(Error::dim("from_tokens", format!("{t} tokens for {h}×{w} map")));
        }
        let tr = self.transpose(a)?;
        self.reshape(tr, &[c, h, w])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = tensor::softmax_rows(self.value(a))?;
        Ok(self.unary(a, v, Op::SoftmaxRows(a)))
    }

    /// RMS normalisation along the last axis (no gain).
    pub fn rms_rows(&mut self, a: Var) -> Result<Var> {
        let v = tensor::rms_normalize(self.value(a), None)?;
        Ok(self.unary(a, v, Op::RmsRows(a)))
    }

    /// RMS normalisation followed by a per-dimension gain.
    pub fn rms_normalize(&mut self, a: Var, gain: Option<Var>) -> Result<Var> {
        let n = self.rms_rows(a)?;
        match gain {
            Some(g) => self.mul_row(n, g),
            None => Ok(n),
        }
    }

    fn row_operand(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (m, n) = self.value(a).dims2(op)?;
        if self.value(b).numel() != n {
            return Err(Error::shapes(op, self.shape(a), self.shape(b)));
        }
        Ok((m, n))
    }

    fn rowwise(&mut self, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let (_, n) = self.row_operand(name, a, b)?;
        let bd = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(&bd) {
                *x = f(*x, y);
            }
        }
        Ok(self.binary(a, b, v, op))
    }

    /// Matrix plus a row vector broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rowwise(a, b, |x, y| x + y, Op::AddRow(a, b), "add_row")
    }

    pub fn sub_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rowwise(a, b, |x, y| x - y, Op::SubRow(a, b), "sub_row")
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = *self
            .shape(a)
            .last()
            .ok_or_else(|| Error::dim("mul_row", "scalar input"))?;
        if self.value(b).numel() != d {
            return Err(Error::shapes("mul_row", self.shape(a), self.shape(b)));
        }
        let bd = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(d) {
            for (x, &y) in row.iter_mut().zip(&bd) {
                *x *= y;
            }
        }
        Ok(self.binary(a, b, v, Op::MulRow(a, b)))
    }

    /// Column means of an `m×n` matrix as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("mean_rows")?;
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let v = Tensor::new(&[1, n], out)?;
        Ok(self.unary(a, v, Op::MeanRows(a)))
    }

    /// `C×H×W` map plus a per-channel bias of length `C`.
    pub fn add_channel(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3("add_channel")?;
        if self.value(bias).numel() != c {
            return Err(Error::shapes("add_channel", self.shape(a), self.shape(bias)));
        }
        let bd = self.value(bias).data().to_vec();
        let mut v = self.value(a).clone();
        for (plane, &b) in v.data_mut().chunks_mut(h * w).zip(&bd) {
            plane.iter_mut().for_each(|x| *x += b);
        }
        Ok(self.binary(a, bias, v, Op::AddChannel(a, bias)))
    }

    pub fn conv2d_3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let v = tensor::conv2d_3x3(self.value(x), self.value(w))?;
        Ok(self.binary(x, w, v, Op::Conv3x3(x, w)))
    }

    /// Per-location 3×3 filtering; see [`crate::lfad::apply_filters`].
    pub fn apply_filters(&mut self, x: Var, weights: Var) -> Result<Var> {
        let v = crate::lfad::filter_forward(self.value(x), self.value(weights))?;
        Ok(self.binary(x, weights, v, Op::ApplyFilters(x, weights)))
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let v = tensor::avg_pool2(self.value(a))?;
        Ok(self.unary(a, v, Op::AvgPool2(a)))
    }

    pub fn haar_band(&mut self, a: Var, band: Band) -> Result<Var> {
        let v = wavelet::analysis_band(self.value(a), band)?;
        Ok(self.unary(a, v, Op::HaarBand(a, band)))
    }

    /// Inverse Haar transform from `[ll, lh, hl, hh]`.
    pub fn haar_synth(&mut self, bands: [Var; 4]) -> Result<Var> {
        let v = wavelet::synthesis(
            self.value(bands[0]),
            self.value(bands[1]),
            self.value(bands[2]),
            self.value(bands[3]),
        )?;
        let rg = self.rg(&bands);
        Ok(self.push(v, Op::HaarSynth(bands), rg))
    }

    /// Lift a `(T/4)×(T/4)` map over an `(H/2)×(W/2)` grid to `T×T` on the
    /// `H×W` grid: every fine token inherits its 2×2 parent's row and column.
    pub fn expand_parent(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let v = expand_parent_forward(self.value(a), h, w)?;
        Ok(self.unary(a, v, Op::ExpandParent(a, h, w)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_cols", "no operands"))?;
        let (m, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2("concat_cols")?;
            if pm != m {
                return Err(Error::shapes("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &pw) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * n + off..i * n + off + pw].copy_from_slice(&src[i * pw..(i + 1) * pw]);
            }
            off += pw;
        }
        let v = Tensor::new(&[m, n], out)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_rows", "no operands"))?;
        let (_, n) = self.value(first).dims2("concat_rows")?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2("concat_rows")?;
            if pn != n {
                return Err(Error::shapes("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let v = Tensor::new(&[m, n], out)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::gelu);
        self.unary(a, v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::sigmoid);
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::contract("ln of a non-positive value"));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.unary(a, v, Op::Ln(a)))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.unary(a, v, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.unary(a, v, Op::Mean(a))
    }

    /// Sum of squared entries.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sq_norm());
        self.unary(a, v, Op::SumSq(a))
    }

    /// Sum of a list of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::dim("add_all", "no operands"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(self.value(loss).map(|_| 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.propagate(i, &g, &mut grads);
            }
        }
        // Only differentiable leaves keep their gradients.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                *slot = None;
            }
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Gradients of `loss` with respect to each of `params`.
    pub fn gradient_of(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.backward(loss)?;
        Ok(params.iter().map(|&p| g.get(p)).collect())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y).unwrap());
                acc(*b, g.zip_map(val(*a), |x, y| x * y).unwrap());
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::ScaleBy(a, s) => {
                acc(*a, g.scale(val(*s).item()));
                let d: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                acc(*s, val(*s).map(|_| d));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.nodes[a.0].requires_grad {
                    acc(*a, tensor::matmul(g, &bv.transpose().unwrap()).unwrap());
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, tensor::matmul(&av.transpose().unwrap(), g).unwrap());
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose().unwrap()),
            Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape()).unwrap()),
            Op::SoftmaxRows(a) => acc(*a, tensor::softmax_rows_backward(out, g)),
            Op::RmsRows(a) => acc(*a, tensor::rms_backward(val(*a), g)),
            Op::AddRow(a, b) | Op::SubRow(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::AddRow(..)) { 1.0 } else { -1.0 };
                acc(*a, g.clone());
                let n = val(*b).numel();
                let mut col = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (c, &x) in col.iter_mut().zip(row) {
                        *c += sign * x;
                    }
                }
                acc(*b, Tensor::new(val(*b).shape(), col).unwrap());
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = bv.numel();
                let mut da = g.clone();
                let mut db = vec![0.0; n];
                for (grow, arow) in da.data_mut().chunks_mut(n).zip(av.data().chunks(n)) {
                    for k in 0..n {
                        db[k] += grow[k] * arow[k];
                        grow[k] *= bv.data()[k];
                    }
                }
                acc(*a, da);
                acc(*b, Tensor::new(bv.shape(), db).unwrap());
            }
            Op::MeanRows(a) => {
                let (m, n) = val(*a).dims2("mean_rows").unwrap();
                let gd = g.data();
                acc(*a, Tensor::from_fn(&[m, n], |k| gd[k % n] / m as f64));
            }
            Op::AddChannel(a, b) => {
                acc(*a, g.clone());
                let c = val(*b).numel();
                let hw = g.numel() / c;
                let d: Vec<f64> = g.data().chunks(hw).map(|p| p.iter().sum()).collect();
                acc(*b, Tensor::new(val(*b).shape(), d).unwrap());
            }
            Op::Conv3x3(x, w) => {
                let (dx, dw) = tensor::conv2d_3x3_backward(val(*x), val(*w), g);
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::ApplyFilters(x, w) => {
                let (dx, dw) = crate::lfad::filter_backward(val(*x), val(*w), g);
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::AvgPool2(a) => {
                let (c, h, w) = val(*a).dims3("avg_pool2").unwrap();
                let (h2, w2) = (h / 2, w / 2);
                let gd = g.data();
                acc(
                    *a,
                    Tensor::from_fn(&[c, h, w], |k| {
                        let (cc, rem) = (k / (h * w), k % (h * w));
                        let (i, j) = (rem / w, rem % w);
                        0.25 * gd[(cc * h2 + i / 2) * w2 + j / 2]
                    }),
                );
            }
            Op::HaarBand(a, band) => acc(*a, wavelet::analysis_band_adjoint(g, *band)),
            Op::HaarSynth(bands) => {
                let sb = wavelet::analysis(g).unwrap();
                for (v, t) in bands.iter().zip([sb.ll, sb.lh, sb.hl, sb.hh]) {
                    acc(*v, t);
                }
            }
            Op::ExpandParent(a, h, w) => acc(*a, expand_parent_adjoint(g, val(*a), *h, *w)),
            Op::ConcatCols(parts) => {
                let (m, n) = g.dims2("concat_cols").unwrap();
                let mut off = 0;
                for &p in parts {
                    let pw = val(p).shape()[1];
                    let gd = g.data();
                    acc(p, Tensor::from_fn(&[m, pw], |k| gd[(k / pw) * n + off + k % pw]));
                    off += pw;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, Tensor::new(val(p).shape(), g.data()[off..off + len].to_vec()).unwrap());
                    off += len;
                }
            }
            Op::Gelu(a) => acc(*a, g.zip_map(val(*a), |gv, x| gv * tensor::gelu_grad(x)).unwrap()),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |gv, y| gv * y * (1.0 - y)).unwrap()),
            Op::Exp(a) => acc(*a, g.zip_map(out, |gv, y| gv * y).unwrap()),
            Op::Ln(a) => acc(*a, g.zip_map(val(*a), |gv, x| gv / x).unwrap()),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.zip_map(val(*a), |gv, x| if x > *lo && x < *hi { gv } else { 0.0 })
                    .unwrap(),
            ),
            Op::Sum(a) => acc(*a, val(*a).map(|_| g.item())),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, val(*a).map(|_| g.item() / n));
            }
            Op::SumSq(a) => acc(*a, val(*a).map(|x| 2.0 * x * g.item())),
        }
    }
}

pub(crate) fn expand_parent_forward(coarse: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (m, n) = coarse.dims2("expand_parent")?;
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || m != (h / 2) * (w / 2) || n != m {
        return Err(Error::dim(
            "expand_parent",
            format!("coarse map {:?} does not match a {h}×{w} grid", coarse.shape()),
        ));
    }
    let t = h * w;
    let parent: Vec<usize> = (0..t).map(|k| (k / w / 2) * (w / 2) + (k % w) / 2).collect();
    Ok(Tensor::from_fn(&[t, t], |k| coarse.at2(parent[k / t], parent[k % t])))
}

fn expand_parent_adjoint(g: &Tensor, coarse: &Tensor, h: usize, w: usize) -> Tensor {
    let t = h * w;
    let m = coarse.shape()[0];
    let parent: Vec<usize> = (0..t).map(|k| (k / w / 2) * (w / 2) + (k % w) / 2).collect();
    let mut out = vec![0.0; m * m];
    for a in 0..t {
        for b in 0..t {
            out[parent[a] * m + parent[b]] += g.data()[a * t + b];
        }
    }
    Tensor::new(coarse.shape(), out).unwrap()
}
