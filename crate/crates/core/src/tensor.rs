//! Dense row-major `f64` tensors and the forward/backward kernels shared by
//! the tape and by plain (untaped) callers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Epsilon used by [`rms_normalize`].
pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        Self::new(&[m, n], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Entries drawn from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::dim(op, format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim(op, format!("expected C×H×W, got {:?}", self.shape))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.shape[1] + i) * self.shape[2] + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shapes("elementwise", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    /// Rows `start..end` of a matrix.
    pub fn rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("rows")?;
        if start >= end || end > m {
            return Err(Error::dim("rows", format!("range {start}..{end} of {m} rows")));
        }
        Tensor::new(&[end - start, n], self.data[start * n..end * n].to_vec())
    }

    /// `C×H×W` feature map to `(H·W)×C` token matrix, token `t = i·W + j`.
    pub fn to_tokens(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3("to_tokens")?;
        self.reshape(&[c, h * w])?.transpose()
    }

    /// Inverse of [`Tensor::to_tokens`].
    pub fn from_tokens(&self, h: usize, w: usize) -> Result<Tensor> {
        let (t, c) = self.dims2("from_tokens")?;
        if t != h * w {
            return Err(Error::dim("from_tokens", format!("{t} tokens for {h}×{w} map")));
        }
        self.transpose()?.reshape(&[c, h, w])
    }
}

/// Half-sample symmetric boundary index: `-1 → 0`, `n → n-1`.
#[inline]
pub(crate) fn sym(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - i - 1
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shapes("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("softmax_rows")?;
    let mut out = a.data().to_vec();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    Tensor::new(&[m, n], out)
}

pub(crate) fn softmax_rows_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap();
    let mut out = vec![0.0; y.numel()];
    for ((yr, gr), orow) in y
        .data()
        .chunks(n)
        .zip(g.data().chunks(n))
        .zip(out.chunks_mut(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in orow.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape(), out).unwrap()
}

/// Same-size 3×3 cross-correlation with symmetric boundary padding.
///
/// `x` is `C×H×W`, `w` is `Cout×C×3×3`.
pub fn conv2d_3x3(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (c, h, wd) = x.dims3("conv2d_3x3")?;
    let [co, ci, 3, 3] = w.shape()[..] else {
        return Err(Error::dim(
            "conv2d_3x3",
            format!("kernel must be Cout×C×3×3, got {:?}", w.shape()),
        ));
    };
    if ci != c {
        return Err(Error::shapes("conv2d_3x3", x.shape(), w.shape()));
    }
    let (rows, cols) = (neighbour_table(h), neighbour_table(wd));
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; co * h * wd];
    for o in 0..co {
        let plane = &mut out[o * h * wd..(o + 1) * h * wd];
        for cc in 0..c {
            let xin = &xd[cc * h * wd..(cc + 1) * h * wd];
            let k = &wdat[(o * c + cc) * 9..(o * c + cc) * 9 + 9];
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for p in 0..3 {
                        let r = rows[i][p] * wd;
                        for q in 0..3 {
                            acc += k[p * 3 + q] * xin[r + cols[j][q]];
                        }
                    }
                    plane[i * wd + j] += acc;
                }
            }
        }
    }
    Tensor::new(&[co, h, wd], out)
}

pub(crate) fn conv2d_3x3_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (c, h, wd) = x.dims3("conv2d_3x3").unwrap();
    let co = w.shape()[0];
    let (rows, cols) = (neighbour_table(h), neighbour_table(wd));
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    for o in 0..co {
        let gp = &gd[o * h * wd..(o + 1) * h * wd];
        for cc in 0..c {
            let xin = &xd[cc * h * wd..(cc + 1) * h * wd];
            let dxin = &mut dx[cc * h * wd..(cc + 1) * h * wd];
            let base = (o * c + cc) * 9;
            let k = &wdat[base..base + 9];
            let mut dk = [0.0; 9];
            for i in 0..h {
                for j in 0..wd {
                    let gv = gp[i * wd + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for p in 0..3 {
                        let r = rows[i][p] * wd;
                        for q in 0..3 {
                            let idx = r + cols[j][q];
                            dk[p * 3 + q] += gv * xin[idx];
                            dxin[idx] += gv * k[p * 3 + q];
                        }
                    }
                }
            }
            for (d, v) in dw[base..base + 9].iter_mut().zip(dk) {
                *d += v;
            }
        }
    }
    (
        Tensor::new(x.shape(), dx).unwrap(),
        Tensor::new(w.shape(), dw).unwrap(),
    )
}

/// For each position, the symmetric-padded indices at offsets -1, 0, +1.
pub(crate) fn neighbour_table(n: usize) -> Vec<[usize; 3]> {
    (0..n as isize)
        .map(|i| [sym(i - 1, n), i as usize, sym(i + 1, n)])
        .collect()
}

/// Divide each length-`d` slice along the last axis by its RMS, then apply
/// an optional per-dimension gain.
pub fn rms_normalize(x: &Tensor, gain: Option<&Tensor>) -> Result<Tensor> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("rms_normalize", "scalar input"))?;
    if let Some(g) = gain {
        if g.numel() != d {
            return Err(Error::shapes("rms_normalize", x.shape(), g.shape()));
        }
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for (k, v) in row.iter_mut().enumerate() {
            *v *= inv * gain.map_or(1.0, |g| g.data()[k]);
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn rms_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap();
    let mut out = vec![0.0; x.numel()];
    for ((xr, gr), orow) in x
        .data()
        .chunks(d)
        .zip(g.data().chunks(d))
        .zip(out.chunks_mut(d))
    {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = (ms + RMS_EPS).sqrt();
        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
        let c = dot / (d as f64 * r * r * r);
        for ((o, &xv), &gv) in orow.iter_mut().zip(xr).zip(gr) {
            *o = gv / r - xv * c;
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

/// 2×2 mean pooling of a `C×H×W` map with even `H`, `W`.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3("avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("avg_pool2", format!("odd spatial size {h}×{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    Ok(Tensor::from_fn(&[c, h2, w2], |idx| {
        let (cc, rem) = (idx / (h2 * w2), idx % (h2 * w2));
        let (i, j) = (2 * (rem / w2), 2 * (rem % w2));
        0.25 * (x.at3(cc, i, j) + x.at3(cc, i, j + 1) + x.at3(cc, i + 1, j) + x.at3(cc, i + 1, j + 1))
    }))
}

/// 2× bilinear upsampling (half-pixel centres, edge clamped).
pub fn upsample_bilinear2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3("upsample_bilinear2")?;
    let coord = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let (h2, w2) = (2 * h, 2 * w);
    Ok(Tensor::from_fn(&[c, h2, w2], |idx| {
        let (cc, rem) = (idx / (h2 * w2), idx % (h2 * w2));
        let (i0, i1, fy) = coord(rem / w2, h);
        let (j0, j1, fx) = coord(rem % w2, w);
        let top = x.at3(cc, i0, j0) * (1.0 - fx) + x.at3(cc, i0, j1) * fx;
        let bot = x.at3(cc, i1, j0) * (1.0 - fx) + x.at3(cc, i1, j1) * fx;
        top * (1.0 - fy) + bot * fy
    }))
}

pub(crate) fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let u = K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
