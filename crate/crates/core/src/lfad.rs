//! Low-frequency-aware decomposition: per-location 3×3 low-pass kernels
//! predicted from the features they filter, plus the high-pass inversion
//! used by the HFAD ablation.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, neighbour_table, Tensor};

/// Kernel side length.
pub const KERNEL: usize = 3;
/// Taps per location (`KERNEL²`).
pub const TAPS: usize = KERNEL * KERNEL;
/// Index of the centre tap.
pub const CENTRE: usize = TAPS / 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterMode {
    Lowpass,
    Highpass,
}

/// Per-location flattened 3×3 kernels, `9×H×W`. Tap `k` sits at offset
/// `(k / 3 - 1, k % 3 - 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub weights: Tensor,
    pub mode: FilterMode,
}

impl FilterBank {
    pub fn new(weights: Tensor, mode: FilterMode) -> Result<Self> {
        let (k, _, _) = weights.dims3("filter_bank")?;
        if k != TAPS {
            return Err(Error::dim("filter_bank", format!("expected {TAPS} taps, got {k}")));
        }
        Ok(FilterBank { weights, mode })
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.weights.shape()[1], self.weights.shape()[2])
    }

    /// The kernel at `(i, j)`.
    pub fn kernel(&self, i: usize, j: usize) -> [f64; TAPS] {
        std::array::from_fn(|k| self.weights.at3(k, i, j))
    }
}

/// Softmax over the tap axis of `9×H×W` logits.
pub(crate) fn softmax_taps(logits: &Tensor) -> Result<Tensor> {
    let (k, h, w) = logits.dims3("softmax_taps")?;
    let t = logits.reshape(&[k, h * w])?.transpose()?;
    tensor::softmax_rows(&t)?.transpose()?.reshape(&[k, h, w])
}

/// Predict a low-pass bank from `C×H×W` features with a `9×C×3×3` conv.
pub fn predict_lowpass_filters(features: &Tensor, conv_weights: &Tensor) -> Result<FilterBank> {
    if conv_weights.shape().first() != Some(&TAPS) {
        return Err(Error::dim(
            "predict_lowpass_filters",
            format!("predictor must emit {TAPS} logits, got {:?}", conv_weights.shape()),
        ));
    }
    let logits = tensor::conv2d_3x3(features, conv_weights)?;
    FilterBank::new(softmax_taps(&logits)?, FilterMode::Lowpass)
}

/// Channel-wise per-location filtering with symmetric boundary padding.
pub fn apply_filters(x: &Tensor, fb: &FilterBank) -> Result<Tensor> {
    filter_forward(x, &fb.weights)
}

/// `E - W` where `E` is the centre-one identity kernel.
pub fn invert_to_highpass(fb: &FilterBank) -> Result<FilterBank> {
    if fb.mode != FilterMode::Lowpass {
        return Err(Error::contract("invert_to_highpass needs a low-pass bank"));
    }
    let (_, h, w) = fb.weights.dims3("invert_to_highpass")?;
    let weights = Tensor::from_fn(fb.weights.shape(), |idx| {
        let e = if idx / (h * w) == CENTRE { 1.0 } else { 0.0 };
        e - fb.weights.data()[idx]
    });
    FilterBank::new(weights, FilterMode::Highpass)
}

pub(crate) fn filter_forward(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3("apply_filters")?;
    let (k, fh, fw) = weights.dims3("apply_filters")?;
    if k != TAPS || (fh, fw) != (h, w) {
        return Err(Error::shapes("apply_filters", x.shape(), weights.shape()));
    }
    let (rows, cols) = (neighbour_table(h), neighbour_table(w));
    let (xd, wd) = (x.data(), weights.data());
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for cc in 0..c {
        let xin = &xd[cc * hw..(cc + 1) * hw];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for p in 0..3 {
                    for q in 0..3 {
                        acc += wd[(p * 3 + q) * hw + i * w + j] * xin[rows[i][p] * w + cols[j][q]];
                    }
                }
                out[cc * hw + i * w + j] = acc;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

pub(crate) fn filter_backward(x: &Tensor, weights: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = x.dims3("apply_filters").unwrap();
    let (rows, cols) = (neighbour_table(h), neighbour_table(w));
    let (xd, wd, gd) = (x.data(), weights.data(), g.data());
    let hw = h * w;
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; weights.numel()];
    for cc in 0..c {
        for i in 0..h {
            for j in 0..w {
                let gv = gd[cc * hw + i * w + j];
                for p in 0..3 {
                    for q in 0..3 {
                        let k = p * 3 + q;
                        let src = cc * hw + rows[i][p] * w + cols[j][q];
                        dw[k * hw + i * w + j] += gv * xd[src];
                        dx[src] += gv * wd[k * hw + i * w + j];
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape(), dx).unwrap(),
        Tensor::new(weights.shape(), dw).unwrap(),
    )
}

/// Taped prediction of the per-location kernels; returns the `9×H×W`
/// weights, low-pass or inverted to high-pass.
pub fn predict_filters_taped(
    tape: &mut Tape,
    features: Var,
    conv_weights: Var,
    mode: FilterMode,
) -> Result<Var> {
    let logits = tape.conv2d_3x3(features, conv_weights)?;
    let (k, h, w) = tape.value(logits).dims3("predict_filters")?;
    if k != TAPS {
        return Err(Error::dim("predict_filters", format!("expected {TAPS} logits, got {k}")));
    }
    let flat = tape.reshape(logits, &[k, h * w])?;
    let rows = tape.transpose(flat)?;
    let soft = tape.softmax_rows(rows)?;
    let back = tape.transpose(soft)?;
    let low = tape.reshape(back, &[k, h, w])?;
    match mode {
        FilterMode::Lowpass => Ok(low),
        FilterMode::Highpass => {
            let e = Tensor::from_fn(&[k, h, w], |idx| if idx / (h * w) == CENTRE { 1.0 } else { 0.0 });
            let e = tape.constant(e);
            tape.sub(e, low)
        }
    }
}
