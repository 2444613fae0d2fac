//! Image similarity and binary classification metrics.

use crate::error::{Error, Result};
use crate::hider::ImageBatch;
use crate::tensor::Tensor;

/// Value written to logs in place of an infinite PSNR.
pub const PSNR_LOG_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Thresholds in the equal-error-rate sweep, spanning `[min, max]`.
pub const EER_GRID: usize = 1001;

fn same_shape(a: &ImageBatch, b: &ImageBatch, op: &'static str) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shapes(op, a.tensor().shape(), b.tensor().shape()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio of one pair with peak value 1.
pub fn psnr_item(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.sub(b)?;
    let mse = d.sq_norm() / d.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Per-item PSNR in dB; identical items give `+∞`.
pub fn psnr(a: &ImageBatch, b: &ImageBatch) -> Result<Vec<f64>> {
    same_shape(a, b, "psnr")?;
    (0..a.len()).map(|i| psnr_item(&a.item(i), &b.item(i))).collect()
}

/// PSNR as written to logs.
pub fn psnr_for_log(v: f64) -> f64 {
    v.min(PSNR_LOG_CAP)
}

fn grey(x: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = x.dims3("ssim")?;
    let mut g = vec![0.0; h * w];
    for plane in x.data().chunks(h * w) {
        g.iter_mut().zip(plane).for_each(|(o, v)| *o += v);
    }
    g.iter_mut().for_each(|v| *v /= c as f64);
    Ok((h, w, g))
}

/// Mean SSIM over all 8×8 windows at stride 1 of the channel-mean images.
pub fn ssim_item(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shapes("ssim", a.shape(), b.shape()));
    }
    let (h, w, ga) = grey(a)?;
    let (_, _, gb) = grey(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "image {h}×{w} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for p in i..i + SSIM_WINDOW {
                for q in j..j + SSIM_WINDOW {
                    let (x, y) = (ga[p * w + q], gb[p * w + q]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn ssim(a: &ImageBatch, b: &ImageBatch) -> Result<Vec<f64>> {
    same_shape(a, b, "ssim")?;
    (0..a.len()).map(|i| ssim_item(&a.item(i), &b.item(i))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryMetrics {
    pub auc: f64,
    pub acc: f64,
    pub ap: f64,
    pub eer: f64,
}

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim(
            "binary_metrics",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::contract("labels must be 0 or 1"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::contract("scores must be finite"));
    }
    Ok(())
}

fn both_classes(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::contract("metric needs both positive and negative labels"));
    }
    Ok((pos, neg))
}

/// Fraction of items with `(score ≥ 0.5) == label`.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::contract("accuracy of an empty set"));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= 0.5) == (l == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Mann–Whitney statistic from average ranks; ties count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let (pos, neg) = both_classes(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Step-wise area under the precision–recall curve; tied scores enter
/// together.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let (pos, _) = both_classes(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Equal error rate from a sweep of [`EER_GRID`] thresholds over
/// `[min, max]` plus one above the maximum; at the threshold minimising
/// `|FPR − FNR|` (first one on ties) reports `(FPR + FNR) / 2`.
pub fn eer(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let (pos, neg) = both_classes(labels)?;
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut thresholds: Vec<f64> = (0..EER_GRID)
        .map(|k| lo + (hi - lo) * k as f64 / (EER_GRID - 1) as f64)
        .collect();
    thresholds.push(f64::INFINITY);
    let mut best = (f64::INFINITY, 0.0);
    for t in thresholds {
        let (mut fp, mut fneg) = (0usize, 0usize);
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= t, l == 1) {
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let (fpr, fnr) = (fp as f64 / neg as f64, fneg as f64 / pos as f64);
        let gap = (fpr - fnr).abs();
        if gap < best.0 {
            best = (gap, (fpr + fnr) / 2.0);
        }
    }
    Ok(best.1)
}

pub fn binary_metrics(scores: &[f64], labels: &[u8]) -> Result<BinaryMetrics> {
    Ok(BinaryMetrics {
        auc: auc(scores, labels)?,
        acc: accuracy(scores, labels)?,
        ap: average_precision(scores, labels)?,
        eer: eer(scores, labels)?,
    })
}
