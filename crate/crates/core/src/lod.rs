//! Low-rank decomposition fine-tuning: split a trained matrix into a frozen
//! rank-`r` part and a trainable residual.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Residual ranks evaluated for the split; 16 is the default.
pub const RESIDUAL_RANK_CHOICES: [usize; 4] = [1, 4, 16, 64];
pub const DEFAULT_RESIDUAL_RANK: usize = 16;

/// Thin singular value decomposition `W = U·diag(s)·Vᵀ` with `k = min(n, m)`
/// and singular values in non-increasing order.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `n×k`, orthonormal columns.
    pub u: Tensor,
    pub s: Vec<f64>,
    /// `k×m`, orthonormal rows.
    pub vt: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        let k = self.s.len();
        let n = self.u.shape()[0];
        let us = Tensor::from_fn(&[n, k], |i| self.u.data()[i] * self.s[i % k]);
        matmul(&us, &self.vt).unwrap()
    }
}

/// One-sided Jacobi SVD.
pub fn svd(w: &Tensor) -> Result<Svd> {
    let (n, m) = w.dims2("svd")?;
    if n < m {
        let t = jacobi(&w.transpose()?)?;
        return Ok(Svd {
            u: t.vt.transpose()?,
            s: t.s,
            vt: t.u.transpose()?,
        });
    }
    jacobi(w)
}

/// Requires `n ≥ m`.
fn jacobi(w: &Tensor) -> Result<Svd> {
    let (n, m) = w.dims2("svd")?;
    // Column-major working copies.
    let mut a: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| w.at2(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..m).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..m {
            for q in p + 1..m {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols in [&mut a, &mut v] {
                    let (lo, hi) = cols.split_at_mut(q);
                    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (xp, yq) = (*x, *y);
                        *x = c * xp - s * yq;
                        *y = s * xp + c * yq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sig: Vec<(f64, usize)> = a.iter().enumerate().map(|(j, col)| (dot(col, col).sqrt(), j)).collect();
    sig.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let smax = sig.first().map_or(0.0, |s| s.0);

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut s = Vec::with_capacity(m);
    let mut vcols = Vec::with_capacity(m);
    for &(sv, j) in &sig {
        s.push(sv);
        vcols.push(v[j].clone());
        if sv > 1e-300 && sv > smax * 1e-15 {
            ucols.push(a[j].iter().map(|x| x / sv).collect());
        } else {
            ucols.push(Vec::new());
        }
    }
    // Complete left vectors belonging to (numerically) zero singular values.
    for j in 0..m {
        if !ucols[j].is_empty() {
            continue;
        }
        let mut basis = 0;
        loop {
            let mut cand: Vec<f64> = (0..n).map(|i| if i == basis { 1.0 } else { 0.0 }).collect();
            for other in ucols.iter().filter(|c| !c.is_empty()) {
                let d = dot(&cand, other);
                cand.iter_mut().zip(other).for_each(|(x, o)| *x -= d * o);
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-8 {
                ucols[j] = cand.iter().map(|x| x / norm).collect();
                break;
            }
            basis += 1;
            if basis >= n {
                return Err(Error::contract("svd: failed to complete orthonormal basis"));
            }
        }
    }
    let u = Tensor::from_fn(&[n, m], |k| ucols[k % m][k / m]);
    let vt = Tensor::from_fn(&[m, m], |k| vcols[k / m][k % m]);
    Ok(Svd { u, s, vt })
}

/// A weight split into a frozen rank-`rank` part and a trainable residual.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitWeight {
    pub frozen: Tensor,
    pub delta: Tensor,
    pub rank: usize,
    pub residual_rank: usize,
}

impl SplitWeight {
    /// Rebuild from stored parts; the rank is recovered numerically.
    pub fn from_parts(frozen: Tensor, delta: Tensor) -> Result<Self> {
        if frozen.shape() != delta.shape() {
            return Err(Error::shapes("split_weight", frozen.shape(), delta.shape()));
        }
        let d = svd(&frozen)?;
        let tol = d.s.first().copied().unwrap_or(0.0) * 1e-8;
        let rank = d.s.iter().filter(|&&s| s > tol).count();
        Ok(SplitWeight {
            rank,
            residual_rank: d.s.len() - rank,
            frozen,
            delta,
        })
    }
}

/// Residual rank used for an `n×m` matrix when `requested` is configured:
/// `min(requested, ⌊min(n,m)/2⌋)`, or `None` when the matrix is too thin to
/// split.
pub fn residual_rank_for(shape: &[usize], requested: usize) -> Option<usize> {
    let k = *shape.iter().min()?;
    let r = requested.min(k / 2);
    (shape.len() == 2 && r >= 1).then_some(r)
}

pub fn decompose(w: &Tensor, residual_rank: usize) -> Result<SplitWeight> {
    let (n, m) = w.dims2("decompose")?;
    let k = n.min(m);
    if residual_rank < 1 || residual_rank >= k {
        return Err(Error::contract(format!(
            "residual rank {residual_rank} outside 1..{k} for a {n}×{m} matrix"
        )));
    }
    let r = k - residual_rank;
    let d = svd(w)?;
    let us = Tensor::from_fn(&[n, r], |i| d.u.at2(i / r, i % r) * d.s[i % r]);
    let vt_r = d.vt.rows(0, r)?;
    let frozen = matmul(&us, &vt_r)?;
    let delta = w.sub(&frozen)?;
    Ok(SplitWeight {
        frozen,
        delta,
        rank: r,
        residual_rank,
    })
}

pub fn recompose(s: &SplitWeight) -> Tensor {
    s.frozen.add(&s.delta).expect("split parts share a shape")
}
