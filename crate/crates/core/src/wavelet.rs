//! Single-level orthonormal 2-D Haar transform.
//!
//! For each 2×2 block `(a b; c d)`:
//!
//! ```text
//! ll = (a+b+c+d)/2   lh = (a+b-c-d)/2
//! hl = (a-b+c-d)/2   hh = (a-b-c+d)/2
//! ```
//!
//! The 4×4 block matrix is symmetric and orthogonal, so synthesis uses the
//! same signs and the transform conserves energy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Band {
    LL,
    LH,
    HL,
    HH,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::LH, Band::HL, Band::HH];

    /// Signs applied to `(a, b, c, d)`.
    fn signs(self) -> [f64; 4] {
        match self {
            Band::LL => [1.0, 1.0, 1.0, 1.0],
            Band::LH => [1.0, 1.0, -1.0, -1.0],
            Band::HL => [1.0, -1.0, 1.0, -1.0],
            Band::HH => [1.0, -1.0, -1.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::LL => "ll",
            Band::LH => "lh",
            Band::HL => "hl",
            Band::HH => "hh",
        }
    }
}

impl std::str::FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ll" => Ok(Band::LL),
            "lh" => Ok(Band::LH),
            "hl" => Ok(Band::HL),
            "hh" => Ok(Band::HH),
            other => Err(Error::contract(format!("unknown sub-band `{other}`"))),
        }
    }
}

/// The four sub-bands of a `C×H×W` map, each `C×(H/2)×(W/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
    pub source_shape: (usize, usize, usize),
}

impl SubBands {
    pub fn band(&self, b: Band) -> &Tensor {
        match b {
            Band::LL => &self.ll,
            Band::LH => &self.lh,
            Band::HL => &self.hl,
            Band::HH => &self.hh,
        }
    }

    pub fn band_mut(&mut self, b: Band) -> &mut Tensor {
        match b {
            Band::LL => &mut self.ll,
            Band::LH => &mut self.lh,
            Band::HL => &mut self.hl,
            Band::HH => &mut self.hh,
        }
    }

    pub fn energy(&self) -> f64 {
        Band::ALL.iter().map(|&b| self.band(b).sq_norm()).sum()
    }
}

fn even_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.dims3(op)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(
            op,
            format!("spatial size {h}×{w} is odd; pad to even with edge replication first"),
        ));
    }
    Ok((c, h, w))
}

pub(crate) fn analysis_band(x: &Tensor, band: Band) -> Result<Tensor> {
    let (c, h, w) = even_dims("dwt_haar", x)?;
    let (h2, w2) = (h / 2, w / 2);
    let s = band.signs();
    Ok(Tensor::from_fn(&[c, h2, w2], |k| {
        let (cc, rem) = (k / (h2 * w2), k % (h2 * w2));
        let (i, j) = (2 * (rem / w2), 2 * (rem % w2));
        0.5 * (s[0] * x.at3(cc, i, j)
            + s[1] * x.at3(cc, i, j + 1)
            + s[2] * x.at3(cc, i + 1, j)
            + s[3] * x.at3(cc, i + 1, j + 1))
    }))
}

/// Transpose of [`analysis_band`]: scatter one band back onto the full grid.
pub(crate) fn analysis_band_adjoint(g: &Tensor, band: Band) -> Tensor {
    let (c, h2, w2) = g.dims3("haar").unwrap();
    let (h, w) = (2 * h2, 2 * w2);
    let s = band.signs();
    Tensor::from_fn(&[c, h, w], |k| {
        let (cc, rem) = (k / (h * w), k % (h * w));
        let (i, j) = (rem / w, rem % w);
        0.5 * s[(i % 2) * 2 + j % 2] * g.at3(cc, i / 2, j / 2)
    })
}

pub(crate) fn analysis(x: &Tensor) -> Result<SubBands> {
    let (c, h, w) = even_dims("dwt_haar", x)?;
    Ok(SubBands {
        ll: analysis_band(x, Band::LL)?,
        lh: analysis_band(x, Band::LH)?,
        hl: analysis_band(x, Band::HL)?,
        hh: analysis_band(x, Band::HH)?,
        source_shape: (c, h, w),
    })
}

pub(crate) fn synthesis(ll: &Tensor, lh: &Tensor, hl: &Tensor, hh: &Tensor) -> Result<Tensor> {
    let shape = ll.shape();
    for b in [lh, hl, hh] {
        if b.shape() != shape {
            return Err(Error::shapes("idwt_haar", shape, b.shape()));
        }
    }
    let (c, h2, w2) = ll.dims3("idwt_haar")?;
    let (h, w) = (2 * h2, 2 * w2);
    let bands = [(ll, Band::LL), (lh, Band::LH), (hl, Band::HL), (hh, Band::HH)];
    Ok(Tensor::from_fn(&[c, h, w], |k| {
        let (cc, rem) = (k / (h * w), k % (h * w));
        let (i, j) = (rem / w, rem % w);
        let pos = (i % 2) * 2 + j % 2;
        bands
            .iter()
            .map(|(t, b)| b.signs()[pos] * t.at3(cc, i / 2, j / 2))
            .sum::<f64>()
            * 0.5
    }))
}

/// Forward transform of a `C×H×W` map with even `H` and `W`.
pub fn dwt_haar(x: &Tensor) -> Result<SubBands> {
    analysis(x)
}

/// Exact inverse of [`dwt_haar`].
pub fn idwt_haar(b: &SubBands) -> Result<Tensor> {
    let out = synthesis(&b.ll, &b.lh, &b.hl, &b.hh)?;
    let (c, h, w) = b.source_shape;
    if out.shape() != [c, h, w] {
        return Err(Error::dim(
            "idwt_haar",
            format!("bands {:?} inconsistent with source {:?}", b.ll.shape(), b.source_shape),
        ));
    }
    Ok(out)
}

/// Replicate the last row/column so both spatial sizes are even.
pub fn pad_to_even(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3("pad_to_even")?;
    let (h2, w2) = (h + h % 2, w + w % 2);
    Ok(Tensor::from_fn(&[c, h2, w2], |k| {
        let (cc, rem) = (k / (h2 * w2), k % (h2 * w2));
        x.at3(cc, (rem / w2).min(h - 1), (rem % w2).min(w - 1))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_bands() {
        let v = 0.37;
        let b = dwt_haar(&Tensor::full(&[2, 4, 6], v)).unwrap();
        for t in [&b.lh, &b.hl, &b.hh] {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
        assert!(b.ll.data().iter().all(|&x| (x - 2.0 * v).abs() < 1e-15));
    }

    #[test]
    fn ll_only_reconstructs_constant() {
        let v = 0.8;
        let z = Tensor::zeros(&[1, 2, 3]);
        let b = SubBands {
            ll: Tensor::full(&[1, 2, 3], 2.0 * v),
            lh: z.clone(),
            hl: z.clone(),
            hh: z.clone(),
            source_shape: (1, 4, 6),
        };
        let x = idwt_haar(&b).unwrap();
        assert!(x.data().iter().all(|&p| (p - v).abs() < 1e-15));

        let zb = SubBands {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
            source_shape: (1, 4, 6),
        };
        assert!(idwt_haar(&zb).unwrap().data().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn block_formulas() {
        // (a b; c d) = (1 2; 3 4)
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = dwt_haar(&x).unwrap();
        assert_eq!(b.ll.data(), &[5.0]);
        assert_eq!(b.lh.data(), &[-2.0]);
        assert_eq!(b.hl.data(), &[-1.0]);
        assert_eq!(b.hh.data(), &[0.0]);
    }

    #[test]
    fn odd_size_is_rejected_with_padding_hint() {
        let err = dwt_haar(&Tensor::zeros(&[1, 3, 4])).unwrap_err();
        assert!(err.to_string().contains("pad"));
        let padded = pad_to_even(&Tensor::from_fn(&[1, 3, 3], |i| i as f64)).unwrap();
        assert_eq!(padded.shape(), &[1, 4, 4]);
        assert_eq!(padded.at3(0, 3, 3), 8.0);
        assert!(dwt_haar(&padded).is_ok());
    }

    #[test]
    fn inconsistent_bands_rejected() {
        let b = SubBands {
            ll: Tensor::zeros(&[1, 2, 2]),
            lh: Tensor::zeros(&[1, 2, 3]),
            hl: Tensor::zeros(&[1, 2, 2]),
            hh: Tensor::zeros(&[1, 2, 2]),
            source_shape: (1, 4, 4),
        };
        assert!(idwt_haar(&b).is_err());
    }
}
