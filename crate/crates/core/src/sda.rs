//! Steganographic domain alignment: CORAL/MMD composite distance and the
//! feature- and attention-alignment losses.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sfda::AttentionMap;
use crate::tensor::Tensor;

pub use crate::detector::secret_branch_features;

pub const DEFAULT_GAMMA: f64 = 10.0;
/// Largest exponent passed to `exp` in the composite distance.
pub const EXP_CLAMP: f64 = 80.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMetric {
    /// Mean squared error.
    L2,
    /// Composite CORAL/MMD distance.
    Sda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMetric {
    /// Squared Frobenius norm summed over heads, averaged over the batch.
    Frobenius,
    /// Mean squared error over all map entries.
    L2,
    /// Composite distance over stacked map rows.
    Sda,
}

/// Named loss configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[derive(Default)]
pub enum SdaPreset {
    /// No alignment; the alignment stage is skipped.
    None,
    FaL2,
    AaSda,
    FaL2AaL2,
    FaSdaAaSda,
    FaL2AaSda,
    /// Composite feature distance plus Frobenius attention alignment.
    #[default]
    FaSdaAaFrobenius,
}

impl SdaPreset {
    pub const TABLE: [SdaPreset; 6] = [
        SdaPreset::None,
        SdaPreset::FaL2,
        SdaPreset::AaSda,
        SdaPreset::FaL2AaL2,
        SdaPreset::FaSdaAaSda,
        SdaPreset::FaL2AaSda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SdaPreset::None => "none",
            SdaPreset::FaL2 => "fa-l2",
            SdaPreset::AaSda => "aa-sda",
            SdaPreset::FaL2AaL2 => "fa-l2+aa-l2",
            SdaPreset::FaSdaAaSda => "fa-sda+aa-sda",
            SdaPreset::FaL2AaSda => "fa-l2+aa-sda",
            SdaPreset::FaSdaAaFrobenius => "fa-sda+aa-fro",
        }
    }

    pub fn config(self) -> AlignmentConfig {
        use AttentionMetric as A;
        use FeatureMetric as F;
        let (fa, aa) = match self {
            SdaPreset::None => (None, None),
            SdaPreset::FaL2 => (Some(F::L2), None),
            SdaPreset::AaSda => (None, Some(A::Sda)),
            SdaPreset::FaL2AaL2 => (Some(F::L2), Some(A::L2)),
            SdaPreset::FaSdaAaSda => (Some(F::Sda), Some(A::Sda)),
            SdaPreset::FaL2AaSda => (Some(F::L2), Some(A::Sda)),
            SdaPreset::FaSdaAaFrobenius => (Some(F::Sda), Some(A::Frobenius)),
        };
        AlignmentConfig {
            gamma: DEFAULT_GAMMA,
            fa,
            aa,
            aa_includes_wfda: true,
        }
    }
}


impl fmt::Display for SdaPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SdaPreset {
    type Err = Error;

    /// Accepts `fa-l2+aa-sda` as well as `FA(l2)+AA(sda)`.
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .replace('(', "-")
            .chars()
            .filter(|c| !matches!(c, ')' | ' '))
            .collect();
        let all = SdaPreset::TABLE
            .iter()
            .chain(std::iter::once(&SdaPreset::FaSdaAaFrobenius));
        for &p in all {
            if p.name() == norm {
                return Ok(p);
            }
        }
        match norm.as_str() {
            "default" | "fa-sda+aa-frobenius" => Ok(SdaPreset::FaSdaAaFrobenius),
            _ => Err(Error::contract(format!("unknown alignment preset `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentConfig {
    pub gamma: f64,
    pub fa: Option<FeatureMetric>,
    pub aa: Option<AttentionMetric>,
    /// Align the stego maps including their WFDA term.
    pub aa_includes_wfda: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        SdaPreset::default().config()
    }
}

impl AlignmentConfig {
    pub fn is_enabled(&self) -> bool {
        self.fa.is_some() || self.aa.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::contract(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

fn rows_cols(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
    let (n, c) = tape.value(a).dims2(op)?;
    if tape.shape(b) != [n, c] {
        return Err(Error::shapes(op, tape.shape(a), tape.shape(b)));
    }
    Ok((n, c))
}

fn covariance(tape: &mut Tape, f: Var, n: usize) -> Result<Var> {
    let mean = tape.mean_rows(f)?;
    let centred = tape.sub_row(f, mean)?;
    let ct = tape.transpose(centred)?;
    let cov = tape.matmul(ct, centred)?;
    Ok(tape.scale(cov, 1.0 / (n as f64 - 1.0)))
}

pub fn coral_taped(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (n, c) = rows_cols(tape, a, b, "coral_distance")?;
    if n < 2 {
        return Err(Error::contract("CORAL needs at least two rows"));
    }
    let ca = covariance(tape, a, n)?;
    let cb = covariance(tape, b, n)?;
    let d = tape.sub(ca, cb)?;
    let s = tape.sum_sq(d);
    Ok(tape.scale(s, 1.0 / (4.0 * (c * c) as f64)))
}

pub fn mmd_taped(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    rows_cols(tape, a, b, "mmd_distance")?;
    let ma = tape.mean_rows(a)?;
    let mb = tape.mean_rows(b)?;
    let d = tape.sub(ma, mb)?;
    Ok(tape.sum_sq(d))
}

/// Taped composite distance and components.
pub struct SdaTerms {
    pub value: Var,
    pub coral: Var,
    pub mmd: Var,
    /// The exponent hit [`EXP_CLAMP`].
    pub clamped: bool,
}

pub fn sda_distance_taped(tape: &mut Tape, a: Var, b: Var, gamma: f64) -> Result<SdaTerms> {
    let coral = coral_taped(tape, a, b)?;
    let mmd = mmd_taped(tape, a, b)?;
    let e = tape.scale(mmd, gamma);
    let clamped = tape.item(e) > EXP_CLAMP;
    let e = if clamped { tape.clamp(e, f64::NEG_INFINITY, EXP_CLAMP) } else { e };
    let w = tape.exp(e);
    let value = tape.mul(coral, w)?;
    Ok(SdaTerms {
        value,
        coral,
        mmd,
        clamped,
    })
}

/// Feature alignment term over row-stacked features.
pub fn feature_alignment_taped(
    tape: &mut Tape,
    f_stego: Var,
    f_secret: Var,
    metric: FeatureMetric,
    gamma: f64,
) -> Result<(Var, bool)> {
    match metric {
        FeatureMetric::L2 => {
            let (n, c) = rows_cols(tape, f_stego, f_secret, "feature_alignment")?;
            let d = tape.sub(f_stego, f_secret)?;
            let s = tape.sum_sq(d);
            Ok((tape.scale(s, 1.0 / (n * c) as f64), false))
        }
        FeatureMetric::Sda => {
            let t = sda_distance_taped(tape, f_stego, f_secret, gamma)?;
            Ok((t.value, t.clamped))
        }
    }
}

/// Attention alignment over a batch; `stego[b][h]` is head `h` of item `b`.
pub fn attention_alignment_taped(
    tape: &mut Tape,
    stego: &[Vec<Var>],
    secret: &[Vec<Var>],
    metric: AttentionMetric,
    gamma: f64,
) -> Result<(Var, bool)> {
    if stego.len() != secret.len() || stego.is_empty() {
        return Err(Error::dim(
            "attention_alignment",
            format!("batch sizes {} and {}", stego.len(), secret.len()),
        ));
    }
    let mut pairs = Vec::new();
    for (s, t) in stego.iter().zip(secret) {
        if s.len() != t.len() {
            return Err(Error::dim(
                "attention_alignment",
                format!("{} heads vs {} heads", s.len(), t.len()),
            ));
        }
        for (&a, &b) in s.iter().zip(t) {
            if tape.shape(a) != tape.shape(b) {
                return Err(Error::shapes("attention_alignment", tape.shape(a), tape.shape(b)));
            }
            pairs.push((a, b));
        }
    }
    match metric {
        AttentionMetric::Frobenius | AttentionMetric::L2 => {
            let mut terms = Vec::with_capacity(pairs.len());
            for &(a, b) in &pairs {
                let d = tape.sub(a, b)?;
                terms.push(tape.sum_sq(d));
            }
            let total = tape.add_all(&terms)?;
            let denom = match metric {
                AttentionMetric::Frobenius => stego.len() as f64,
                _ => pairs.iter().map(|&(a, _)| tape.value(a).numel()).sum::<usize>() as f64,
            };
            Ok((tape.scale(total, 1.0 / denom), false))
        }
        AttentionMetric::Sda => {
            let (a, b): (Vec<Var>, Vec<Var>) = pairs.into_iter().unzip();
            let ra = tape.concat_rows(&a)?;
            let rb = tape.concat_rows(&b)?;
            let t = sda_distance_taped(tape, ra, rb, gamma)?;
            Ok((t.value, t.clamped))
        }
    }
}

/// Taped alignment loss with its two terms.
pub struct SdaLossVars {
    pub l_d: Option<Var>,
    pub l_a: Option<Var>,
    pub total: Var,
    pub clamped: bool,
}

/// `L_SDA = L_d + L_a`; features are per-item `T×C`, maps per-item per-head.
pub fn sda_loss_taped(
    tape: &mut Tape,
    f_stego: &[Var],
    f_secret: &[Var],
    a_stego: &[Vec<Var>],
    a_secret: &[Vec<Var>],
    cfg: &AlignmentConfig,
) -> Result<SdaLossVars> {
    cfg.validate()?;
    if !cfg.is_enabled() {
        return Err(Error::contract("alignment loss with both terms disabled"));
    }
    let mut clamped = false;
    let l_d = match cfg.fa {
        Some(m) => {
            let a = tape.concat_rows(f_stego)?;
            let b = tape.concat_rows(f_secret)?;
            let (v, c) = feature_alignment_taped(tape, a, b, m, cfg.gamma)?;
            clamped |= c;
            Some(v)
        }
        None => None,
    };
    let l_a = match cfg.aa {
        Some(m) => {
            let (v, c) = attention_alignment_taped(tape, a_stego, a_secret, m, cfg.gamma)?;
            clamped |= c;
            Some(v)
        }
        None => None,
    };
    let total = match (l_d, l_a) {
        (Some(d), Some(a)) => tape.add(d, a)?,
        (Some(d), None) => d,
        (None, Some(a)) => a,
        (None, None) => unreachable!(),
    };
    Ok(SdaLossVars {
        l_d,
        l_a,
        total,
        clamped,
    })
}

// ---------------------------------------------------------------------------
// Tensor-level API.

fn eval2(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = f(&mut tape, va, vb)?;
    Ok(tape.item(out))
}

/// `‖Cov(a) − Cov(b)‖_F² / (4C²)` with `1/(N−1)` covariances.
pub fn coral_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    eval2(a, b, coral_taped)
}

/// Squared distance between the row means.
pub fn mmd_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    eval2(a, b, mmd_taped)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdaDistance {
    pub value: f64,
    pub coral: f64,
    pub mmd: f64,
    /// The exponent was clamped to keep the value finite.
    pub clamped: bool,
}

/// `d_C · exp(γ · d_M)` over `N×C` row sets.
pub fn sda_distance(a: &Tensor, b: &Tensor, cfg: &AlignmentConfig) -> Result<SdaDistance> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let t = sda_distance_taped(&mut tape, va, vb, cfg.gamma)?;
    if t.clamped {
        log::warn!("alignment distance exponent clamped at {EXP_CLAMP}");
    }
    Ok(SdaDistance {
        value: tape.item(t.value),
        coral: tape.item(t.coral),
        mmd: tape.item(t.mmd),
        clamped: t.clamped,
    })
}

fn map_vars(tape: &mut Tape, maps: &[AttentionMap]) -> Vec<Vec<Var>> {
    maps.iter()
        .map(|m| (0..m.heads()).map(|h| tape.constant(m.head(h))).collect())
        .collect()
}

/// Attention alignment over a batch of maps, using `cfg.aa`
/// (Frobenius when unset).
pub fn attention_alignment_loss(
    stego: &[AttentionMap],
    secret: &[AttentionMap],
    cfg: &AlignmentConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let a = map_vars(&mut tape, stego);
    let b = map_vars(&mut tape, secret);
    let metric = cfg.aa.unwrap_or(AttentionMetric::Frobenius);
    let (v, _) = attention_alignment_taped(&mut tape, &a, &b, metric, cfg.gamma)?;
    Ok(tape.item(v))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdaLoss {
    pub l_d: f64,
    pub l_a: f64,
    pub total: f64,
}

/// Full alignment loss over a batch of per-item features and maps.
pub fn sda_loss(
    f_stego: &[Tensor],
    f_secret: &[Tensor],
    a_stego: &[AttentionMap],
    a_secret: &[AttentionMap],
    cfg: &AlignmentConfig,
) -> Result<SdaLoss> {
    let mut tape = Tape::new();
    let fs: Vec<Var> = f_stego.iter().map(|t| tape.constant(t.clone())).collect();
    let ft: Vec<Var> = f_secret.iter().map(|t| tape.constant(t.clone())).collect();
    let a = map_vars(&mut tape, a_stego);
    let b = map_vars(&mut tape, a_secret);
    let l = sda_loss_taped(&mut tape, &fs, &ft, &a, &b, cfg)?;
    Ok(SdaLoss {
        l_d: l.l_d.map_or(0.0, |v| tape.item(v)),
        l_a: l.l_a.map_or(0.0, |v| tape.item(v)),
        total: tape.item(l.total),
    })
}
