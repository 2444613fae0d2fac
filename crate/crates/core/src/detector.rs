//! Detection network: convolutional encoder, LFAD + SFDA lifting of the
//! stego branch, the secret branch used only for alignment, and the two
//! sigmoid heads.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lfad::{self, FilterMode, TAPS};
use crate::params::{Binding, ParamSet};
use crate::sfda::{self, AttentionMap, DecoderParams, DecoderVars, DiffAttnConfig, DiffAttnParams};
use crate::tensor::Tensor;
use crate::wavelet::Band;

/// Probability clamp used inside the log terms of the loss.
pub const PROB_CLAMP: f64 = 1e-7;
pub const ENCODER_STAGES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// LFAD followed by SFDA with the wavelet term.
    Full,
    /// Low-pass features used directly, no attention.
    DirectLfad,
    /// High-pass kernels in place of the low-pass ones.
    Hfad,
    /// SFDA without the wavelet term.
    NoDwt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::DirectLfad, Variant::Hfad, Variant::NoDwt, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DirectLfad => "direct-lfad",
            Variant::Hfad => "hfad",
            Variant::NoDwt => "no-dwt",
        }
    }

    fn wfda(self) -> bool {
        matches!(self, Variant::Full | Variant::Hfad)
    }

    fn filter_mode(self) -> FilterMode {
        match self {
            Variant::Hfad => FilterMode::Highpass,
            _ => FilterMode::Lowpass,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" | "sfda" | "stegaffd" => Ok(Variant::Full),
            "direct-lfad" | "lfad" => Ok(Variant::DirectLfad),
            "hfad" => Ok(Variant::Hfad),
            "no-dwt" | "w/o-dwt" | "wo-dwt" => Ok(Variant::NoDwt),
            other => Err(Error::contract(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadCount {
    /// `heads · head_dim = width`.
    Fixed(usize),
    /// `heads = tokens / (2 · head_dim)`.
    TiedToTokens { head_dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub in_channels: usize,
    pub width: usize,
    pub image_size: usize,
    pub heads: HeadCount,
    pub lambda_init: f64,
    pub lambda_d: f64,
    pub variant: Variant,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            in_channels: 3,
            width: 16,
            image_size: 32,
            heads: HeadCount::Fixed(2),
            lambda_init: sfda::DEFAULT_LAMBDA_INIT,
            lambda_d: sfda::DEFAULT_LAMBDA_D,
            variant: Variant::Full,
        }
    }
}

impl DetectorConfig {
    /// Feature-map side after the encoder.
    pub fn feature_side(&self) -> usize {
        self.image_size / 4
    }

    pub fn tokens(&self) -> usize {
        self.feature_side() * self.feature_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return Err(Error::contract(format!(
                "image size {} cannot be downsampled twice",
                self.image_size
            )));
        }
        if self.variant.wfda() && !self.feature_side().is_multiple_of(2) {
            return Err(Error::contract(format!(
                "image size {} leaves an odd feature map for the wavelet term",
                self.image_size
            )));
        }
        if self.in_channels == 0 || self.width == 0 {
            return Err(Error::contract("channel counts must be positive"));
        }
        Ok(())
    }

    fn attn(&self, wfda: bool) -> Result<DiffAttnConfig> {
        let mut c = match self.heads {
            HeadCount::Fixed(h) => DiffAttnConfig::standard(self.width, h, wfda)?,
            HeadCount::TiedToTokens { head_dim } => {
                DiffAttnConfig::tied_to_tokens(self.width, self.tokens(), head_dim, wfda)?
            }
        };
        c.lambda_init = self.lambda_init;
        c.lambda_d = self.lambda_d;
        c.validate()?;
        Ok(c)
    }

    /// Attention layout of the stego branch.
    pub fn stego_attn(&self) -> Result<DiffAttnConfig> {
        self.attn(self.variant.wfda())
    }

    /// Attention layout of the secret branch (never uses the wavelet term).
    pub fn secret_attn(&self) -> Result<DiffAttnConfig> {
        self.attn(false)
    }
}

pub(crate) fn conv_name(i: usize, part: &str) -> String {
    format!("enc.conv{i}.{part}")
}

/// Detector weights stored by name.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    pub cfg: DetectorConfig,
    pub params: ParamSet,
}

impl DetectorParams {
    pub fn random<R: Rng + ?Sized>(cfg: DetectorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let c = cfg.width;
        for i in 0..ENCODER_STAGES {
            let cin = if i == 0 { 4 * cfg.in_channels } else { c };
            let std = (2.0 / (9 * cin) as f64).sqrt();
            ps.insert(conv_name(i, "w"), Tensor::randn(&[c, cin, 3, 3], std, rng));
            ps.insert(conv_name(i, "b"), Tensor::zeros(&[c]));
        }
        ps.insert("lfad.w", Tensor::randn(&[TAPS, c, 3, 3], 0.01, rng));
        DecoderParams::random(cfg.stego_attn()?, rng)?.store("sfda", &mut ps);
        DecoderParams::random(cfg.secret_attn()?, rng)?.store("da", &mut ps);
        for head in ["head_m", "head_mp"] {
            ps.insert(format!("{head}.w"), Tensor::randn(&[c, 1], 1.0 / (c as f64).sqrt(), rng));
            ps.insert(format!("{head}.b"), Tensor::zeros(&[1]));
        }
        Ok(DetectorParams { cfg, params: ps })
    }

    /// Matrices that receive the low-rank split: attention projections of
    /// both branches and the main head.
    pub fn lod_allowlist(cfg: &DetectorConfig) -> Result<Vec<String>> {
        let mut out = DiffAttnParams::projection_names(&cfg.stego_attn()?, "sfda");
        out.extend(DiffAttnParams::projection_names(&cfg.secret_attn()?, "da"));
        out.push("head_m.w".into());
        Ok(out)
    }

    pub fn stego_decoder(&self) -> Result<DecoderParams> {
        DecoderParams::load(self.cfg.stego_attn()?, "sfda", &self.params)
    }

    pub fn secret_decoder(&self) -> Result<DecoderParams> {
        DecoderParams::load(self.cfg.secret_attn()?, "da", &self.params)
    }
}

/// Detector parameters bound to one tape.
pub struct DetectorVars {
    pub enc: Vec<(Var, Var)>,
    pub lfad: Var,
    pub sfda: DecoderVars,
    pub da: DecoderVars,
    pub head_m: (Var, Var),
    pub head_mp: (Var, Var),
}

impl DetectorVars {
    pub fn bind(b: &Binding, cfg: &DetectorConfig) -> Result<Self> {
        let enc = (0..ENCODER_STAGES)
            .map(|i| Ok((b.get(&conv_name(i, "w"))?, b.get(&conv_name(i, "b"))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DetectorVars {
            enc,
            lfad: b.get("lfad.w")?,
            sfda: DecoderVars::bind(b, "sfda", &cfg.stego_attn()?)?,
            da: DecoderVars::bind(b, "da", &cfg.secret_attn()?)?,
            head_m: (b.get("head_m.w")?, b.get("head_m.b")?),
            head_mp: (b.get("head_mp.w")?, b.get("head_mp.b")?),
        })
    }
}

/// Orthonormal Haar space-to-depth: `C×H×W` to `4C×(H/2)×(W/2)`, bands in
/// [`Band::ALL`] order.
pub fn space_to_depth_taped(tape: &mut Tape, x: Var) -> Result<Var> {
    let (c, h, w) = tape.value(x).dims3("space_to_depth")?;
    let mut rows = Vec::with_capacity(4);
    for band in Band::ALL {
        let b = tape.haar_band(x, band)?;
        rows.push(tape.reshape(b, &[c, (h / 2) * (w / 2)])?);
    }
    let cat = tape.concat_rows(&rows)?;
    tape.reshape(cat, &[4 * c, h / 2, w / 2])
}

/// Per-channel normalisation over spatial positions: zero mean, unit RMS.
pub fn instance_norm_taped(tape: &mut Tape, x: Var) -> Result<Var> {
    let (c, h, w) = tape.value(x).dims3("instance_norm")?;
    let flat = tape.reshape(x, &[c, h * w])?;
    let t = tape.transpose(flat)?;
    let m = tape.mean_rows(t)?;
    let t = tape.sub_row(t, m)?;
    let flat = tape.transpose(t)?;
    let n = tape.rms_normalize(flat, None)?;
    tape.reshape(n, &[c, h, w])
}

/// Haar space-to-depth, then three conv + norm + GELU stages with 2×
/// average pooling after the first.
pub fn encode_taped(tape: &mut Tape, x: Var, v: &DetectorVars) -> Result<Var> {
    let (_, h, w) = tape.value(x).dims3("encode")?;
    if h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::contract(format!("image {h}×{w} too small or not divisible by 4")));
    }
    let mut f = space_to_depth_taped(tape, x)?;
    for (i, &(wt, b)) in v.enc.iter().enumerate() {
        f = tape.conv2d_3x3(f, wt)?;
        f = instance_norm_taped(tape, f)?;
        f = tape.add_channel(f, b)?;
        f = tape.gelu(f);
        if i == 0 {
            f = tape.avg_pool2(f)?;
        }
    }
    Ok(f)
}

/// Output of one branch for one image.
pub struct Lifted {
    /// `T×C` branch features.
    pub features: Var,
    /// Per-head attention maps (empty for the direct-LFAD variant).
    pub maps: Vec<Var>,
    /// Per-head maps without the wavelet term.
    pub base_maps: Vec<Var>,
    /// Filtered `C×H'×W'` features.
    pub filtered: Var,
}

fn filtered_features(tape: &mut Tape, feat: Var, v: &DetectorVars, mode: FilterMode) -> Result<Var> {
    let bank = lfad::predict_filters_taped(tape, feat, v.lfad, mode)?;
    tape.apply_filters(feat, bank)
}

/// Stego branch: encoder, LFAD, then SFDA according to the variant.
pub fn lift_taped(tape: &mut Tape, x: Var, v: &DetectorVars, cfg: &DetectorConfig) -> Result<Lifted> {
    let feat = encode_taped(tape, x, v)?;
    let filtered = filtered_features(tape, feat, v, cfg.variant.filter_mode())?;
    let xbar = tape.to_tokens(filtered)?;
    if cfg.variant == Variant::DirectLfad {
        return Ok(Lifted {
            features: xbar,
            maps: Vec::new(),
            base_maps: Vec::new(),
            filtered,
        });
    }
    let xt = tape.to_tokens(feat)?;
    let acfg = cfg.stego_attn()?;
    let out = sfda::decoder_taped(tape, xt, xbar, Some(feat), &v.sfda, &acfg)?;
    Ok(Lifted {
        features: out.out,
        maps: out.maps,
        base_maps: out.base_maps,
        filtered,
    })
}

/// Secret branch: shared encoder and LFAD, separate attention without the
/// wavelet term.
pub fn secret_taped(tape: &mut Tape, x: Var, v: &DetectorVars, cfg: &DetectorConfig) -> Result<Lifted> {
    let feat = encode_taped(tape, x, v)?;
    let filtered = filtered_features(tape, feat, v, FilterMode::Lowpass)?;
    let xbar = tape.to_tokens(filtered)?;
    let xt = tape.to_tokens(feat)?;
    let acfg = cfg.secret_attn()?;
    let out = sfda::decoder_taped(tape, xt, xbar, Some(feat), &v.da, &acfg)?;
    Ok(Lifted {
        features: out.out,
        maps: out.maps,
        base_maps: out.base_maps,
        filtered,
    })
}

/// Mean-pool over tokens, affine map, sigmoid. Returns a `1×1` probability.
pub fn classify_taped(tape: &mut Tape, f: Var, head: (Var, Var)) -> Result<Var> {
    let pooled = tape.mean_rows(f)?;
    let logit = tape.matmul(pooled, head.0)?;
    let logit = tape.add_row(logit, head.1)?;
    Ok(tape.sigmoid(logit))
}

fn check_labels(labels: &[f64]) -> Result<()> {
    if let Some(l) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
        return Err(Error::contract(format!("label {l} is not 0 or 1")));
    }
    Ok(())
}

/// Two-branch binary cross-entropy averaged over the batch.
pub fn cls_loss_taped(tape: &mut Tape, y: &[Var], y_prime: &[Var], labels: &[f64]) -> Result<Var> {
    check_labels(labels)?;
    if y.len() != labels.len() || y_prime.len() != labels.len() || labels.is_empty() {
        return Err(Error::dim(
            "cls_loss",
            format!("{} / {} predictions for {} labels", y.len(), y_prime.len(), labels.len()),
        ));
    }
    let mut terms = Vec::with_capacity(2 * labels.len());
    for ((&a, &b), &l) in y.iter().zip(y_prime).zip(labels) {
        for p in [a, b] {
            let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
            let q = if l == 1.0 {
                p
            } else {
                let neg = tape.scale(p, -1.0);
                tape.add_const(neg, 1.0)
            };
            let lg = tape.ln(q)?;
            terms.push(tape.sum(lg));
        }
    }
    let total = tape.add_all(&terms)?;
    Ok(tape.scale(total, -1.0 / labels.len() as f64))
}

// ---------------------------------------------------------------------------
// Tensor-level API.

fn with_detector<T>(p: &DetectorParams, f: impl FnOnce(&mut Tape, &DetectorVars) -> Result<T>) -> Result<T> {
    let mut tape = Tape::new();
    let b = p.params.bind(&mut tape, |_| false);
    let v = DetectorVars::bind(&b, &p.cfg)?;
    f(&mut tape, &v)
}

/// Encoder features of one `C×H×W` image.
pub fn encode(x: &Tensor, p: &DetectorParams) -> Result<Tensor> {
    with_detector(p, |tape, v| {
        let xv = tape.constant(x.clone());
        let f = encode_taped(tape, xv, v)?;
        Ok(tape.value(f).clone())
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput {
    pub features: Tensor,
    /// Absent for the direct-LFAD variant.
    pub attention: Option<AttentionMap>,
}

fn branch_output(tape: &Tape, l: &Lifted) -> Result<BranchOutput> {
    let attention = if l.maps.is_empty() {
        None
    } else {
        let heads: Vec<Tensor> = l.maps.iter().map(|&m| tape.value(m).clone()).collect();
        Some(AttentionMap::from_heads(&heads)?)
    };
    Ok(BranchOutput {
        features: tape.value(l.features).clone(),
        attention,
    })
}

/// Stego-branch features and attention for one image.
pub fn lift(x_stego: &Tensor, p: &DetectorParams) -> Result<BranchOutput> {
    with_detector(p, |tape, v| {
        let xv = tape.constant(x_stego.clone());
        let l = lift_taped(tape, xv, v, &p.cfg)?;
        branch_output(tape, &l)
    })
}

/// Secret-branch features and attention for one raw secret image.
pub fn secret_branch_features(x_secret: &Tensor, p: &DetectorParams) -> Result<(Tensor, AttentionMap)> {
    with_detector(p, |tape, v| {
        let xv = tape.constant(x_secret.clone());
        let l = secret_taped(tape, xv, v, &p.cfg)?;
        let out = branch_output(tape, &l)?;
        Ok((out.features, out.attention.expect("secret branch always attends")))
    })
}

/// `sigmoid(mean_rows(f) · w + b)`.
pub fn classify(f: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (fv, wv, bv) = (
        tape.constant(f.clone()),
        tape.constant(weight.clone()),
        tape.constant(bias.clone()),
    );
    let p = classify_taped(&mut tape, fv, (wv, bv))?;
    Ok(tape.item(p))
}

/// Main-head probability for one stego image.
pub fn score(x_stego: &Tensor, p: &DetectorParams) -> Result<f64> {
    with_detector(p, |tape, v| {
        let xv = tape.constant(x_stego.clone());
        let l = lift_taped(tape, xv, v, &p.cfg)?;
        let y = classify_taped(tape, l.features, v.head_m)?;
        Ok(tape.item(y))
    })
}

/// Two-branch classification loss on plain probabilities.
pub fn cls_loss(y: &[f64], y_prime: &[f64], labels: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let a: Vec<Var> = y.iter().map(|&v| tape.scalar(v)).collect();
    let b: Vec<Var> = y_prime.iter().map(|&v| tape.scalar(v)).collect();
    let l = cls_loss_taped(&mut tape, &a, &b, labels)?;
    Ok(tape.item(l))
}
