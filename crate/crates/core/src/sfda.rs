//! Spatial-frequency differential attention.
//!
//! Per head the attention map is
//!
//! ```text
//! softmax(Q₁K₁ᵀ/√d) − λ·softmax(Q₂K₂ᵀ/√d) + WFDA
//! ```
//!
//! where the first stream comes from the stego tokens, the second from the
//! low-pass tokens, and the optional WFDA term combines four Haar sub-band
//! attentions (`hh + hl − lh − ll`) computed on the `(H/2)×(W/2)` grid and
//! lifted back to `T×T` by parent-index expansion. Both softmax terms have
//! unit row sums and the WFDA term has zero row sums, so every row of the
//! map sums to `1 − λ`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamSet};
use crate::tensor::Tensor;
use crate::wavelet::Band;

pub const DEFAULT_LAMBDA_INIT: f64 = 0.8;
pub const DEFAULT_LAMBDA_D: f64 = 2.0;

/// Sub-bands in the order their attentions enter the WFDA sum, with sign.
const WFDA_TERMS: [(Band, f64); 4] = [
    (Band::HH, 1.0),
    (Band::HL, 1.0),
    (Band::LH, -1.0),
    (Band::LL, -1.0),
];

#[derive(Clone, Debug, PartialEq)]
pub struct DiffAttnConfig {
    pub channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub lambda_init: f64,
    pub lambda_d: f64,
    pub wfda: bool,
}

impl DiffAttnConfig {
    /// `heads · head_dim = channels`.
    pub fn standard(channels: usize, heads: usize, wfda: bool) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::contract(format!(
                "{channels} channels cannot be split into {heads} heads"
            )));
        }
        Ok(DiffAttnConfig {
            channels,
            heads,
            head_dim: channels / heads,
            lambda_init: DEFAULT_LAMBDA_INIT,
            lambda_d: DEFAULT_LAMBDA_D,
            wfda,
        })
    }

    /// Head count tied to the token grid, `h = T / (2d)`.
    pub fn tied_to_tokens(channels: usize, tokens: usize, head_dim: usize, wfda: bool) -> Result<Self> {
        let heads = tokens / (2 * head_dim);
        if heads == 0 {
            return Err(Error::contract(format!(
                "{tokens} tokens give no heads at head_dim {head_dim}"
            )));
        }
        Ok(DiffAttnConfig {
            channels,
            heads,
            head_dim,
            lambda_init: DEFAULT_LAMBDA_INIT,
            lambda_d: DEFAULT_LAMBDA_D,
            wfda,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_init > 0.0 && self.lambda_init < 1.0) {
            return Err(Error::contract(format!("lambda_init {} not in (0,1)", self.lambda_init)));
        }
        if self.heads == 0 || self.head_dim == 0 || self.channels == 0 {
            return Err(Error::contract("attention dimensions must be positive"));
        }
        Ok(())
    }
}

/// Query/key projections of one sub-band.
#[derive(Clone, Debug, PartialEq)]
pub struct BandProjection {
    pub q: Tensor,
    pub k: Tensor,
}

/// Projections of one head, each `C×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub wq: Tensor,
    pub wlq: Tensor,
    pub wk: Tensor,
    pub wlk: Tensor,
    pub wv: Tensor,
    /// Indexed like [`Band::ALL`]; absent when WFDA is not used.
    pub bands: Option<[BandProjection; 4]>,
}

/// All parameters of one differential attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffAttnParams {
    pub cfg: DiffAttnConfig,
    pub heads: Vec<HeadParams>,
    pub lambda_q1: Tensor,
    pub lambda_k1: Tensor,
    pub lambda_q2: Tensor,
    pub lambda_k2: Tensor,
    /// `(h·d)×C`.
    pub wo: Tensor,
}

impl DiffAttnParams {
    pub fn random<R: Rng + ?Sized>(cfg: DiffAttnConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, d) = (cfg.channels, cfg.head_dim);
        let std = 1.0 / (c as f64).sqrt();
        let proj = |rng: &mut R| Tensor::randn(&[c, d], std, rng);
        let heads = (0..cfg.heads)
            .map(|_| HeadParams {
                wq: proj(rng),
                wlq: proj(rng),
                wk: proj(rng),
                wlk: proj(rng),
                wv: proj(rng),
                bands: cfg.wfda.then(|| {
                    std::array::from_fn(|_| BandProjection {
                        q: proj(rng),
                        k: proj(rng),
                    })
                }),
            })
            .collect();
        let lam = |rng: &mut R| Tensor::randn(&[d], 0.1, rng);
        Ok(DiffAttnParams {
            heads,
            lambda_q1: lam(rng),
            lambda_k1: lam(rng),
            lambda_q2: lam(rng),
            lambda_k2: lam(rng),
            wo: Tensor::randn(&[cfg.heads * d, c], 1.0 / ((cfg.heads * d) as f64).sqrt(), rng),
            cfg,
        })
    }

    /// Store under `prefix` in a parameter set.
    pub fn store(&self, prefix: &str, ps: &mut ParamSet) {
        for (i, h) in self.heads.iter().enumerate() {
            let p = format!("{prefix}.h{i}");
            ps.insert(format!("{p}.wq"), h.wq.clone());
            ps.insert(format!("{p}.wlq"), h.wlq.clone());
            ps.insert(format!("{p}.wk"), h.wk.clone());
            ps.insert(format!("{p}.wlk"), h.wlk.clone());
            ps.insert(format!("{p}.wv"), h.wv.clone());
            if let Some(bands) = &h.bands {
                for (b, bp) in Band::ALL.iter().zip(bands) {
                    ps.insert(format!("{p}.{}_q", b.name()), bp.q.clone());
                    ps.insert(format!("{p}.{}_k", b.name()), bp.k.clone());
                }
            }
        }
        ps.insert(format!("{prefix}.lambda_q1"), self.lambda_q1.clone());
        ps.insert(format!("{prefix}.lambda_k1"), self.lambda_k1.clone());
        ps.insert(format!("{prefix}.lambda_q2"), self.lambda_q2.clone());
        ps.insert(format!("{prefix}.lambda_k2"), self.lambda_k2.clone());
        ps.insert(format!("{prefix}.wo"), self.wo.clone());
    }

    /// Read back a layer stored with [`DiffAttnParams::store`].
    pub fn load(cfg: DiffAttnConfig, prefix: &str, ps: &ParamSet) -> Result<Self> {
        let heads = (0..cfg.heads)
            .map(|i| {
                let p = format!("{prefix}.h{i}");
                let bands = if cfg.wfda {
                    let mut v = Vec::with_capacity(4);
                    for b in Band::ALL {
                        v.push(BandProjection {
                            q: ps.get(&format!("{p}.{}_q", b.name()))?,
                            k: ps.get(&format!("{p}.{}_k", b.name()))?,
                        });
                    }
                    Some(<[BandProjection; 4]>::try_from(v).unwrap())
                } else {
                    None
                };
                Ok(HeadParams {
                    wq: ps.get(&format!("{p}.wq"))?,
                    wlq: ps.get(&format!("{p}.wlq"))?,
                    wk: ps.get(&format!("{p}.wk"))?,
                    wlk: ps.get(&format!("{p}.wlk"))?,
                    wv: ps.get(&format!("{p}.wv"))?,
                    bands,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DiffAttnParams {
            heads,
            lambda_q1: ps.get(&format!("{prefix}.lambda_q1"))?,
            lambda_k1: ps.get(&format!("{prefix}.lambda_k1"))?,
            lambda_q2: ps.get(&format!("{prefix}.lambda_q2"))?,
            lambda_k2: ps.get(&format!("{prefix}.lambda_k2"))?,
            wo: ps.get(&format!("{prefix}.wo"))?,
            cfg,
        })
    }

    /// Names of the projection matrices (the low-rank split allowlist).
    pub fn projection_names(cfg: &DiffAttnConfig, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..cfg.heads {
            for w in ["wq", "wlq", "wk", "wlk", "wv"] {
                out.push(format!("{prefix}.h{i}.{w}"));
            }
            if cfg.wfda {
                for b in Band::ALL {
                    out.push(format!("{prefix}.h{i}.{}_q", b.name()));
                    out.push(format!("{prefix}.h{i}.{}_k", b.name()));
                }
            }
        }
        out.push(format!("{prefix}.wo"));
        out
    }
}

/// Decoder block: differential attention sub-block followed by a
/// feed-forward sub-block.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub attn: DiffAttnParams,
    pub norm_x: Tensor,
    pub norm_xbar: Tensor,
    pub ff_norm: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

impl DecoderParams {
    pub fn random<R: Rng + ?Sized>(cfg: DiffAttnConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.channels;
        let hidden = 4 * c;
        let attn = DiffAttnParams::random(cfg, rng)?;
        Ok(DecoderParams {
            attn,
            norm_x: Tensor::ones(&[c]),
            norm_xbar: Tensor::ones(&[c]),
            ff_norm: Tensor::ones(&[c]),
            ff_w1: Tensor::randn(&[c, hidden], 1.0 / (c as f64).sqrt(), rng),
            ff_b1: Tensor::zeros(&[1, hidden]),
            ff_w2: Tensor::randn(&[hidden, c], 1.0 / (hidden as f64).sqrt(), rng),
            ff_b2: Tensor::zeros(&[1, c]),
        })
    }

    pub fn store(&self, prefix: &str, ps: &mut ParamSet) {
        self.attn.store(prefix, ps);
        ps.insert(format!("{prefix}.norm_x"), self.norm_x.clone());
        ps.insert(format!("{prefix}.norm_xbar"), self.norm_xbar.clone());
        ps.insert(format!("{prefix}.ff_norm"), self.ff_norm.clone());
        ps.insert(format!("{prefix}.ff_w1"), self.ff_w1.clone());
        ps.insert(format!("{prefix}.ff_b1"), self.ff_b1.clone());
        ps.insert(format!("{prefix}.ff_w2"), self.ff_w2.clone());
        ps.insert(format!("{prefix}.ff_b2"), self.ff_b2.clone());
    }

    pub fn load(cfg: DiffAttnConfig, prefix: &str, ps: &ParamSet) -> Result<Self> {
        Ok(DecoderParams {
            attn: DiffAttnParams::load(cfg, prefix, ps)?,
            norm_x: ps.get(&format!("{prefix}.norm_x"))?,
            norm_xbar: ps.get(&format!("{prefix}.norm_xbar"))?,
            ff_norm: ps.get(&format!("{prefix}.ff_norm"))?,
            ff_w1: ps.get(&format!("{prefix}.ff_w1"))?,
            ff_b1: ps.get(&format!("{prefix}.ff_b1"))?,
            ff_w2: ps.get(&format!("{prefix}.ff_w2"))?,
            ff_b2: ps.get(&format!("{prefix}.ff_b2"))?,
        })
    }
}

// ---------------------------------------------------------------------------
// Taped forward.

pub struct HeadVars {
    pub wq: Var,
    pub wlq: Var,
    pub wk: Var,
    pub wlk: Var,
    pub wv: Var,
    pub bands: Option<[(Var, Var); 4]>,
}

pub struct AttnVars {
    pub heads: Vec<HeadVars>,
    pub lambda_q1: Var,
    pub lambda_k1: Var,
    pub lambda_q2: Var,
    pub lambda_k2: Var,
    pub wo: Var,
}

impl AttnVars {
    pub fn bind(b: &Binding, prefix: &str, cfg: &DiffAttnConfig) -> Result<Self> {
        let heads = (0..cfg.heads)
            .map(|i| {
                let p = format!("{prefix}.h{i}");
                let bands = if cfg.wfda {
                    let mut v = Vec::with_capacity(4);
                    for band in Band::ALL {
                        v.push((
                            b.get(&format!("{p}.{}_q", band.name()))?,
                            b.get(&format!("{p}.{}_k", band.name()))?,
                        ));
                    }
                    Some(<[(Var, Var); 4]>::try_from(v).unwrap())
                } else {
                    None
                };
                Ok(HeadVars {
                    wq: b.get(&format!("{p}.wq"))?,
                    wlq: b.get(&format!("{p}.wlq"))?,
                    wk: b.get(&format!("{p}.wk"))?,
                    wlk: b.get(&format!("{p}.wlk"))?,
                    wv: b.get(&format!("{p}.wv"))?,
                    bands,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AttnVars {
            heads,
            lambda_q1: b.get(&format!("{prefix}.lambda_q1"))?,
            lambda_k1: b.get(&format!("{prefix}.lambda_k1"))?,
            lambda_q2: b.get(&format!("{prefix}.lambda_q2"))?,
            lambda_k2: b.get(&format!("{prefix}.lambda_k2"))?,
            wo: b.get(&format!("{prefix}.wo"))?,
        })
    }
}

pub struct DecoderVars {
    pub attn: AttnVars,
    pub norm_x: Var,
    pub norm_xbar: Var,
    pub ff_norm: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
}

impl DecoderVars {
    pub fn bind(b: &Binding, prefix: &str, cfg: &DiffAttnConfig) -> Result<Self> {
        Ok(DecoderVars {
            attn: AttnVars::bind(b, prefix, cfg)?,
            norm_x: b.get(&format!("{prefix}.norm_x"))?,
            norm_xbar: b.get(&format!("{prefix}.norm_xbar"))?,
            ff_norm: b.get(&format!("{prefix}.ff_norm"))?,
            ff_w1: b.get(&format!("{prefix}.ff_w1"))?,
            ff_b1: b.get(&format!("{prefix}.ff_b1"))?,
            ff_w2: b.get(&format!("{prefix}.ff_w2"))?,
            ff_b2: b.get(&format!("{prefix}.ff_b2"))?,
        })
    }
}

/// `λ = exp(λq1·λk1) − exp(λq2·λk2) + λ_init`, clamped into `[0, 1]`.
pub fn lambda_taped(tape: &mut Tape, v: &AttnVars, lambda_init: f64) -> Result<Var> {
    let p1 = tape.mul(v.lambda_q1, v.lambda_k1)?;
    let d1 = tape.sum(p1);
    let p2 = tape.mul(v.lambda_q2, v.lambda_k2)?;
    let d2 = tape.sum(p2);
    let e1 = tape.exp(d1);
    let e2 = tape.exp(d2);
    let diff = tape.sub(e1, e2)?;
    let raw = tape.add_const(diff, lambda_init);
    Ok(tape.clamp(raw, 0.0, 1.0))
}

/// `softmax(Q Kᵀ / √d)`.
pub fn attention_scores(tape: &mut Tape, q: Var, k: Var, head_dim: usize) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (head_dim as f64).sqrt());
    tape.softmax_rows(s)
}

/// Token matrices of the four sub-bands of a `C×H×W` map, in [`Band::ALL`]
/// order, each `(T/4)×C`.
pub fn band_tokens(tape: &mut Tape, x_map: Var) -> Result<[Var; 4]> {
    let mut out = Vec::with_capacity(4);
    for b in Band::ALL {
        let band = tape.haar_band(x_map, b)?;
        out.push(tape.to_tokens(band)?);
    }
    Ok(<[Var; 4]>::try_from(out).unwrap())
}

/// WFDA term of one head, lifted to `T×T` on an `h×w` token grid.
pub fn wfda_taped(
    tape: &mut Tape,
    bands: &[Var; 4],
    proj: &[(Var, Var); 4],
    head_dim: usize,
    grid: (usize, usize),
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (band, sign) in WFDA_TERMS {
        let idx = Band::ALL.iter().position(|&b| b == band).unwrap();
        let q = tape.matmul(bands[idx], proj[idx].0)?;
        let k = tape.matmul(bands[idx], proj[idx].1)?;
        let a = attention_scores(tape, q, k, head_dim)?;
        acc = Some(match (acc, sign > 0.0) {
            (None, true) => a,
            (None, false) => tape.scale(a, -1.0),
            (Some(s), true) => tape.add(s, a)?,
            (Some(s), false) => tape.sub(s, a)?,
        });
    }
    tape.expand_parent(acc.unwrap(), grid.0, grid.1)
}

/// Inputs shared by every head of one layer.
pub struct LayerInputs {
    /// Pre-normalised stego tokens, `T×C`.
    pub x: Var,
    /// Pre-normalised low-pass tokens, `T×C`.
    pub xbar: Var,
    /// Sub-band tokens when WFDA is on.
    pub bands: Option<[Var; 4]>,
    pub grid: (usize, usize),
}

impl LayerInputs {
    /// Applies the projection pre-normalisation and, when enabled, the
    /// sub-band decomposition of `x_map`.
    pub fn prepare(
        tape: &mut Tape,
        x: Var,
        xbar: Var,
        x_map: Option<Var>,
        cfg: &DiffAttnConfig,
    ) -> Result<Self> {
        let (t, c) = tape.value(x).dims2("diff_attention")?;
        if tape.shape(xbar) != tape.shape(x) {
            return Err(Error::shapes("diff_attention", tape.shape(x), tape.shape(xbar)));
        }
        if c != cfg.channels {
            return Err(Error::dim(
                "diff_attention",
                format!("{c} channels, layer expects {}", cfg.channels),
            ));
        }
        let (grid, bands) = match x_map {
            Some(m) => {
                let (mc, h, w) = tape.value(m).dims3("diff_attention")?;
                if mc != c || h * w != t {
                    return Err(Error::dim(
                        "diff_attention",
                        format!("map {:?} does not match {t} tokens of {c} channels", tape.shape(m)),
                    ));
                }
                let bands = if cfg.wfda { Some(band_tokens(tape, m)?) } else { None };
                ((h, w), bands)
            }
            None if cfg.wfda => {
                return Err(Error::contract("WFDA needs the spatial feature map"));
            }
            None => ((t, 1), None),
        };
        let x = tape.rms_rows(x)?;
        let xbar = tape.rms_rows(xbar)?;
        Ok(LayerInputs { x, xbar, bands, grid })
    }
}

/// Projected streams of one head.
pub struct Projected {
    pub q1: Var,
    pub q2: Var,
    pub k1: Var,
    pub k2: Var,
    pub v: Var,
}

pub fn project_taped(tape: &mut Tape, inp: &LayerInputs, h: &HeadVars) -> Result<Projected> {
    Ok(Projected {
        q1: tape.matmul(inp.x, h.wq)?,
        q2: tape.matmul(inp.xbar, h.wlq)?,
        k1: tape.matmul(inp.x, h.wk)?,
        k2: tape.matmul(inp.xbar, h.wlk)?,
        v: tape.matmul(inp.x, h.wv)?,
    })
}

/// One head's differential attention map, returned as
/// `(map without the WFDA term, full map)`.
pub fn head_map_taped(
    tape: &mut Tape,
    inp: &LayerInputs,
    h: &HeadVars,
    pr: &Projected,
    lambda: Var,
    cfg: &DiffAttnConfig,
) -> Result<(Var, Var)> {
    let a1 = attention_scores(tape, pr.q1, pr.k1, cfg.head_dim)?;
    let a2 = attention_scores(tape, pr.q2, pr.k2, cfg.head_dim)?;
    let a2 = tape.scale_by(a2, lambda)?;
    let base = tape.sub(a1, a2)?;
    match (&inp.bands, &h.bands) {
        (Some(bands), Some(proj)) => {
            let w = wfda_taped(tape, bands, proj, cfg.head_dim, inp.grid)?;
            Ok((base, tape.add(base, w)?))
        }
        (Some(_), None) => Err(Error::contract("WFDA enabled but head has no sub-band projections")),
        _ => Ok((base, base)),
    }
}

/// Output of a multi-head layer.
pub struct MultiHeadOut {
    pub out: Var,
    /// Per-head maps as used for the output.
    pub maps: Vec<Var>,
    /// Per-head maps without the WFDA term.
    pub base_maps: Vec<Var>,
    pub lambda: Var,
}

/// Multi-head differential attention on already layer-normalised streams.
pub fn multi_head_taped(
    tape: &mut Tape,
    x: Var,
    xbar: Var,
    x_map: Option<Var>,
    v: &AttnVars,
    cfg: &DiffAttnConfig,
) -> Result<MultiHeadOut> {
    let inp = LayerInputs::prepare(tape, x, xbar, x_map, cfg)?;
    let lambda = lambda_taped(tape, v, cfg.lambda_init)?;
    let mut heads = Vec::with_capacity(v.heads.len());
    let mut maps = Vec::with_capacity(v.heads.len());
    let mut base_maps = Vec::with_capacity(v.heads.len());
    for h in &v.heads {
        let pr = project_taped(tape, &inp, h)?;
        let (base, map) = head_map_taped(tape, &inp, h, &pr, lambda, cfg)?;
        let head = tape.matmul(map, pr.v)?;
        let head = tape.rms_rows(head)?;
        heads.push(tape.scale(head, 1.0 - cfg.lambda_init));
        maps.push(map);
        base_maps.push(base);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = tape.matmul(cat, v.wo)?;
    Ok(MultiHeadOut {
        out,
        maps,
        base_maps,
        lambda,
    })
}

/// Attention sub-block: `λ_d · MultiHead(LN(X), LN(X̄)) + X`, each stream
/// normalised separately.
pub fn sfda_block_taped(
    tape: &mut Tape,
    x: Var,
    xbar: Var,
    x_map: Option<Var>,
    v: &DecoderVars,
    cfg: &DiffAttnConfig,
) -> Result<MultiHeadOut> {
    let xn = tape.rms_normalize(x, Some(v.norm_x))?;
    let xbn = tape.rms_normalize(xbar, Some(v.norm_xbar))?;
    let mut mh = multi_head_taped(tape, xn, xbn, x_map, &v.attn, cfg)?;
    let scaled = tape.scale(mh.out, cfg.lambda_d);
    mh.out = tape.add(scaled, x)?;
    Ok(mh)
}

/// Attention sub-block followed by the residual feed-forward sub-block.
pub fn decoder_taped(
    tape: &mut Tape,
    x: Var,
    xbar: Var,
    x_map: Option<Var>,
    v: &DecoderVars,
    cfg: &DiffAttnConfig,
) -> Result<MultiHeadOut> {
    let mut blk = sfda_block_taped(tape, x, xbar, x_map, v, cfg)?;
    let y = blk.out;
    let n = tape.rms_normalize(y, Some(v.ff_norm))?;
    let h = tape.matmul(n, v.ff_w1)?;
    let h = tape.add_row(h, v.ff_b1)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, v.ff_w2)?;
    let o = tape.add_row(o, v.ff_b2)?;
    blk.out = tape.add(y, o)?;
    Ok(blk)
}

// ---------------------------------------------------------------------------
// Tensor-level API.

/// Per-head attention maps, `h×T×T`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub maps: Tensor,
}

impl AttentionMap {
    pub fn from_heads(heads: &[Tensor]) -> Result<Self> {
        let first = heads.first().ok_or_else(|| Error::dim("attention_map", "no heads"))?;
        let (t, t2) = first.dims2("attention_map")?;
        let mut data = Vec::with_capacity(heads.len() * t * t2);
        for h in heads {
            if h.shape() != first.shape() {
                return Err(Error::shapes("attention_map", first.shape(), h.shape()));
            }
            data.extend_from_slice(h.data());
        }
        Ok(AttentionMap {
            maps: Tensor::new(&[heads.len(), t, t2], data)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn head(&self, i: usize) -> Tensor {
        let t = self.tokens();
        Tensor::new(&[t, t], self.maps.data()[i * t * t..(i + 1) * t * t].to_vec()).unwrap()
    }

    /// Row sums of every head, flattened.
    pub fn row_sums(&self) -> Vec<f64> {
        self.maps.data().chunks(self.tokens()).map(|r| r.iter().sum()).collect()
    }
}

fn with_layer<T>(
    p: &DiffAttnParams,
    f: impl FnOnce(&mut Tape, &AttnVars) -> Result<T>,
) -> Result<T> {
    let mut ps = ParamSet::new();
    p.store("attn", &mut ps);
    let mut tape = Tape::new();
    let b = ps.bind(&mut tape, |_| false);
    let v = AttnVars::bind(&b, "attn", &p.cfg)?;
    f(&mut tape, &v)
}

/// Clamped differential weight of a layer.
pub fn effective_lambda(p: &DiffAttnParams) -> Result<f64> {
    with_layer(p, |tape, v| {
        let l = lambda_taped(tape, v, p.cfg.lambda_init)?;
        Ok(tape.item(l))
    })
}

/// Projections `(Q₁, Q₂, K₁, K₂, V)` of every head, after RMS
/// pre-normalisation of both streams.
pub fn project_qkv(x: &Tensor, xbar: &Tensor, p: &DiffAttnParams) -> Result<Vec<[Tensor; 5]>> {
    with_layer(p, |tape, v| {
        let (xv, xbv) = (tape.constant(x.clone()), tape.constant(xbar.clone()));
        let cfg = DiffAttnConfig { wfda: false, ..p.cfg.clone() };
        let inp = LayerInputs::prepare(tape, xv, xbv, None, &cfg)?;
        v.heads
            .iter()
            .map(|h| {
                let pr = project_taped(tape, &inp, h)?;
                Ok([pr.q1, pr.q2, pr.k1, pr.k2, pr.v].map(|var| tape.value(var).clone()))
            })
            .collect()
    })
}

/// WFDA maps of every head for a `C×H×W` feature map, `h×T×T`.
pub fn wfda(x_map: &Tensor, p: &DiffAttnParams) -> Result<Tensor> {
    if !p.cfg.wfda {
        return Err(Error::contract("wfda called on a layer without WFDA"));
    }
    let (_, h, w) = x_map.dims3("wfda")?;
    with_layer(p, |tape, v| {
        let m = tape.constant(x_map.clone());
        let bands = band_tokens(tape, m)?;
        let heads = v
            .heads
            .iter()
            .map(|hv| {
                let w = wfda_taped(tape, &bands, hv.bands.as_ref().unwrap(), p.cfg.head_dim, (h, w))?;
                Ok(tape.value(w).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AttentionMap::from_heads(&heads)?.maps)
    })
}

/// Full differential attention map of every head.
pub fn diff_attention(x: &Tensor, xbar: &Tensor, x_map: &Tensor, p: &DiffAttnParams) -> Result<AttentionMap> {
    with_layer(p, |tape, v| {
        let (xv, xbv, mv) = (
            tape.constant(x.clone()),
            tape.constant(xbar.clone()),
            tape.constant(x_map.clone()),
        );
        let inp = LayerInputs::prepare(tape, xv, xbv, Some(mv), &p.cfg)?;
        let lambda = lambda_taped(tape, v, p.cfg.lambda_init)?;
        let heads = v
            .heads
            .iter()
            .map(|h| {
                let pr = project_taped(tape, &inp, h)?;
                let (_, m) = head_map_taped(tape, &inp, h, &pr, lambda, &p.cfg)?;
                Ok(tape.value(m).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        AttentionMap::from_heads(&heads)
    })
}

/// Multi-head aggregation, `T×C`.
pub fn multi_head_diff_attention(
    x: &Tensor,
    xbar: &Tensor,
    x_map: &Tensor,
    p: &DiffAttnParams,
) -> Result<Tensor> {
    with_layer(p, |tape, v| {
        let (xv, xbv, mv) = (
            tape.constant(x.clone()),
            tape.constant(xbar.clone()),
            tape.constant(x_map.clone()),
        );
        let out = multi_head_taped(tape, xv, xbv, Some(mv), v, &p.cfg)?;
        Ok(tape.value(out.out).clone())
    })
}

fn with_decoder<T>(
    p: &DecoderParams,
    f: impl FnOnce(&mut Tape, &DecoderVars) -> Result<T>,
) -> Result<T> {
    let mut ps = ParamSet::new();
    p.store("dec", &mut ps);
    let mut tape = Tape::new();
    let b = ps.bind(&mut tape, |_| false);
    let v = DecoderVars::bind(&b, "dec", &p.attn.cfg)?;
    f(&mut tape, &v)
}

/// Attention sub-block output `λ_d · MultiHead(LN(X), LN(X̄)) + X`.
pub fn sfda_block(x: &Tensor, xbar: &Tensor, x_map: &Tensor, p: &DecoderParams) -> Result<Tensor> {
    with_decoder(p, |tape, v| {
        let (xv, xbv, mv) = (
            tape.constant(x.clone()),
            tape.constant(xbar.clone()),
            tape.constant(x_map.clone()),
        );
        let out = sfda_block_taped(tape, xv, xbv, Some(mv), v, &p.attn.cfg)?;
        Ok(tape.value(out.out).clone())
    })
}

/// Full decoder block (attention then feed-forward).
pub fn decoder_block(x: &Tensor, xbar: &Tensor, x_map: &Tensor, p: &DecoderParams) -> Result<Tensor> {
    with_decoder(p, |tape, v| {
        let (xv, xbv, mv) = (
            tape.constant(x.clone()),
            tape.constant(xbar.clone()),
            tape.constant(x_map.clone()),
        );
        let out = decoder_taped(tape, xv, xbv, Some(mv), v, &p.attn.cfg)?;
        Ok(tape.value(out.out).clone())
    })
}
