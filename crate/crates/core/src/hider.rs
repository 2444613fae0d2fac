//! Wavelet-band image hider: the secret, centred and halved in resolution,
//! is added to the detail sub-bands of the cover.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use crate::wavelet::{self, Band};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Cover,
    Secret,
    Stego,
    /// Secret estimate recovered from a stego image.
    Revealed,
}

/// `B×C×H×W` images with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Tensor,
    pub role: Role,
}

impl ImageBatch {
    pub fn new(data: Tensor, role: Role) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 {
            return Err(Error::dim("image_batch", format!("expected B×C×H×W, got {s:?}")));
        }
        if data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("image values must lie in [0, 1]"));
        }
        Ok(ImageBatch { data, role })
    }

    /// Stack `C×H×W` items.
    pub fn from_items(items: &[Tensor], role: Role) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::dim("image_batch", "empty batch"))?;
        let (c, h, w) = first.dims3("image_batch")?;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for it in items {
            if it.shape() != first.shape() {
                return Err(Error::shapes("image_batch", first.shape(), it.shape()));
            }
            data.extend_from_slice(it.data());
        }
        Self::new(Tensor::new(&[items.len(), c, h, w], data)?, role)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)`.
    pub fn item_shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    pub fn item(&self, i: usize) -> Tensor {
        let (c, h, w) = self.item_shape();
        let n = c * h * w;
        Tensor::new(&[c, h, w], self.data.data()[i * n..(i + 1) * n].to_vec()).unwrap()
    }

    pub fn items(&self) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.item(i)).collect()
    }
}

/// Embedding strengths swept when reporting imperceptibility.
pub const ALPHA_GRID: [f64; 4] = [0.02, 0.05, 0.1, 0.2];

/// Embedding bands in the order of [`HiderConfig::gains`].
pub const DETAIL_BANDS: [Band; 3] = [Band::LH, Band::HL, Band::HH];

#[derive(Clone, Debug, PartialEq)]
pub struct HiderConfig {
    pub alpha: f64,
    /// Per-band gain for `LH`, `HL`, `HH`.
    pub gains: [f64; 3],
    pub bands: Vec<Band>,
}

impl Default for HiderConfig {
    fn default() -> Self {
        HiderConfig {
            alpha: 0.2,
            gains: [1.0; 3],
            bands: DETAIL_BANDS.to_vec(),
        }
    }
}

impl HiderConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        HiderConfig {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::contract(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if self.bands.is_empty() {
            return Err(Error::contract("hider needs at least one band"));
        }
        if self.bands.contains(&Band::LL) {
            return Err(Error::contract("the LL band is never used for embedding"));
        }
        Ok(())
    }

    fn gain(&self, b: Band) -> f64 {
        let i = DETAIL_BANDS.iter().position(|&d| d == b).unwrap();
        self.gains[i]
    }
}

/// Anything that turns a (secret, cover) pair into a stego image.
pub trait Hider {
    fn hide(&self, secret: &ImageBatch, cover: &ImageBatch) -> Result<ImageBatch>;

    /// Whether the hider can be fine-tuned through the tape.
    fn differentiable(&self) -> bool;
}

impl Hider for HiderConfig {
    fn hide(&self, secret: &ImageBatch, cover: &ImageBatch) -> Result<ImageBatch> {
        hide(secret, cover, self)
    }

    fn differentiable(&self) -> bool {
        true
    }
}

fn check_pair(a: &ImageBatch, b: &ImageBatch, op: &'static str) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shapes(op, a.tensor().shape(), b.tensor().shape()));
    }
    let (_, h, w) = a.item_shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(op, format!("image size {h}×{w} must be even")));
    }
    Ok(())
}

fn hide_item(secret: &Tensor, cover: &Tensor, cfg: &HiderConfig) -> Result<Tensor> {
    let payload = tensor::avg_pool2(&secret.map(|v| v - 0.5))?;
    let mut bands = wavelet::dwt_haar(cover)?;
    for &b in &cfg.bands {
        let k = cfg.alpha * cfg.gain(b);
        let band = bands.band_mut(b);
        *band = band.add(&payload.scale(k))?;
    }
    Ok(wavelet::idwt_haar(&bands)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Embed each secret into its cover.
pub fn hide(secret: &ImageBatch, cover: &ImageBatch, cfg: &HiderConfig) -> Result<ImageBatch> {
    cfg.validate()?;
    check_pair(secret, cover, "hide")?;
    let items = secret
        .items()
        .iter()
        .zip(cover.items())
        .map(|(s, c)| hide_item(s, &c, cfg))
        .collect::<Result<Vec<_>>>()?;
    ImageBatch::from_items(&items, Role::Stego)
}

/// Half-resolution secret estimate: the mean over embedding bands of
/// `(stego − cover) / (α·gain)`, recentred at 0.5 and clamped.
pub fn reveal(stego: &ImageBatch, cover: &ImageBatch, cfg: &HiderConfig) -> Result<ImageBatch> {
    if cfg.alpha == 0.0 {
        return Err(Error::contract("cannot reveal with alpha = 0"));
    }
    cfg.validate()?;
    check_pair(stego, cover, "reveal")?;
    let mut items = Vec::with_capacity(stego.len());
    for (s, c) in stego.items().iter().zip(cover.items()) {
        let (bs, bc) = (wavelet::dwt_haar(s)?, wavelet::dwt_haar(&c)?);
        let mut acc = Tensor::zeros(bs.ll.shape());
        for &b in &cfg.bands {
            let d = bs.band(b).sub(bc.band(b))?;
            acc = acc.add(&d.scale(1.0 / (cfg.alpha * cfg.gain(b))))?;
        }
        let n = cfg.bands.len() as f64;
        items.push(acc.map(|v| (v / n + 0.5).clamp(0.0, 1.0)));
    }
    ImageBatch::from_items(&items, Role::Revealed)
}

/// [`reveal`] brought back to full resolution by bilinear upsampling.
pub fn reveal_full(stego: &ImageBatch, cover: &ImageBatch, cfg: &HiderConfig) -> Result<ImageBatch> {
    let half = reveal(stego, cover, cfg)?;
    let items = half
        .items()
        .iter()
        .map(|t| Ok(tensor::upsample_bilinear2(t)?.map(|v| v.clamp(0.0, 1.0))))
        .collect::<Result<Vec<_>>>()?;
    ImageBatch::from_items(&items, Role::Revealed)
}

/// Trainable hider parameters on a tape: `α` and one gain per detail band.
#[derive(Clone, Copy, Debug)]
pub struct HiderVars {
    pub alpha: Var,
    pub gains: [Var; 3],
}

/// Taped hiding of one `C×H×W` pair.
pub fn hide_taped(
    tape: &mut Tape,
    secret: Var,
    cover: Var,
    v: &HiderVars,
    bands: &[Band],
) -> Result<Var> {
    if tape.shape(secret) != tape.shape(cover) {
        return Err(Error::shapes("hide", tape.shape(secret), tape.shape(cover)));
    }
    let centred = tape.add_const(secret, -0.5);
    let payload = tape.avg_pool2(centred)?;
    let mut parts = [cover; 4];
    for (slot, b) in Band::ALL.into_iter().enumerate() {
        let mut band = tape.haar_band(cover, b)?;
        if bands.contains(&b) {
            let gi = DETAIL_BANDS
                .iter()
                .position(|&d| d == b)
                .ok_or_else(|| Error::contract("the LL band is never used for embedding"))?;
            let k = tape.mul(v.alpha, v.gains[gi])?;
            let add = tape.scale_by(payload, k)?;
            band = tape.add(band, add)?;
        }
        parts[slot] = band;
    }
    let img = tape.haar_synth(parts)?;
    Ok(tape.clamp(img, 0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(f: impl Fn(usize) -> f64, role: Role) -> ImageBatch {
        ImageBatch::new(Tensor::from_fn(&[2, 3, 8, 8], f), role).unwrap()
    }

    #[test]
    fn centred_secret_leaves_cover_untouched() {
        let cover = batch(|i| 0.2 + 0.6 * ((i * 7) % 13) as f64 / 13.0, Role::Cover);
        let secret = batch(|_| 0.5, Role::Secret);
        let stego = hide(&secret, &cover, &HiderConfig::default()).unwrap();
        assert!(stego.tensor().max_abs_diff(cover.tensor()) < 1e-15);
    }

    #[test]
    fn reveal_inverts_unclamped_hide() {
        let cover = batch(|i| 0.4 + 0.2 * ((i as f64) * 0.37).sin(), Role::Cover);
        let secret = batch(|i| 0.5 + 0.4 * ((i as f64) * 0.11).cos(), Role::Secret);
        let cfg = HiderConfig::with_alpha(0.05);
        let stego = hide(&secret, &cover, &cfg).unwrap();
        let back = reveal(&stego, &cover, &cfg).unwrap();
        for (i, s) in secret.items().iter().enumerate() {
            let expect = tensor::avg_pool2(s).unwrap();
            assert!(back.item(i).max_abs_diff(&expect) < 1e-6);
        }
    }

    #[test]
    fn identical_stego_reveals_grey() {
        let cover = batch(|i| (i % 5) as f64 / 5.0, Role::Cover);
        let r = reveal(&cover, &cover, &HiderConfig::default()).unwrap();
        assert!(r.tensor().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn config_contracts() {
        assert!(HiderConfig::with_alpha(0.0).validate().is_err());
        let cfg = HiderConfig {
            bands: vec![],
            ..HiderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
