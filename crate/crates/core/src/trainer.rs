//! Three-stage training: classification, alignment, joint fine-tuning.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::detector::{self, DetectorConfig, DetectorParams, DetectorVars, Lifted};
use crate::error::{Error, Result};
use crate::hider::{self, HiderConfig, HiderVars, ImageBatch, Role};
use crate::lod;
use crate::params::ParamSet;
use crate::sda::{self, AlignmentConfig, SdaPreset};
use crate::tensor::Tensor;
use crate::wavelet::Band;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const HIDER_ALPHA: &str = "hider.alpha";
const HIDER_GAINS: [&str; 3] = ["hider.gain_lh", "hider.gain_hl", "hider.gain_hh"];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: [usize; 3],
    pub lr: [f64; 3],
    pub batch: usize,
    pub gamma_s: f64,
    pub seed: u64,
    /// `None` disables the low-rank split.
    pub lod_residual_rank: Option<usize>,
    pub alignment: AlignmentConfig,
    /// Evaluate every branch at every step even when its output is unused.
    pub compute_all_branches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: [10, 5, 5],
            lr: [1e-3, 1e-5, 1e-6],
            batch: 8,
            gamma_s: 10.0,
            seed: 0,
            lod_residual_rank: Some(lod::DEFAULT_RESIDUAL_RANK),
            alignment: SdaPreset::default().config(),
            compute_all_branches: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs.contains(&0) {
            return Err(Error::contract("every stage needs at least one epoch"));
        }
        if self.lr.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::contract("learning rates must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        if !(self.gamma_s > 0.0) {
            return Err(Error::contract("schedule sharpness must be positive"));
        }
        if self.lod_residual_rank == Some(0) {
            return Err(Error::contract("residual rank must be at least 1"));
        }
        self.alignment.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleState {
    pub step: usize,
    pub total: usize,
}

impl ScheduleState {
    pub fn new(step: usize, total: usize) -> Result<Self> {
        if total == 0 || step > total {
            return Err(Error::contract(format!("schedule step {step} of {total}")));
        }
        Ok(ScheduleState { step, total })
    }
}

/// `2 / (1 + exp(−γ_s · s_t / s_T)) − 1`.
pub fn mu(state: ScheduleState, gamma_s: f64) -> f64 {
    let x = gamma_s * state.step as f64 / state.total as f64;
    2.0 / (1.0 + (-x).exp()) - 1.0
}

pub fn total_loss(l_cls: f64, l_sda: f64, mu: f64) -> f64 {
    l_cls + mu * l_sda
}

/// First and second moments per storage key plus the shared step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub t: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every listed tensor.
pub fn adam_step(params: &mut ParamSet, grads: &[(String, Tensor)], lr: f64, state: &mut AdamState) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    for (key, g) in grads {
        let p = params.storage_mut(key)?;
        if p.shape() != g.shape() {
            return Err(Error::contract(format!(
                "gradient shape {:?} for `{key}` of shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let (m, v) = state
            .moments
            .entry(key.clone())
            .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        if m.shape() != g.shape() {
            return Err(Error::contract(format!("moment shape mismatch for `{key}`")));
        }
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (((x, mi), vi), &gi) in pd.iter_mut().zip(md).zip(vd).zip(g.data()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Paired training examples: secret `k` is hidden in cover `k`.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub secrets: Vec<Tensor>,
    pub covers: Vec<Tensor>,
    /// 1 = forged, 0 = real.
    pub labels: Vec<u8>,
}

impl PairSet {
    pub fn validate(&self) -> Result<()> {
        let n = self.secrets.len();
        if n == 0 || self.covers.len() != n || self.labels.len() != n {
            return Err(Error::contract(format!(
                "{} secrets, {} covers, {} labels",
                n,
                self.covers.len(),
                self.labels.len()
            )));
        }
        let shape = self.secrets[0].shape();
        for t in self.secrets.iter().chain(&self.covers) {
            if t.shape() != shape {
                return Err(Error::shapes("pair_set", shape, t.shape()));
            }
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(Error::contract("labels must be 0 or 1"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Detector and hider parameters in one set.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub detector: DetectorParams,
    pub hider_bands: Vec<Band>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(cfg: DetectorConfig, hider: &HiderConfig, rng: &mut R) -> Result<Self> {
        hider.validate()?;
        let mut detector = DetectorParams::random(cfg, rng)?;
        detector.params.insert(HIDER_ALPHA, Tensor::scalar(hider.alpha));
        for (name, &g) in HIDER_GAINS.iter().zip(&hider.gains) {
            detector.params.insert(*name, Tensor::scalar(g));
        }
        Ok(Model {
            detector,
            hider_bands: hider.bands.clone(),
        })
    }

    /// Rebuild from stored parameters.
    pub fn from_params(cfg: DetectorConfig, hider_bands: Vec<Band>, params: ParamSet) -> Result<Self> {
        let m = Model {
            detector: DetectorParams { cfg, params },
            hider_bands,
        };
        let mut tape = Tape::new();
        let b = m.detector.params.bind(&mut tape, |_| false);
        DetectorVars::bind(&b, &m.detector.cfg)?;
        m.hider()?;
        Ok(m)
    }

    pub fn params(&self) -> &ParamSet {
        &self.detector.params
    }

    pub fn hider(&self) -> Result<HiderConfig> {
        let p = &self.detector.params;
        let mut gains = [0.0; 3];
        for (g, name) in gains.iter_mut().zip(HIDER_GAINS) {
            *g = p.get(name)?.item();
        }
        Ok(HiderConfig {
            alpha: p.get(HIDER_ALPHA)?.item(),
            gains,
            bands: self.hider_bands.clone(),
        })
    }

    /// Hide with the current hider, then score with the main head.
    pub fn score_pair(&self, secret: &Tensor, cover: &Tensor) -> Result<f64> {
        let h = self.hider()?;
        let s = ImageBatch::from_items(std::slice::from_ref(secret), Role::Secret)?;
        let c = ImageBatch::from_items(std::slice::from_ref(cover), Role::Cover)?;
        let stego = hider::hide(&s, &c, &h)?;
        detector::score(&stego.item(0), &self.detector)
    }
}

fn is_hider(name: &str) -> bool {
    name.starts_with("hider.")
}

fn in_lifting(name: &str) -> bool {
    ["enc.", "lfad.", "sfda."].iter().any(|p| name.starts_with(p))
}

/// Parameters updated in each stage.
pub fn trainable(stage: u8, name: &str) -> bool {
    match stage {
        1 => !is_hider(name),
        2 => in_lifting(name),
        _ => in_lifting(name) || name.starts_with("head_m.") || is_hider(name),
    }
}

/// One line of the metric log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub l_cls: f64,
    pub l_d: f64,
    pub l_a: f64,
    pub l_sda: f64,
    pub mu: f64,
    pub l_total: f64,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        format!(
            "{{\"stage\":{},\"epoch\":{},\"step\":{},\"L_CLS\":{},\"L_d\":{},\"L_a\":{},\"L_SDA\":{},\"mu\":{},\"L_total\":{}}}",
            self.stage, self.epoch, self.step, self.l_cls, self.l_d, self.l_a, self.l_sda, self.mu, self.l_total
        )
    }
}

/// Stage transitions reported to an observer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageEvent {
    /// Before the first step of the stage.
    Start(u8),
    /// After the last step of the stage.
    End(u8),
    /// After the low-rank split.
    Split,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    /// `μ` at every step of stage 3.
    pub mu_trace: Vec<f64>,
    /// The composite distance exponent was clamped at least once.
    pub exp_clamped: bool,
}

#[derive(Default, Clone, Copy)]
struct StepLosses {
    l_cls: f64,
    l_d: f64,
    l_a: f64,
    l_sda: f64,
    l_total: f64,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a PairSet,
    dcfg: DetectorConfig,
    bands: Vec<Band>,
    params: ParamSet,
    step: usize,
    exp_clamped: bool,
}

impl Trainer<'_> {
    /// The alignment actually usable for this variant: without attention
    /// maps the attention term is dropped.
    fn alignment(&self) -> AlignmentConfig {
        let mut a = self.cfg.alignment.clone();
        if self.dcfg.variant == detector::Variant::DirectLfad {
            a.aa = None;
        }
        a
    }

    fn batch_step(&mut self, stage: u8, idx: &[usize], mu: f64, adam: &mut AdamState) -> Result<StepLosses> {
        let align = self.alignment();
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, |n| trainable(stage, n));
        let dv = DetectorVars::bind(&b, &self.dcfg)?;
        let target = self.params.bind(&mut tape, |_| false);
        let tv = DetectorVars::bind(&target, &self.dcfg)?;
        let hv = HiderVars {
            alpha: b.get(HIDER_ALPHA)?,
            gains: [b.get(HIDER_GAINS[0])?, b.get(HIDER_GAINS[1])?, b.get(HIDER_GAINS[2])?],
        };
        let all = self.cfg.compute_all_branches;
        let need_secret = stage != 1 || all;
        let need_cls = stage != 2 || all;

        let (mut y, mut yp, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        let (mut fs, mut ft, mut ms, mut mt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &k in idx {
            let s = tape.constant(self.data.secrets[k].clone());
            let c = tape.constant(self.data.covers[k].clone());
            let stego = hider::hide_taped(&mut tape, s, c, &hv, &self.bands)?;
            let lifted = detector::lift_taped(&mut tape, stego, &dv, &self.dcfg)?;
            let secret: Option<Lifted> = if need_secret {
                Some(detector::secret_taped(&mut tape, s, &tv, &self.dcfg)?)
            } else {
                None
            };
            if need_cls {
                y.push(detector::classify_taped(&mut tape, lifted.features, dv.head_m)?);
                let src = match (stage, &secret) {
                    (3, Some(sb)) => sb.features,
                    _ => lifted.features,
                };
                yp.push(detector::classify_taped(&mut tape, src, dv.head_mp)?);
                labels.push(f64::from(self.data.labels[k]));
            }
            if let Some(sb) = secret {
                fs.push(lifted.features);
                ft.push(sb.features);
                ms.push(if align.aa_includes_wfda { lifted.maps } else { lifted.base_maps });
                mt.push(sb.maps);
            }
        }

        let mut out = StepLosses::default();
        let cls = if need_cls {
            let l = detector::cls_loss_taped(&mut tape, &y, &yp, &labels)?;
            out.l_cls = tape.item(l);
            Some(l)
        } else {
            None
        };
        let sda_var = if stage != 1 && align.is_enabled() {
            let l = sda::sda_loss_taped(&mut tape, &fs, &ft, &ms, &mt, &align)?;
            self.exp_clamped |= l.clamped;
            out.l_d = l.l_d.map_or(0.0, |v| tape.item(v));
            out.l_a = l.l_a.map_or(0.0, |v| tape.item(v));
            out.l_sda = tape.item(l.total);
            Some(l.total)
        } else {
            None
        };
        let loss: Var = match stage {
            1 => cls.unwrap(),
            2 => sda_var.ok_or_else(|| Error::contract("alignment stage without an alignment loss"))?,
            _ => match sda_var {
                Some(s) => {
                    let w = tape.scale(s, mu);
                    tape.add(cls.unwrap(), w)?
                }
                None => cls.unwrap(),
            },
        };
        out.l_total = tape.item(loss);
        if !out.l_total.is_finite() {
            return Err(Error::Numeric {
                stage,
                step: self.step,
                detail: format!("loss is {}", out.l_total),
            });
        }
        let mut grads = tape.backward(loss)?;
        let grads = b.collect(&mut grads);
        if let Some((k, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric {
                stage,
                step: self.step,
                detail: format!("non-finite gradient for `{k}`"),
            });
        }
        adam_step(&mut self.params, &grads, self.cfg.lr[usize::from(stage) - 1], adam)?;
        Ok(out)
    }

    fn split(&mut self, residual: usize) -> Result<()> {
        for name in DetectorParams::lod_allowlist(&self.dcfg)? {
            let shape = self.params.get(&name)?.shape().to_vec();
            if let Some(r) = lod::residual_rank_for(&shape, residual) {
                self.params.split(&name, r)?;
            }
        }
        Ok(())
    }
}

fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

pub fn run_training(cfg: &TrainConfig, data: &PairSet, model: Model) -> Result<TrainOutcome> {
    run_training_observed(cfg, data, model, |_, _| {})
}

/// [`run_training`] with a callback at stage transitions.
pub fn run_training_observed(
    cfg: &TrainConfig,
    data: &PairSet,
    model: Model,
    mut observe: impl FnMut(StageEvent, &ParamSet),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let Model { detector, hider_bands } = model;
    let mut tr = Trainer {
        cfg,
        data,
        dcfg: detector.cfg.clone(),
        bands: hider_bands,
        params: detector.params,
        step: 0,
        exp_clamped: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let per_epoch = data.len().div_ceil(cfg.batch);
    let stage3_total = cfg.epochs[2] * per_epoch;
    let mut log = Vec::new();
    let mut mu_trace = Vec::with_capacity(stage3_total);

    for stage in 1..=3u8 {
        if stage == 2 {
            if let Some(r) = cfg.lod_residual_rank {
                tr.split(r)?;
                observe(StageEvent::Split, &tr.params);
            }
            if !tr.alignment().is_enabled() {
                continue;
            }
        }
        observe(StageEvent::Start(stage), &tr.params);
        let mut adam = AdamState::new();
        let mut s3 = 0usize;
        for epoch in 1..=cfg.epochs[usize::from(stage) - 1] {
            let mut acc = StepLosses::default();
            let mut last_mu = 0.0;
            let bs = batches(data.len(), cfg.batch, &mut rng);
            for idx in &bs {
                let m = if stage == 3 {
                    let v = mu(ScheduleState::new(s3, stage3_total)?, cfg.gamma_s);
                    mu_trace.push(v);
                    s3 += 1;
                    v
                } else {
                    0.0
                };
                last_mu = m;
                let l = tr.batch_step(stage, idx, m, &mut adam)?;
                tr.step += 1;
                acc.l_cls += l.l_cls;
                acc.l_d += l.l_d;
                acc.l_a += l.l_a;
                acc.l_sda += l.l_sda;
                acc.l_total += l.l_total;
            }
            let n = bs.len() as f64;
            log.push(EpochRecord {
                stage,
                epoch,
                step: tr.step,
                l_cls: acc.l_cls / n,
                l_d: acc.l_d / n,
                l_a: acc.l_a / n,
                l_sda: acc.l_sda / n,
                mu: last_mu,
                l_total: acc.l_total / n,
            });
            log::info!("{}", log.last().unwrap().to_json());
        }
        observe(StageEvent::End(stage), &tr.params);
    }
    let model = Model {
        detector: DetectorParams {
            cfg: tr.dcfg,
            params: tr.params,
        },
        hider_bands: tr.bands,
    };
    Ok(TrainOutcome {
        model,
        log,
        mu_trace,
        exp_clamped: tr.exp_clamped,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STGF";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamSet) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in params.storage() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(buf: &[u8], pos: &mut usize) -> Result<u64> {
    let bytes = buf
        .get(*pos..*pos + 8)
        .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", *pos)))?;
    *pos += 8;
    Ok(u64::from_le_bytes(bytes.try_into().unwrap()))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamSet> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing STGF header".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut pos = 8;
    let mut items = Vec::new();
    while pos < buf.len() {
        let len = read_u64(&buf, &mut pos)? as usize;
        let name = buf
            .get(pos..pos + len)
            .ok_or_else(|| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        pos += len;
        let rank = read_u64(&buf, &mut pos)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("`{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&buf, &mut pos).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = buf
            .get(pos..pos + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated data for `{name}`")))?;
        pos += 8 * n;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        items.push((name, t));
    }
    ParamSet::from_storage(items)
}
