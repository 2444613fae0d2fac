//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::detector::{self, DetectorConfig, DetectorVars, HeadCount, Variant};
use crate::error::{Error, Result};
use crate::hider::{self, HiderConfig, HiderVars};
use crate::lfad::{self, FilterMode, TAPS};
use crate::params::{Binding, ParamSet};
use crate::sda::{self, AlignmentConfig, AttentionMetric, FeatureMetric, SdaPreset};
use crate::sfda::{self, AttnVars, DecoderParams, DecoderVars, DiffAttnConfig, DiffAttnParams, LayerInputs};
use crate::tensor::Tensor;
use crate::trainer::Model;
use crate::wavelet::Band;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Lower bound on the denominator of the relative error.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic.sub(numeric).map(|d| d.norm()).unwrap_or(f64::INFINITY);
    diff / analytic.norm().max(numeric.norm()).max(NORM_FLOOR)
}

/// Central differences of `f` with respect to every entry of every input.
pub fn numeric_gradient(inputs: &[Tensor], f: &impl Fn(&[Tensor]) -> Result<f64>) -> Result<Vec<Tensor>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for k in 0..inputs[i].numel() {
            let x = inputs[i].data()[k];
            work[i].data_mut()[k] = x + FD_STEP;
            let up = f(&work)?;
            work[i].data_mut()[k] = x - FD_STEP;
            let down = f(&work)?;
            work[i].data_mut()[k] = x;
            g.data_mut()[k] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compare `grad_fn` against central differences of `value_fn`; reports the
/// largest per-input relative error.
pub fn check_with(
    name: &str,
    inputs: &[Tensor],
    value_fn: impl Fn(&[Tensor]) -> Result<f64>,
    grad_fn: impl Fn(&[Tensor]) -> Result<Vec<Tensor>>,
) -> Result<CheckReport> {
    let analytic = grad_fn(inputs)?;
    if analytic.len() != inputs.len() {
        return Err(Error::contract(format!(
            "{name}: {} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    let numeric = numeric_gradient(inputs, &value_fn)?;
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err,
        passed: max_rel_err <= TOLERANCE,
    })
}

/// Fixed pseudo-random weights that turn a tensor output into a scalar.
fn projection(shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().fold(17, |a, &d| a * 31 + d as u64));
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn scalarise(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(tape.sum(out));
    }
    let r = tape.constant(projection(tape.shape(out)));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

/// Check a taped computation; non-scalar outputs are reduced with fixed
/// random weights.
pub fn check_taped(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    let run = |xs: &[Tensor], leaves: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|t| if leaves { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let out = build(&mut tape, &vars)?;
        let loss = scalarise(&mut tape, out)?;
        Ok((tape, vars, loss))
    };
    check_with(
        name,
        inputs,
        |xs| {
            let (tape, _, loss) = run(xs, false)?;
            Ok(tape.item(loss))
        },
        |xs| {
            let (tape, vars, loss) = run(xs, true)?;
            tape.gradient_of(loss, &vars)
        },
    )
}

/// Check a computation over free inputs plus every tensor of a parameter set.
pub fn check_params(
    name: &str,
    inputs: &[Tensor],
    params: &ParamSet,
    build: impl Fn(&mut Tape, &[Var], &Binding) -> Result<Var>,
) -> Result<CheckReport> {
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut all = inputs.to_vec();
    for n in &names {
        all.push(params.get(n)?);
    }
    let k = inputs.len();
    let run = |xs: &[Tensor], leaves: bool| -> Result<(Tape, Vec<Var>, Binding, Var)> {
        let mut ps = ParamSet::new();
        for (n, t) in names.iter().zip(&xs[k..]) {
            ps.insert(n.clone(), t.clone());
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs[..k]
            .iter()
            .map(|t| if leaves { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let b = ps.bind(&mut tape, |_| leaves);
        let out = build(&mut tape, &vars, &b)?;
        let loss = scalarise(&mut tape, out)?;
        Ok((tape, vars, b, loss))
    };
    check_with(
        name,
        &all,
        |xs| {
            let (tape, _, _, loss) = run(xs, false)?;
            Ok(tape.item(loss))
        },
        |xs| {
            let (tape, vars, b, loss) = run(xs, true)?;
            let mut grads = tape.gradient_of(loss, &vars)?;
            let mut g = tape.backward(loss)?;
            grads.extend(b.collect(&mut g).into_iter().map(|(_, t)| t));
            Ok(grads)
        },
    )
}

/// Names of the operations covered by [`suite`], in order.
pub const SUITE_OPS: [&str; 33] = [
    "matmul",
    "transpose_reshape",
    "softmax_rows",
    "conv2d_3x3",
    "rms_normalize",
    "gelu",
    "sigmoid",
    "exp",
    "ln",
    "clamp",
    "avg_pool2",
    "row_broadcast",
    "add_channel",
    "concat",
    "scale_by",
    "expand_parent",
    "dwt_haar",
    "idwt_haar",
    "lfad_predict",
    "hfad_predict",
    "lfad_apply",
    "effective_lambda",
    "wfda",
    "diff_attention",
    "multi_head",
    "sfda_block",
    "coral",
    "mmd",
    "sda_distance",
    "attention_alignment",
    "cls_loss",
    "hider",
    "composed_loss",
];

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn small_attn(wfda: bool) -> DiffAttnConfig {
    DiffAttnConfig::standard(4, 2, wfda).unwrap()
}

fn attn_set(rng: &mut ChaCha8Rng, cfg: &DiffAttnConfig) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    DiffAttnParams::random(cfg.clone(), rng)?.store("a", &mut ps);
    Ok(ps)
}

fn decoder_set(rng: &mut ChaCha8Rng, cfg: &DiffAttnConfig) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    let mut d = DecoderParams::random(cfg.clone(), rng)?;
    d.norm_x = uniform(rng, &[cfg.channels], 0.5, 1.5);
    d.norm_xbar = uniform(rng, &[cfg.channels], 0.5, 1.5);
    d.ff_b1 = randn(rng, d.ff_b1.shape()).scale(0.1);
    d.store("a", &mut ps);
    Ok(ps)
}

/// Run one check per entry of [`SUITE_OPS`].
pub fn suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::with_capacity(SUITE_OPS.len());

    out.push(check_taped("matmul", &[randn(r, &[3, 4]), randn(r, &[4, 2])], |t, v| {
        t.matmul(v[0], v[1])
    })?);
    out.push(check_taped("transpose_reshape", &[randn(r, &[2, 3, 4])], |t, v| {
        let a = t.to_tokens(v[0])?;
        let a = t.transpose(a)?;
        let a = t.reshape(a, &[4, 6])?;
        let b = t.from_tokens(a, 2, 2)?;
        t.reshape(b, &[6, 4])
    })?);
    out.push(check_taped("softmax_rows", &[randn(r, &[3, 5])], |t, v| t.softmax_rows(v[0]))?);
    out.push(check_taped(
        "conv2d_3x3",
        &[randn(r, &[2, 5, 4]), randn(r, &[3, 2, 3, 3])],
        |t, v| t.conv2d_3x3(v[0], v[1]),
    )?);
    out.push(check_taped(
        "rms_normalize",
        &[randn(r, &[3, 4]), uniform(r, &[4], 0.5, 1.5)],
        |t, v| t.rms_normalize(v[0], Some(v[1])),
    )?);
    out.push(check_taped("gelu", &[randn(r, &[3, 4])], |t, v| Ok(t.gelu(v[0])))?);
    out.push(check_taped("sigmoid", &[randn(r, &[3, 4])], |t, v| Ok(t.sigmoid(v[0])))?);
    out.push(check_taped("exp", &[randn(r, &[3, 4])], |t, v| Ok(t.exp(v[0])))?);
    out.push(check_taped("ln", &[uniform(r, &[3, 4], 0.5, 2.0)], |t, v| t.ln(v[0]))?);
    out.push(check_taped("clamp", &[uniform(r, &[3, 4], -0.9, 0.9)], |t, v| {
        Ok(t.clamp(v[0], -1.0, 1.0))
    })?);
    out.push(check_taped("avg_pool2", &[randn(r, &[2, 4, 6])], |t, v| t.avg_pool2(v[0]))?);
    out.push(check_taped(
        "row_broadcast",
        &[randn(r, &[4, 3]), randn(r, &[3]), randn(r, &[3])],
        |t, v| {
            let a = t.add_row(v[0], v[1])?;
            let m = t.mean_rows(v[0])?;
            let a = t.sub_row(a, m)?;
            t.mul_row(a, v[2])
        },
    )?);
    out.push(check_taped("add_channel", &[randn(r, &[3, 2, 2]), randn(r, &[3])], |t, v| {
        t.add_channel(v[0], v[1])
    })?);
    out.push(check_taped(
        "concat",
        &[randn(r, &[2, 3]), randn(r, &[2, 2]), randn(r, &[1, 5])],
        |t, v| {
            let c = t.concat_cols(&[v[0], v[1]])?;
            t.concat_rows(&[c, v[2]])
        },
    )?);
    out.push(check_taped("scale_by", &[randn(r, &[2, 3]), randn(r, &[])], |t, v| {
        t.scale_by(v[0], v[1])
    })?);
    out.push(check_taped("expand_parent", &[randn(r, &[4, 4])], |t, v| {
        t.expand_parent(v[0], 4, 4)
    })?);
    out.push(check_taped("dwt_haar", &[randn(r, &[2, 4, 4])], |t, v| {
        let bands = Band::ALL.map(|b| t.haar_band(v[0], b));
        let bands = bands.into_iter().collect::<Result<Vec<_>>>()?;
        let flat = bands
            .into_iter()
            .map(|b| t.to_tokens(b))
            .collect::<Result<Vec<_>>>()?;
        t.concat_cols(&flat)
    })?);
    let bands: Vec<Tensor> = (0..4).map(|_| randn(r, &[2, 2, 3])).collect();
    out.push(check_taped("idwt_haar", &bands, |t, v| t.haar_synth([v[0], v[1], v[2], v[3]]))?);
    let feat = randn(r, &[3, 4, 4]);
    let predictor = randn(r, &[TAPS, 3, 3, 3]).scale(0.3);
    out.push(check_taped("lfad_predict", &[feat.clone(), predictor.clone()], |t, v| {
        lfad::predict_filters_taped(t, v[0], v[1], FilterMode::Lowpass)
    })?);
    out.push(check_taped("hfad_predict", &[feat.clone(), predictor], |t, v| {
        lfad::predict_filters_taped(t, v[0], v[1], FilterMode::Highpass)
    })?);
    out.push(check_taped(
        "lfad_apply",
        &[feat, uniform(r, &[TAPS, 4, 4], 0.0, 0.2)],
        |t, v| t.apply_filters(v[0], v[1]),
    )?);

    let acfg = small_attn(true);
    let ps = attn_set(r, &acfg)?;
    out.push(check_params("effective_lambda", &[], &ps, |t, _, b| {
        let v = AttnVars::bind(b, "a", &acfg)?;
        sfda::lambda_taped(t, &v, acfg.lambda_init)
    })?);
    let x_map = randn(r, &[4, 4, 4]);
    out.push(check_params("wfda", std::slice::from_ref(&x_map), &ps, |t, x, b| {
        let v = AttnVars::bind(b, "a", &acfg)?;
        let bands = sfda::band_tokens(t, x[0])?;
        let maps = v
            .heads
            .iter()
            .map(|h| sfda::wfda_taped(t, &bands, h.bands.as_ref().unwrap(), acfg.head_dim, (4, 4)))
            .collect::<Result<Vec<_>>>()?;
        t.concat_rows(&maps)
    })?);
    let xbar = randn(r, &[16, 4]);
    out.push(check_params("diff_attention", &[x_map.clone(), xbar.clone()], &ps, |t, x, b| {
        let v = AttnVars::bind(b, "a", &acfg)?;
        let xt = t.to_tokens(x[0])?;
        let inp = LayerInputs::prepare(t, xt, x[1], Some(x[0]), &acfg)?;
        let lambda = sfda::lambda_taped(t, &v, acfg.lambda_init)?;
        let mut maps = Vec::new();
        for h in &v.heads {
            let pr = sfda::project_taped(t, &inp, h)?;
            maps.push(sfda::head_map_taped(t, &inp, h, &pr, lambda, &acfg)?.1);
        }
        t.concat_rows(&maps)
    })?);
    out.push(check_params("multi_head", &[x_map.clone(), xbar.clone()], &ps, |t, x, b| {
        let v = AttnVars::bind(b, "a", &acfg)?;
        let xt = t.to_tokens(x[0])?;
        Ok(sfda::multi_head_taped(t, xt, x[1], Some(x[0]), &v, &acfg)?.out)
    })?);
    let dps = decoder_set(r, &acfg)?;
    out.push(check_params("sfda_block", &[x_map, xbar], &dps, |t, x, b| {
        let v = DecoderVars::bind(b, "a", &acfg)?;
        let xt = t.to_tokens(x[0])?;
        Ok(sfda::decoder_taped(t, xt, x[1], Some(x[0]), &v, &acfg)?.out)
    })?);

    let fa = randn(r, &[6, 3]);
    let fb = randn(r, &[6, 3]).scale(1.3);
    out.push(check_taped("coral", &[fa.clone(), fb.clone()], |t, v| sda::coral_taped(t, v[0], v[1]))?);
    out.push(check_taped("mmd", &[fa.clone(), fb.clone()], |t, v| sda::mmd_taped(t, v[0], v[1]))?);
    let near = fa.add(&randn(r, &[6, 3]).scale(0.2))?;
    out.push(check_taped("sda_distance", &[fa, near], |t, v| {
        Ok(sda::sda_distance_taped(t, v[0], v[1], sda::DEFAULT_GAMMA)?.value)
    })?);
    let maps: Vec<Tensor> = (0..8).map(|_| uniform(r, &[3, 3], -0.5, 1.0)).collect();
    out.push(check_taped("attention_alignment", &maps, |t, v| {
        let a = vec![vec![v[0], v[1]], vec![v[2], v[3]]];
        let b = vec![vec![v[4], v[5]], vec![v[6], v[7]]];
        let fro = sda::attention_alignment_taped(t, &a, &b, AttentionMetric::Frobenius, 10.0)?.0;
        let l2 = sda::attention_alignment_taped(t, &a, &b, AttentionMetric::L2, 10.0)?.0;
        let s = sda::attention_alignment_taped(t, &a, &b, AttentionMetric::Sda, 1.0)?.0;
        let fl = sda::feature_alignment_taped(t, v[0], v[4], FeatureMetric::L2, 10.0)?.0;
        t.add_all(&[fro, l2, s, fl])
    })?);
    let probs: Vec<Tensor> = (0..8).map(|_| Tensor::scalar(r.random_range(0.1..0.9))).collect();
    out.push(check_taped("cls_loss", &probs, |t, v| {
        detector::cls_loss_taped(t, &v[..4], &v[4..], &[1.0, 0.0, 0.0, 1.0])
    })?);
    let hider_inputs = [
        uniform(r, &[3, 4, 4], 0.2, 0.8),
        uniform(r, &[3, 4, 4], 0.3, 0.7),
        Tensor::scalar(0.1),
        Tensor::scalar(1.0),
        Tensor::scalar(0.8),
        Tensor::scalar(1.2),
    ];
    out.push(check_taped("hider", &hider_inputs, |t, v| {
        let hv = HiderVars {
            alpha: v[2],
            gains: [v[3], v[4], v[5]],
        };
        hider::hide_taped(t, v[0], v[1], &hv, &hider::DETAIL_BANDS)
    })?);
    out.push(composed_check(r)?);

    debug_assert_eq!(out.len(), SUITE_OPS.len());
    Ok(out)
}

/// Joint-stage loss of a tiny detector on 8×8 images, differentiated with
/// respect to every parameter including the hider, with alignment sharpness 1.
fn composed_check(r: &mut ChaCha8Rng) -> Result<CheckReport> {
    let cfg = DetectorConfig {
        width: 4,
        image_size: 8,
        heads: HeadCount::Fixed(2),
        variant: Variant::Full,
        ..DetectorConfig::default()
    };
    let model = Model::new(cfg.clone(), &HiderConfig::default(), r)?;
    let secrets = [uniform(r, &[3, 8, 8], 0.2, 0.8), uniform(r, &[3, 8, 8], 0.2, 0.8)];
    let covers = [uniform(r, &[3, 8, 8], 0.3, 0.7), uniform(r, &[3, 8, 8], 0.3, 0.7)];
    let labels = [1.0, 0.0];
    let align = AlignmentConfig {
        gamma: 1.0,
        ..SdaPreset::default().config()
    };
    let mut inputs = secrets.to_vec();
    inputs.extend(covers.iter().cloned());
    check_params("composed_loss", &inputs, model.params(), |t, x, b| {
        let dv = DetectorVars::bind(b, &cfg)?;
        let hv = HiderVars {
            alpha: b.get("hider.alpha")?,
            gains: [b.get("hider.gain_lh")?, b.get("hider.gain_hl")?, b.get("hider.gain_hh")?],
        };
        let (mut y, mut yp, mut fs, mut ft, mut ms, mut mt) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for k in 0..2 {
            let stego = hider::hide_taped(t, x[k], x[k + 2], &hv, &hider::DETAIL_BANDS)?;
            let l = detector::lift_taped(t, stego, &dv, &cfg)?;
            let s = detector::secret_taped(t, x[k], &dv, &cfg)?;
            y.push(detector::classify_taped(t, l.features, dv.head_m)?);
            yp.push(detector::classify_taped(t, s.features, dv.head_mp)?);
            fs.push(l.features);
            ft.push(s.features);
            ms.push(l.maps);
            mt.push(s.maps);
        }
        let cls = detector::cls_loss_taped(t, &y, &yp, &labels)?;
        let l = sda::sda_loss_taped(t, &fs, &ft, &ms, &mt, &align)?;
        let w = t.scale(l.total, 0.5);
        t.add(cls, w)
    })
}
