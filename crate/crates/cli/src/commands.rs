use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stegalift::detector::Variant;
use stegalift::gradcheck::{self, CheckReport};
use stegalift::hider::{self, ImageBatch, Role};
use stegalift::metrics;
use stegalift::trainer::{self, EpochRecord, Model, PairSet};
use stegalift::{lod, Tensor};

use crate::config::{ConfigError, RunConfig};
use crate::imageio::{load_png, save_png};
use crate::manifest::Manifest;
use crate::synth::{self, SynthConfig};

pub const SPLITS: [&str; 2] = ["train", "test"];
pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    GenData,
    Hide,
    Train,
    Eval,
    Ablate,
    Gradcheck,
}

/// At least one gradient check exceeded the tolerance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradcheckFailed(pub Vec<String>);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed for: {}", self.0.join(", "))
    }
}

impl std::error::Error for GradcheckFailed {}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.manifest"))
}

pub fn stego_manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.stego.manifest"))
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, cfg.to_text()).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth_config(cfg: &RunConfig) -> SynthConfig {
    SynthConfig {
        image_size: cfg.image_size,
        channels: cfg.channels,
    }
}

pub fn gen_data(cfg: &RunConfig) -> anyhow::Result<String> {
    cfg.validate()?;
    let root = &cfg.data_dir;
    prepare_out(root, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summary = String::new();
    for (split, n) in SPLITS.into_iter().zip([cfg.n_train, cfg.n_test]) {
        let samples = synth::generate(&synth_config(cfg), n, &mut rng);
        fs::create_dir_all(root.join(split))?;
        let mut m = Manifest::default();
        let names: Vec<(String, String)> = (0..n)
            .map(|k| (format!("{split}/{k:05}_secret.png"), format!("{split}/{k:05}_cover.png")))
            .collect();
        for (s, (sn, cn)) in samples.iter().zip(&names) {
            m.push(sn.clone(), s.label, Role::Secret);
            m.push(cn.clone(), s.label, Role::Cover);
        }
        samples.par_iter().zip(&names).try_for_each(|(s, (sn, cn))| {
            save_png(&root.join(sn), &s.secret)?;
            save_png(&root.join(cn), &s.cover)
        })?;
        m.write(&manifest_path(root, split))?;
        let fake = samples.iter().filter(|s| s.label == 1).count();
        writeln!(summary, "{split}: {} real, {fake} fake", n - fake)?;
    }
    Ok(summary)
}

/// Secret/cover pairs of one split, read back from 8-bit files.
pub fn load_pairs(cfg: &RunConfig, split: &str) -> anyhow::Result<PairSet> {
    let m = Manifest::read(&manifest_path(&cfg.data_dir, split))?;
    let pairs = m.pairs(&cfg.data_dir)?;
    let loaded: Vec<(Tensor, Tensor)> = pairs
        .par_iter()
        .map(|p| Ok((load_png(&p.secret, cfg.channels)?, load_png(&p.cover, cfg.channels)?)))
        .collect::<anyhow::Result<_>>()?;
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if let Some((s, _)) = loaded.iter().find(|(s, c)| s.shape() != want || c.shape() != want) {
        return Err(ConfigError(format!("{split} images are {:?}, config expects {want:?}", s.shape())).into());
    }
    let (secrets, covers) = loaded.into_iter().unzip();
    Ok(PairSet {
        secrets,
        covers,
        labels: pairs.iter().map(|p| p.label).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetricRow {
    pub pair: String,
    pub metric: String,
    pub mean: f64,
    pub min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HideReport {
    pub alpha: f64,
    pub pairs: usize,
    pub rows: Vec<PairMetricRow>,
}

fn summarize(pair: &str, metric: &str, v: &[f64]) -> PairMetricRow {
    PairMetricRow {
        pair: pair.into(),
        metric: metric.into(),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

/// PSNR (capped for logging) and SSIM of every item pair.
pub fn pair_metrics(a: &[Tensor], b: &[Tensor]) -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    let rows: Vec<(f64, f64)> = a
        .par_iter()
        .zip(b)
        .map(|(x, y)| Ok((metrics::psnr_for_log(metrics::psnr_item(x, y)?), metrics::ssim_item(x, y)?)))
        .collect::<stegalift::Result<_>>()?;
    Ok(rows.into_iter().unzip())
}

pub fn hide(cfg: &RunConfig) -> anyhow::Result<HideReport> {
    cfg.validate()?;
    let data: Vec<PairSet> = SPLITS.iter().map(|s| load_pairs(cfg, s)).collect::<anyhow::Result<_>>()?;
    let out = &cfg.out_dir;
    prepare_out(out, cfg)?;
    let hcfg = cfg.hider();
    let (mut secrets, mut covers, mut stegos) = (Vec::new(), Vec::new(), Vec::new());
    for (split, set) in SPLITS.iter().zip(data) {
        let s = ImageBatch::from_items(&set.secrets, Role::Secret)?;
        let c = ImageBatch::from_items(&set.covers, Role::Cover)?;
        let stego = hider::hide(&s, &c, &hcfg)?.items();
        fs::create_dir_all(out.join("stego").join(split))?;
        let names: Vec<String> = (0..stego.len()).map(|k| format!("stego/{split}/{k:05}.png")).collect();
        stego
            .par_iter()
            .zip(&names)
            .try_for_each(|(t, n)| save_png(&out.join(n), t))?;
        let mut m = Manifest::default();
        for (n, &l) in names.iter().zip(&set.labels) {
            m.push(n.clone(), l, Role::Stego);
        }
        m.write(&stego_manifest_path(out, split))?;
        let back: Vec<Tensor> = names
            .par_iter()
            .map(|n| load_png(&out.join(n), cfg.channels))
            .collect::<anyhow::Result<_>>()?;
        secrets.extend(set.secrets);
        covers.extend(set.covers);
        stegos.extend(back);
    }
    let (cp, cs) = pair_metrics(&covers, &stegos)?;
    let (sp, ss) = pair_metrics(&secrets, &stegos)?;
    let report = HideReport {
        alpha: hcfg.alpha,
        pairs: stegos.len(),
        rows: vec![
            summarize("cover/stego", "psnr", &cp),
            summarize("cover/stego", "ssim", &cs),
            summarize("secret/stego", "psnr", &sp),
            summarize("secret/stego", "ssim", &ss),
        ],
    };
    write_json(&out.join("hide.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub auc: f64,
    pub acc: f64,
    pub ap: f64,
    pub eer: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

/// Score every pair with the model's own hider and main head.
pub fn evaluate(model: &Model, data: &PairSet) -> anyhow::Result<EvalRecord> {
    let n_fake = data.labels.iter().filter(|&&l| l == 1).count();
    let n_real = data.len() - n_fake;
    if n_fake == 0 || n_real == 0 {
        return Err(stegalift::Error::Contract(format!(
            "evaluation needs both classes, got {n_real} real and {n_fake} fake"
        ))
        .into());
    }
    let scores: Vec<f64> = (0..data.len())
        .into_par_iter()
        .map(|k| model.score_pair(&data.secrets[k], &data.covers[k]))
        .collect::<stegalift::Result<_>>()?;
    let m = metrics::binary_metrics(&scores, &data.labels)?;
    Ok(EvalRecord {
        auc: m.auc,
        acc: m.acc,
        ap: m.ap,
        eer: m.eer,
        n_real,
        n_fake,
    })
}

pub fn fresh_model(cfg: &RunConfig, variant: Variant) -> anyhow::Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(Model::new(cfg.detector_for(variant), &cfg.hider(), &mut rng)?)
}

pub fn save_model(model: &Model, path: &Path) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    trainer::write_checkpoint(&mut w, model.params())?;
    w.flush()?;
    Ok(())
}

pub fn load_model(cfg: &RunConfig, path: &Path) -> anyhow::Result<Model> {
    let f = File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    let params = trainer::read_checkpoint(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    Ok(Model::from_params(cfg.detector(), cfg.hider().bands, params)?)
}

pub fn log_text(log: &[EpochRecord]) -> String {
    log.iter().map(|r| r.to_json() + "\n").collect()
}

#[derive(Debug)]
pub struct TrainSummary {
    pub log: Vec<EpochRecord>,
    pub eval: EvalRecord,
    pub exp_clamped: bool,
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<TrainSummary> {
    cfg.validate()?;
    let data = load_pairs(cfg, "train")?;
    let held_out = load_pairs(cfg, &cfg.eval_split)?;
    prepare_out(&cfg.out_dir, cfg)?;
    let out = trainer::run_training(&cfg.train(), &data, fresh_model(cfg, cfg.variant)?)?;
    if out.exp_clamped {
        log::warn!("alignment exponent was clamped during training");
    }
    save_model(&out.model, &cfg.checkpoint_path())?;
    let log_path = cfg.out_dir.join("log.jsonl");
    fs::write(&log_path, log_text(&out.log)).with_context(|| format!("writing {}", log_path.display()))?;
    let eval = evaluate(&out.model, &held_out)?;
    write_json(&cfg.out_dir.join("eval.json"), &eval)?;
    Ok(TrainSummary {
        log: out.log,
        eval,
        exp_clamped: out.exp_clamped,
    })
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<EvalRecord> {
    cfg.validate()?;
    let model = load_model(cfg, &cfg.checkpoint_path())?;
    let data = load_pairs(cfg, &cfg.eval_split)?;
    let record = evaluate(&model, &data)?;
    prepare_out(&cfg.out_dir, cfg)?;
    write_json(&cfg.out_dir.join("eval.json"), &record)?;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub preset: String,
    pub lod: bool,
    /// Stages present in the training log.
    pub stages: Vec<u8>,
    pub auc: f64,
    pub acc: f64,
    pub ap: f64,
    pub eer: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| variant | SDA preset | LoD | AUC | ACC | AP | EER |\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        let lod = if r.lod { "on" } else { "off" };
        writeln!(
            s,
            "| {} | {} | {lod} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.variant, r.preset, r.auc, r.acc, r.ap, r.eer
        )
        .unwrap();
    }
    s
}

pub fn ablate(cfg: &RunConfig) -> anyhow::Result<Vec<AblationRow>> {
    cfg.validate()?;
    let data = load_pairs(cfg, "train")?;
    let held_out = load_pairs(cfg, &cfg.eval_split)?;
    prepare_out(&cfg.out_dir, cfg)?;
    let rank = cfg.lod_residual_rank.unwrap_or(lod::DEFAULT_RESIDUAL_RANK);
    let mut rows = Vec::new();
    for &lod_on in &cfg.ablate_lod {
        for &preset in &cfg.ablate_presets {
            for &variant in &cfg.ablate_variants {
                log::info!("ablation: {variant} / {preset} / LoD {lod_on}");
                let tc = cfg.train_for(preset, lod_on.then_some(rank));
                let out = trainer::run_training(&tc, &data, fresh_model(cfg, variant)?)?;
                let mut stages: Vec<u8> = out.log.iter().map(|r| r.stage).collect();
                stages.dedup();
                let e = evaluate(&out.model, &held_out)?;
                rows.push(AblationRow {
                    variant: variant.to_string(),
                    preset: preset.to_string(),
                    lod: lod_on,
                    stages,
                    auc: e.auc,
                    acc: e.acc,
                    ap: e.ap,
                    eer: e.eer,
                });
            }
        }
    }
    write_json(&cfg.out_dir.join("ablation.json"), &rows)?;
    fs::write(cfg.out_dir.join("ablation.md"), ablation_table(&rows))?;
    Ok(rows)
}

#[derive(Serialize)]
struct CheckRow<'a> {
    op: &'a str,
    max_rel_err: f64,
    passed: bool,
}

pub fn render_gradcheck(reports: &[CheckReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let verdict = if r.passed { "ok" } else { "FAIL" };
        writeln!(s, "{:<22} {:>10.3e}  {verdict}", r.name, r.max_rel_err).unwrap();
    }
    s
}

/// `Err` naming every failed operation.
pub fn gradcheck_verdict(reports: &[CheckReport]) -> Result<(), GradcheckFailed> {
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(GradcheckFailed(failed))
    }
}

pub fn gradcheck(cfg: &RunConfig) -> anyhow::Result<Vec<CheckReport>> {
    cfg.validate()?;
    let reports = gradcheck::suite(cfg.seed)?;
    prepare_out(&cfg.out_dir, cfg)?;
    let rows: Vec<CheckRow> = reports
        .iter()
        .map(|r| CheckRow {
            op: &r.name,
            max_rel_err: r.max_rel_err,
            passed: r.passed,
        })
        .collect();
    write_json(&cfg.out_dir.join("gradcheck.json"), &rows)?;
    Ok(reports)
}

/// Run `cmd` and return the text printed on success.
pub fn execute(cmd: Command, cfg: &RunConfig) -> anyhow::Result<String> {
    match cmd {
        Command::GenData => gen_data(cfg),
        Command::Hide => {
            let r = hide(cfg)?;
            Ok(serde_json::to_string_pretty(&r)? + "\n")
        }
        Command::Train => {
            let t = train(cfg)?;
            Ok(log_text(&t.log) + &serde_json::to_string(&t.eval)? + "\n")
        }
        Command::Eval => Ok(serde_json::to_string(&eval(cfg)?)? + "\n"),
        Command::Ablate => Ok(ablation_table(&ablate(cfg)?)),
        Command::Gradcheck => {
            let reports = gradcheck(cfg)?;
            print!("{}", render_gradcheck(&reports));
            gradcheck_verdict(&reports)?;
            Ok(format!("all {} operations within tolerance\n", reports.len()))
        }
    }
}
