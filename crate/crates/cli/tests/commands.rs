use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use stegalift::gradcheck::{self, check_with, SUITE_OPS};
use stegalift::hider::Role;
use stegalift::metrics;
use stegalift::sda::SdaPreset;
use stegalift::{Tensor, Variant};
use stegalift_cli::commands::{self, load_pairs, manifest_path, stego_manifest_path, EvalRecord, HideReport};
use stegalift_cli::manifest::Manifest;
use stegalift_cli::{exit_code, RunConfig};
use tempfile::TempDir;

fn tiny(dir: &Path, extra: &str) -> RunConfig {
    let base = "n_train = 16\nn_test = 16\nimage_size = 16\nwidth = 8\nepochs = 2,1,2\nbatch = 4\n\
                data_dir = data\nout_dir = out\nsda_preset = fa-l2+aa-sda\nlod_residual_rank = 2";
    let overridden: Vec<&str> = extra.lines().filter_map(|l| l.split('=').next()).map(str::trim).collect();
    let kept: Vec<&str> = base
        .lines()
        .filter(|l| !overridden.contains(&l.split('=').next().unwrap().trim()))
        .collect();
    RunConfig::parse(&format!("{}\n{extra}", kept.join("\n")), dir).unwrap()
}

fn with_data(extra: &str) -> (TempDir, RunConfig) {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path(), extra);
    commands::gen_data(&cfg).unwrap();
    (dir, cfg)
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_is_byte_identical_under_a_seed() {
    let (a, cfg_a) = with_data("seed = 5");
    let (b, cfg_b) = with_data("seed = 5");
    let (ta, tb) = (tree(&cfg_a.data_dir), tree(&cfg_b.data_dir));
    assert_eq!(ta.len(), 2 * (16 + 16) + 3);
    let strip = |t: BTreeMap<PathBuf, Vec<u8>>| -> BTreeMap<PathBuf, Vec<u8>> {
        t.into_iter().filter(|(p, _)| p != Path::new("config.resolved")).collect()
    };
    assert_eq!(strip(ta), strip(tb));
    let (c, cfg_c) = with_data("seed = 6");
    let first = |cfg: &RunConfig| fs::read(cfg.data_dir.join("train/00000_secret.png")).unwrap();
    assert_ne!(first(&cfg_a), first(&cfg_c));
    drop((a, b, c));
}

#[test]
fn gen_data_classes_are_balanced() {
    let (_d, cfg) = with_data("");
    for split in ["train", "test"] {
        let m = Manifest::read(&manifest_path(&cfg.data_dir, split)).unwrap();
        let secrets: Vec<u8> = m.entries.iter().filter(|e| e.role == Role::Secret).map(|e| e.label).collect();
        assert_eq!(secrets.len(), 16);
        assert_eq!(secrets.iter().filter(|&&l| l == 1).count(), 8);
    }
}

/// One Haar level by explicit loops over 2×2 blocks: the LL plane and the
/// summed energy of LH, HL and HH.
fn haar_level(x: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let n = x.len() / 2;
    let mut ll = vec![vec![0.0; n]; n];
    let mut e = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (a, b, c, d) = (x[2 * i][2 * j], x[2 * i][2 * j + 1], x[2 * i + 1][2 * j], x[2 * i + 1][2 * j + 1]);
            ll[i][j] = (a + b + c + d) / 2.0;
            let (lh, hl, hh) = ((a + b - c - d) / 2.0, (a - b + c - d) / 2.0, (a - b - c + d) / 2.0);
            e += lh * lh + hl * hl + hh * hh;
        }
    }
    (ll, e)
}

/// Detail-band energy of a two-level Haar decomposition of the 8-bit
/// pixels, summed over channels and levels. The artifact cells are 2×2, so
/// their energy appears at the second level.
fn detail_energy(path: &Path) -> f64 {
    let img = image::open(path).unwrap().to_rgb8();
    let (w, h) = img.dimensions();
    (0..3)
        .map(|c| {
            let plane: Vec<Vec<f64>> = (0..h)
                .map(|y| (0..w).map(|x| img.get_pixel(x, y)[c] as f64 / 255.0).collect())
                .collect();
            let (ll, e1) = haar_level(&plane);
            e1 + haar_level(&ll).1
        })
        .sum()
}

#[test]
fn forged_secrets_carry_more_detail_energy() {
    let (_d, cfg) = with_data("n_train = 40");
    let m = Manifest::read(&manifest_path(&cfg.data_dir, "train")).unwrap();
    let (mut real, mut fake) = (Vec::new(), Vec::new());
    for p in m.pairs(&cfg.data_dir).unwrap() {
        let e = detail_energy(&p.secret);
        if p.label == 1 { fake.push(e) } else { real.push(e) }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&fake) > mean(&real), "fake {} vs real {}", mean(&fake), mean(&real));
}

fn any_entry() -> impl Strategy<Value = (String, u8, Role)> {
    (
        "[a-z0-9_/.]{1,12}",
        0u8..2,
        prop_oneof![Just(Role::Secret), Just(Role::Cover), Just(Role::Stego)],
    )
}

proptest! {
    #[test]
    fn manifest_write_read_write_is_byte_identical(entries in prop::collection::vec(any_entry(), 0..20)) {
        let mut m = Manifest::default();
        for (p, l, r) in entries {
            m.push(p, l, r);
        }
        let text = m.to_text();
        let back = Manifest::parse(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_text(), text);
    }
}

#[test]
fn manifest_file_round_trip_on_generated_data() {
    let (_d, cfg) = with_data("");
    let path = manifest_path(&cfg.data_dir, "test");
    let original = fs::read(&path).unwrap();
    let copy = cfg.data_dir.join("copy.manifest");
    Manifest::read(&path).unwrap().write(&copy).unwrap();
    assert_eq!(fs::read(copy).unwrap(), original);
}

#[test]
fn hide_report_schema_and_reproducibility() {
    let (_d, cfg) = with_data("alpha = 0.1");
    let a = commands::hide(&cfg).unwrap();
    let json_a = fs::read(cfg.out_dir.join("hide.json")).unwrap();
    let b = commands::hide(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(json_a, fs::read(cfg.out_dir.join("hide.json")).unwrap());
    assert_eq!(a.alpha, 0.1);
    assert_eq!(a.pairs, 32);
    let keys: Vec<(&str, &str)> = a.rows.iter().map(|r| (r.pair.as_str(), r.metric.as_str())).collect();
    assert_eq!(
        keys,
        [("cover/stego", "psnr"), ("cover/stego", "ssim"), ("secret/stego", "psnr"), ("secret/stego", "ssim")]
    );
    let parsed: HideReport = serde_json::from_slice(&json_a).unwrap();
    assert_eq!(parsed, a);

    let stronger = RunConfig { alpha: 0.2, ..cfg.clone() };
    let c = commands::hide(&stronger).unwrap();
    assert_eq!(c.alpha, 0.2);
    assert!(c.rows[0].mean < a.rows[0].mean);
}

fn load_rgb(path: &Path) -> Tensor {
    let img = image::open(path).unwrap().to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        img.get_pixel((p % w) as u32, (p / w) as u32)[c] as f64 / 255.0
    })
}

#[test]
fn hide_report_matches_recomputation_from_written_files() {
    let (_d, cfg) = with_data("");
    let report = commands::hide(&cfg).unwrap();
    let (mut cp, mut cs, mut sp, mut ss) = (vec![], vec![], vec![], vec![]);
    for split in ["train", "test"] {
        let pairs = Manifest::read(&manifest_path(&cfg.data_dir, split)).unwrap().pairs(&cfg.data_dir).unwrap();
        let stego = Manifest::read(&stego_manifest_path(&cfg.out_dir, split)).unwrap();
        assert_eq!(stego.entries.len(), pairs.len());
        for (p, e) in pairs.iter().zip(&stego.entries) {
            assert_eq!((e.role, e.label), (Role::Stego, p.label));
            let (sec, cov, st) = (load_rgb(&p.secret), load_rgb(&p.cover), load_rgb(&cfg.out_dir.join(&e.path)));
            let psnr = |a: &Tensor, b: &Tensor| {
                let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
                metrics::psnr_for_log(10.0 * (1.0 / mse).log10())
            };
            cp.push(psnr(&cov, &st));
            sp.push(psnr(&sec, &st));
            cs.push(metrics::ssim_item(&cov, &st).unwrap());
            ss.push(metrics::ssim_item(&sec, &st).unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for (row, v) in report.rows.iter().zip([&cp, &cs, &sp, &ss]) {
        assert!((row.mean - mean(v)).abs() <= 1e-9, "{row:?}");
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((row.min - min).abs() <= 1e-9, "{row:?}");
    }
}

#[test]
fn hide_without_dataset_names_the_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path(), "");
    let err = commands::hide(&cfg).unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains(&manifest_path(&cfg.data_dir, "train").display().to_string()), "{msg}");
    assert_eq!(exit_code(&err), 3);
    assert!(!cfg.out_dir.exists());
}

#[test]
fn train_log_shows_two_stage_transitions_and_reproduces() {
    let (_d, cfg) = with_data("");
    let a = commands::train(&cfg).unwrap();
    let log_a = fs::read(cfg.out_dir.join("log.jsonl")).unwrap();
    let ckpt_a = fs::read(cfg.checkpoint_path()).unwrap();
    let b = commands::train(&cfg).unwrap();
    assert_eq!(log_a, fs::read(cfg.out_dir.join("log.jsonl")).unwrap());
    assert_eq!(ckpt_a, fs::read(cfg.checkpoint_path()).unwrap());
    assert_eq!(a.log, b.log);
    assert_eq!(a.eval, b.eval);

    let stages: Vec<u8> = a.log.iter().map(|r| r.stage).collect();
    assert_eq!(stages, [1, 1, 2, 3, 3]);
    let transitions: Vec<(u8, u8)> = stages.windows(2).filter(|w| w[0] != w[1]).map(|w| (w[0], w[1])).collect();
    assert_eq!(transitions, [(1, 2), (2, 3)]);
    let text = String::from_utf8(log_a).unwrap();
    for (line, r) in text.lines().zip(&a.log) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["stage"], r.stage);
        assert_eq!(v["L_total"].as_f64().unwrap(), r.l_total);
    }
}

#[test]
fn evaluating_the_checkpoint_reproduces_the_training_record() {
    let (d, cfg) = with_data("");
    let trained = commands::train(&cfg).unwrap();
    let eval_cfg = RunConfig {
        checkpoint: Some(cfg.checkpoint_path()),
        out_dir: d.path().join("eval"),
        ..cfg.clone()
    };
    let rec = commands::eval(&eval_cfg).unwrap();
    assert_eq!(rec, trained.eval);
    assert_eq!(
        fs::read(cfg.out_dir.join("eval.json")).unwrap(),
        fs::read(eval_cfg.out_dir.join("eval.json")).unwrap()
    );
    let text = fs::read_to_string(eval_cfg.out_dir.join("eval.json")).unwrap();
    let at: Vec<usize> = ["auc", "acc", "ap", "eer", "n_real", "n_fake"]
        .iter()
        .map(|k| text.find(&format!("\"{k}\"")).unwrap())
        .collect();
    assert!(at.windows(2).all(|w| w[0] < w[1]), "{text}");
    assert_eq!(serde_json::from_str::<serde_json::Value>(&text).unwrap().as_object().unwrap().len(), 6);
    assert_eq!((rec.n_real, rec.n_fake), (8, 8));
}

#[test]
fn fresh_model_scores_at_chance() {
    let (_d, cfg) = with_data("image_size = 32\nwidth = 16\nn_test = 200");
    fs::create_dir_all(&cfg.out_dir).unwrap();
    let mut aucs = Vec::new();
    for seed in 0..3 {
        let c = RunConfig { seed, ..cfg.clone() };
        commands::save_model(&commands::fresh_model(&c, c.variant).unwrap(), &c.checkpoint_path()).unwrap();
        let rec: EvalRecord = commands::eval(&c).unwrap();
        assert_eq!((rec.n_real, rec.n_fake), (100, 100));
        aucs.push(rec.auc);
    }
    for auc in aucs {
        assert!((auc - 0.5).abs() <= 0.15, "{auc}");
    }
}

#[test]
fn single_class_evaluation_is_a_contract_error() {
    let (_d, cfg) = with_data("");
    let mut m = Manifest::read(&manifest_path(&cfg.data_dir, "test")).unwrap();
    m.entries.retain(|e| e.label == 1);
    m.write(&manifest_path(&cfg.data_dir, "test")).unwrap();
    fs::create_dir_all(&cfg.out_dir).unwrap();
    commands::save_model(&commands::fresh_model(&cfg, cfg.variant).unwrap(), &cfg.checkpoint_path()).unwrap();
    let err = commands::eval(&cfg).unwrap_err();
    assert!(matches!(err.downcast_ref::<stegalift::Error>(), Some(stegalift::Error::Contract(_))), "{err}");
    assert_eq!(exit_code(&err), 1);
}

#[test]
fn first_stage_loss_falls_every_epoch_on_the_synthetic_task() {
    let (_d, cfg) = with_data("image_size = 32\nwidth = 16\nn_train = 96\nepochs = 5,1,1\nbatch = 8");
    let out = commands::train(&cfg).unwrap();
    let l: Vec<f64> = out.log.iter().filter(|r| r.stage == 1).map(|r| r.l_cls).collect();
    assert_eq!(l.len(), 5);
    assert!(l.windows(2).all(|w| w[1] < w[0]), "{l:?}");
}

#[test]
fn ablation_defaults_and_none_preset() {
    let dir = TempDir::new().unwrap();
    assert_eq!(
        RunConfig::parse("", dir.path()).unwrap().ablate_variants,
        [Variant::DirectLfad, Variant::Hfad, Variant::NoDwt, Variant::Full]
    );
    let (_d, cfg) = with_data("ablate_variants = direct-lfad, full\nablate_presets = none, fa-l2+aa-sda\nablate_lod = on, off\nepochs = 1,1,1");
    let rows = commands::ablate(&cfg).unwrap();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        if r.preset == SdaPreset::None.to_string() {
            assert_eq!(r.stages, [1, 3], "{r:?}");
        } else {
            assert_eq!(r.stages, [1, 2, 3], "{r:?}");
        }
        assert!((0.0..=1.0).contains(&r.auc));
    }
    let table = fs::read_to_string(cfg.out_dir.join("ablation.md")).unwrap();
    assert_eq!(table.lines().count(), 2 + rows.len());
    assert!(table.starts_with("| variant | SDA preset | LoD | AUC | ACC | AP | EER |"));
    assert!(RunConfig::parse("ablate_variants = lfad, resnet", dir.path()).is_err());
}

#[test]
fn gradcheck_covers_every_op_once_and_passes() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path(), "seed = 3");
    let reports = commands::gradcheck(&cfg).unwrap();
    let mut names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, SUITE_OPS);
    names.sort();
    names.dedup();
    assert_eq!(names.len(), SUITE_OPS.len());
    for r in &reports {
        assert!(r.passed && r.max_rel_err <= gradcheck::TOLERANCE, "{r:?}");
    }
    assert!(commands::gradcheck_verdict(&reports).is_ok());
    let text = commands::render_gradcheck(&reports);
    assert_eq!(text.lines().count(), SUITE_OPS.len());
}

#[test]
fn corrupted_backward_is_reported_by_name() {
    let x = [Tensor::from_fn(&[4], |i| i as f64 - 1.5)];
    let broken = check_with("cube_sum", &x, |v| Ok(v[0].data().iter().map(|a| a.powi(3)).sum()), |v| {
        Ok(vec![v[0].map(|a| 2.0 * a * a)])
    })
    .unwrap();
    assert!(!broken.passed);
    let mut reports = gradcheck::suite(1).unwrap();
    reports.insert(5, broken);
    let err = commands::gradcheck_verdict(&reports).unwrap_err();
    assert_eq!(err.0, ["cube_sum"]);
    let text = commands::render_gradcheck(&reports);
    let line = text.lines().find(|l| l.contains("FAIL")).unwrap();
    assert!(line.starts_with("cube_sum"));
    assert_eq!(exit_code(&anyhow::Error::new(err)), 2);
}

#[test]
fn loaded_pairs_are_the_quantised_generator_output() {
    let (_d, cfg) = with_data("");
    let set = load_pairs(&cfg, "test").unwrap();
    assert_eq!(set.len(), 16);
    for t in set.secrets.iter().chain(&set.covers) {
        assert_eq!(t.shape(), &[3, 16, 16]);
        assert!(t.data().iter().all(|v| ((v * 255.0).round() - v * 255.0).abs() < 1e-9));
    }
}
