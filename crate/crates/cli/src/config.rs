//! Line-oriented `key = value` run configuration.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use stegalift::detector::{DetectorConfig, HeadCount, Variant};
use stegalift::hider::HiderConfig;
use stegalift::sda::SdaPreset;
use stegalift::trainer::TrainConfig;

/// A malformed or inconsistent configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// Every setting a command can read, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to `checkpoint.stgf` inside `out_dir`.
    pub checkpoint: Option<PathBuf>,
    pub eval_split: String,
    pub alpha: f64,
    pub width: usize,
    pub heads: HeadCount,
    pub lambda_init: f64,
    pub lambda_d: f64,
    pub variant: Variant,
    pub epochs: [usize; 3],
    pub lr: [f64; 3],
    pub batch: usize,
    pub gamma_s: f64,
    pub lod_residual_rank: Option<usize>,
    pub sda_preset: SdaPreset,
    pub sda_gamma: f64,
    pub aa_includes_wfda: bool,
    pub compute_all_branches: bool,
    pub ablate_variants: Vec<Variant>,
    pub ablate_presets: Vec<SdaPreset>,
    pub ablate_lod: Vec<bool>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let det = DetectorConfig::default();
        let train = TrainConfig::default();
        let preset = SdaPreset::default();
        RunConfig {
            seed: 0,
            image_size: det.image_size,
            channels: det.in_channels,
            n_train: 400,
            n_test: 100,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            eval_split: "test".into(),
            alpha: HiderConfig::default().alpha,
            width: det.width,
            heads: det.heads,
            lambda_init: det.lambda_init,
            lambda_d: det.lambda_d,
            variant: det.variant,
            epochs: train.epochs,
            lr: train.lr,
            batch: train.batch,
            gamma_s: train.gamma_s,
            lod_residual_rank: train.lod_residual_rank,
            sda_preset: preset,
            sda_gamma: preset.config().gamma,
            aa_includes_wfda: preset.config().aa_includes_wfda,
            compute_all_branches: train.compute_all_branches,
            ablate_variants: Variant::ALL.to_vec(),
            ablate_presets: vec![preset],
            ablate_lod: vec![true],
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| ConfigError(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => err(format!("`{key}`: expected a boolean, got `{v}`")),
    }
}

fn parse_list<T>(key: &str, v: &str, f: impl Fn(&str) -> Result<T, ConfigError>) -> Result<Vec<T>, ConfigError> {
    let items: Vec<T> = v.split(',').map(|s| f(s.trim())).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return err(format!("`{key}` is empty"));
    }
    Ok(items)
}

fn parse_triple<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3], ConfigError> {
    let items = parse_list(key, v, |s| parse_num::<T>(key, s))?;
    match items[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => err(format!("`{key}` needs three comma-separated values")),
    }
}

fn parse_heads(v: &str) -> Result<HeadCount, ConfigError> {
    match v.strip_prefix("tied:") {
        Some(d) => Ok(HeadCount::TiedToTokens {
            head_dim: parse_num("heads", d)?,
        }),
        None => Ok(HeadCount::Fixed(parse_num("heads", v)?)),
    }
}

fn fmt_heads(h: HeadCount) -> String {
    match h {
        HeadCount::Fixed(n) => n.to_string(),
        HeadCount::TiedToTokens { head_dim } => format!("tied:{head_dim}"),
    }
}

fn parse_variant(v: &str) -> Result<Variant, ConfigError> {
    v.parse().map_err(|e: stegalift::Error| ConfigError(e.to_string()))
}

fn parse_preset(v: &str) -> Result<SdaPreset, ConfigError> {
    v.parse().map_err(|e: stegalift::Error| ConfigError(e.to_string()))
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parse config text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let defaults = RunConfig::default();
        let mut cfg = RunConfig {
            data_dir: base.join(&defaults.data_dir),
            out_dir: base.join(&defaults.out_dir),
            ..defaults
        };
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {}: expected `key = value`", no + 1));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return err(format!("line {}: duplicate key `{key}`", no + 1));
            }
            cfg.set(key, value, base)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        use anyhow::Context;
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(Self::parse(&text, base)?)
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<(), ConfigError> {
        let path = |v: &str| base.join(v);
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "n_train" => self.n_train = parse_num(key, v)?,
            "n_test" => self.n_test = parse_num(key, v)?,
            "data_dir" => self.data_dir = path(v),
            "out_dir" => self.out_dir = path(v),
            "checkpoint" => self.checkpoint = Some(path(v)),
            "eval_split" => self.eval_split = v.to_string(),
            "alpha" => self.alpha = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "heads" => self.heads = parse_heads(v)?,
            "lambda_init" => self.lambda_init = parse_num(key, v)?,
            "lambda_d" => self.lambda_d = parse_num(key, v)?,
            "variant" => self.variant = parse_variant(v)?,
            "epochs" => self.epochs = parse_triple(key, v)?,
            "lr" => self.lr = parse_triple(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "gamma_s" => self.gamma_s = parse_num(key, v)?,
            "lod_residual_rank" => {
                self.lod_residual_rank = match v {
                    "off" | "none" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "sda_preset" => self.sda_preset = parse_preset(v)?,
            "sda_gamma" => self.sda_gamma = parse_num(key, v)?,
            "aa_includes_wfda" => self.aa_includes_wfda = parse_bool(key, v)?,
            "compute_all_branches" => self.compute_all_branches = parse_bool(key, v)?,
            "ablate_variants" => self.ablate_variants = parse_list(key, v, parse_variant)?,
            "ablate_presets" => self.ablate_presets = parse_list(key, v, parse_preset)?,
            "ablate_lod" => self.ablate_lod = parse_list(key, v, |s| parse_bool(key, s))?,
            _ => return err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("checkpoint.stgf"))
    }

    pub fn detector(&self) -> DetectorConfig {
        self.detector_for(self.variant)
    }

    pub fn detector_for(&self, variant: Variant) -> DetectorConfig {
        DetectorConfig {
            in_channels: self.channels,
            width: self.width,
            image_size: self.image_size,
            heads: self.heads,
            lambda_init: self.lambda_init,
            lambda_d: self.lambda_d,
            variant,
        }
    }

    pub fn hider(&self) -> HiderConfig {
        HiderConfig::with_alpha(self.alpha)
    }

    pub fn train(&self) -> TrainConfig {
        self.train_for(self.sda_preset, self.lod_residual_rank)
    }

    pub fn train_for(&self, preset: SdaPreset, lod: Option<usize>) -> TrainConfig {
        let mut alignment = preset.config();
        alignment.gamma = self.sda_gamma;
        alignment.aa_includes_wfda = self.aa_includes_wfda;
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            gamma_s: self.gamma_s,
            seed: self.seed,
            lod_residual_rank: lod,
            alignment,
            compute_all_branches: self.compute_all_branches,
        }
    }

    /// Check every derived component so commands fail before touching disk.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let core = |r: stegalift::Result<()>| r.map_err(|e| ConfigError(e.to_string()));
        if self.channels != 1 && self.channels != 3 {
            return err(format!("channels must be 1 or 3, got {}", self.channels));
        }
        for (name, n) in [("n_train", self.n_train), ("n_test", self.n_test)] {
            if n == 0 || n % 2 != 0 {
                return err(format!("`{name}` must be a positive even count, got {n}"));
            }
        }
        if self.eval_split != "train" && self.eval_split != "test" {
            return err(format!("`eval_split` must be train or test, got `{}`", self.eval_split));
        }
        for &v in &self.ablate_variants {
            core(self.detector_for(v).validate())?;
        }
        core(self.detector().validate())?;
        core(self.hider().validate())?;
        core(self.train().validate())?;
        Ok(())
    }

    /// The canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("seed", self.seed.to_string());
        put("image_size", self.image_size.to_string());
        put("channels", self.channels.to_string());
        put("n_train", self.n_train.to_string());
        put("n_test", self.n_test.to_string());
        put("data_dir", self.data_dir.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("checkpoint", self.checkpoint_path().display().to_string());
        put("eval_split", self.eval_split.clone());
        put("alpha", self.alpha.to_string());
        put("width", self.width.to_string());
        put("heads", fmt_heads(self.heads));
        put("lambda_init", self.lambda_init.to_string());
        put("lambda_d", self.lambda_d.to_string());
        put("variant", self.variant.to_string());
        put("epochs", join(&self.epochs));
        put("lr", join(&self.lr));
        put("batch", self.batch.to_string());
        put("gamma_s", self.gamma_s.to_string());
        put(
            "lod_residual_rank",
            self.lod_residual_rank.map_or("off".into(), |r| r.to_string()),
        );
        put("sda_preset", self.sda_preset.to_string());
        put("sda_gamma", self.sda_gamma.to_string());
        put("aa_includes_wfda", self.aa_includes_wfda.to_string());
        put("compute_all_branches", self.compute_all_branches.to_string());
        put("ablate_variants", join(&self.ablate_variants));
        put("ablate_presets", join(&self.ablate_presets));
        put("ablate_lod", join(&self.ablate_lod));
        s
    }
}
