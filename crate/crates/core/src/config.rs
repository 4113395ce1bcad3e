//! Run configuration: plain `key = value` lines, `#` starts a comment.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Relative paths are resolved against the directory of the file they were
//! read from.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autoenc::{AeTrainConfig, ModalityId, DEFAULT_TEMPERATURE};
use crate::channel::{ChannelConfig, ChannelKind};
use crate::lddm::{LdmTrainConfig, Target, DEFAULT_HIDDEN};
use crate::synthgen::SceneSpec;

/// `--seed` moves the evaluation corpus this far from the training corpus so
/// the two never share scenes.
pub const EVAL_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("{key}: bad value {value:?} ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// Numeric precision of training and inference. `F64` is the checking mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Training scenes on disk. `None` generates them from `train_seed`.
    pub train_corpus: Option<PathBuf>,
    /// Evaluation scenes on disk. `None` generates them from `eval_seed`.
    pub eval_corpus: Option<PathBuf>,
    pub weights_dir: PathBuf,
    pub output_dir: PathBuf,

    pub width: usize,
    pub height: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub precision: Precision,

    pub ae_epochs: usize,
    pub ae_batch_size: usize,
    pub ae_learning_rate: f64,
    pub ae_final_lr_fraction: f64,
    pub temperature: f64,
    pub weight_contrastive: f64,
    pub weight_rgb: f64,
    pub weight_ir: f64,
    pub ae_seed: u64,

    pub ldm_epochs: usize,
    pub ldm_batch_size: usize,
    pub ldm_learning_rate: f64,
    pub ldm_final_lr_fraction: f64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub target: Target,
    pub ema_decay: f64,
    pub ldm_seed: u64,

    pub sample_seed: u64,
    pub modalities: Vec<ModalityId>,
    pub channel: ChannelConfig,

    pub disable_contrastive: bool,
    pub disable_modality_condition: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ae = AeTrainConfig::default();
        let ldm = LdmTrainConfig::default();
        Self {
            train_corpus: None,
            eval_corpus: None,
            weights_dir: PathBuf::from("weights"),
            output_dir: PathBuf::from("out"),
            width: 32,
            height: 32,
            train_scenes: 128,
            eval_scenes: 50,
            train_seed: 1000,
            eval_seed: 900_000,
            precision: Precision::F32,
            ae_epochs: ae.epochs,
            ae_batch_size: ae.batch_size,
            ae_learning_rate: ae.learning_rate,
            ae_final_lr_fraction: ae.final_lr_fraction,
            temperature: DEFAULT_TEMPERATURE,
            weight_contrastive: ae.weight_contrastive,
            weight_rgb: ae.weight_rgb,
            weight_ir: ae.weight_ir,
            ae_seed: ae.seed,
            ldm_epochs: ldm.epochs,
            ldm_batch_size: ldm.batch_size,
            ldm_learning_rate: ldm.learning_rate,
            ldm_final_lr_fraction: ldm.final_lr_fraction,
            timesteps: ldm.timesteps,
            beta_start: ldm.beta_start,
            beta_end: ldm.beta_end,
            hidden: DEFAULT_HIDDEN,
            target: ldm.target,
            ema_decay: ldm.ema_decay,
            ldm_seed: ldm.seed,
            sample_seed: 0,
            modalities: ModalityId::ALL.to_vec(),
            channel: ChannelConfig::ideal(),
            disable_contrastive: false,
            disable_modality_condition: false,
        }
    }
}

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N>
where
    N::Err: std::fmt::Display,
{
    value.parse().map_err(|e: N::Err| bad(key, value, e.to_string()))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn parse_modalities(key: &str, value: &str) -> Result<Vec<ModalityId>> {
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim) {
        let m = ModalityId::ALL
            .into_iter()
            .find(|m| m.name() == part)
            .ok_or_else(|| bad(key, value, format!("unknown modality {part:?}")))?;
        if out.contains(&m) {
            return Err(bad(key, value, format!("{part} listed twice")));
        }
        out.push(m);
    }
    Ok(out)
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::DuplicateKey {
                    line: line_no,
                    key: key.into(),
                });
            }
            seen.push(key.to_string());
            cfg.set(key, value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: line_no, key },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths in it become relative to the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    /// Joins every relative path onto `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.weights_dir);
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.train_corpus {
            fix(p);
        }
        if let Some(p) = &mut self.eval_corpus {
            fix(p);
        }
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "train_corpus" => self.train_corpus = optional_path(v),
            "eval_corpus" => self.eval_corpus = optional_path(v),
            "weights_dir" => self.weights_dir = PathBuf::from(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "width" => self.width = parse_num(key, v)?,
            "height" => self.height = parse_num(key, v)?,
            "train_scenes" => self.train_scenes = parse_num(key, v)?,
            "eval_scenes" => self.eval_scenes = parse_num(key, v)?,
            "train_seed" => self.train_seed = parse_num(key, v)?,
            "eval_seed" => self.eval_seed = parse_num(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(key, v, "expected f32 or f64")),
                }
            }
            "ae_epochs" => self.ae_epochs = parse_num(key, v)?,
            "ae_batch_size" => self.ae_batch_size = parse_num(key, v)?,
            "ae_learning_rate" => self.ae_learning_rate = parse_num(key, v)?,
            "ae_final_lr_fraction" => self.ae_final_lr_fraction = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "weight_contrastive" => self.weight_contrastive = parse_num(key, v)?,
            "weight_rgb" => self.weight_rgb = parse_num(key, v)?,
            "weight_ir" => self.weight_ir = parse_num(key, v)?,
            "ae_seed" => self.ae_seed = parse_num(key, v)?,
            "ldm_epochs" => self.ldm_epochs = parse_num(key, v)?,
            "ldm_batch_size" => self.ldm_batch_size = parse_num(key, v)?,
            "ldm_learning_rate" => self.ldm_learning_rate = parse_num(key, v)?,
            "ldm_final_lr_fraction" => self.ldm_final_lr_fraction = parse_num(key, v)?,
            "timesteps" => self.timesteps = parse_num(key, v)?,
            "beta_start" => self.beta_start = parse_num(key, v)?,
            "beta_end" => self.beta_end = parse_num(key, v)?,
            "hidden" => self.hidden = parse_num(key, v)?,
            "target" => {
                self.target = Target::parse(v).ok_or_else(|| bad(key, v, "expected z0 or eps"))?
            }
            "ema_decay" => self.ema_decay = parse_num(key, v)?,
            "ldm_seed" => self.ldm_seed = parse_num(key, v)?,
            "sample_seed" => self.sample_seed = parse_num(key, v)?,
            "modalities" => self.modalities = parse_modalities(key, v)?,
            "channel" => {
                self.channel.kind = ChannelKind::parse(v)
                    .ok_or_else(|| bad(key, v, "expected ideal, bit_flip or erasure"))?
            }
            "flip_probability" => self.channel.flip_probability = parse_num(key, v)?,
            "erasure_probability" => self.channel.erasure_probability = parse_num(key, v)?,
            "channel_seed" => self.channel.seed = parse_num(key, v)?,
            "disable_contrastive" => self.disable_contrastive = parse_bool(key, v)?,
            "disable_modality_condition" => self.disable_modality_condition = parse_bool(key, v)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("width", self.width), ("height", self.height)] {
            if v == 0 || v % 4 != 0 || v > u16::MAX as usize {
                return Err(bad(key, &v.to_string(), "must be a positive multiple of 4"));
            }
        }
        for (key, v) in [
            ("train_scenes", self.train_scenes),
            ("eval_scenes", self.eval_scenes),
            ("ae_batch_size", self.ae_batch_size),
            ("ldm_batch_size", self.ldm_batch_size),
            ("timesteps", self.timesteps),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(bad(key, "0", "must be at least 1"));
            }
        }
        if self.hidden % crate::lddm::NORM_GROUPS != 0 {
            return Err(bad(
                "hidden",
                &self.hidden.to_string(),
                format!("must be a multiple of {}", crate::lddm::NORM_GROUPS),
            ));
        }
        if self.modalities.is_empty() {
            return Err(bad("modalities", "", "at least one modality"));
        }
        for (key, v) in [
            ("ae_learning_rate", self.ae_learning_rate),
            ("ldm_learning_rate", self.ldm_learning_rate),
            ("temperature", self.temperature),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(key, &v.to_string(), "must be positive"));
            }
        }
        for (key, v) in [
            ("weight_contrastive", self.weight_contrastive),
            ("weight_rgb", self.weight_rgb),
            ("weight_ir", self.weight_ir),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(key, &v.to_string(), "must be non-negative"));
            }
        }
        for (key, v) in [
            ("ae_final_lr_fraction", self.ae_final_lr_fraction),
            ("ldm_final_lr_fraction", self.ldm_final_lr_fraction),
            ("ema_decay", self.ema_decay),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(key, &v.to_string(), "must lie in [0, 1]"));
            }
        }
        self.ldm_train_config()
            .schedule()
            .map_err(|e| bad("beta_start/beta_end", &format!("{}..{}", self.beta_start, self.beta_end), e.to_string()))?;
        self.channel.clone().validated().map_err(|e| {
            bad(e.name, &e.value.to_string(), "must lie in [0, 1]")
        })?;
        Ok(())
    }

    /// Replaces every seed. The evaluation corpus is kept apart from the
    /// training corpus by [`EVAL_SEED_OFFSET`].
    pub fn override_seed(&mut self, seed: u64) {
        self.train_seed = seed;
        self.eval_seed = seed.wrapping_add(EVAL_SEED_OFFSET);
        self.ae_seed = seed;
        self.ldm_seed = seed;
        self.sample_seed = seed;
        self.channel.seed = seed;
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec::new(self.width, self.height, self.train_seed)
    }

    pub fn ae_train_config(&self) -> AeTrainConfig {
        AeTrainConfig {
            epochs: self.ae_epochs,
            batch_size: self.ae_batch_size,
            learning_rate: self.ae_learning_rate,
            final_lr_fraction: self.ae_final_lr_fraction,
            temperature: self.temperature,
            weight_contrastive: if self.disable_contrastive {
                0.0
            } else {
                self.weight_contrastive
            },
            weight_rgb: self.weight_rgb,
            weight_ir: self.weight_ir,
            seed: self.ae_seed,
        }
    }

    pub fn ldm_train_config(&self) -> LdmTrainConfig {
        LdmTrainConfig {
            epochs: self.ldm_epochs,
            batch_size: self.ldm_batch_size,
            learning_rate: self.ldm_learning_rate,
            final_lr_fraction: self.ldm_final_lr_fraction,
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            hidden: self.hidden,
            target: self.target,
            condition_on_modality: !self.disable_modality_condition,
            ema_decay: self.ema_decay,
            seed: self.ldm_seed,
        }
    }

    pub fn modality_mask(&self) -> u8 {
        self.modalities.iter().fold(0, |m, id| m | id.mask_bit())
    }

    /// Canonical text form. Parsing it gives back an equal config, apart
    /// from paths, which are written as they are held.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let names: Vec<&str> = self.modalities.iter().map(|m| m.name()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("train_corpus", path(&self.train_corpus));
        kv("eval_corpus", path(&self.eval_corpus));
        kv("weights_dir", self.weights_dir.display().to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("width", self.width.to_string());
        kv("height", self.height.to_string());
        kv("train_scenes", self.train_scenes.to_string());
        kv("eval_scenes", self.eval_scenes.to_string());
        kv("train_seed", self.train_seed.to_string());
        kv("eval_seed", self.eval_seed.to_string());
        kv("precision", self.precision.name().to_string());
        kv("ae_epochs", self.ae_epochs.to_string());
        kv("ae_batch_size", self.ae_batch_size.to_string());
        kv("ae_learning_rate", self.ae_learning_rate.to_string());
        kv("ae_final_lr_fraction", self.ae_final_lr_fraction.to_string());
        kv("temperature", self.temperature.to_string());
        kv("weight_contrastive", self.weight_contrastive.to_string());
        kv("weight_rgb", self.weight_rgb.to_string());
        kv("weight_ir", self.weight_ir.to_string());
        kv("ae_seed", self.ae_seed.to_string());
        kv("ldm_epochs", self.ldm_epochs.to_string());
        kv("ldm_batch_size", self.ldm_batch_size.to_string());
        kv("ldm_learning_rate", self.ldm_learning_rate.to_string());
        kv("ldm_final_lr_fraction", self.ldm_final_lr_fraction.to_string());
        kv("timesteps", self.timesteps.to_string());
        kv("beta_start", self.beta_start.to_string());
        kv("beta_end", self.beta_end.to_string());
        kv("hidden", self.hidden.to_string());
        kv("target", self.target.name().to_string());
        kv("ema_decay", self.ema_decay.to_string());
        kv("ldm_seed", self.ldm_seed.to_string());
        kv("sample_seed", self.sample_seed.to_string());
        kv("modalities", names.join(","));
        kv("channel", self.channel.kind.name().to_string());
        kv("flip_probability", self.channel.flip_probability.to_string());
        kv("erasure_probability", self.channel.erasure_probability.to_string());
        kv("channel_seed", self.channel.seed.to_string());
        kv("disable_contrastive", self.disable_contrastive.to_string());
        kv("disable_modality_condition", self.disable_modality_condition.to_string());
        s
    }
}
