//! Flat key = value run configuration.
//!
//! Resolution order: defaults, then the config file, then command-line
//! overrides, then the ICAL_SEED environment variable for the seed. The
//! resolved config serializes to sorted key = value lines; run manifests
//! prepend those same lines, so a manifest can be fed back in as a config
//! file. Manifest-only facts (corpus hashes, final metrics) are written
//! under the reserved `hash.` and `result.` prefixes, which the parser
//! skips.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::data::fnv1a64;
use crate::lm::LmConfig;
use crate::model::{ModelConfig, TaskKind};
use crate::train::{AblationFlags, Hyperparams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {lineno} is not `key = value`: {line:?}")]
    BadLine { lineno: usize, line: String },
    #[error("unknown config key {key:?}")]
    UnknownKey { key: String },
    #[error("config key {key:?} expects {expected}, got {value:?}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("ICAL_SEED must be an unsigned integer, got {0:?}")]
    BadEnvSeed(String),
}

/// Prefixes a config parser skips, reserved for manifest-only records.
pub const RESERVED_PREFIXES: [&str; 2] = ["hash.", "result."];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: String,
    pub out_dir: String,
    pub lm_checkpoint: String,
    pub model_checkpoint: String,
    pub task: TaskKind,

    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_min_freq: u64,

    pub lambda_ib: f64,
    pub lambda_g: f64,
    pub lambda_mi: f64,
    pub lambda_lm: f64,
    pub r_select: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,

    pub lm_embed_dim: usize,
    pub lm_hidden_dim: usize,
    pub lm_epochs: usize,
    pub lm_lr: f64,
    pub lm_negatives: usize,
    pub lm_smoothing: f64,
    pub lm_batch_size: usize,

    pub disable_adv: bool,
    pub disable_lm: bool,
    pub disable_ib: bool,

    /// Which split eval and extract operate on: train, dev, test, or all.
    pub eval_split: String,
    /// Extraction dump consumed by the report command.
    pub dump: String,

    pub synth_preset: String,
    pub synth_n: usize,
    pub synth_noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = Hyperparams::default();
        RunConfig {
            corpus: String::new(),
            out_dir: "runs".into(),
            lm_checkpoint: String::new(),
            model_checkpoint: String::new(),
            task: TaskKind::Classification,
            embed_dim: 16,
            hidden_dim: 16,
            vocab_min_freq: 1,
            lambda_ib: hp.lambda_ib,
            lambda_g: hp.lambda_g,
            lambda_mi: hp.lambda_mi,
            lambda_lm: hp.lambda_lm,
            r_select: hp.r_select,
            tau_start: hp.tau_start,
            tau_end: hp.tau_end,
            lr_gen: hp.lr_gen,
            lr_disc: hp.lr_disc,
            batch_size: hp.batch_size,
            epochs: hp.epochs,
            seed: hp.seed,
            lm_embed_dim: 16,
            lm_hidden_dim: 16,
            lm_epochs: 2,
            lm_lr: 3e-3,
            lm_negatives: 5,
            lm_smoothing: 1.0,
            lm_batch_size: 16,
            disable_adv: false,
            disable_lm: false,
            disable_ib: false,
            eval_split: "test".into(),
            dump: String::new(),
            synth_preset: "xor-pair".into(),
            synth_n: 5000,
            synth_noise: 0.0,
        }
    }
}

macro_rules! kv_fields {
    ($macro:ident) => {
        $macro! {
            corpus: string,
            out_dir: string,
            lm_checkpoint: string,
            model_checkpoint: string,
            task: task,
            embed_dim: usize,
            hidden_dim: usize,
            vocab_min_freq: u64,
            lambda_ib: f64,
            lambda_g: f64,
            lambda_mi: f64,
            lambda_lm: f64,
            r_select: f64,
            tau_start: f64,
            tau_end: f64,
            lr_gen: f64,
            lr_disc: f64,
            batch_size: usize,
            epochs: usize,
            seed: u64,
            lm_embed_dim: usize,
            lm_hidden_dim: usize,
            lm_epochs: usize,
            lm_lr: f64,
            lm_negatives: usize,
            lm_smoothing: f64,
            lm_batch_size: usize,
            disable_adv: bool,
            disable_lm: bool,
            disable_ib: bool,
            eval_split: string,
            dump: string,
            synth_preset: string,
            synth_n: usize,
            synth_noise: f64,
        }
    };
}

fn format_value_string(v: &str) -> String {
    v.to_string()
}

fn format_value_task(v: &TaskKind) -> String {
    match v {
        TaskKind::Classification => "classification".into(),
        TaskKind::Regression => "regression".into(),
    }
}

impl RunConfig {
    /// Apply one key = value pair; unknown keys are errors unless reserved.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if RESERVED_PREFIXES.iter().any(|p| key.starts_with(p)) {
            return Ok(());
        }
        macro_rules! apply {
            ($($field:ident : $kind:ident,)*) => {
                match key {
                    $(stringify!($field) => {
                        self.$field = parse_value!($kind, key, value)?;
                        Ok(())
                    })*
                    _ => Err(ConfigError::UnknownKey { key: key.to_string() }),
                }
            };
        }
        macro_rules! parse_value {
            (string, $k:expr, $v:expr) => {
                Ok::<String, ConfigError>($v.to_string())
            };
            (task, $k:expr, $v:expr) => {
                match $v {
                    "classification" => Ok(TaskKind::Classification),
                    "regression" => Ok(TaskKind::Regression),
                    _ => Err(ConfigError::BadValue {
                        key: $k.to_string(),
                        value: $v.to_string(),
                        expected: "classification or regression",
                    }),
                }
            };
            (bool, $k:expr, $v:expr) => {
                match $v {
                    "true" => Ok(true),
                    "false" => Ok(false),
                    _ => Err(ConfigError::BadValue {
                        key: $k.to_string(),
                        value: $v.to_string(),
                        expected: "true or false",
                    }),
                }
            };
            ($ty:ident, $k:expr, $v:expr) => {
                $v.parse::<$ty>().map_err(|_| ConfigError::BadValue {
                    key: $k.to_string(),
                    value: $v.to_string(),
                    expected: stringify!($ty),
                })
            };
        }
        kv_fields!(apply)
    }

    /// Every field as a `key = value` line, sorted by key.
    pub fn to_kv_lines(&self) -> String {
        let mut pairs: Vec<(String, String)> = Vec::new();
        macro_rules! dump {
            ($($field:ident : $kind:ident,)*) => {
                $(pairs.push((
                    stringify!($field).to_string(),
                    dump_value!($kind, &self.$field),
                ));)*
            };
        }
        macro_rules! dump_value {
            (string, $v:expr) => {
                format_value_string($v)
            };
            (task, $v:expr) => {
                format_value_task($v)
            };
            ($ty:ident, $v:expr) => {
                format!("{}", $v)
            };
        }
        kv_fields!(dump);
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// FNV-1a over the sorted key = value lines; names the run directory.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_kv_lines().as_bytes())
    }

    pub fn load_file(&mut self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        let path_str = path.as_ref().display().to_string();
        let text = fs::read_to_string(&path).map_err(|source| ConfigError::Io {
            path: path_str,
            source,
        })?;
        self.apply_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    lineno: lineno + 1,
                    line: raw.to_string(),
                });
            };
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// ICAL_SEED, when set, replaces the seed from every other source.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var("ICAL_SEED") {
            self.seed = v
                .trim()
                .parse::<u64>()
                .map_err(|_| ConfigError::BadEnvSeed(v))?;
        }
        Ok(())
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            lambda_ib: self.lambda_ib,
            lambda_g: self.lambda_g,
            lambda_mi: self.lambda_mi,
            lambda_lm: self.lambda_lm,
            r_select: self.r_select,
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            lr_gen: self.lr_gen,
            lr_disc: self.lr_disc,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            disable_adv: self.disable_adv,
            disable_lm: self.disable_lm,
            disable_ib: self.disable_ib,
        }
    }

    pub fn model_config(&self, vocab_size: usize, n_classes: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            n_classes,
            task: self.task,
        }
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            embed_dim: self.lm_embed_dim,
            hidden_dim: self.lm_hidden_dim,
        }
    }
}

/// defaults -> optional file -> command-line pairs -> ICAL_SEED.
pub fn resolve(
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        cfg.load_file(path)?;
    }
    for (k, v) in overrides {
        cfg.apply_kv(k, v)?;
    }
    cfg.apply_env()?;
    Ok(cfg)
}
