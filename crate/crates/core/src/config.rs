//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank values mean "unset"
//! for optional paths. Unknown keys are errors.

use std::env;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionDims, FusionKind};
use crate::image::{ImageBackboneKind, Normalization};
use crate::model::{ModelConfig, Task};
use crate::text::{TextBackboneKind, Truncation};
use crate::train::{Monitor, TrainConfig};

/// Environment variable naming the directory that holds pretrained backbone
/// weights (`<cache>/<backbone>/...`).
pub const CACHE_ENV: &str = "SEMFUSE_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub fusion: FusionKind,
    pub text_backbone: TextBackboneKind,
    pub image_backbone: ImageBackboneKind,
    /// Directory with `config.json`, `tokenizer.json` and `model.safetensors`.
    pub text_weights: Option<PathBuf>,
    /// Safetensors file with torchvision parameter names.
    pub image_weights: Option<PathBuf>,
    pub backbone_dtype: String,
    pub max_len: usize,
    pub truncation: Truncation,
    pub augment: bool,
    pub normalization: Normalization,
    pub image_root: Option<PathBuf>,
    pub dropout: f64,
    pub batch_norm: bool,
    pub encoder_hidden: usize,
    pub code_dim: usize,
    pub decoder_hidden: usize,
    pub classifier_hidden: usize,
    pub sketch_dim: usize,
    pub detach_target: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub monitor: Monitor,
    pub seed: u64,
    pub freeze_backbones: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Binary,
            fusion: FusionKind::Mfas,
            text_backbone: TextBackboneKind::Standin,
            image_backbone: ImageBackboneKind::Standin,
            text_weights: None,
            image_weights: None,
            backbone_dtype: "f32".into(),
            max_len: 512,
            truncation: Truncation::PostFirst,
            augment: false,
            normalization: Normalization::default(),
            image_root: None,
            dropout: 0.2,
            batch_norm: true,
            encoder_hidden: 768,
            code_dim: 384,
            decoder_hidden: 768,
            classifier_hidden: 128,
            sketch_dim: 1536,
            detach_target: false,
            lr: 2e-6,
            batch_size: 4,
            max_epochs: 50,
            patience: 5,
            monitor: Monitor::ValLoss,
            seed: 0,
            freeze_backbones: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

pub const KEYS: &[&str] = &[
    "task",
    "fusion",
    "text_backbone",
    "image_backbone",
    "text_weights",
    "image_weights",
    "backbone_dtype",
    "max_len",
    "truncation",
    "augment",
    "norm_mean",
    "norm_std",
    "image_root",
    "dropout",
    "batch_norm",
    "encoder_hidden",
    "code_dim",
    "decoder_hidden",
    "classifier_hidden",
    "sketch_dim",
    "detach_target",
    "lr",
    "batch_size",
    "max_epochs",
    "patience",
    "monitor",
    "seed",
    "freeze_backbones",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_triple(key: &str, value: &str) -> Result<[f32; 3]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "{key}: expected three comma-separated numbers"
        )));
    }
    Ok([
        parse(key, parts[0])?,
        parse(key, parts[1])?,
        parse(key, parts[2])?,
    ])
}

fn opt_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn from_snake<T: for<'de> Deserialize<'de>>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_owned()))
        .map_err(|_| Error::Config(format!("{key}: unknown value {value:?}")))
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => self.task = parse(key, v)?,
            "fusion" => self.fusion = parse(key, v)?,
            "text_backbone" => self.text_backbone = parse(key, v)?,
            "image_backbone" => self.image_backbone = parse(key, v)?,
            "text_weights" => self.text_weights = opt_path(v),
            "image_weights" => self.image_weights = opt_path(v),
            "backbone_dtype" => {
                if v != "f32" && v != "f64" {
                    return Err(Error::Config(format!(
                        "backbone_dtype must be f32 or f64, got {v:?}"
                    )));
                }
                self.backbone_dtype = v.to_owned();
            }
            "max_len" => self.max_len = parse(key, v)?,
            "truncation" => self.truncation = from_snake(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            "norm_mean" => self.normalization.mean = parse_triple(key, v)?,
            "norm_std" => self.normalization.std = parse_triple(key, v)?,
            "image_root" => self.image_root = opt_path(v),
            "dropout" => self.dropout = parse(key, v)?,
            "batch_norm" => self.batch_norm = parse(key, v)?,
            "encoder_hidden" => self.encoder_hidden = parse(key, v)?,
            "code_dim" => self.code_dim = parse(key, v)?,
            "decoder_hidden" => self.decoder_hidden = parse(key, v)?,
            "classifier_hidden" => self.classifier_hidden = parse(key, v)?,
            "sketch_dim" => self.sketch_dim = parse(key, v)?,
            "detach_target" => self.detach_target = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "monitor" => self.monitor = from_snake(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "freeze_backbones" => self.freeze_backbones = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let triple = |t: [f32; 3]| format!("{},{},{}", t[0], t[1], t[2]);
        Some(match key {
            "task" => self.task.to_string(),
            "fusion" => self.fusion.to_string(),
            "text_backbone" => self.text_backbone.to_string(),
            "image_backbone" => self.image_backbone.to_string(),
            "text_weights" => show_path(&self.text_weights),
            "image_weights" => show_path(&self.image_weights),
            "backbone_dtype" => self.backbone_dtype.clone(),
            "max_len" => self.max_len.to_string(),
            "truncation" => snake(&self.truncation),
            "augment" => self.augment.to_string(),
            "norm_mean" => triple(self.normalization.mean),
            "norm_std" => triple(self.normalization.std),
            "image_root" => show_path(&self.image_root),
            "dropout" => self.dropout.to_string(),
            "batch_norm" => self.batch_norm.to_string(),
            "encoder_hidden" => self.encoder_hidden.to_string(),
            "code_dim" => self.code_dim.to_string(),
            "decoder_hidden" => self.decoder_hidden.to_string(),
            "classifier_hidden" => self.classifier_hidden.to_string(),
            "sketch_dim" => self.sketch_dim.to_string(),
            "detach_target" => self.detach_target.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "monitor" => snake(&self.monitor),
            "seed" => self.seed.to_string(),
            "freeze_backbones" => self.freeze_backbones.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            _ => return None,
        })
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.as_ref().split_once('=').ok_or_else(|| {
                Error::Config(format!("override {:?} is not key=value", o.as_ref()))
            })?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    /// The fully resolved configuration, one `key = value` per line.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            out.push_str(&format!("{k} = {}\n", self.get(k).unwrap_or_default()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.max_len < 4 {
            return Err(Error::Config("max_len must be at least 4".into()));
        }
        if self.normalization.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("norm_std entries must be positive".into()));
        }
        self.model_config(1, 1).validate()
    }

    pub fn dtype(&self) -> DType {
        if self.backbone_dtype == "f64" {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn model_config(&self, image_feature_dim: usize, image_inter_dim: usize) -> ModelConfig {
        ModelConfig {
            fusion: self.fusion,
            task: self.task,
            dims: FusionDims {
                sketch: self.sketch_dim,
                ..FusionDims::with_image_inter(image_inter_dim)
            },
            image_feature_dim,
            dropout: self.dropout,
            batch_norm: self.batch_norm,
            encoder_hidden: self.encoder_hidden,
            code_dim: self.code_dim,
            decoder_hidden: self.decoder_hidden,
            classifier_hidden: self.classifier_hidden,
            detach_target: self.detach_target,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            monitor: self.monitor,
            seed: self.seed,
            freeze_backbones: self.freeze_backbones,
            augment: self.augment,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Text weights directory: the explicit setting, else `$SEMFUSE_CACHE/<backbone>`.
    pub fn resolved_text_weights(&self) -> Option<PathBuf> {
        if self.text_backbone == TextBackboneKind::Standin {
            return None;
        }
        self.text_weights.clone().or_else(|| {
            env::var_os(CACHE_ENV).map(|c| PathBuf::from(c).join(self.text_backbone.as_str()))
        })
    }

    /// Image weights file: the explicit setting, else `$SEMFUSE_CACHE/<backbone>.safetensors`.
    pub fn resolved_image_weights(&self) -> Option<PathBuf> {
        if self.image_backbone == ImageBackboneKind::Standin {
            return self.image_weights.clone();
        }
        self.image_weights.clone().or_else(|| {
            env::var_os(CACHE_ENV)
                .map(|c| PathBuf::from(c).join(format!("{}.safetensors", self.image_backbone)))
        })
    }
}
