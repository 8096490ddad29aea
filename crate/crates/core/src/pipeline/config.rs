//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{NormPreset, NormalizationSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, FreezePolicy, SgdConfig};
use crate::vit::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Probe,
    Finetune,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probe" => Ok(Mode::Probe),
            "finetune" => Ok(Mode::Finetune),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub model: ModelConfig,
    /// Single manifest split into train/val by `split_ratio`.
    pub manifest: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Zero-based index list applied to `manifest` before splitting.
    pub subset: Option<PathBuf>,
    pub split_ratio: f64,
    pub seed: u64,
    pub normalization: NormPreset,
    /// Starting weights; random init when absent.
    pub init: Option<PathBuf>,
    pub batch_size: usize,
    /// `None` picks 100 for probing and 200 for fine-tuning.
    pub epochs: Option<usize>,
    pub sgd: SgdConfig,
    pub adamw: AdamWConfig,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub freeze: FreezePolicy,
    pub patience: usize,
    /// Random flips and quarter turns of training images.
    pub augment: bool,
    pub out: PathBuf,
    pub mass: f64,
    pub image: Option<PathBuf>,
    pub synth: SyntheticSpec,
    pub synth_per_level: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Finetune,
            model: ModelConfig {
                in_channels: 1,
                ..ModelConfig::default()
            },
            manifest: None,
            train_manifest: None,
            val_manifest: None,
            test_manifest: None,
            subset: None,
            split_ratio: 0.7,
            seed: 0,
            normalization: NormPreset::Unit,
            init: None,
            batch_size: 32,
            epochs: None,
            sgd: SgdConfig::default(),
            adamw: AdamWConfig::default(),
            min_lr: 0.0,
            warmup_epochs: 10,
            freeze: FreezePolicy::default(),
            patience: 20,
            augment: false,
            out: PathBuf::from("out"),
            mass: 0.6,
            image: None,
            synth: SyntheticSpec::default(),
            synth_per_level: 100,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

const PATH_KEYS: [&str; 8] = [
    "manifest",
    "train_manifest",
    "val_manifest",
    "test_manifest",
    "subset",
    "init",
    "out",
    "image",
];

impl RunConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.mode {
            Mode::Probe => 100,
            Mode::Finetune => 200,
        })
    }

    pub fn normalization_spec(&self) -> Result<NormalizationSpec> {
        NormalizationSpec::preset(self.normalization, self.model.in_channels)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "mode" => self.mode = parse(key, value)?,
            "arch" => {
                let img = m.img_size;
                let channels = m.in_channels;
                *m = match value {
                    "tiny" => ModelConfig::default(),
                    "vit_s16" => ModelConfig::vit_s16(img),
                    "vit_b16" => ModelConfig::vit_b16(img),
                    other => return Err(Error::Config(format!("unknown arch `{other}`"))),
                };
                m.img_size = img;
                m.in_channels = channels;
            }
            "img_size" => m.img_size = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "depth" => m.depth = parse(key, value)?,
            "num_heads" => m.num_heads = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "num_classes" => m.num_classes = parse(key, value)?,
            "in_channels" => m.in_channels = parse(key, value)?,
            "manifest" | "data" => self.manifest = opt_path(value),
            "train_manifest" => self.train_manifest = opt_path(value),
            "val_manifest" => self.val_manifest = opt_path(value),
            "test_manifest" => self.test_manifest = opt_path(value),
            "subset" => self.subset = opt_path(value),
            "split_ratio" => self.split_ratio = parse(key, value)?,
            "seed" => {
                self.seed = parse(key, value)?;
                self.synth.seed = self.seed;
            }
            "normalization" => self.normalization = parse(key, value)?,
            "init" | "ckpt" => self.init = opt_path(value),
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = Some(parse(key, value)?),
            "lr" => self.sgd.lr0 = parse(key, value)?,
            "momentum" => self.sgd.momentum = parse(key, value)?,
            "peak_lr" => self.adamw.peak_lr = parse(key, value)?,
            "min_lr" => self.min_lr = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "beta1" => self.adamw.beta1 = parse(key, value)?,
            "beta2" => self.adamw.beta2 = parse(key, value)?,
            "eps" => self.adamw.eps = parse(key, value)?,
            "weight_decay" => self.adamw.weight_decay = parse(key, value)?,
            "layerwise_decay" => self.adamw.layerwise_decay = parse(key, value)?,
            "freeze_epochs" => self.freeze.freeze_epochs = parse(key, value)?,
            "frozen_blocks" => self.freeze.frozen_blocks = Some(parse(key, value)?),
            "patience" => self.patience = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "mass" => self.mass = parse(key, value)?,
            "image" => self.image = opt_path(value),
            "synth_size" => self.synth.size = parse(key, value)?,
            "synth_per_level" => self.synth_per_level = parse(key, value)?,
            "synth_min_fibers" => self.synth.fibers.0 = parse(key, value)?,
            "synth_max_fibers" => self.synth.fibers.1 = parse(key, value)?,
            "synth_sigma" => self.synth.sigma = parse(key, value)?,
            "synth_noise" => self.synth.noise_std = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses config text. `base` resolves relative paths.
    pub fn parse_str(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", i + 1))
            })?;
            let key = key.trim();
            let mut value = value.trim().to_string();
            if let (Some(base), true) = (base, PATH_KEYS.contains(&key)) {
                if !value.is_empty() && Path::new(&value).is_relative() {
                    value = base.join(&value).to_string_lossy().into_owned();
                }
            }
            pairs.push((i + 1, key.to_string(), value));
        }
        // the architecture preset goes first so explicit sizes refine it
        pairs.sort_by_key(|(_, k, _)| k != "arch");
        for (line, key, value) in pairs {
            cfg.set(&key, &value)
                .map_err(|e| Error::Config(format!("line {line}: {}", strip(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adamw.validate()?;
        self.normalization_spec()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split_ratio must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.mass > 0.0 && self.mass <= 1.0) {
            return bad("mass must lie in (0, 1]");
        }
        if !(self.sgd.lr0 > 0.0) || !(0.0..1.0).contains(&self.sgd.momentum) {
            return bad("probe needs lr > 0 and momentum in [0, 1)");
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.adamw.peak_lr) {
            return bad("need 0 <= min_lr <= peak_lr");
        }
        Ok(())
    }

    /// SHA-256 of the configuration's JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
