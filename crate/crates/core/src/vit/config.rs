use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};

/// Architecture of a pre-norm Vision Transformer with a linear head on the
/// class token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            img_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            num_classes: 4,
            in_channels: 3,
        }
    }
}

impl ModelConfig {
    /// ViT-S/16 at the given input resolution.
    pub fn vit_s16(img_size: usize) -> Self {
        Self {
            img_size,
            patch_size: 16,
            embed_dim: 384,
            depth: 12,
            num_heads: 6,
            ..Self::default()
        }
    }

    /// ViT-B/16 at the given input resolution.
    pub fn vit_b16(img_size: usize) -> Self {
        Self {
            img_size,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.img_size == 0 || self.img_size % self.patch_size != 0 {
            return bad(format!(
                "img_size {} is not a positive multiple of patch_size {}",
                self.img_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depth < 1 {
            return bad("depth must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return bad(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Flattened patch length `C * P * P`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

const BLOCK_PARAMS: [&str; 12] = [
    "norm1.weight",
    "norm1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "norm2.weight",
    "norm2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

/// Every canonical parameter name with its shape, in a fixed order.
pub fn param_schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let hd = cfg.hidden_dim();
    let p = cfg.patch_size;
    let mut out = vec![
        ("cls_token".to_string(), vec![1, 1, d]),
        ("pos_embed".to_string(), vec![1, cfg.num_tokens(), d]),
        ("patch_embed.weight".to_string(), vec![d, cfg.in_channels, p, p]),
        ("patch_embed.bias".to_string(), vec![d]),
    ];
    for b in 0..cfg.depth {
        for suffix in BLOCK_PARAMS {
            let shape = match suffix {
                "attn.qkv.weight" => vec![3 * d, d],
                "attn.qkv.bias" => vec![3 * d],
                "attn.proj.weight" => vec![d, d],
                "mlp.fc1.weight" => vec![hd, d],
                "mlp.fc1.bias" => vec![hd],
                "mlp.fc2.weight" => vec![d, hd],
                _ => vec![d],
            };
            out.push((format!("blocks.{b}.{suffix}"), shape));
        }
    }
    out.push(("norm.weight".to_string(), vec![d]));
    out.push(("norm.bias".to_string(), vec![d]));
    out.push(("head.weight".to_string(), vec![cfg.num_classes, d]));
    out.push(("head.bias".to_string(), vec![cfg.num_classes]));
    out
}

/// Fresh parameters: truncated normal (std 0.02, cut at two standard
/// deviations) for weights and tokens, zero biases, unit norm scales.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.02).expect("valid std");
    let mut params = ParamSet::new();
    for (name, shape) in param_schema(cfg) {
        let tensor = if is_norm_scale(&name) {
            Tensor::filled(&shape, S::one())
        } else if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| loop {
                    let v = normal.sample(&mut rng);
                    if v.abs() <= 0.04 {
                        break S::of(v);
                    }
                })
                .collect();
            Tensor::from_vec(&shape, data)?
        };
        params.insert(name, tensor);
    }
    Ok(params)
}

fn is_norm_scale(name: &str) -> bool {
    name == "norm.weight" || name.ends_with(".norm1.weight") || name.ends_with(".norm2.weight")
}

/// Result of comparing a parameter collection with a model's schema.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct NameReport {
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    /// `(name, expected, found)`
    pub shape_mismatch: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl NameReport {
    pub fn is_ok(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.shape_mismatch.is_empty()
    }

    pub fn summary(&self) -> String {
        let mut parts = Vec::new();
        if !self.missing.is_empty() {
            parts.push(format!("missing [{}]", self.missing.join(", ")));
        }
        if !self.unexpected.is_empty() {
            parts.push(format!("unexpected [{}]", self.unexpected.join(", ")));
        }
        for (name, want, got) in &self.shape_mismatch {
            parts.push(format!("{name}: expected {want:?}, found {got:?}"));
        }
        parts.join("; ")
    }
}

pub fn validate_names<S: Scalar>(params: &ParamSet<S>, cfg: &ModelConfig) -> NameReport {
    let schema = param_schema(cfg);
    let mut report = NameReport::default();
    for (name, shape) in &schema {
        match params.get(name) {
            None => report.missing.push(name.clone()),
            Some(t) if t.shape() != shape.as_slice() => {
                report
                    .shape_mismatch
                    .push((name.clone(), shape.clone(), t.shape().to_vec()))
            }
            Some(_) => {}
        }
    }
    for name in params.names() {
        if !schema.iter().any(|(n, _)| n == name) {
            report.unexpected.push(name.to_string());
        }
    }
    report
}
