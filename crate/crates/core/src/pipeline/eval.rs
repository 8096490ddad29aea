use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::ckpt;
use crate::data::{images_to_tensor, load_image, load_manifest, save_image, GrayImage, NormalizationSpec};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::scalar::Scalar;
use crate::tensor::ParamSet;
use crate::vit::{self, attention_mask, validate_names, AttentionMask, ModelConfig};

use super::dataset::Dataset;
use super::train::{evaluate, EVAL_BATCH};

/// A checkpoint together with the architecture and preprocessing stored in
/// its metadata.
#[derive(Clone, Debug)]
pub struct LoadedModel<S> {
    pub model: ModelConfig,
    pub normalization: NormalizationSpec,
    pub params: ParamSet<S>,
}

pub fn load_model<S: Scalar>(path: impl AsRef<Path>) -> Result<LoadedModel<S>> {
    let (params, meta) = ckpt::load::<S>(path.as_ref())?;
    let field = |key: &str| {
        meta.get(key).cloned().ok_or_else(|| {
            Error::Config(format!(
                "checkpoint {} has no `{key}` metadata",
                path.as_ref().display()
            ))
        })
    };
    let model: ModelConfig = serde_json::from_value(field("model")?)?;
    let normalization: NormalizationSpec = serde_json::from_value(field("normalization")?)?;
    model.validate()?;
    normalization.validate()?;
    let report = validate_names(&params, &model);
    if !report.is_ok() {
        return Err(Error::NameMismatch(report.summary()));
    }
    Ok(LoadedModel {
        model,
        normalization,
        params,
    })
}

/// Metrics of a checkpoint on every image of a manifest.
pub fn run_eval<S: Scalar>(ckpt_path: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<MetricsReport> {
    let m = load_model::<S>(ckpt_path)?;
    let data = Dataset::<S>::load(&load_manifest(manifest)?, &m.normalization, m.model.img_size)?;
    Ok(evaluate(&m.model, &m.params, &data)?.0)
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub mask: AttentionMask,
    /// Binary mask at input resolution (1 = kept patch).
    pub image: GrayImage,
}

/// Last-layer class-token attention mask of one image, upsampled by patch
/// replication and written as a binary PGM.
pub fn run_attention<S: Scalar>(
    ckpt_path: impl AsRef<Path>,
    image: impl AsRef<Path>,
    mass: f64,
    out: impl AsRef<Path>,
) -> Result<AttentionOutput> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::Config(format!("mass {mass} outside (0, 1]")));
    }
    let m = load_model::<S>(ckpt_path)?;
    let img = load_image(image)?;
    let x = images_to_tensor::<S>(std::slice::from_ref(&img), &m.normalization, m.model.img_size)?;
    let trace = vit::forward(&m.model, &m.params, &x, true)?;
    let mask = attention_mask(&trace, m.model.depth - 1, 0, mass)?;
    let out_img = upsample_mask(&mask, m.model.patch_size);
    save_image(&out_img, out)?;
    Ok(AttentionOutput { mask, image: out_img })
}

/// Nearest-neighbour upsampling of a patch mask.
pub fn upsample_mask(mask: &AttentionMask, patch: usize) -> GrayImage {
    let side = mask.grid * patch;
    let pixels = (0..side * side)
        .map(|i| {
            let (y, x) = (i / side, i % side);
            if mask.is_kept(y / patch, x / patch) { 1.0 } else { 0.0 }
        })
        .collect();
    GrayImage::new(side, side, pixels)
}

/// Writes `path,level,f0..f{D-1}` with final-norm class-token features.
/// Returns the number of rows.
pub fn export_features<S: Scalar>(
    ckpt_path: impl AsRef<Path>,
    manifest: impl AsRef<Path>,
    out: impl AsRef<Path>,
) -> Result<usize> {
    let out = out.as_ref();
    let m = load_model::<S>(ckpt_path)?;
    let data = Dataset::<S>::load(&load_manifest(manifest)?, &m.normalization, m.model.img_size)?;
    let d = m.model.embed_dim;
    let io = |e: csv::Error| Error::io(out, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(out).map_err(io)?;
    let mut header = vec!["path".to_string(), "level".to_string()];
    header.extend((0..d).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(io)?;

    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let trace = vit::forward(&m.model, &m.params, &data.batch::<ChaCha8Rng>(idx, None), false)?;
        for (&i, row) in idx.iter().zip(trace.cls_features.data().chunks(d)) {
            let mut rec = vec![data.paths[i].clone(), data.labels[i].to_string()];
            rec.extend(row.iter().map(|v| format!("{:e}", v.as_f64() as f32)));
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(data.len())
}
