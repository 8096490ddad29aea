//! Dataset ingestion, preprocessing and the synthetic fiber generator.

mod image;
mod manifest;
mod normalize;
mod split;
pub mod synth;

pub use image::{decode_pgm, encode_pgm, load_image, save_image, GrayImage};
pub use manifest::{load_index_subset, load_manifest, DatasetManifest, ManifestEntry};
pub use normalize::{dihedral, normalize, NormPreset, NormalizationSpec};
pub use split::{stratified_split, train_count};
pub use synth::{gen_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Normalizes square `size`x`size` images into a `[B, C, size, size]` batch.
pub fn images_to_tensor<S: Scalar>(
    images: &[GrayImage],
    spec: &NormalizationSpec,
    size: usize,
) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(images.len() * spec.channels() * size * size);
    for img in images {
        if img.width != size || img.height != size {
            return Err(Error::Shape(format!(
                "image is {}x{}, model expects {size}x{size}",
                img.width, img.height
            )));
        }
        data.extend(normalize(img, spec).into_iter().map(|v| S::of(v as f64)));
    }
    Tensor::from_vec(&[images.len(), spec.channels(), size, size], data)
}

/// Loads every image of a manifest, in order.
pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<GrayImage>> {
    use rayon::prelude::*;
    manifest.entries.par_iter().map(|e| load_image(&e.path)).collect()
}
