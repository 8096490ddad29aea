use rand::Rng;

use crate::data::{dihedral, images_to_tensor, load_images, DatasetManifest, NormalizationSpec};
use crate::error::Result;
use crate::level::Level;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Normalized images of a manifest held in memory.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    pub paths: Vec<String>,
    pub labels: Vec<Level>,
    images: Vec<S>,
    channels: usize,
    size: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn load(manifest: &DatasetManifest, spec: &NormalizationSpec, size: usize) -> Result<Self> {
        let images = load_images(manifest)?;
        let tensor = images_to_tensor::<S>(&images, spec, size)?;
        Ok(Self {
            paths: manifest.entries.iter().map(|e| e.raw_path.clone()).collect(),
            labels: manifest.labels(),
            images: tensor.into_data(),
            channels: spec.channels(),
            size,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn per_image(&self) -> usize {
        self.channels * self.size * self.size
    }

    /// Stacks the given samples into `[B, C, H, W]`. With `augment`, each
    /// sample gets a random square symmetry.
    pub fn batch<R: Rng>(&self, indices: &[usize], mut augment: Option<&mut R>) -> Tensor<S> {
        let per = self.per_image();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            let img = &self.images[i * per..(i + 1) * per];
            match augment.as_deref_mut() {
                Some(rng) => {
                    let op = rng.gen_range(0..8u8);
                    data.extend(dihedral(img, self.channels, self.size, op));
                }
                None => data.extend_from_slice(img),
            }
        }
        Tensor::from_vec(&[indices.len(), self.channels, self.size, self.size], data)
            .expect("batch shape")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<Level> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}
