use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::image::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPreset {
    /// mean 0.5, std 0.5
    Unit,
    /// ImageNet statistics used by upstream checkpoints.
    Pretrained,
}

impl std::str::FromStr for NormPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(NormPreset::Unit),
            "pretrained" => Ok(NormPreset::Pretrained),
            other => Err(Error::Config(format!("unknown normalization preset `{other}`"))),
        }
    }
}

const PRETRAINED_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const PRETRAINED_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// Copy the gray channel into every output channel.
    pub replicate: bool,
}

impl NormalizationSpec {
    pub fn preset(preset: NormPreset, channels: usize) -> Result<Self> {
        let (mean, std) = match (preset, channels) {
            (NormPreset::Unit, c) => (vec![0.5; c], vec![0.5; c]),
            (NormPreset::Pretrained, 3) => (PRETRAINED_MEAN.to_vec(), PRETRAINED_STD.to_vec()),
            (NormPreset::Pretrained, 1) => (vec![PRETRAINED_MEAN[0]], vec![PRETRAINED_STD[0]]),
            (_, c) => {
                return Err(Error::Config(format!(
                    "no pretrained statistics for {c} channels"
                )))
            }
        };
        let spec = Self {
            replicate: channels > 1,
            mean,
            std,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || self.mean.len() != self.std.len() {
            return Err(Error::Config("mean and std need one entry per channel".into()));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        if !self.replicate && self.mean.len() != 1 {
            return Err(Error::Config("multi-channel statistics need replication".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// `(x - mean_c) / std_c` per channel, laid out `[C, H, W]`.
pub fn normalize(img: &GrayImage, spec: &NormalizationSpec) -> Vec<f32> {
    let mut out = Vec::with_capacity(spec.channels() * img.pixels.len());
    for (m, s) in spec.mean.iter().zip(&spec.std) {
        out.extend(img.pixels.iter().map(|&x| (x - m) / s));
    }
    out
}

/// Applies one of the eight square symmetries (`op & 3` quarter turns, then
/// a horizontal flip if `op & 4`) to a `[C, S, S]` array.
pub fn dihedral<T: Copy + Default>(chw: &[T], channels: usize, side: usize, op: u8) -> Vec<T> {
    let mut out = vec![T::default(); chw.len()];
    let n = side - 1;
    for c in 0..channels {
        let plane = &chw[c * side * side..(c + 1) * side * side];
        let dst = &mut out[c * side * side..(c + 1) * side * side];
        for y in 0..side {
            for x in 0..side {
                let (mut sy, mut sx) = (y, x);
                if op & 4 != 0 {
                    sx = n - sx;
                }
                for _ in 0..(op & 3) {
                    (sy, sx) = (sx, n - sy);
                }
                dst[y * side + x] = plane[sy * side + sx];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_stats_identity() {
        let img = GrayImage::new(2, 1, vec![0.25, 0.9]);
        let spec = NormalizationSpec {
            mean: vec![0.0],
            std: vec![1.0],
            replicate: false,
        };
        assert_eq!(normalize(&img, &spec), vec![0.25, 0.9]);
    }

    #[test]
    fn mean_valued_image_is_zero() {
        let spec = NormalizationSpec::preset(NormPreset::Pretrained, 3).unwrap();
        let img = GrayImage::new(2, 2, vec![0.485; 4]);
        let out = normalize(&img, &spec);
        assert_eq!(out.len(), 12);
        assert!(out[..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pretrained_channel_zero() {
        let spec = NormalizationSpec::preset(NormPreset::Pretrained, 3).unwrap();
        let out = normalize(&GrayImage::new(1, 1, vec![1.0]), &spec);
        assert!((out[0] - 2.2489).abs() < 1e-4);
        assert!((out[2] - (1.0 - 0.406) / 0.225).abs() < 1e-6);
    }

    #[test]
    fn invalid_specs() {
        let bad = NormalizationSpec {
            mean: vec![0.5],
            std: vec![0.0],
            replicate: false,
        };
        assert!(bad.validate().is_err());
        assert!(NormalizationSpec::preset(NormPreset::Pretrained, 2).is_err());
        assert_eq!("unit".parse::<NormPreset>().unwrap(), NormPreset::Unit);
        assert!("imagenet".parse::<NormPreset>().is_err());
    }

    #[test]
    fn dihedral_group() {
        let side = 3;
        let x: Vec<f32> = (0..9).map(|v| v as f32).collect();
        assert_eq!(dihedral(&x, 1, side, 0), x);
        let four = (0..4).fold(x.clone(), |acc, _| dihedral(&acc, 1, side, 1));
        assert_eq!(four, x);
        let flip_twice = dihedral(&dihedral(&x, 1, side, 4), 1, side, 4);
        assert_eq!(flip_twice, x);
        let mut all: Vec<Vec<f32>> = (0..8).map(|op| dihedral(&x, 1, side, op)).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.dedup();
        assert_eq!(all.len(), 8);
    }
}
