use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::model::ForwardTrace;

/// Slack for floating-point accumulation when comparing cumulative mass to
/// the threshold.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Binary patch-grid mask covering a fraction of the class token's
/// attention.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionMask {
    pub grid: usize,
    /// Row-major `grid x grid` cells.
    pub cells: Vec<bool>,
    pub mass_threshold: f64,
    pub kept_fraction: f64,
    /// Kept patch indices in selection order (descending mass).
    pub kept: Vec<usize>,
}

impl AttentionMask {
    pub fn kept_count(&self) -> usize {
        self.kept.len()
    }

    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.grid + col]
    }
}

/// Smallest set of patches, taken in descending order of mass (lower index
/// first on ties), whose share of the total reaches `mass_threshold`.
pub fn mass_mask(masses: &[f64], grid: usize, mass_threshold: f64) -> Result<AttentionMask> {
    if !(mass_threshold > 0.0 && mass_threshold <= 1.0) {
        return Err(Error::Config(format!(
            "mass threshold {mass_threshold} outside (0, 1]"
        )));
    }
    if masses.len() != grid * grid {
        return Err(Error::Shape(format!(
            "{} patch masses for a {grid}x{grid} grid",
            masses.len()
        )));
    }
    if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(Error::Config("patch masses must be finite and non-negative".into()));
    }
    let total: f64 = masses.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("attention carries no mass".into()));
    }
    let normalized: Vec<f64> = masses.iter().map(|m| m / total).collect();

    let mut order: Vec<usize> = (0..normalized.len()).collect();
    // stable: equal masses keep ascending index order
    order.sort_by(|&a, &b| normalized[b].total_cmp(&normalized[a]));

    let mut kept = Vec::new();
    let mut cumulative = 0.0;
    for idx in order {
        if mass_threshold >= 1.0 {
            if normalized[idx] == 0.0 {
                break;
            }
        } else if cumulative >= mass_threshold - MASS_TOLERANCE {
            break;
        }
        cumulative += normalized[idx];
        kept.push(idx);
    }
    let mut cells = vec![false; grid * grid];
    for &k in &kept {
        cells[k] = true;
    }
    Ok(AttentionMask {
        grid,
        cells,
        mass_threshold,
        kept_fraction: cumulative.min(1.0),
        kept,
    })
}

/// Head-averaged class-token attention to the patch tokens of one sample.
pub fn cls_patch_attention<S: Scalar>(
    trace: &ForwardTrace<S>,
    layer: usize,
    sample: usize,
) -> Result<Vec<f64>> {
    let layers = trace.attention.as_ref().ok_or(Error::NoAttention)?;
    let att = layers.get(layer).ok_or_else(|| {
        Error::Config(format!("layer {layer} outside 0..{}", layers.len()))
    })?;
    let [b, heads, t, _] = <[usize; 4]>::try_from(att.shape()).map_err(|_| Error::NoAttention)?;
    if sample >= b {
        return Err(Error::Config(format!("sample {sample} outside batch of {b}")));
    }
    let mut masses = vec![0.0; t - 1];
    for h in 0..heads {
        // row 0 is the class-token query
        let row = &att.data()[((sample * heads + h) * t) * t..][..t];
        for (m, v) in masses.iter_mut().zip(&row[1..]) {
            *m += v.as_f64();
        }
    }
    for m in &mut masses {
        *m /= heads as f64;
    }
    Ok(masses)
}

/// Mass mask of one sample's class-token attention at `layer`.
pub fn attention_mask<S: Scalar>(
    trace: &ForwardTrace<S>,
    layer: usize,
    sample: usize,
    mass_threshold: f64,
) -> Result<AttentionMask> {
    let masses = cls_patch_attention(trace, layer, sample)?;
    mass_mask(&masses, trace.grid, mass_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_minimal_prefix() {
        let m = mass_mask(&[0.4, 0.3, 0.2, 0.1], 2, 0.6).unwrap();
        assert_eq!(m.kept, vec![0, 1]);
        assert!((m.kept_fraction - 0.7).abs() < 1e-12);
        assert_eq!(m.cells, vec![true, true, false, false]);
    }

    #[test]
    fn first_element_meeting_threshold_exactly() {
        let m = mass_mask(&[0.6, 0.2, 0.2, 0.0], 2, 0.6).unwrap();
        assert_eq!(m.kept, vec![0]);
    }

    #[test]
    fn full_mass_keeps_every_nonzero_patch() {
        let m = mass_mask(&[0.5, 0.0, 0.25, 0.25], 2, 1.0).unwrap();
        assert_eq!(m.kept, vec![0, 2, 3]);
        assert_eq!(m.kept_fraction, 1.0);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let m = mass_mask(&[0.25, 0.25, 0.25, 0.25], 2, 0.5).unwrap();
        assert_eq!(m.kept, vec![0, 1]);
    }

    #[test]
    fn renormalizes_before_thresholding() {
        let m = mass_mask(&[4.0, 3.0, 2.0, 1.0], 2, 0.6).unwrap();
        assert_eq!(m.kept, vec![0, 1]);
    }

    #[test]
    fn rejects_bad_thresholds() {
        assert!(mass_mask(&[1.0], 1, 0.0).is_err());
        assert!(mass_mask(&[1.0], 1, 1.5).is_err());
        assert!(mass_mask(&[1.0, 0.0], 1, 0.5).is_err());
    }

    #[test]
    fn requires_captured_attention() {
        let trace = ForwardTrace::<f32> {
            logits: crate::tensor::Tensor::zeros(&[1, 4]),
            cls_features: crate::tensor::Tensor::zeros(&[1, 2]),
            attention: None,
            grid: 2,
        };
        assert!(matches!(attention_mask(&trace, 0, 0, 0.6), Err(Error::NoAttention)));
    }
}
