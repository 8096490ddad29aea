use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CUBIC_A: f64 = -0.75;

fn cubic_weights(t: f64) -> [f64; 4] {
    let near = |x: f64| ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Source taps and weights for every output coordinate (half-pixel
/// centres, edge-clamped).
fn taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = (o as f64 + 0.5) * ratio - 0.5;
            let base = pos.floor();
            let w = cubic_weights(pos - base);
            let idx = std::array::from_fn(|k| {
                (base as isize - 1 + k as isize).clamp(0, src as isize - 1) as usize
            });
            (idx, w)
        })
        .collect()
}

/// Resamples a `[1, 1 + G^2, D]` positional table to a `G' x G'` patch grid
/// with bicubic interpolation; the class slot is copied unchanged.
pub fn interpolate_pos_embed<S: Scalar>(pos: &Tensor<S>, new_grid: usize) -> Result<Tensor<S>> {
    let shape = pos.shape();
    if shape.len() != 3 || shape[0] != 1 || shape[1] < 2 {
        return Err(Error::Shape(format!(
            "positional table must be [1, 1 + G^2, D], got {shape:?}"
        )));
    }
    let (tokens, d) = (shape[1], shape[2]);
    let g = ((tokens - 1) as f64).sqrt().round() as usize;
    if g * g != tokens - 1 {
        return Err(Error::Shape(format!(
            "{} patch slots do not form a square grid",
            tokens - 1
        )));
    }
    if new_grid == 0 {
        return Err(Error::Shape("target grid must be positive".into()));
    }

    let src = pos.data();
    let grid = |y: usize, x: usize, c: usize| src[(1 + y * g + x) * d + c].as_f64();
    let tx = taps(g, new_grid);

    // horizontal pass: [g, new_grid, d]
    let mut horiz = vec![0.0f64; g * new_grid * d];
    for y in 0..g {
        for (ox, (idx, w)) in tx.iter().enumerate() {
            for c in 0..d {
                horiz[(y * new_grid + ox) * d + c] =
                    (0..4).map(|k| w[k] * grid(y, idx[k], c)).sum();
            }
        }
    }
    let mut out = Vec::with_capacity((1 + new_grid * new_grid) * d);
    out.extend_from_slice(&src[..d]);
    for (idx, w) in &tx {
        for ox in 0..new_grid {
            for c in 0..d {
                let v: f64 = (0..4)
                    .map(|k| w[k] * horiz[(idx[k] * new_grid + ox) * d + c])
                    .sum();
                out.push(S::of(v));
            }
        }
    }
    Tensor::from_vec(&[1, 1 + new_grid * new_grid, d], out)
}
