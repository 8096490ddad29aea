//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tortuosity::data::{gen_synthetic, SyntheticSpec};
use tortuosity::vit::{init_params, loss_and_grads, ModelConfig};
use tortuosity::{Level, ParamSet64, Tensor64};

/// The small model used for gradient and freezing checks.
pub fn tiny(depth: usize, in_channels: usize) -> ModelConfig {
    ModelConfig {
        img_size: 16,
        patch_size: 8,
        embed_dim: 8,
        depth,
        num_heads: 2,
        mlp_ratio: 4.0,
        num_classes: 4,
        in_channels,
    }
}

/// Perturbs every parameter away from its init so that no gradient is
/// structurally tiny (unit norm scales, zero biases).
pub fn randomized(cfg: &ModelConfig, seed: u64) -> ParamSet64 {
    let mut p = init_params::<f64>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for (name, t) in p.iter_mut() {
        let spread = if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == "norm.weight" {
            0.2
        } else {
            0.3
        };
        for v in t.data_mut() {
            *v += rng.gen_range(-spread..spread);
        }
    }
    p
}

pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares every analytic gradient element with a central difference of
/// step `h`. Pairs where both sides are below `1e-8` count as agreeing.
pub fn finite_difference_check(cfg: &ModelConfig, seed: u64, h: f64) -> GradCheck {
    let params = randomized(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let b = 3;
    let n = b * cfg.in_channels * cfg.img_size * cfg.img_size;
    let images = Tensor64::from_vec(
        &[b, cfg.in_channels, cfg.img_size, cfg.img_size],
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let labels: Vec<Level> = (0..b).map(|i| Level::from_index(i % 4).unwrap()).collect();
    let all = |_: &str| true;
    let (_, grads) = loss_and_grads(cfg, &params, &images, &labels, &all).unwrap();

    let mut out = GradCheck {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (name, g) in grads.iter() {
        for i in 0..g.len() {
            let analytic = g.data()[i];
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let lp = loss_and_grads(cfg, &plus, &images, &labels, &all).unwrap().0;
            let lm = loss_and_grads(cfg, &minus, &images, &labels, &all).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            out.checked += 1;
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-8 {
                continue;
            }
            let rel = (analytic - numeric).abs() / scale;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{name}[{i}] analytic {analytic:e} numeric {numeric:e}");
            }
        }
    }
    out
}

/// Writes a synthetic set of `per_level` images per level at `size` pixels.
pub fn synth_set(dir: &Path, size: usize, per_level: usize, seed: u64) -> std::path::PathBuf {
    let spec = SyntheticSpec {
        size,
        seed,
        ..SyntheticSpec::default()
    };
    gen_synthetic(&spec, per_level, dir).unwrap();
    dir.join("manifest.csv")
}
