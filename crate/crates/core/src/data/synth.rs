//! Procedural images of wavy fibers whose waviness grows with the level.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::level::{Level, NUM_LEVELS};

use super::image::{save_image, GrayImage};
use super::manifest::{DatasetManifest, ManifestEntry};

/// Segments used when measuring centerline curvature.
pub const CURVATURE_SEGMENTS: usize = 200;
/// Arc spacing (pixels) between Gaussian stamps.
const STAMP_SPACING: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub size: usize,
    /// Inclusive range of fibers per image.
    pub fibers: (usize, usize),
    /// Displacement amplitude range (pixels) per level.
    pub amplitude: [(f64, f64); NUM_LEVELS],
    /// Oscillations along the fiber per level.
    pub frequency: [(f64, f64); NUM_LEVELS],
    /// Gaussian line profile std (pixels).
    pub sigma: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: 64,
            fibers: (2, 3),
            amplitude: [(0.5, 1.5), (3.0, 4.5), (6.0, 8.0), (10.0, 13.0)],
            frequency: [(1.0, 1.5), (1.5, 2.0), (2.0, 2.5), (2.5, 3.0)],
            sigma: 1.2,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size == 0 {
            return bad("synthetic image size must be positive".into());
        }
        if self.fibers.0 > self.fibers.1 {
            return bad(format!("fiber range {:?} is empty", self.fibers));
        }
        if !(self.sigma > 0.0) || !(self.noise_std >= 0.0) {
            return bad("sigma must be positive and noise_std non-negative".into());
        }
        for (name, ranges) in [("amplitude", &self.amplitude), ("frequency", &self.frequency)] {
            for (t, &(lo, hi)) in ranges.iter().enumerate() {
                if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                    return bad(format!("{name} range for level {} is invalid", t + 1));
                }
            }
        }
        for t in 1..NUM_LEVELS {
            if !(self.amplitude[t - 1].1 < self.amplitude[t].0) {
                return bad(format!(
                    "amplitude ranges of levels {t} and {} overlap",
                    t + 1
                ));
            }
        }
        Ok(())
    }
}

/// Straight baseline through `center` with sinusoidal normal displacement.
#[derive(Clone, Debug, PartialEq)]
pub struct Fiber {
    pub center: (f64, f64),
    pub angle: f64,
    pub length: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Fiber {
    /// Position at `s` in `[0, 1]`, as `(x, y)`.
    pub fn point(&self, s: f64) -> (f64, f64) {
        let (sin, cos) = self.angle.sin_cos();
        let u = (s - 0.5) * self.length;
        let v = self.amplitude * (2.0 * PI * self.frequency * s + self.phase).sin();
        (self.center.0 + u * cos - v * sin, self.center.1 + u * sin + v * cos)
    }

    /// `segments + 1` evenly spaced points in `s`.
    pub fn centerline(&self, segments: usize) -> Vec<(f64, f64)> {
        (0..=segments)
            .map(|i| self.point(i as f64 / segments as f64))
            .collect()
    }

    fn stamp_count(&self) -> usize {
        let arc = self.length + 2.0 * PI * self.frequency * self.amplitude;
        (arc / STAMP_SPACING).ceil() as usize + 1
    }
}

/// Total absolute turning `Σ|Δθ|` of a polyline.
pub fn integrated_curvature(points: &[(f64, f64)]) -> f64 {
    let headings: Vec<f64> = points
        .windows(2)
        .map(|w| (w[1].1 - w[0].1).atan2(w[1].0 - w[0].0))
        .collect();
    headings
        .windows(2)
        .map(|h| {
            let d = (h[1] - h[0]).rem_euclid(2.0 * PI);
            if d > PI { 2.0 * PI - d } else { d }
        })
        .sum()
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub level: Level,
    pub fibers: Vec<Fiber>,
    pub image: GrayImage,
}

impl SyntheticSample {
    pub fn mean_integrated_curvature(&self) -> f64 {
        if self.fibers.is_empty() {
            return 0.0;
        }
        self.fibers
            .iter()
            .map(|f| integrated_curvature(&f.centerline(CURVATURE_SEGMENTS)))
            .sum::<f64>()
            / self.fibers.len() as f64
    }
}

fn sample_rng(seed: u64, level: Level, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((level.get() as u64) << 32) | index as u64);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draws the fibers for one sample. Depends only on `(spec, level, index)`.
pub fn draw_fibers(spec: &SyntheticSpec, level: Level, index: usize) -> Vec<Fiber> {
    draw_fibers_with(spec, level, &mut sample_rng(spec.seed, level, index))
}

fn draw_fibers_with(spec: &SyntheticSpec, level: Level, rng: &mut ChaCha8Rng) -> Vec<Fiber> {
    let size = spec.size as f64;
    let count = rng.gen_range(spec.fibers.0..=spec.fibers.1);
    (0..count)
        .map(|_| Fiber {
            center: (
                rng.gen_range(0.25..0.75) * size,
                rng.gen_range(0.25..0.75) * size,
            ),
            angle: rng.gen_range(0.0..PI),
            length: 1.5 * size,
            amplitude: uniform(rng, spec.amplitude[level.index()]),
            frequency: uniform(rng, spec.frequency[level.index()]),
            phase: rng.gen_range(0.0..2.0 * PI),
        })
        .collect()
}

/// Noise-free intensity of the fibers, summed over fibers and clipped to 1.
pub fn render_fibers(size: usize, sigma: f64, fibers: &[Fiber]) -> Vec<f64> {
    let mut total = vec![0.0; size * size];
    let mut layer = vec![0.0f64; size * size];
    let radius = 3.0 * sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for fiber in fibers {
        layer.iter_mut().for_each(|v| *v = 0.0);
        let m = fiber.stamp_count();
        for k in 0..m {
            let (x, y) = fiber.point(k as f64 / (m - 1) as f64);
            let x0 = (x - radius).floor().max(0.0) as usize;
            let y0 = (y - radius).floor().max(0.0) as usize;
            let x1 = ((x + radius).ceil().min(size as f64 - 1.0)).max(-1.0);
            let y1 = ((y + radius).ceil().min(size as f64 - 1.0)).max(-1.0);
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            for py in y0..=y1 as usize {
                for px in x0..=x1 as usize {
                    // pixel centres sit at half-integer coordinates
                    let dx = px as f64 + 0.5 - x;
                    let dy = py as f64 + 0.5 - y;
                    let v = (-(dx * dx + dy * dy) * inv).exp();
                    let cell = &mut layer[py * size + px];
                    if v > *cell {
                        *cell = v;
                    }
                }
            }
        }
        for (t, l) in total.iter_mut().zip(&layer) {
            *t += l;
        }
    }
    total.iter_mut().for_each(|v| *v = v.min(1.0));
    total
}

/// Pixels within `dilation` of any fiber's centerline.
pub fn fiber_support(size: usize, fibers: &[Fiber], dilation: f64) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    let r2 = dilation * dilation;
    for fiber in fibers {
        let m = fiber.stamp_count();
        for k in 0..m {
            let (x, y) = fiber.point(k as f64 / (m - 1) as f64);
            let lo = |c: f64| (c - dilation - 1.0).floor().max(0.0) as usize;
            let hi = |c: f64| ((c + dilation + 1.0).ceil().max(0.0) as usize).min(size);
            for py in lo(y)..hi(y) {
                for px in lo(x)..hi(x) {
                    let dx = px as f64 + 0.5 - x;
                    let dy = py as f64 + 0.5 - y;
                    if dx * dx + dy * dy <= r2 {
                        mask[py * size + px] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Renders one sample: fibers, background noise, clipping and 8-bit
/// quantization.
pub fn generate_sample(spec: &SyntheticSpec, level: Level, index: usize) -> SyntheticSample {
    let mut rng = sample_rng(spec.seed, level, index);
    let fibers = draw_fibers_with(spec, level, &mut rng);
    let mut clean = render_fibers(spec.size, spec.sigma, &fibers);
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
        for v in &mut clean {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let bytes: Vec<u8> = clean.iter().map(|v| (v * 255.0).round() as u8).collect();
    SyntheticSample {
        level,
        fibers,
        image: GrayImage::from_bytes(spec.size, spec.size, &bytes),
    }
}

fn image_name(level: Level, index: usize) -> String {
    format!("level{level}/img_{level}_{index:05}.pgm")
}

/// Writes `per_level` images for each level under `out_dir`, plus
/// `manifest.csv` and `meta.csv`. Returns the manifest.
pub fn gen_synthetic(
    spec: &SyntheticSpec,
    per_level: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    for level in Level::ALL {
        let dir = out_dir.join(format!("level{level}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let jobs: Vec<(Level, usize)> = Level::ALL
        .iter()
        .flat_map(|&l| (0..per_level).map(move |i| (l, i)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(level, index)| {
            let sample = generate_sample(spec, level, index);
            let name = image_name(level, index);
            save_image(&sample.image, out_dir.join(&name))?;
            Ok((name, level, sample.fibers.len(), sample.mean_integrated_curvature()))
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        entries: rows
            .iter()
            .map(|(name, level, _, _)| ManifestEntry {
                raw_path: name.clone(),
                path: out_dir.join(name),
                level: *level,
            })
            .collect(),
    };
    manifest.write(out_dir.join("manifest.csv"))?;

    let meta_path = out_dir.join("meta.csv");
    let mut meta = String::from("path,level,num_fibers,mean_integrated_curvature\n");
    for (name, level, k, curv) in &rows {
        meta.push_str(&format!("{name},{level},{k},{curv:.9}\n"));
    }
    std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(manifest)
}
