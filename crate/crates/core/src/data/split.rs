use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DataError, Error, Result};
use crate::level::NUM_LEVELS;

use super::manifest::DatasetManifest;

/// Training share of a level with `n` samples: `floor(ratio * n)`, at least
/// one when `n >= 2`.
pub fn train_count(n: usize, ratio: f64) -> usize {
    // the epsilon absorbs products like 0.57 * 100 = 56.999...
    let k = (ratio * n as f64 + 1e-9).floor() as usize;
    if n >= 2 {
        k.clamp(1, n)
    } else {
        k.min(n)
    }
}

/// Per-level shuffled split. Both halves keep manifest order.
pub fn stratified_split(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    if manifest.is_empty() {
        return Err(DataError::EmptyManifest.into());
    }
    let mut to_train = vec![false; manifest.len()];
    for level in 0..NUM_LEVELS {
        let mut idx: Vec<usize> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.level.index() == level)
            .map(|(i, _)| i)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(level as u64);
        idx.shuffle(&mut rng);
        for &i in &idx[..train_count(idx.len(), ratio)] {
            to_train[i] = true;
        }
    }
    let mut train = DatasetManifest::default();
    let mut val = DatasetManifest::default();
    for (e, t) in manifest.entries.iter().zip(to_train) {
        if t { &mut train } else { &mut val }.entries.push(e.clone());
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::ManifestEntry;
    use crate::level::Level;

    pub(crate) fn synthetic_manifest(counts: [usize; 4]) -> DatasetManifest {
        let mut m = DatasetManifest::default();
        for (l, &n) in counts.iter().enumerate() {
            for i in 0..n {
                m.entries.push(ManifestEntry {
                    raw_path: format!("{l}_{i}"),
                    path: format!("{l}_{i}").into(),
                    level: Level::from_index(l).unwrap(),
                });
            }
        }
        m
    }

    #[test]
    fn ten_per_level() {
        let (t, v) = stratified_split(&synthetic_manifest([10; 4]), 0.7, 1).unwrap();
        assert_eq!(t.counts(), [7; 4]);
        assert_eq!(v.counts(), [3; 4]);
    }

    #[test]
    fn deterministic_per_seed() {
        let m = synthetic_manifest([20, 13, 9, 4]);
        assert_eq!(stratified_split(&m, 0.6, 5).unwrap(), stratified_split(&m, 0.6, 5).unwrap());
        assert_ne!(stratified_split(&m, 0.6, 5).unwrap().0, stratified_split(&m, 0.6, 6).unwrap().0);
    }

    #[test]
    fn small_levels_keep_one_training_sample() {
        assert_eq!(train_count(2, 0.1), 1);
        assert_eq!(train_count(1, 0.7), 0);
        assert_eq!(train_count(0, 0.7), 0);
        assert_eq!(train_count(100, 0.57), 57);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(stratified_split(&synthetic_manifest([1; 4]), 1.0, 0).is_err());
        assert!(matches!(
            stratified_split(&DatasetManifest::default(), 0.5, 0),
            Err(Error::Data(DataError::EmptyManifest))
        ));
    }
}
