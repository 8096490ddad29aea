use proptest::prelude::*;

use tortuosity::ckpt;
use tortuosity::data::{stratified_split, DatasetManifest, ManifestEntry};
use tortuosity::metrics::{ConfusionMatrix, MetricsReport};
use tortuosity::optim::ScheduleConfig;
use tortuosity::vit::mass_mask;
use tortuosity::{Level, ParamSet32, Tensor32};

fn report(labels: &[i64], preds: &[i64]) -> MetricsReport {
    let mut cm = ConfusionMatrix::new();
    cm.accumulate_values(preds, labels).unwrap();
    MetricsReport::from_confusion(&cm).unwrap()
}

fn pairs() -> impl Strategy<Value = Vec<(i64, i64)>> {
    prop::collection::vec((1i64..=4, 1i64..=4), 1..120)
}

proptest! {
    #[test]
    fn metrics_ignore_sample_order(v in pairs(), seed in any::<u64>()) {
        let (labels, preds): (Vec<i64>, Vec<i64>) = v.iter().copied().unzip();
        let mut shuffled = v.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        let (l2, p2): (Vec<i64>, Vec<i64>) = shuffled.into_iter().unzip();
        prop_assert_eq!(report(&labels, &preds), report(&l2, &p2));
    }

    #[test]
    fn weighted_rates_stay_in_unit_interval(v in pairs()) {
        let (labels, preds): (Vec<i64>, Vec<i64>) = v.into_iter().unzip();
        let r = report(&labels, &preds);
        for x in [r.overall.wacc, r.overall.wse, r.overall.wsp].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert!((0.0..=1.0).contains(&r.adjacency_error_fraction));
        let total: u64 = r.per_level.iter().map(|e| e.support).sum();
        prop_assert_eq!(total as usize, labels.len());
    }

    #[test]
    fn ptf_roundtrip_is_bit_exact(
        tensors in prop::collection::btree_map(
            "[a-z]{1,6}(\\.[a-z0-9]{1,4}){0,2}",
            prop::collection::vec(any::<u32>(), 0..40),
            1..6,
        )
    ) {
        let mut p = ParamSet32::new();
        for (name, bits) in &tensors {
            let data = bits.iter().map(|b| f32::from_bits(*b)).collect();
            p.insert(name.clone(), Tensor32::from_vec(&[bits.len()], data).unwrap());
        }
        let (back, _) = ckpt::from_bytes::<f32>(&ckpt::to_bytes(&p, &serde_json::json!({}))).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for (name, bits) in &tensors {
            let got: Vec<u32> = back.get(name).unwrap().data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(&got, bits);
        }
    }

    #[test]
    fn split_partitions_each_level(
        counts in prop::array::uniform4(0usize..60),
        ratio in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        prop_assume!(counts.iter().sum::<usize>() > 0);
        let mut m = DatasetManifest::default();
        for (l, &n) in counts.iter().enumerate() {
            for i in 0..n {
                let name = format!("{l}_{i}");
                m.entries.push(ManifestEntry {
                    raw_path: name.clone(),
                    path: name.into(),
                    level: Level::from_index(l).unwrap(),
                });
            }
        }
        let (train, val) = stratified_split(&m, ratio, seed).unwrap();
        for l in 0..4 {
            let (t, v) = (train.counts()[l], val.counts()[l]);
            prop_assert_eq!(t + v, counts[l]);
            prop_assert!((t as f64 - ratio * counts[l] as f64).abs() <= 1.0);
        }
        let mut names: Vec<_> = train.entries.iter().chain(&val.entries).map(|e| e.raw_path.clone()).collect();
        names.sort();
        names.dedup();
        prop_assert_eq!(names.len(), m.len());
    }

    #[test]
    fn mask_grows_with_threshold(
        raw in prop::collection::vec(0.0f64..1.0, 16),
        a in 0.01f64..1.0,
        b in 0.01f64..1.0,
    ) {
        prop_assume!(raw.iter().sum::<f64>() > 0.0);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = mass_mask(&raw, 4, lo).unwrap();
        let large = mass_mask(&raw, 4, hi).unwrap();
        prop_assert!(small.kept_count() <= large.kept_count());
        prop_assert!(small.kept.iter().all(|k| large.cells[*k]));
        prop_assert!(large.kept_fraction <= 1.0);
    }

    #[test]
    fn schedule_is_bounded_and_decays(
        peak in 1e-6f64..1e-2,
        warmup in 0usize..20,
        extra in 1usize..200,
    ) {
        let total = warmup + extra;
        let s = ScheduleConfig { peak_lr: peak, min_lr: 0.0, warmup_steps: warmup, total_steps: total };
        let lrs: Vec<f64> = (0..total).map(|t| s.lr_at(t).unwrap()).collect();
        prop_assert!(lrs.iter().all(|&lr| (0.0..=peak * (1.0 + 1e-12)).contains(&lr)));
        prop_assert!(lrs[..warmup].windows(2).all(|w| w[0] < w[1]));
        prop_assert!(lrs[warmup..].windows(2).all(|w| w[0] >= w[1]));
    }
}
