mod common;

use common::{oracle_metrics, random_metric_instance};
use glassdepth::evaluation::{aggregate, compute_metrics, format_table, Aggregation, MaskScope, MetricsReport};
use glassdepth::geometry::{DepthMap, TransparencyMask};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_double_loop_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..1000 {
        let (pred, gt, mask) = random_metric_instance(&mut rng, 8, 8);
        for scope in [MaskScope::TransparentOnly, MaskScope::AllPixels] {
            let got = compute_metrics(&pred, &gt, &mask, scope).unwrap();
            assert_eq!(got, oracle_metrics(&pred, &gt, &mask, scope));
        }
    }
}

#[test]
fn permuting_pixels_jointly_keeps_counts_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let (pred, gt, mask) = random_metric_instance(&mut rng, 8, 8);
        let mut order: Vec<usize> = (0..64).collect();
        order.shuffle(&mut rng);
        let perm = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let p2 = DepthMap::dense(8, 8, perm(pred.values())).unwrap();
        let g2 = DepthMap::dense(8, 8, perm(gt.values())).unwrap();
        let m2 = TransparencyMask::new(8, 8, order.iter().map(|&i| mask.mask()[i]).collect()).unwrap();
        for scope in [MaskScope::TransparentOnly, MaskScope::AllPixels] {
            let a = compute_metrics(&pred, &gt, &mask, scope).unwrap();
            let b = compute_metrics(&p2, &g2, &m2, scope).unwrap();
            // counts are order-free; sums differ only by rounding order
            assert_eq!(
                (a.pixel_count, a.delta_105, a.delta_110, a.delta_125),
                (b.pixel_count, b.delta_105, b.delta_110, b.delta_125)
            );
            for (x, y) in [(a.rmse, b.rmse), (a.mae, b.mae), (a.rel, b.rel)] {
                assert!((x - y).abs() <= 1e-14 * x.max(1.0));
            }
        }
    }
}

#[test]
fn pixel_weighted_aggregate_equals_pooled_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let parts: Vec<_> = (0..6).map(|_| random_metric_instance(&mut rng, 8, 8)).collect();
    let reports: Vec<MetricsReport> = parts
        .iter()
        .map(|(p, g, m)| compute_metrics(p, g, m, MaskScope::TransparentOnly).unwrap())
        .collect();
    let agg = aggregate(&reports, Aggregation::PixelWeighted).unwrap();

    // stack all samples into one tall map
    let cat = |f: &dyn Fn(&(DepthMap, DepthMap, TransparencyMask)) -> Vec<f64>| {
        parts.iter().flat_map(f).collect::<Vec<f64>>()
    };
    let pred = DepthMap::dense(48, 8, cat(&|s| s.0.values().to_vec())).unwrap();
    let gt = DepthMap::dense(48, 8, cat(&|s| s.1.values().to_vec())).unwrap();
    let mask = TransparencyMask::new(48, 8, parts.iter().flat_map(|s| s.2.mask().to_vec()).collect()).unwrap();
    let pooled = compute_metrics(&pred, &gt, &mask, MaskScope::TransparentOnly).unwrap();

    assert_eq!(agg.pixel_count, pooled.pixel_count);
    for (a, b) in [
        (agg.rmse, pooled.rmse),
        (agg.mae, pooled.mae),
        (agg.rel, pooled.rel),
        (agg.delta_105, pooled.delta_105),
        (agg.delta_110, pooled.delta_110),
        (agg.delta_125, pooled.delta_125),
    ] {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let per = aggregate(&reports, Aggregation::PerSample).unwrap();
    let mean_rmse = reports.iter().map(|r| r.rmse).sum::<f64>() / 6.0;
    assert!((per.rmse - mean_rmse).abs() < 1e-15);
}

#[test]
fn perfect_and_offset_predictions() {
    let gt = DepthMap::dense(4, 4, (0..16).map(|i| 0.5 + 0.1 * i as f64).collect()).unwrap();
    let all = TransparencyMask::new(4, 4, vec![true; 16]).unwrap();
    let r = compute_metrics(&gt, &gt, &all, MaskScope::TransparentOnly).unwrap();
    assert_eq!((r.rmse, r.mae, r.rel), (0.0, 0.0, 0.0));
    assert_eq!((r.delta_105, r.delta_110, r.delta_125), (100.0, 100.0, 100.0));

    let off = DepthMap::dense(4, 4, gt.values().iter().map(|v| v + 0.05).collect()).unwrap();
    let r = compute_metrics(&off, &gt, &all, MaskScope::AllPixels).unwrap();
    assert!((r.rmse - 0.05).abs() < 1e-15 && (r.mae - 0.05).abs() < 1e-15);
    let table = format_table(&["method"], &[(vec!["offset".into()], r)]);
    assert!(table.contains("offset") && table.contains("RMSE"));
}

proptest! {
    #[test]
    fn reports_are_ordered_and_bounded(seed in 0u64..10_000, h in 2usize..9, w in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, gt, mask) = random_metric_instance(&mut rng, h, w);
        let r = compute_metrics(&pred, &gt, &mask, MaskScope::TransparentOnly).unwrap();
        prop_assert!(r.delta_105 <= r.delta_110 && r.delta_110 <= r.delta_125);
        prop_assert!(r.delta_125 <= 100.0 && r.delta_105 >= 0.0);
        prop_assert!(r.rmse >= r.mae * (1.0 - 1e-12) && r.mae >= 0.0);
    }
}
