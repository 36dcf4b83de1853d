use glassdepth::codec::{pixel_loss_values, Codec, CodecConfig};
use glassdepth::denoiser::{ConditionMode, DepthLatent, Denoiser, DenoiserConfig, VisualCondition};
use glassdepth::geometry::DepthMap;
use glassdepth::tensor::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Constant background with a textured patch at `(oy, ox)`.
fn patch_image(h: usize, w: usize, oy: usize, ox: usize, patch: &[f64]) -> Tensor {
    let mut d = vec![0.3; 3 * h * w];
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                d[c * h * w + (oy + y) * w + ox + x] = patch[c * 64 + y * 8 + x];
            }
        }
    }
    Tensor::from_vec(&[3, h, w], d).unwrap()
}

#[test]
fn pyramid_features_translate_with_the_image() {
    let den = Denoiser::new(&DenoiserConfig::default(), 1000, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let patch: Vec<f64> = (0..192).map(|_| rng.gen_range(0.0..1.0)).collect();
    let (h, w) = (32, 32);
    let a = den.extract_multiscale(&patch_image(h, w, 8, 8, &patch), false).unwrap();
    let b = den.extract_multiscale(&patch_image(h, w, 12, 12, &patch), false).unwrap();
    for (level, shift) in [(0usize, 4usize), (1, 2), (2, 1)] {
        let (c, hh, ww) = a[level].chw();
        // interior crop away from the zero-padded border
        let margin = 2;
        for ch in 0..c {
            for y in margin..hh - margin - shift {
                for x in margin..ww - margin - shift {
                    let va = a[level].data()[(ch * hh + y) * ww + x];
                    let vb = b[level].data()[(ch * hh + y + shift) * ww + x + shift];
                    assert!((va - vb).abs() < 1e-12, "level {level} ch {ch} ({y},{x}): {va} vs {vb}");
                }
            }
        }
    }
}

#[test]
fn pyramid_shapes_follow_the_input() {
    let den = Denoiser::new(&DenoiserConfig::default(), 1000, 0).unwrap();
    let p = den.extract_multiscale(&Tensor::zeros(&[3, 48, 64]), false).unwrap();
    let shapes: Vec<_> = p.iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![8, 48, 64], vec![16, 24, 32], vec![32, 12, 16]]);
    let err = den.extract_multiscale(&Tensor::zeros(&[3, 46, 64]), false).unwrap_err();
    assert!(err.to_string().contains("pad by 2 rows"), "{err}");
}

#[test]
fn condition_drives_the_prediction() {
    let den = Denoiser::new(&DenoiserConfig::default(), 1000, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = DepthLatent::new(random_tensor(&mut rng, &[4, 12, 16])).unwrap();
    let c1 = VisualCondition::new(random_tensor(&mut rng, &[64, 12, 16])).unwrap();
    let c2 = VisualCondition::new(random_tensor(&mut rng, &[64, 12, 16])).unwrap();
    assert_ne!(den.predict(&x, 500, &c1).unwrap(), den.predict(&x, 500, &c2).unwrap());
    assert!(den.predict(&x, 1000, &c1).is_err());
    assert!(den.predict(&x, -1, &c1).is_err());
}

#[test]
fn untrained_codec_keeps_shape_and_range_contracts() {
    let cfg = CodecConfig::default();
    let codec = Codec::new(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (24, 32);
    let d = DepthMap::dense(h, w, (0..h * w).map(|_| rng.gen_range(0.2..2.0)).collect()).unwrap();
    let z = codec.encode(&d).unwrap();
    assert_eq!(z.tensor().shape(), &[cfg.latent_channels, h / 4, w / 4]);
    let out = codec.decode(&z).unwrap();
    assert_eq!((out.height(), out.width()), (h, w));
    let n = cfg.normalization;
    assert!(out.values().iter().all(|&v| v > n.d_min && v < n.d_max));
    assert_eq!(out.valid_count(), h * w);

    let far = DepthMap::dense(h, w, vec![5.0; h * w]).unwrap();
    assert!(codec.encode(&far).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_loss_is_nonnegative_symmetric_and_zero_only_at_equality(
        seed in 0u64..1_000_000,
        n in 1usize..50,
        lambda in 0.0f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let l = pixel_loss_values(&a, &b, lambda).unwrap();
        prop_assert!(l > 0.0);
        prop_assert_eq!(pixel_loss_values(&a, &a, lambda).unwrap(), 0.0);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let pa: Vec<f64> = order.iter().map(|&i| a[i]).collect();
        let pb: Vec<f64> = order.iter().map(|&i| b[i]).collect();
        prop_assert!((pixel_loss_values(&pa, &pb, lambda).unwrap() - l).abs() < 1e-14);
        // constant residual closed form
        let shifted: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        let want = 0.1 * (1.0 + lambda).sqrt();
        prop_assert!((pixel_loss_values(&shifted, &a, lambda).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn prediction_shape_matches_input_for_random_configs(
        seed in 0u64..1000,
        latent in 1usize..5,
        blocks in 1usize..3,
        channels in prop::sample::select(vec![8usize, 12, 16]),
        rgb_only in any::<bool>(),
        hq in 1usize..4,
        wq in 1usize..4,
    ) {
        let cfg = DenoiserConfig {
            latent_channels: latent,
            channels,
            blocks,
            bottleneck: 4,
            time_dim: 8,
            pyramid_channels: [4, 4, 8],
            condition: if rgb_only { ConditionMode::RgbOnly } else { ConditionMode::Refined },
            ..DenoiserConfig::default()
        };
        let den = Denoiser::new(&cfg, 100, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (4 * hq, 4 * wq);
        let rgb = random_tensor(&mut rng, &[3, h, w]);
        let depth = random_tensor(&mut rng, &[2, h, w]);
        let c = den.condition(&rgb, if rgb_only { None } else { Some(&depth) }).unwrap();
        prop_assert_eq!(c.features().shape(), &[channels, hq, wq]);
        let x = DepthLatent::new(random_tensor(&mut rng, &[latent, hq, wq])).unwrap();
        let y = den.predict(&x, 42, &c).unwrap();
        prop_assert_eq!(y.tensor().shape(), x.tensor().shape());
        prop_assert!(y.tensor().is_finite());
    }
}
