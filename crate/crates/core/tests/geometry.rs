mod common;

use common::{dense_solve, plane_depth, random_scene, rel_err, Scene};
use glassdepth::dataset::{generate_indexed, SynthSpec};
use glassdepth::geometry::{
    detect_boundaries, global_optimize_depth, mask_invalid_depth, nearest_fill, normals_from_depth,
    optimization_energy, BoundaryMap, DepthMap, Intrinsics, NormalMap, OptimizerWeights, SolverOptions,
    TransparencyMask,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn cg_matches_dense_solve_on_small_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let wt = OptimizerWeights::default();
    for k in 0..25 {
        let s = random_scene(&mut rng);
        let cg = global_optimize_depth(&s.sparse, &s.normals, &s.boundaries, wt, &s.intr, SolverOptions::default())
            .unwrap();
        let dense = dense_solve(&s, wt);
        let err = rel_err(cg.values(), &dense);
        assert!(err < 1e-6, "scene {k} ({}x{}): relative error {err}", s.sparse.height(), s.sparse.width());
        assert!(cg.validity().iter().all(|&v| v));
    }
}

/// Smoothness plus observations only: the normal equations are a weighted
/// graph Laplacian plus a diagonal, built here directly.
#[test]
fn laplacian_system_without_normal_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let wt = OptimizerWeights {
        w_obs: 10.0,
        w_normal: 0.0,
        w_smooth: 1.0,
    };
    for _ in 0..10 {
        let (h, w) = (rng.gen_range(2..8), rng.gen_range(2..8));
        let n = h * w;
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..2.0)).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        valid[0] = true;
        let bw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
        let sparse = DepthMap::new(h, w, values.clone(), valid.clone()).unwrap();
        let intr = Intrinsics::centered(w, h, 10.0);
        let got = global_optimize_depth(
            &sparse,
            &NormalMap::fronto_parallel(h, w),
            &BoundaryMap::new(h, w, bw.clone()).unwrap(),
            wt,
            &intr,
            SolverOptions::default(),
        )
        .unwrap();

        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for p in 0..n {
            if valid[p] {
                a[(p, p)] += wt.w_obs;
                b[p] += wt.w_obs * values[p];
            }
        }
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                let mut link = |q: usize| {
                    let k = wt.w_smooth * bw[p] * bw[q];
                    a[(p, p)] += k;
                    a[(q, q)] += k;
                    a[(p, q)] -= k;
                    a[(q, p)] -= k;
                };
                if c + 1 < w {
                    link(p + 1);
                }
                if r + 1 < h {
                    link(p + w);
                }
            }
        }
        let want: Vec<f64> = a.lu().solve(&b).unwrap().iter().copied().collect();
        assert!(rel_err(got.values(), &want) < 1e-6);
    }
}

#[test]
fn plane_with_hole_is_filled() {
    let (h, w) = (8, 8);
    let intr = Intrinsics::centered(w, h, 8.0);
    let gt = DepthMap::dense(h, w, vec![1.0; h * w]).unwrap();
    let mask: Vec<bool> = (0..h * w).map(|p| (2..6).contains(&(p / w)) && (3..6).contains(&(p % w))).collect();
    let mask = TransparencyMask::new(h, w, mask).unwrap();
    let s = Scene {
        sparse: mask_invalid_depth(&gt, &mask).unwrap(),
        normals: NormalMap::fronto_parallel(h, w),
        boundaries: BoundaryMap::uniform(h, w),
        intr,
    };
    let wt = OptimizerWeights::default();
    let out = global_optimize_depth(&s.sparse, &s.normals, &s.boundaries, wt, &intr, SolverOptions::default()).unwrap();
    for &v in out.values() {
        assert!((v - 1.0).abs() < 1e-4, "{v}");
    }
    let dense = dense_solve(&s, wt);
    assert!(rel_err(out.values(), &dense) < 1e-6);
}

#[test]
fn strip_between_two_anchors_interpolates_linearly() {
    let (h, w) = (2, 9);
    let mut values = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    for r in 0..h {
        values[r * w] = 1.0;
        valid[r * w] = true;
        values[r * w + w - 1] = 2.0;
        valid[r * w + w - 1] = true;
    }
    let sparse = DepthMap::new(h, w, values, valid).unwrap();
    let wt = OptimizerWeights {
        w_obs: 1e9,
        w_normal: 0.0,
        w_smooth: 1.0,
    };
    let opts = SolverOptions {
        tol: 1e-14,
        max_iter_factor: 10,
    };
    let out = global_optimize_depth(
        &sparse,
        &NormalMap::fronto_parallel(h, w),
        &BoundaryMap::uniform(h, w),
        wt,
        &Intrinsics::centered(w, h, 10.0),
        opts,
    )
    .unwrap();
    for r in 0..h {
        for c in 0..w {
            let want = 1.0 + c as f64 / (w - 1) as f64;
            assert!((out.get(r, c) - want).abs() < 1e-6, "({r},{c}) {} vs {want}", out.get(r, c));
        }
    }
}

#[test]
fn zero_weight_seam_keeps_the_step() {
    let (h, w) = (6, 10);
    let gt: Vec<f64> = (0..h * w).map(|p| if p % w < 5 { 1.0 } else { 2.0 }).collect();
    let gt = DepthMap::dense(h, w, gt).unwrap();
    let mask: Vec<bool> = (0..h * w).map(|p| (1..5).contains(&(p / w)) && (2..8).contains(&(p % w))).collect();
    let mask = TransparencyMask::new(h, w, mask).unwrap();
    let bw: Vec<f64> = (0..h * w).map(|p| if p % w == 4 || p % w == 5 { 0.0 } else { 1.0 }).collect();
    let out = global_optimize_depth(
        &mask_invalid_depth(&gt, &mask).unwrap(),
        &NormalMap::fronto_parallel(h, w),
        &BoundaryMap::new(h, w, bw).unwrap(),
        OptimizerWeights::default(),
        &Intrinsics::centered(w, h, 10.0),
        SolverOptions::default(),
    )
    .unwrap();
    for (a, b) in out.values().iter().zip(gt.values()) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn energy_never_exceeds_nearest_fill_on_synthetic_scenes() {
    let spec = SynthSpec::default();
    let wt = OptimizerWeights::default();
    for i in 0..6 {
        let s = generate_indexed(&spec, i).unwrap();
        let sparse = mask_invalid_depth(&s.raw_depth, &s.mask).unwrap();
        let out =
            global_optimize_depth(&sparse, &s.normals, &s.boundaries, wt, &s.intrinsics, SolverOptions::default())
                .unwrap();
        let e = |x: &[f64]| optimization_energy(x, &sparse, &s.normals, &s.boundaries, wt, &s.intrinsics).unwrap();
        let (e_opt, e_fill) = (e(out.values()), e(&nearest_fill(&sparse)));
        assert!(e_opt <= e_fill, "sample {i}: {e_opt} > {e_fill}");
    }
}

/// CG sums in scan order, so the two solves stop at slightly different
/// iterates; agreement is checked at solver precision.
#[test]
fn transposed_scene_gives_transposed_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let wt = OptimizerWeights::default();
    let tight = SolverOptions {
        tol: 1e-14,
        max_iter_factor: 50,
    };
    for _ in 0..10 {
        let s = random_scene(&mut rng);
        for (opts, tol) in [(SolverOptions::default(), 1e-6), (tight, 1e-10)] {
            let a = global_optimize_depth(&s.sparse, &s.normals, &s.boundaries, wt, &s.intr, opts).unwrap();
            let b = global_optimize_depth(
                &s.sparse.transposed(),
                &s.normals.transposed(),
                &s.boundaries.transposed(),
                wt,
                &s.intr.transposed(),
                opts,
            )
            .unwrap();
            let err = rel_err(b.values(), a.transposed().values());
            assert!(err < tol, "{err} at solver tol {}", opts.tol);
        }
    }
}

#[test]
fn tilted_plane_normals_match_the_plane() {
    let (h, w) = (12, 16);
    let intr = Intrinsics::centered(w, h, 14.0);
    let n = [0.2, -0.1, 1.0];
    let depth = plane_depth(h, w, &intr, n, 1.0);
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    // normals face the camera
    let want = [-n[0] / len, -n[1] / len, -n[2] / len];
    for v in normals_from_depth(&depth, &intr).unwrap().vectors() {
        for k in 0..3 {
            assert!((v[k] - want[k]).abs() < 1e-3, "{v:?} vs {want:?}");
        }
    }
}

#[test]
fn half_planes_are_cut_along_the_seam() {
    let (h, w) = (6, 8);
    let d: Vec<f64> = (0..h * w).map(|p| if p % w < 4 { 1.0 } else { 2.0 }).collect();
    let d = DepthMap::dense(h, w, d).unwrap();
    let b = detect_boundaries(&d, 0.5, &TransparencyMask::empty(h, w)).unwrap();
    for p in 0..h * w {
        let seam = p % w == 3 || p % w == 4;
        assert_eq!(b.weights()[p], if seam { 0.0 } else { 1.0 }, "pixel {p}");
    }
    let all = detect_boundaries(&d, 1.5, &TransparencyMask::empty(h, w)).unwrap();
    assert!(all.weights().iter().all(|&x| x == 1.0));
}

proptest! {
    #[test]
    fn masking_only_clears_validity(
        vals in prop::collection::vec(0.2f64..2.0, 20),
        mask in prop::collection::vec(any::<bool>(), 20),
    ) {
        let d = DepthMap::dense(4, 5, vals).unwrap();
        let m = TransparencyMask::new(4, 5, mask.clone()).unwrap();
        let out = mask_invalid_depth(&d, &m).unwrap();
        prop_assert_eq!(out.values(), d.values());
        for p in 0..20 {
            prop_assert_eq!(out.validity()[p], !mask[p]);
        }
    }

    #[test]
    fn normals_are_unit_and_boundaries_in_range(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.gen_range(2..9), rng.gen_range(2..9));
        let d: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.3..2.0)).collect();
        let d = DepthMap::dense(h, w, d).unwrap();
        let intr = Intrinsics::centered(w, h, rng.gen_range(4.0..30.0));
        for v in normals_from_depth(&d, &intr).unwrap().vectors() {
            prop_assert!(((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() < 1e-12);
        }
        let b = detect_boundaries(&d, rng.gen_range(0.01..1.0), &TransparencyMask::empty(h, w)).unwrap();
        prop_assert!(b.weights().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

