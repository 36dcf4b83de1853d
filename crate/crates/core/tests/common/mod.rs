#![allow(dead_code)]

use glassdepth::evaluation::{MaskScope, MetricsReport, DELTAS};
use glassdepth::geometry::{
    mask_invalid_depth, normals_from_depth, optimization_energy, BoundaryMap, DepthMap, Intrinsics, NormalMap,
    OptimizerWeights, TransparencyMask,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Scene pieces fed to the optimizer.
pub struct Scene {
    pub sparse: DepthMap,
    pub normals: NormalMap,
    pub boundaries: BoundaryMap,
    pub intr: Intrinsics,
}

/// Depth of the plane `n · P = d` seen through a pinhole camera.
pub fn plane_depth(h: usize, w: usize, intr: &Intrinsics, n: [f64; 3], d: f64) -> DepthMap {
    let mut v = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let ray = [(c as f64 - intr.cx) / intr.fx, (r as f64 - intr.cy) / intr.fy, 1.0];
            v.push(d / (n[0] * ray[0] + n[1] * ray[1] + n[2] * ray[2]));
        }
    }
    DepthMap::dense(h, w, v).unwrap()
}

pub fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let h = rng.gen_range(2..=10);
    let w = rng.gen_range(2..=100 / h).max(2);
    let intr = Intrinsics::centered(w, h, rng.gen_range(5.0..20.0));
    let n = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0];
    let gt = plane_depth(h, w, &intr, n, rng.gen_range(0.5..1.5));
    let mut mask: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.3)).collect();
    mask[rng.gen_range(0..h * w)] = false;
    let mask = TransparencyMask::new(h, w, mask).unwrap();
    Scene {
        sparse: mask_invalid_depth(&gt, &mask).unwrap(),
        normals: normals_from_depth(&gt, &intr).unwrap(),
        boundaries: BoundaryMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0.2..1.0)).collect()).unwrap(),
        intr,
    }
}

/// Dense minimizer of the quadratic energy. The Hessian and linear term are
/// recovered from energy evaluations by polarization, so this path shares no
/// code with the sparse assembly or the CG solver.
pub fn dense_solve(s: &Scene, wt: OptimizerWeights) -> Vec<f64> {
    let n = s.sparse.values().len();
    let e = |x: &[f64]| optimization_energy(x, &s.sparse, &s.normals, &s.boundaries, wt, &s.intr).unwrap();
    let zero = vec![0.0; n];
    let e0 = e(&zero);
    let unit = |i: usize, v: f64| {
        let mut x = zero.clone();
        x[i] = v;
        x
    };
    let ep: Vec<f64> = (0..n).map(|i| e(&unit(i, 1.0))).collect();
    let em: Vec<f64> = (0..n).map(|i| e(&unit(i, -1.0))).collect();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for i in 0..n {
        a[(i, i)] = (ep[i] + em[i] - 2.0 * e0) / 2.0;
        b[i] = (em[i] - ep[i]) / 4.0;
        for j in 0..i {
            let mut x = unit(i, 1.0);
            x[j] = 1.0;
            let v = (e(&x) - ep[i] - ep[j] + e0) / 2.0;
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a.cholesky().expect("positive definite").solve(&b).iter().copied().collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    num / b.iter().map(|y| y * y).sum::<f64>().sqrt()
}


/// Pred, gt and mask for one random metric instance. Some predictions sit
/// exactly on a δ ratio to exercise the strict comparison.
pub fn random_metric_instance(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (DepthMap, DepthMap, TransparencyMask) {
    let n = h * w;
    let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
    let pred: Vec<f64> = gt
        .iter()
        .map(|&t| match rng.gen_range(0..4) {
            0 => t * DELTAS[rng.gen_range(0..3)],
            1 => t / DELTAS[rng.gen_range(0..3)],
            _ => t * rng.gen_range(0.7..1.4),
        })
        .collect();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    mask[rng.gen_range(0..n)] = true;
    (
        DepthMap::dense(h, w, pred).unwrap(),
        DepthMap::dense(h, w, gt).unwrap(),
        TransparencyMask::new(h, w, mask).unwrap(),
    )
}

/// Row/column double loop over the metric definitions.
pub fn oracle_metrics(pred: &DepthMap, gt: &DepthMap, mask: &TransparencyMask, scope: MaskScope) -> MetricsReport {
    let (mut n, mut se, mut ae, mut re) = (0usize, 0.0f64, 0.0f64, 0.0f64);
    let mut hits = [0usize; 3];
    for r in 0..gt.height() {
        for c in 0..gt.width() {
            if scope == MaskScope::TransparentOnly && !mask.mask()[r * gt.width() + c] {
                continue;
            }
            let (d, t) = (pred.get(r, c), gt.get(r, c));
            n += 1;
            se += (d - t) * (d - t);
            ae += (d - t).abs();
            re += (d - t).abs() / t;
            for k in 0..3 {
                if d / t < DELTAS[k] && t / d < DELTAS[k] {
                    hits[k] += 1;
                }
            }
        }
    }
    let nf = n as f64;
    MetricsReport {
        rmse: (se / nf).sqrt(),
        rel: re / nf,
        mae: ae / nf,
        delta_105: 100.0 * hits[0] as f64 / nf,
        delta_110: 100.0 * hits[1] as f64 / nf,
        delta_125: 100.0 * hits[2] as f64 / nf,
        pixel_count: n,
        mask_scope: scope,
    }
}

/// Largest relative gap between an analytic and a central-difference
/// derivative over the checked coordinates.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub coords: usize,
    pub max_rel: f64,
    pub worst: (f64, f64),
}

impl GradCheck {
    pub fn record(&mut self, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / scale;
        if rel > self.max_rel {
            self.max_rel = rel;
            self.worst = (analytic, numeric);
        }
        self.coords += 1;
    }
}

/// Gradient of the pixel loss with respect to every prediction entry.
pub fn check_pixel_loss_gradient(rng: &mut ChaCha8Rng, n: usize, lambda: f64) -> GradCheck {
    use glassdepth::autograd::Graph;
    use glassdepth::codec::{pixel_loss_graph, pixel_loss_values};
    use glassdepth::tensor::Tensor;

    let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut g = Graph::new();
    let p = g.variable(Tensor::from_vec(&[1, 1, n], pred.clone()).unwrap());
    let t = g.constant(Tensor::from_vec(&[1, 1, n], gt.clone()).unwrap());
    let loss = pixel_loss_graph(&mut g, p, t, lambda);
    let grads = g.backward(loss);
    let grad = grads.get(p).unwrap().data().to_vec();
    let h = 1e-6;
    let mut out = GradCheck::default();
    for i in 0..n {
        let mut a = pred.clone();
        a[i] += h;
        let mut b = pred.clone();
        b[i] -= h;
        let num = (pixel_loss_values(&a, &gt, lambda).unwrap() - pixel_loss_values(&b, &gt, lambda).unwrap()) / (2.0 * h);
        out.record(grad[i], num);
    }
    out
}

/// Gradient of the full denoiser training loss (all three weighted terms,
/// through the frozen decoder) with respect to a random `fraction` of the
/// denoiser parameters, plus one coordinate from every tensor.
pub fn check_denoiser_loss_gradient(seed: u64, fraction: f64) -> GradCheck {
    use glassdepth::autograd::Graph;
    use glassdepth::codec::{Codec, CodecConfig};
    use glassdepth::dataset::{generate_indexed, SynthSpec};
    use glassdepth::denoiser::{Denoiser, DenoiserConfig};
    use glassdepth::pipeline::{prepare, GeometryConfig};
    use glassdepth::training::{denoiser_loss_graph, normalized_depth, DiffusionExample, TrainConfig};
    use glassdepth::tensor::Tensor;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    let cfg = TrainConfig::default();
    let schedule = cfg.schedule().unwrap();
    let codec = Codec::new(&CodecConfig::default(), seed).unwrap();
    let norm = codec.normalization();
    let sample = generate_indexed(&SynthSpec::default(), seed).unwrap();
    let prepared = prepare(sample, &GeometryConfig::default(), &norm).unwrap();
    let x0 = codec.encode(&prepared.sample.gt_depth).unwrap().into_tensor();
    let gt_norm = normalized_depth(&prepared.sample.gt_depth, &norm);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..x0.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = Tensor::from_vec(x0.shape(), noise).unwrap();
    let ex = DiffusionExample {
        prepared: &prepared,
        x0: &x0,
        gt_norm: &gt_norm,
        t: 321,
        noise: &noise,
    };
    let mut den = Denoiser::new(&DenoiserConfig::default(), cfg.horizon, seed).unwrap();

    let loss_of = |den: &Denoiser| {
        let mut g = Graph::new();
        let p = den.params().bind(&mut g, false);
        let cp = codec.params().bind(&mut g, false);
        let (loss, _) = denoiser_loss_graph(&mut g, &p, den, &codec, &cp, &ex, &schedule, &cfg).unwrap();
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let p = den.params().bind(&mut g, true);
    let cp = codec.params().bind(&mut g, false);
    let (loss, _) = denoiser_loss_graph(&mut g, &p, &den, &codec, &cp, &ex, &schedule, &cfg).unwrap();
    let grads = g.backward(loss);

    let mut picks = Vec::new();
    for (k, e) in den.params().entries().iter().enumerate() {
        let len = e.value.len();
        picks.push((k, rng.gen_range(0..len)));
        for i in 0..len {
            if rng.gen_bool(fraction) {
                picks.push((k, i));
            }
        }
    }
    let ids: Vec<_> = (0..den.params().len()).map(|k| p.vars()[k]).collect();
    // fourth-order central stencil; the two-point rule's rounding floor
    // (~1e-11 here) is too coarse for the smallest gradients
    let h = 5e-4;
    let mut out = GradCheck::default();
    for (k, i) in picks {
        let analytic = grads.get(ids[k]).map_or(0.0, |t| t.data()[i]);
        let id = den.params().find(&den.params().entries()[k].name).unwrap();
        let orig = den.params().get(id).data()[i];
        let mut at = |x: f64| {
            den.params_mut().get_mut(id).data_mut()[i] = x;
            loss_of(&den)
        };
        let (p2, p1, m1, m2) = (at(orig + 2.0 * h), at(orig + h), at(orig - h), at(orig - 2.0 * h));
        den.params_mut().get_mut(id).data_mut()[i] = orig;
        out.record(analytic, (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
    }
    out
}
