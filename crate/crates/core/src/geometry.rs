//! Geometric preprocessing: masking unreliable depth, surface normals,
//! occlusion boundaries, and the global least-squares depth completion that
//! produces the initially refined depth map.
//!
//! Pixel `(row v, col u)` back-projects along the ray
//! `((u - cx) / fx, (v - cy) / fy, 1)`, so depth is the camera-frame `z`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

/// Pinhole camera intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Centered principal point with equal focal lengths.
    pub fn centered(width: usize, height: usize, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn ray(&self, row: usize, col: usize) -> [f64; 3] {
        [(col as f64 - self.cx) / self.fx, (row as f64 - self.cy) / self.fy, 1.0]
    }

    /// Intrinsics of the transposed image.
    pub fn transposed(&self) -> Self {
        Self {
            fx: self.fy,
            fy: self.fx,
            cx: self.cy,
            cy: self.cx,
        }
    }

    /// Intrinsics after resampling an image by `(sx, sy)` (output/input size).
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(invalid(format!("focal lengths must be positive, got {} / {}", self.fx, self.fy)));
        }
        Ok(())
    }
}

/// Depth in meters with a per-pixel validity flag.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(shape(format!("depth map must be at least 2x2, got {height}x{width}")));
        }
        if values.len() != height * width || valid.len() != height * width {
            return Err(shape(format!(
                "depth buffers of length {}/{} for a {height}x{width} map",
                values.len(),
                valid.len()
            )));
        }
        for (i, (&v, &ok)) in values.iter().zip(&valid).enumerate() {
            if ok && !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("valid depth pixel {i} holds {v}")));
            }
        }
        Ok(Self {
            height,
            width,
            values,
            valid,
        })
    }

    /// Every pixel valid.
    pub fn dense(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(height, width, values, vec![true; n])
    }

    /// Sensor convention: a value of exactly zero marks a missing reading.
    pub fn from_sensor(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let valid = values.iter().map(|&v| v > 0.0 && v.is_finite()).collect();
        let values = values.into_iter().map(|v| if v.is_finite() { v.max(0.0) } else { 0.0 }).collect();
        Self::new(height, width, values, valid)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Values with invalid pixels reported as 0, the sensor convention.
    pub fn sensor_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| if ok { v } else { 0.0 })
            .collect()
    }

    pub fn transposed(&self) -> Self {
        Self {
            height: self.width,
            width: self.height,
            values: transpose(&self.values, self.height, self.width),
            valid: transpose(&self.valid, self.height, self.width),
        }
    }

    fn same_dims(&self, h: usize, w: usize, what: &str) -> Result<()> {
        if (self.height, self.width) != (h, w) {
            return Err(shape(format!(
                "{what} is {h}x{w} but depth is {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Unit surface normals in the camera frame, oriented toward the camera (`z < 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    height: usize,
    width: usize,
    vectors: Vec<[f64; 3]>,
}

impl NormalMap {
    pub fn new(height: usize, width: usize, vectors: Vec<[f64; 3]>) -> Result<Self> {
        if vectors.len() != height * width {
            return Err(shape(format!("{} normals for a {height}x{width} map", vectors.len())));
        }
        for (i, n) in vectors.iter().enumerate() {
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(invalid(format!("normal {i} has length {norm}")));
            }
        }
        Ok(Self {
            height,
            width,
            vectors,
        })
    }

    /// Every pixel facing the camera head-on.
    pub fn fronto_parallel(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            vectors: vec![[0.0, 0.0, -1.0]; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.vectors[row * self.width + col]
    }

    pub fn transposed(&self) -> Self {
        let swapped: Vec<[f64; 3]> = self.vectors.iter().map(|n| [n[1], n[0], n[2]]).collect();
        Self {
            height: self.width,
            width: self.height,
            vectors: transpose(&swapped, self.height, self.width),
        }
    }
}

/// Smoothness weights in `[0, 1]`; 0 marks a hard occlusion boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMap {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl BoundaryMap {
    pub fn new(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != height * width {
            return Err(shape(format!("{} weights for a {height}x{width} map", weights.len())));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(invalid(format!("boundary weight {w} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            weights,
        })
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            weights: vec![1.0; height * width],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn transposed(&self) -> Self {
        Self {
            height: self.width,
            width: self.height,
            weights: transpose(&self.weights, self.height, self.width),
        }
    }
}

/// Pixels that belong to transparent objects.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransparencyMask {
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl TransparencyMask {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(shape(format!("{} mask entries for a {height}x{width} map", mask.len())));
        }
        Ok(Self { height, width, mask })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            mask: vec![false; height * width],
        }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn transposed(&self) -> Self {
        Self {
            height: self.width,
            width: self.height,
            mask: transpose(&self.mask, self.height, self.width),
        }
    }
}

fn transpose<T: Copy>(v: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(v.len());
    for c in 0..w {
        for r in 0..h {
            out.push(v[r * w + c]);
        }
    }
    out
}

/// Discards depth readings on transparent pixels.
pub fn mask_invalid_depth(raw: &DepthMap, mask: &TransparencyMask) -> Result<DepthMap> {
    raw.same_dims(mask.height, mask.width, "mask")?;
    let mut out = raw.clone();
    for (v, &m) in out.valid.iter_mut().zip(&mask.mask) {
        if m {
            *v = false;
        }
    }
    Ok(out)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Per-pixel normals from central-difference tangents of the back-projected
/// surface (one-sided at borders and next to invalid pixels).
pub fn normals_from_depth(depth: &DepthMap, intr: &Intrinsics) -> Result<NormalMap> {
    intr.validate()?;
    let (h, w) = (depth.height, depth.width);
    let point = |r: usize, c: usize| {
        let ray = intr.ray(r, c);
        let d = depth.get(r, c);
        [ray[0] * d, ray[1] * d, d]
    };
    let ok = |r: usize, c: usize| depth.is_valid(r, c);
    let fallback = [0.0, 0.0, -1.0];
    let mut vectors = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            if !ok(r, c) {
                vectors.push(fallback);
                continue;
            }
            let pair_x = match (c > 0 && ok(r, c - 1), c + 1 < w && ok(r, c + 1)) {
                (true, true) => Some(((r, c - 1), (r, c + 1))),
                (false, true) => Some(((r, c), (r, c + 1))),
                (true, false) => Some(((r, c - 1), (r, c))),
                (false, false) => None,
            };
            let pair_y = match (r > 0 && ok(r - 1, c), r + 1 < h && ok(r + 1, c)) {
                (true, true) => Some(((r - 1, c), (r + 1, c))),
                (false, true) => Some(((r, c), (r + 1, c))),
                (true, false) => Some(((r - 1, c), (r, c))),
                (false, false) => None,
            };
            let n = match (pair_x, pair_y) {
                (Some((a, b)), Some((p, q))) => {
                    let (pa, pb) = (point(a.0, a.1), point(b.0, b.1));
                    let (pp, pq) = (point(p.0, p.1), point(q.0, q.1));
                    let tx = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
                    let ty = [pq[0] - pp[0], pq[1] - pp[1], pq[2] - pp[2]];
                    cross(tx, ty)
                }
                _ => [0.0; 3],
            };
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if !(len > 1e-300) || !len.is_finite() {
                vectors.push(fallback);
                continue;
            }
            let s = if n[2] > 0.0 { -1.0 / len } else { 1.0 / len };
            vectors.push([n[0] * s, n[1] * s, n[2] * s]);
        }
    }
    Ok(NormalMap {
        height: h,
        width: w,
        vectors,
    })
}

/// Marks depth discontinuities. A pixel gets weight 0 when its largest
/// absolute depth difference to a 4-neighbor exceeds `threshold`; only valid,
/// unmasked pixels take part (masked or invalid pixels keep weight 1).
pub fn detect_boundaries(depth: &DepthMap, threshold: f64, mask: &TransparencyMask) -> Result<BoundaryMap> {
    if !(threshold > 0.0) {
        return Err(invalid(format!("boundary threshold must be positive, got {threshold}")));
    }
    depth.same_dims(mask.height, mask.width, "mask")?;
    let (h, w) = (depth.height, depth.width);
    let usable = |i: usize| depth.valid[i] && !mask.mask[i];
    let mut weights = vec![1.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !usable(i) {
                continue;
            }
            let mut neighbors = [None; 4];
            if r > 0 {
                neighbors[0] = Some(i - w);
            }
            if r + 1 < h {
                neighbors[1] = Some(i + w);
            }
            if c > 0 {
                neighbors[2] = Some(i - 1);
            }
            if c + 1 < w {
                neighbors[3] = Some(i + 1);
            }
            let max_diff = neighbors
                .iter()
                .flatten()
                .filter(|&&j| usable(j))
                .map(|&j| (depth.values[i] - depth.values[j]).abs())
                .fold(0.0, f64::max);
            if max_diff > threshold {
                weights[i] = 0.0;
            }
        }
    }
    Ok(BoundaryMap {
        height: h,
        width: w,
        weights,
    })
}

/// Relative weights of the three energy terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerWeights {
    pub w_obs: f64,
    pub w_normal: f64,
    pub w_smooth: f64,
}

impl Default for OptimizerWeights {
    fn default() -> Self {
        Self {
            w_obs: 1000.0,
            w_normal: 1.0,
            w_smooth: 1.0,
        }
    }
}

/// Conjugate-gradient controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when `||b - Ax|| <= tol * ||b||`.
    pub tol: f64,
    /// Iteration cap as a multiple of the unknown count.
    pub max_iter_factor: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter_factor: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    /// Pixels in connected regions without any observation, filled by
    /// nearest-neighbor propagation instead of the solve.
    pub unanchored_pixels: usize,
}

/// Symmetric 5-point system: `diag[p]`, coupling to `p+1` in `right[p]`, to
/// `p+w` in `down[p]`.
struct Stencil {
    h: usize,
    w: usize,
    diag: Vec<f64>,
    right: Vec<f64>,
    down: Vec<f64>,
    rhs: Vec<f64>,
}

impl Stencil {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                let mut acc = self.diag[p] * x[p];
                if c + 1 < w {
                    acc += self.right[p] * x[p + 1];
                }
                if c > 0 {
                    acc += self.right[p - 1] * x[p - 1];
                }
                if r + 1 < h {
                    acc += self.down[p] * x[p + w];
                }
                if r > 0 {
                    acc += self.down[p - w] * x[p - w];
                }
                y[p] = acc;
            }
        }
    }
}

struct Problem<'a> {
    sparse: &'a DepthMap,
    normals: &'a NormalMap,
    boundaries: &'a BoundaryMap,
    weights: OptimizerWeights,
    intr: Intrinsics,
}

impl Problem<'_> {
    fn validate(&self) -> Result<()> {
        let (h, w) = (self.sparse.height, self.sparse.width);
        self.sparse.same_dims(self.normals.height, self.normals.width, "normal map")?;
        self.sparse.same_dims(self.boundaries.height, self.boundaries.width, "boundary map")?;
        self.intr.validate()?;
        let wt = self.weights;
        if !(wt.w_obs > 0.0 && wt.w_smooth > 0.0 && wt.w_normal >= 0.0) {
            return Err(invalid(format!(
                "weights must satisfy w_obs > 0, w_smooth > 0, w_normal >= 0, got {wt:?}"
            )));
        }
        if self.sparse.valid_count() == 0 {
            return Err(invalid(format!(
                "no valid depth observations in the {h}x{w} input; the solution has a free scale"
            )));
        }
        Ok(())
    }

    /// Visits every edge `(p, q, b_pq)` with `q` the right or lower neighbor.
    fn edges(&self, mut f: impl FnMut(usize, usize, f64)) {
        let (h, w) = (self.sparse.height, self.sparse.width);
        let b = &self.boundaries.weights;
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                if c + 1 < w {
                    f(p, p + 1, b[p] * b[p + 1]);
                }
                if r + 1 < h {
                    f(p, p + w, b[p] * b[p + w]);
                }
            }
        }
    }

    /// Coefficients `(α_p, α_q)` of the normal residual `α_q D_q - α_p D_p`
    /// for the normal `n`.
    fn normal_coeffs(&self, p: usize, q: usize, n: [f64; 3]) -> (f64, f64) {
        let w = self.sparse.width;
        let rp = self.intr.ray(p / w, p % w);
        let rq = self.intr.ray(q / w, q % w);
        let dot = |a: [f64; 3]| n[0] * a[0] + n[1] * a[1] + n[2] * a[2];
        (dot(rp), dot(rq))
    }

    fn assemble(&self) -> Stencil {
        let (h, w) = (self.sparse.height, self.sparse.width);
        let n = h * w;
        let mut st = Stencil {
            h,
            w,
            diag: vec![0.0; n],
            right: vec![0.0; n],
            down: vec![0.0; n],
            rhs: vec![0.0; n],
        };
        let wt = self.weights;
        for p in 0..n {
            if self.sparse.valid[p] {
                st.diag[p] += wt.w_obs;
                st.rhs[p] += wt.w_obs * self.sparse.values[p];
            }
        }
        let normals = &self.normals.vectors;
        let couple = |p: usize, q: usize, v: f64, st: &mut Stencil| {
            if q == p + 1 {
                st.right[p] += v;
            } else {
                st.down[p] += v;
            }
        };
        self.edges(|p, q, b| {
            if b <= 0.0 {
                return;
            }
            let ws = wt.w_smooth * b;
            st.diag[p] += ws;
            st.diag[q] += ws;
            couple(p, q, -ws, &mut st);
            let wn = wt.w_normal * b;
            if wn > 0.0 {
                for nv in [normals[p], normals[q]] {
                    let (ap, aq) = self.normal_coeffs(p, q, nv);
                    st.diag[p] += wn * ap * ap;
                    st.diag[q] += wn * aq * aq;
                    couple(p, q, -wn * ap * aq, &mut st);
                }
            }
        });
        st
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let wt = self.weights;
        let mut e = 0.0;
        for (p, &v) in x.iter().enumerate() {
            if self.sparse.valid[p] {
                let d = v - self.sparse.values[p];
                e += wt.w_obs * d * d;
            }
        }
        let normals = &self.normals.vectors;
        self.edges(|p, q, b| {
            let d = x[p] - x[q];
            e += wt.w_smooth * b * d * d;
            for nv in [normals[p], normals[q]] {
                let (ap, aq) = self.normal_coeffs(p, q, nv);
                let r = aq * x[q] - ap * x[p];
                e += wt.w_normal * b * r * r;
            }
        });
        e
    }
}

/// Fills every pixel from the closest valid one (4-connected breadth-first
/// propagation, ties broken by scan order).
pub fn nearest_fill(depth: &DepthMap) -> Vec<f64> {
    let (h, w) = (depth.height, depth.width);
    let mut out = depth.values.clone();
    let mut seen = depth.valid.clone();
    let mut queue: VecDeque<usize> = (0..h * w).filter(|&p| depth.valid[p]).collect();
    while let Some(p) = queue.pop_front() {
        let (r, c) = (p / w, p % w);
        let mut visit = |q: usize| {
            if !seen[q] {
                seen[q] = true;
                out[q] = out[p];
                queue.push_back(q);
            }
        };
        if r > 0 {
            visit(p - w);
        }
        if r + 1 < h {
            visit(p + w);
        }
        if c > 0 {
            visit(p - 1);
        }
        if c + 1 < w {
            visit(p + 1);
        }
    }
    out
}

/// Energy minimized by [`global_optimize_depth`], evaluated at `depth`.
pub fn optimization_energy(
    depth: &[f64],
    sparse: &DepthMap,
    normals: &NormalMap,
    boundaries: &BoundaryMap,
    weights: OptimizerWeights,
    intr: &Intrinsics,
) -> Result<f64> {
    let prob = Problem {
        sparse,
        normals,
        boundaries,
        weights,
        intr: *intr,
    };
    prob.validate()?;
    if depth.len() != sparse.values.len() {
        return Err(shape("energy evaluated on a differently sized depth buffer"));
    }
    Ok(prob.energy(depth))
}

/// Completes `sparse` by minimizing
/// `w_obs Σ (D_p - D̃_p)² + w_normal Σ b_pq ⟨n, P_q - P_p⟩² + w_smooth Σ b_pq (D_p - D_q)²`
/// with Jacobi-preconditioned conjugate gradients.
pub fn global_optimize_depth(
    sparse: &DepthMap,
    normals: &NormalMap,
    boundaries: &BoundaryMap,
    weights: OptimizerWeights,
    intr: &Intrinsics,
    opts: SolverOptions,
) -> Result<DepthMap> {
    global_optimize_depth_with_report(sparse, normals, boundaries, weights, intr, opts).map(|(d, _)| d)
}

pub fn global_optimize_depth_with_report(
    sparse: &DepthMap,
    normals: &NormalMap,
    boundaries: &BoundaryMap,
    weights: OptimizerWeights,
    intr: &Intrinsics,
    opts: SolverOptions,
) -> Result<(DepthMap, SolveReport)> {
    let prob = Problem {
        sparse,
        normals,
        boundaries,
        weights,
        intr: *intr,
    };
    prob.validate()?;
    let (h, w) = (sparse.height, sparse.width);
    let n = h * w;
    let mut st = prob.assemble();
    let init = nearest_fill(sparse);

    // Regions joined only through zero-weight edges and lacking observations
    // are singular; keep their propagated values and drop them from the solve.
    let comp = components(&prob);
    let mut anchored = vec![false; n];
    for p in 0..n {
        if sparse.valid[p] {
            anchored[comp[p]] = true;
        }
    }
    let mut fixed = vec![false; n];
    let mut unanchored_pixels = 0;
    for p in 0..n {
        if !anchored[comp[p]] {
            fixed[p] = true;
            unanchored_pixels += 1;
        }
    }
    if unanchored_pixels > 0 {
        for p in 0..n {
            if fixed[p] {
                st.diag[p] = 1.0;
                st.rhs[p] = init[p];
                st.right[p] = 0.0;
                st.down[p] = 0.0;
                if p % w > 0 {
                    st.right[p - 1] = 0.0;
                }
                if p >= w {
                    st.down[p - w] = 0.0;
                }
            }
        }
    }

    let (x, iterations, rel) = pcg(&st, init, opts)?;
    let out = DepthMap {
        height: h,
        width: w,
        values: x,
        valid: vec![true; n],
    };
    if out.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("depth solve produced non-finite values".into()));
    }
    Ok((
        out,
        SolveReport {
            iterations,
            relative_residual: rel,
            unanchored_pixels,
        },
    ))
}

/// Connected components over edges with positive boundary weight.
fn components(prob: &Problem) -> Vec<usize> {
    let n = prob.sparse.values.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    prob.edges(|p, q, b| {
        if b > 0.0 {
            let (a, c) = (find(&mut parent, p), find(&mut parent, q));
            if a != c {
                parent[a.max(c)] = a.min(c);
            }
        }
    });
    (0..n).map(|p| find(&mut parent, p)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pcg(st: &Stencil, mut x: Vec<f64>, opts: SolverOptions) -> Result<(Vec<f64>, usize, f64)> {
    let n = x.len();
    let bnorm = dot(&st.rhs, &st.rhs).sqrt();
    let mut ax = vec![0.0; n];
    st.apply(&x, &mut ax);
    let mut r: Vec<f64> = st.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    if bnorm == 0.0 {
        // All observations are zero depth: the minimizer is the zero map.
        return Ok((vec![0.0; n], 0, 0.0));
    }
    let inv_diag: Vec<f64> = st.diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let max_iter = opts.max_iter_factor.max(1) * n;
    let mut rel = dot(&r, &r).sqrt() / bnorm;
    let mut it = 0;
    let mut ap = vec![0.0; n];
    while rel > opts.tol {
        if it >= max_iter {
            return Err(Error::Numerical(format!(
                "conjugate gradients did not converge in {max_iter} iterations (relative residual {rel:e})"
            )));
        }
        st.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Numerical(format!(
                "depth system is not positive definite along a search direction (pAp = {pap:e})"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        rel = dot(&r, &r).sqrt() / bnorm;
        it += 1;
    }
    Ok((x, it, rel))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(h: usize, w: usize, d: f64) -> DepthMap {
        DepthMap::dense(h, w, vec![d; h * w]).unwrap()
    }

    #[test]
    fn masking_examples() {
        let d = plane(3, 4, 1.0);
        let none = TransparencyMask::empty(3, 4);
        assert_eq!(mask_invalid_depth(&d, &none).unwrap(), d);
        let all = TransparencyMask::new(3, 4, vec![true; 12]).unwrap();
        assert_eq!(mask_invalid_depth(&d, &all).unwrap().valid_count(), 0);
        let mut one = vec![false; 12];
        one[5] = true;
        let out = mask_invalid_depth(&d, &TransparencyMask::new(3, 4, one).unwrap()).unwrap();
        assert_eq!(out.valid_count(), 11);
        assert!(!out.is_valid(1, 1));
        assert_eq!(out.values(), d.values());
        assert!(mask_invalid_depth(&d, &TransparencyMask::empty(4, 3)).is_err());
    }

    #[test]
    fn flat_plane_normals_face_camera() {
        let d = plane(5, 6, 1.3);
        let n = normals_from_depth(&d, &Intrinsics::centered(6, 5, 10.0)).unwrap();
        for v in n.vectors() {
            assert!((v[0]).abs() < 1e-12 && (v[1]).abs() < 1e-12 && (v[2] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tilted_plane_normals_match_analytic() {
        // plane z = z0 + a X, i.e. z (1 - a (u - cx) / fx) = z0
        let (h, w, z0, a) = (7, 9, 1.0, 0.4);
        let intr = Intrinsics::centered(w, h, 12.0);
        let vals: Vec<f64> = (0..h * w)
            .map(|i| z0 / (1.0 - a * ((i % w) as f64 - intr.cx) / intr.fx))
            .collect();
        let n = normals_from_depth(&DepthMap::dense(h, w, vals).unwrap(), &intr).unwrap();
        let s = (1.0 + a * a).sqrt();
        let want = [a / s, 0.0, -1.0 / s];
        for v in n.vectors() {
            for k in 0..3 {
                assert!((v[k] - want[k]).abs() < 1e-3, "{v:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn two_by_two_uses_one_sided_differences() {
        let d = DepthMap::dense(2, 2, vec![1.0, 1.1, 1.0, 1.1]).unwrap();
        let n = normals_from_depth(&d, &Intrinsics::centered(2, 2, 2.0)).unwrap();
        for v in n.vectors() {
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((len - 1.0).abs() < 1e-9 && v[2] < 0.0);
        }
    }

    #[test]
    fn normals_fall_back_without_neighbors() {
        let d = DepthMap::new(2, 2, vec![1.0, 0.0, 0.0, 0.0], vec![true, false, false, false]).unwrap();
        let n = normals_from_depth(&d, &Intrinsics::centered(2, 2, 2.0)).unwrap();
        assert_eq!(n.vectors()[0], [0.0, 0.0, -1.0]);
    }

    #[test]
    fn boundary_examples() {
        let m = TransparencyMask::empty(4, 6);
        let b = detect_boundaries(&plane(4, 6, 1.0), 0.1, &m).unwrap();
        assert!(b.weights().iter().all(|w| *w == 1.0));

        // left half at 1.0, right half at 2.0: seam columns 2 and 3
        let vals: Vec<f64> = (0..24).map(|i| if i % 6 < 3 { 1.0 } else { 2.0 }).collect();
        let d = DepthMap::dense(4, 6, vals).unwrap();
        let b = detect_boundaries(&d, 0.5, &m).unwrap();
        for (i, w) in b.weights().iter().enumerate() {
            let col = i % 6;
            assert_eq!(*w, if col == 2 || col == 3 { 0.0 } else { 1.0 });
        }
        let b = detect_boundaries(&d, 5.0, &m).unwrap();
        assert!(b.weights().iter().all(|w| *w == 1.0));
        assert!(detect_boundaries(&d, 0.0, &m).is_err());
    }

    #[test]
    fn boundaries_ignore_masked_pixels() {
        let vals: Vec<f64> = (0..16).map(|i| if i == 5 { 0.5 } else { 1.0 }).collect();
        let d = DepthMap::dense(4, 4, vals).unwrap();
        let mut mk = vec![false; 16];
        mk[5] = true;
        let b = detect_boundaries(&d, 0.1, &TransparencyMask::new(4, 4, mk).unwrap()).unwrap();
        assert!(b.weights().iter().all(|w| *w == 1.0));
    }

    #[test]
    fn complete_consistent_input_is_a_fixed_point() {
        let (h, w) = (6, 5);
        let d = plane(h, w, 0.8);
        let out = global_optimize_depth(
            &d,
            &NormalMap::fronto_parallel(h, w),
            &BoundaryMap::uniform(h, w),
            OptimizerWeights::default(),
            &Intrinsics::centered(w, h, 5.0),
            SolverOptions::default(),
        )
        .unwrap();
        for v in out.values() {
            assert!((v - 0.8).abs() < 1e-6);
        }
        assert!(out.validity().iter().all(|v| *v));
    }

    #[test]
    fn rejects_missing_observations() {
        let d = DepthMap::new(2, 2, vec![0.0; 4], vec![false; 4]).unwrap();
        let err = global_optimize_depth(
            &d,
            &NormalMap::fronto_parallel(2, 2),
            &BoundaryMap::uniform(2, 2),
            OptimizerWeights::default(),
            &Intrinsics::centered(2, 2, 1.0),
            SolverOptions::default(),
        );
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let (h, w) = (8, 8);
        let mut valid = vec![false; h * w];
        valid[0] = true;
        let d = DepthMap::new(h, w, vec![1.0; h * w], valid).unwrap();
        let vals: Vec<f64> = (0..h * w).map(|i| 1.0 + 0.01 * i as f64).collect();
        let n = normals_from_depth(&DepthMap::dense(h, w, vals).unwrap(), &Intrinsics::centered(w, h, 4.0)).unwrap();
        let err = global_optimize_depth(
            &d,
            &n,
            &BoundaryMap::uniform(h, w),
            OptimizerWeights::default(),
            &Intrinsics::centered(w, h, 4.0),
            SolverOptions {
                tol: 1e-30,
                max_iter_factor: 0,
            },
        );
        match err {
            Err(Error::Numerical(msg)) => assert!(msg.contains("relative residual")),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn unanchored_region_keeps_propagated_depth() {
        // a ring of zero-weight boundary pixels isolates the center pixel
        let (h, w) = (5, 5);
        let mut valid = vec![true; 25];
        valid[12] = false;
        let d = DepthMap::new(h, w, vec![2.0; 25], valid).unwrap();
        let mut bw = vec![1.0; 25];
        for p in [6, 7, 8, 11, 13, 16, 17, 18] {
            bw[p] = 0.0;
        }
        let (out, rep) = global_optimize_depth_with_report(
            &d,
            &NormalMap::fronto_parallel(h, w),
            &BoundaryMap::new(h, w, bw).unwrap(),
            OptimizerWeights::default(),
            &Intrinsics::centered(w, h, 4.0),
            SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.unanchored_pixels, 1);
        assert!((out.get(2, 2) - 2.0).abs() < 1e-12);
    }
}
