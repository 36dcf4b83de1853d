//! Synthetic tabletop scenes with transparent objects, corpus persistence,
//! and loaders for ClearGrasp- and TransCG-style directories.
//!
//! Scenes are ray cast: every pixel's ray `((u-cx)/fx, (v-cy)/fy, 1)` is
//! intersected with a tilted table plane and a few boxes, spheres and
//! cylinders resting on it, so the ray parameter at the hit is the depth.
//! All randomness comes from `ChaCha8Rng`, seeded with the `SynthSpec` seed and
//! switched to stream `index` for sample `index`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, shape, Error, Result};
use crate::geometry::{
    detect_boundaries, nearest_fill, normals_from_depth, BoundaryMap, DepthMap, Intrinsics, NormalMap,
    TransparencyMask,
};
use crate::io;
use crate::tensor::Tensor;

/// Generator parameters for the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// Focal length in pixels (both axes).
    pub focal: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Range of the table's depth at the image center, meters.
    pub table_depth: [f64; 2],
    /// Largest table tilt about the camera's horizontal axis, degrees.
    pub max_tilt_deg: f64,
    /// Chance that each object is transparent (at least one always is).
    pub transparent_prob: f64,
    /// Per masked pixel: chance the sensor returns nothing.
    pub hole_prob: f64,
    /// Per surviving masked pixel: chance the reading comes from the surface
    /// behind the object.
    pub leak_prob: f64,
    /// Standard deviation of the noise on remaining masked readings, meters.
    pub noise_sigma: f64,
    /// Largest displacement of leaked readings, meters.
    pub refraction_offset: f64,
    /// Depth-difference threshold for occlusion boundaries, meters.
    pub boundary_threshold: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 48,
            width: 64,
            focal: 64.0,
            objects_min: 1,
            objects_max: 5,
            table_depth: [0.6, 1.0],
            max_tilt_deg: 20.0,
            transparent_prob: 0.7,
            hole_prob: 0.5,
            leak_prob: 0.6,
            noise_sigma: 0.01,
            refraction_offset: 0.03,
            boundary_threshold: 0.03,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(invalid(format!(
                "synthetic resolution {}x{} must have both sides divisible by 4",
                self.height, self.width
            )));
        }
        if self.objects_min > self.objects_max {
            return Err(invalid("objects_min exceeds objects_max"));
        }
        if !(self.focal > 0.0) {
            return Err(invalid("focal must be positive"));
        }
        let [near, far] = self.table_depth;
        if !(near > 0.0 && near < far) {
            return Err(invalid(format!("table depth range [{near}, {far}] is degenerate")));
        }
        if !(0.0..80.0).contains(&self.max_tilt_deg) {
            return Err(invalid("max_tilt_deg must lie in [0, 80)"));
        }
        for (k, p) in [
            ("transparent_prob", self.transparent_prob),
            ("hole_prob", self.hole_prob),
            ("leak_prob", self.leak_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{k} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.refraction_offset >= 0.0 && self.boundary_threshold > 0.0) {
            return Err(invalid("noise, offset and boundary threshold must be non-negative (threshold positive)"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::centered(self.width, self.height, self.focal)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }
}

/// One RGB-D example.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor,
    pub raw_depth: DepthMap,
    pub gt_depth: DepthMap,
    pub mask: TransparencyMask,
    pub normals: NormalMap,
    pub boundaries: BoundaryMap,
    pub intrinsics: Intrinsics,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.gt_depth.height()
    }

    pub fn width(&self) -> usize {
        self.gt_depth.width()
    }

    fn check(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let dims = [
            ("rgb", self.rgb.shape()[1], self.rgb.shape()[2]),
            ("raw depth", self.raw_depth.height(), self.raw_depth.width()),
            ("mask", self.mask.height(), self.mask.width()),
            ("normals", self.normals.height(), self.normals.width()),
            ("boundaries", self.boundaries.height(), self.boundaries.width()),
        ];
        for (what, hh, ww) in dims {
            if (hh, ww) != (h, w) {
                return Err(shape(format!("sample {}: {what} is {hh}x{ww}, depth is {h}x{w}", self.id)));
            }
        }
        Ok(())
    }
}

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add_scaled(a: V3, b: V3, s: f64) -> V3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn unit(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Clone, Debug)]
enum Solid {
    Sphere { center: V3, radius: f64 },
    Cuboid { center: V3, axes: [V3; 3], half: V3 },
    Cylinder { base: V3, axis: V3, radius: f64, height: f64 },
}

/// Ray from the origin along `d`; returns `(t, outward normal)`.
fn intersect(solid: &Solid, d: V3) -> Option<(f64, V3)> {
    match *solid {
        Solid::Sphere { center, radius } => {
            let a = dot(d, d);
            let b = dot(d, center);
            let c = dot(center, center) - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (b - disc.sqrt()) / a;
            if t <= 0.0 {
                return None;
            }
            let p = [d[0] * t, d[1] * t, d[2] * t];
            Some((t, unit(sub(p, center))))
        }
        Solid::Cuboid { center, axes, half } => {
            let o = [-center[0], -center[1], -center[2]];
            let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut near_axis = 0;
            let mut near_sign = 1.0;
            for i in 0..3 {
                let ol = dot(axes[i], o);
                let dl = dot(axes[i], d);
                if dl.abs() < 1e-12 {
                    if ol.abs() > half[i] {
                        return None;
                    }
                    continue;
                }
                let t1 = (-half[i] - ol) / dl;
                let t2 = (half[i] - ol) / dl;
                let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                if lo > t_near {
                    t_near = lo;
                    near_axis = i;
                    near_sign = if dl > 0.0 { -1.0 } else { 1.0 };
                }
                t_far = t_far.min(hi);
            }
            if t_near > t_far || t_near <= 0.0 {
                return None;
            }
            let n = axes[near_axis];
            Some((t_near, [n[0] * near_sign, n[1] * near_sign, n[2] * near_sign]))
        }
        Solid::Cylinder {
            base,
            axis,
            radius,
            height,
        } => {
            let o = [-base[0], -base[1], -base[2]];
            let oa = dot(o, axis);
            let da = dot(d, axis);
            let op = add_scaled(o, axis, -oa);
            let dp = add_scaled(d, axis, -da);
            let mut best: Option<(f64, V3)> = None;
            let mut consider = |t: f64, n: V3| {
                if t > 0.0 && best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, n));
                }
            };
            let a = dot(dp, dp);
            if a > 1e-15 {
                let b = dot(op, dp);
                let c = dot(op, op) - radius * radius;
                let disc = b * b - a * c;
                if disc >= 0.0 {
                    for t in [(-b - disc.sqrt()) / a, (-b + disc.sqrt()) / a] {
                        let s = oa + t * da;
                        if (0.0..=height).contains(&s) {
                            consider(t, unit(add_scaled(op, dp, t)));
                        }
                    }
                }
            }
            if da.abs() > 1e-15 {
                for (s, sign) in [(0.0, -1.0), (height, 1.0)] {
                    let t = (s - oa) / da;
                    let q = add_scaled(op, dp, t);
                    if dot(q, q) <= radius * radius {
                        consider(t, [axis[0] * sign, axis[1] * sign, axis[2] * sign]);
                    }
                }
            }
            best
        }
    }
}

struct Table {
    d0: f64,
    a: f64,
    b: f64,
    albedo: V3,
}

impl Table {
    fn depth(&self, ray: V3) -> Option<f64> {
        let den = 1.0 - self.a * ray[0] - self.b * ray[1];
        (den > 1e-6).then(|| self.d0 / den)
    }

    fn up(&self) -> V3 {
        unit([self.a, self.b, -1.0])
    }
}

struct Object {
    solid: Solid,
    transparent: bool,
    albedo: V3,
}

const LIGHT: V3 = [-0.3, -0.6, -0.75];

fn lambert(n: V3, albedo: V3) -> V3 {
    let l = unit(LIGHT);
    let s = 0.25 + 0.75 * dot(n, l).max(0.0);
    [albedo[0] * s, albedo[1] * s, albedo[2] * s]
}

struct Hit {
    depth: f64,
    normal: V3,
    /// `None` for the table.
    object: Option<usize>,
}

fn cast(table: &Table, objects: &[Object], ray: V3, skip_transparent: bool) -> Hit {
    let td = table.depth(ray).unwrap_or(f64::INFINITY);
    let mut hit = Hit {
        depth: td,
        normal: table.up(),
        object: None,
    };
    for (k, o) in objects.iter().enumerate() {
        if skip_transparent && o.transparent {
            continue;
        }
        if let Some((t, n)) = intersect(&o.solid, ray) {
            if t < hit.depth {
                hit = Hit {
                    depth: t,
                    normal: n,
                    object: Some(k),
                };
            }
        }
    }
    hit
}

fn table_color(table: &Table, p: V3) -> V3 {
    // faint checker in table-plane coordinates
    let up = table.up();
    let e1 = unit(sub([1.0, 0.0, 0.0], [up[0] * up[0], up[0] * up[1], up[0] * up[2]]));
    let e2 = cross(up, e1);
    let (s, t) = (dot(p, e1), dot(p, e2));
    let cell = ((s / 0.06).floor() as i64 + (t / 0.06).floor() as i64).rem_euclid(2);
    let k = if cell == 0 { 1.0 } else { 0.85 };
    [table.albedo[0] * k, table.albedo[1] * k, table.albedo[2] * k]
}

fn shade(table: &Table, objects: &[Object], ray: V3, hit: &Hit) -> V3 {
    let p = [ray[0] * hit.depth, ray[1] * hit.depth, hit.depth];
    match hit.object {
        None => lambert(hit.normal, table_color(table, p)),
        Some(k) => lambert(hit.normal, objects[k].albedo),
    }
}

fn random_solid(rng: &mut ChaCha8Rng, table: &Table, spec: &SynthSpec, intr: &Intrinsics) -> Solid {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let u = rng.gen_range(0.15 * w..0.85 * w);
    let v = rng.gen_range(0.3 * h..0.9 * h);
    let ray = [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0];
    let z = table.depth(ray).expect("table covers the image");
    let foot = [ray[0] * z, ray[1] * z, z];
    let up = table.up();
    match rng.gen_range(0..3) {
        0 => {
            let radius = rng.gen_range(0.04..0.09);
            Solid::Sphere {
                center: add_scaled(foot, up, radius),
                radius,
            }
        }
        1 => {
            let half = [
                rng.gen_range(0.03..0.08),
                rng.gen_range(0.03..0.08),
                rng.gen_range(0.03..0.08),
            ];
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let e1 = unit(sub([1.0, 0.0, 0.0], [up[0] * up[0], up[0] * up[1], up[0] * up[2]]));
            let e2 = cross(up, e1);
            let a1 = add_scaled([e1[0] * phi.cos(), e1[1] * phi.cos(), e1[2] * phi.cos()], e2, phi.sin());
            let a2 = cross(up, a1);
            Solid::Cuboid {
                center: add_scaled(foot, up, half[2]),
                axes: [a1, a2, up],
                half,
            }
        }
        _ => Solid::Cylinder {
            base: foot,
            axis: up,
            radius: rng.gen_range(0.03..0.07),
            height: rng.gen_range(0.06..0.18),
        },
    }
}

/// Renders one scene from `rng`.
pub fn generate_scene(spec: &SynthSpec, rng: &mut ChaCha8Rng, id: &str) -> Result<SceneSample> {
    spec.validate()?;
    let intr = spec.intrinsics();
    let (h, w) = (spec.height, spec.width);
    let tilt = rng.gen_range(0.0..=spec.max_tilt_deg).to_radians();
    let table = Table {
        d0: rng.gen_range(spec.table_depth[0]..=spec.table_depth[1]),
        a: rng.gen_range(-0.1..0.1),
        b: -tilt.tan(),
        albedo: [rng.gen_range(0.4..0.8), rng.gen_range(0.35..0.7), rng.gen_range(0.3..0.6)],
    };
    let count = rng.gen_range(spec.objects_min..=spec.objects_max);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let solid = random_solid(rng, &table, spec, &intr);
        let transparent = rng.gen_bool(spec.transparent_prob);
        let albedo = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        objects.push(Object {
            solid,
            transparent,
            albedo,
        });
    }
    if count > 0 && !objects.iter().any(|o| o.transparent) {
        let k = rng.gen_range(0..count);
        objects[k].transparent = true;
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut gt = vec![0.0; h * w];
    let mut raw = vec![0.0; h * w];
    let mut mask = vec![false; h * w];
    let mut rgb = vec![0.0; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let ray = intr.ray(r, c);
            let hit = cast(&table, &objects, ray, false);
            gt[i] = hit.depth;
            let transparent = hit.object.is_some_and(|k| objects[k].transparent);
            let color = if transparent {
                let back = cast(&table, &objects, ray, true);
                let bc = shade(&table, &objects, ray, &back);
                let view = unit(ray);
                let rim = (1.0 - dot(hit.normal, view).abs()).powi(2);
                let l = unit(LIGHT);
                let refl = add_scaled(view, hit.normal, -2.0 * dot(view, hit.normal));
                let spec_hl = dot(refl, l).max(0.0).powi(20);
                mask[i] = true;
                raw[i] = if rng.gen_bool(spec.hole_prob) {
                    0.0
                } else if rng.gen_bool(spec.leak_prob) {
                    back.depth + rng.gen_range(-1.0..=1.0) * spec.refraction_offset
                } else {
                    hit.depth + noise.sample(rng)
                };
                if raw[i] <= 0.0 || !raw[i].is_finite() {
                    raw[i] = 0.0;
                }
                let mut col = [0.0; 3];
                for k in 0..3 {
                    col[k] = (0.85 * bc[k] + 0.05 + 0.6 * rim + 0.5 * spec_hl).clamp(0.0, 1.0);
                }
                col
            } else {
                raw[i] = hit.depth;
                shade(&table, &objects, ray, &hit)
            };
            for k in 0..3 {
                rgb[k * h * w + i] = color[k].clamp(0.0, 1.0);
            }
        }
    }
    let gt_depth = DepthMap::dense(h, w, gt)?;
    let raw_depth = DepthMap::from_sensor(h, w, raw)?;
    let mask = TransparencyMask::new(h, w, mask)?;
    let normals = normals_from_depth(&gt_depth, &intr)?;
    let boundaries = detect_boundaries(&gt_depth, spec.boundary_threshold, &mask)?;
    Ok(SceneSample {
        id: id.to_string(),
        rgb: Tensor::from_vec(&[3, h, w], rgb)?,
        raw_depth,
        gt_depth,
        mask,
        normals,
        boundaries,
        intrinsics: intr,
    })
}

/// Sample `index` of the corpus described by `spec`.
pub fn generate_indexed(spec: &SynthSpec, index: u64) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    generate_scene(spec, &mut rng, &sample_id(index))
}

pub fn sample_id(index: u64) -> String {
    format!("s{index:05}")
}

/// Dataset directory conventions understood by [`load_sample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// `<root>/<id>/{rgb.png, depth_raw.png, depth_gt.png, mask.png, meta.txt}`.
    Synthetic,
    /// `<root>/<id>-transparent-rgb-img.png`, `<root>/<id>-transparent-depth-img.png`,
    /// `<root>/<id>-opaque-depth-img.png`, `<root>/<id>-mask.png`, plus
    /// `<root>/camera_intrinsics.txt`.
    Cleargrasp,
    /// `<root>/<id>/{rgb1.png, depth1.png, depth1-gt.png, depth1-gt-mask.png}` plus
    /// `<root>/camera_intrinsics.txt`.
    Transcg,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "cleargrasp" => Ok(Self::Cleargrasp),
            "transcg" => Ok(Self::Transcg),
            _ => Err(invalid(format!(
                "unknown dataset kind '{s}' (expected synthetic, cleargrasp or transcg)"
            ))),
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    parse_kv(&fs::read_to_string(path)?).map_err(|e| Error::Corrupt {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn kv_f64(map: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<f64> {
    map.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Corrupt {
            path: path.display().to_string(),
            reason: format!("missing or non-numeric '{key}'"),
        })
}

fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let kv = read_kv(path)?;
    Ok(Intrinsics {
        fx: kv_f64(&kv, "fx", path)?,
        fy: kv_f64(&kv, "fy", path)?,
        cx: kv_f64(&kv, "cx", path)?,
        cy: kv_f64(&kv, "cy", path)?,
    })
}

/// Writes a sample into `dir` using the synthetic layout.
pub fn save_sample(dir: &Path, sample: &SceneSample, spec_hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_rgb_png(&dir.join("rgb.png"), &sample.rgb)?;
    io::write_depth_png(&dir.join("depth_raw.png"), &sample.raw_depth)?;
    io::write_depth_png(&dir.join("depth_gt.png"), &sample.gt_depth)?;
    io::write_mask_png(&dir.join("mask.png"), &sample.mask)?;
    let i = sample.intrinsics;
    let meta = format!(
        "id = {}\nheight = {}\nwidth = {}\nfx = {:.17}\nfy = {:.17}\ncx = {:.17}\ncy = {:.17}\nspec_hash = {}\n",
        sample.id,
        sample.height(),
        sample.width(),
        i.fx,
        i.fy,
        i.cx,
        i.cy,
        spec_hash
    );
    fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

/// Area-weighted resampling of a `sh x sw` plane to `th x tw`. With
/// `valid`, only valid source pixels contribute and targets without any
/// valid source become invalid.
pub fn area_resample(
    src: &[f64],
    valid: Option<&[bool]>,
    sh: usize,
    sw: usize,
    th: usize,
    tw: usize,
) -> (Vec<f64>, Vec<bool>) {
    let spans = |s: usize, t: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = s as f64 / t as f64;
        (0..t)
            .map(|k| {
                let (lo, hi) = (k as f64 * scale, (k + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut j = lo.floor() as usize;
                while (j as f64) < hi && j < s {
                    let ov = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                    if ov > 0.0 {
                        taps.push((j, ov));
                    }
                    j += 1;
                }
                taps
            })
            .collect()
    };
    let rows = spans(sh, th);
    let cols = spans(sw, tw);
    let mut out = vec![0.0; th * tw];
    let mut ok = vec![false; th * tw];
    for (ty, rt) in rows.iter().enumerate() {
        for (tx, ct) in cols.iter().enumerate() {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for &(sy, wy) in rt {
                for &(sx, wx) in ct {
                    let i = sy * sw + sx;
                    if valid.map_or(true, |v| v[i]) {
                        acc += wy * wx * src[i];
                        wsum += wy * wx;
                    }
                }
            }
            if wsum > 0.0 {
                out[ty * tw + tx] = acc / wsum;
                ok[ty * tw + tx] = true;
            }
        }
    }
    (out, ok)
}

/// Nearest-neighbor resampling (pixel-center mapping).
pub fn nearest_resample<T: Copy>(src: &[T], sh: usize, sw: usize, th: usize, tw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(th * tw);
    for ty in 0..th {
        let sy = (((ty as f64 + 0.5) * sh as f64 / th as f64).floor() as usize).min(sh - 1);
        for tx in 0..tw {
            let sx = (((tx as f64 + 0.5) * sw as f64 / tw as f64).floor() as usize).min(sw - 1);
            out.push(src[sy * sw + sx]);
        }
    }
    out
}

fn resample_depth(d: &DepthMap, th: usize, tw: usize) -> Result<DepthMap> {
    let (v, ok) = area_resample(d.values(), Some(d.validity()), d.height(), d.width(), th, tw);
    DepthMap::new(th, tw, v, ok)
}

/// Assembles a sample from decoded files, resampling to `target` and
/// deriving normals and boundaries from ground truth.
#[allow(clippy::too_many_arguments)]
fn assemble(
    id: &str,
    rgb: Tensor,
    raw: DepthMap,
    gt: DepthMap,
    mask: TransparencyMask,
    intr: Intrinsics,
    target: Option<(usize, usize)>,
    boundary_threshold: f64,
    source: &Path,
) -> Result<SceneSample> {
    let (h, w) = (gt.height(), gt.width());
    let dims = [
        ("rgb", rgb.shape()[1], rgb.shape()[2]),
        ("raw depth", raw.height(), raw.width()),
        ("mask", mask.height(), mask.width()),
    ];
    for (what, hh, ww) in dims {
        if (hh, ww) != (h, w) {
            return Err(shape(format!(
                "{}: {what} is {hh}x{ww} but ground truth is {h}x{w}",
                source.display()
            )));
        }
    }
    if raw.valid_count() == 0 {
        log::warn!("{}: raw depth has no valid pixels", source.display());
    }
    let (rgb, raw, gt, mask, intr) = match target {
        Some((th, tw)) if (th, tw) != (h, w) => {
            let mut data = Vec::with_capacity(3 * th * tw);
            for c in 0..3 {
                let plane = &rgb.data()[c * h * w..(c + 1) * h * w];
                data.extend(area_resample(plane, None, h, w, th, tw).0);
            }
            let m = nearest_resample(mask.mask(), h, w, th, tw);
            (
                Tensor::from_vec(&[3, th, tw], data)?,
                resample_depth(&raw, th, tw)?,
                resample_depth(&gt, th, tw)?,
                TransparencyMask::new(th, tw, m)?,
                intr.scaled(tw as f64 / w as f64, th as f64 / h as f64),
            )
        }
        _ => (rgb, raw, gt, mask, intr),
    };
    let gt = if gt.valid_count() == 0 {
        log::warn!("{}: ground-truth depth has no valid pixels", source.display());
        gt
    } else if gt.valid_count() < gt.height() * gt.width() {
        log::warn!(
            "{}: filling {} invalid ground-truth pixels from their nearest neighbors",
            source.display(),
            gt.height() * gt.width() - gt.valid_count()
        );
        DepthMap::dense(gt.height(), gt.width(), nearest_fill(&gt))?
    } else {
        gt
    };
    let normals = normals_from_depth(&gt, &intr)?;
    let boundaries = detect_boundaries(&gt, boundary_threshold, &mask)?;
    let s = SceneSample {
        id: id.to_string(),
        rgb,
        raw_depth: raw,
        gt_depth: gt,
        mask,
        normals,
        boundaries,
        intrinsics: intr,
    };
    s.check()?;
    Ok(s)
}

/// Options for [`load_sample`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    /// Resample to `(height, width)` when the source differs.
    pub target: Option<(usize, usize)>,
    pub boundary_threshold: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            target: None,
            boundary_threshold: SynthSpec::default().boundary_threshold,
        }
    }
}

/// Loads sample `id` from `root` laid out as `kind`.
pub fn load_sample(root: &Path, kind: DatasetKind, id: &str, opts: LoadOptions) -> Result<SceneSample> {
    match kind {
        DatasetKind::Synthetic => {
            let dir = root.join(id);
            let meta_path = dir.join("meta.txt");
            let meta = read_kv(&meta_path)?;
            let intr = Intrinsics {
                fx: kv_f64(&meta, "fx", &meta_path)?,
                fy: kv_f64(&meta, "fy", &meta_path)?,
                cx: kv_f64(&meta, "cx", &meta_path)?,
                cy: kv_f64(&meta, "cy", &meta_path)?,
            };
            assemble(
                id,
                io::read_rgb_png(&dir.join("rgb.png"))?,
                io::read_depth_png(&dir.join("depth_raw.png"))?,
                io::read_depth_png(&dir.join("depth_gt.png"))?,
                io::read_mask_png(&dir.join("mask.png"))?,
                intr,
                opts.target,
                opts.boundary_threshold,
                &dir,
            )
        }
        DatasetKind::Cleargrasp => {
            let f = |suffix: &str| root.join(format!("{id}-{suffix}.png"));
            assemble(
                id,
                io::read_rgb_png(&f("transparent-rgb-img"))?,
                io::read_depth_png(&f("transparent-depth-img"))?,
                io::read_depth_png(&f("opaque-depth-img"))?,
                io::read_mask_png(&f("mask"))?,
                read_intrinsics(&root.join("camera_intrinsics.txt"))?,
                opts.target,
                opts.boundary_threshold,
                root,
            )
        }
        DatasetKind::Transcg => {
            let dir = root.join(id);
            assemble(
                id,
                io::read_rgb_png(&dir.join("rgb1.png"))?,
                io::read_depth_png(&dir.join("depth1.png"))?,
                io::read_depth_png(&dir.join("depth1-gt.png"))?,
                io::read_mask_png(&dir.join("depth1-gt-mask.png"))?,
                read_intrinsics(&root.join("camera_intrinsics.txt"))?,
                opts.target,
                opts.boundary_threshold,
                &dir,
            )
        }
    }
}

/// Sample ids available under `root` for `kind`, sorted.
pub fn list_ids(root: &Path, kind: DatasetKind) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::MissingInput(root.to_path_buf()));
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        match kind {
            DatasetKind::Synthetic | DatasetKind::Transcg => {
                if entry.file_type()?.is_dir() {
                    ids.push(name);
                }
            }
            DatasetKind::Cleargrasp => {
                if let Some(id) = name.strip_suffix("-transparent-rgb-img.png") {
                    ids.push(id.to_string());
                }
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads every sample of a directory.
pub fn load_all(root: &Path, kind: DatasetKind, opts: LoadOptions) -> Result<Vec<SceneSample>> {
    list_ids(root, kind)?
        .iter()
        .map(|id| load_sample(root, kind, id, opts))
        .collect()
}

/// Disjoint train/val/test id lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Deterministic shuffled partition. Train and val sizes are rounded from
/// the fractions and test takes the rest.
pub fn split(ids: &[String], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if ids.is_empty() {
        return Err(invalid("cannot split an empty corpus"));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n = order.len();
    let n_train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(Split {
        train: order,
        val,
        test,
    })
}

/// Corpus layout summary written next to the splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: SynthSpec,
    pub spec_hash: String,
    pub split: Split,
}

/// Generates `count` samples, splits them, and writes
/// `<root>/<split>/<id>/...` plus `<root>/corpus.json`.
pub fn write_corpus(root: &Path, spec: &SynthSpec, count: usize, fractions: [f64; 3]) -> Result<CorpusManifest> {
    spec.validate()?;
    let ids: Vec<String> = (0..count as u64).map(sample_id).collect();
    let parts = split(&ids, fractions, spec.seed)?;
    let hash = spec.hash();
    for (name, list) in [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)] {
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        for id in list {
            let index: u64 = id[1..].parse().expect("generated id");
            let sample = generate_indexed(spec, index)?;
            save_sample(&dir.join(id), &sample, &hash)?;
        }
    }
    let manifest = CorpusManifest {
        spec: spec.clone(),
        spec_hash: hash,
        split: parts,
    };
    fs::write(root.join("corpus.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// SHA-256 over every file below `root`, in sorted path order.
pub fn tree_checksum(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    if !root.exists() {
        return Err(Error::MissingInput(root.to_path_buf()));
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(root).unwrap_or(&f).to_string_lossy().as_bytes());
        h.update(fs::read(&f)?);
    }
    Ok(hex::encode(h.finalize()))
}
