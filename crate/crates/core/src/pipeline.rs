//! Preprocessing and inference: raw RGB-D to the refined depth map, the
//! condition inputs, and the DDIM reverse pass through the codec.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, DepthNormalization};
use crate::dataset::SceneSample;
use crate::denoiser::{ConditionMode, DepthLatent, Denoiser, VisualCondition, DEPTH_INPUT_CHANNELS};
use crate::error::{invalid, Error, Result};
use crate::geometry::{
    detect_boundaries, global_optimize_depth_with_report, mask_invalid_depth, nearest_fill, normals_from_depth,
    DepthMap, Intrinsics, OptimizerWeights, SolveReport, SolverOptions, TransparencyMask,
};
use crate::scheduler::{ddim_step, NoiseSchedule, TimestepPlan};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub weights: OptimizerWeights,
    pub solver: SolverOptions,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            weights: OptimizerWeights::default(),
            solver: SolverOptions::default(),
        }
    }
}

/// Masks transparent pixels out of the raw depth and completes it with the
/// global solve.
pub fn refine_depth(sample: &SceneSample, cfg: &GeometryConfig) -> Result<(DepthMap, SolveReport)> {
    let sparse = mask_invalid_depth(&sample.raw_depth, &sample.mask)?;
    global_optimize_depth_with_report(
        &sparse,
        &sample.normals,
        &sample.boundaries,
        cfg.weights,
        &sample.intrinsics,
        cfg.solver,
    )
}

/// `[2, H, W]` depth-branch input: normalized refined depth (clamped to
/// `[0, 1]`) and the transparency mask.
pub fn depth_branch_input(refined: &DepthMap, mask: &TransparencyMask, norm: &DepthNormalization) -> Result<Tensor> {
    let n = refined.height() * refined.width();
    if mask.mask().len() != n {
        return Err(crate::error::shape("mask and refined depth differ in size"));
    }
    let mut data = Vec::with_capacity(2 * n);
    data.extend(refined.values().iter().map(|&v| norm.normalize(v).clamp(0.0, 1.0)));
    data.extend(mask.mask().iter().map(|&m| if m { 1.0 } else { 0.0 }));
    Tensor::from_vec(&[DEPTH_INPUT_CHANNELS, refined.height(), refined.width()], data)
}

/// A sample with its refined depth, ready for training or inference.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample: SceneSample,
    pub refined: DepthMap,
    pub depth_input: Tensor,
}

pub fn prepare(sample: SceneSample, geom: &GeometryConfig, norm: &DepthNormalization) -> Result<Prepared> {
    let (refined, _) = refine_depth(&sample, geom)?;
    let depth_input = depth_branch_input(&refined, &sample.mask, norm)?;
    Ok(Prepared {
        sample,
        refined,
        depth_input,
    })
}

/// Inference-only sample for sensor data without ground truth. Normals and
/// boundaries are derived from the masked raw depth after nearest fill;
/// `gt_depth` holds that filled map and is not read by inference.
pub fn sample_from_sensor(
    id: &str,
    rgb: Tensor,
    raw: DepthMap,
    mask: TransparencyMask,
    intrinsics: Intrinsics,
    boundary_threshold: f64,
) -> Result<SceneSample> {
    let (h, w) = (raw.height(), raw.width());
    if rgb.shape() != [3, h, w] || mask.mask().len() != h * w {
        return Err(crate::error::shape(format!(
            "rgb {:?} and mask must match the {h}x{w} depth",
            rgb.shape()
        )));
    }
    let sparse = mask_invalid_depth(&raw, &mask)?;
    let filled = DepthMap::dense(h, w, nearest_fill(&sparse))?;
    let normals = normals_from_depth(&filled, &intrinsics)?;
    let boundaries = detect_boundaries(&filled, boundary_threshold, &mask)?;
    Ok(SceneSample {
        id: id.to_string(),
        rgb,
        raw_depth: raw,
        gt_depth: filled,
        mask,
        normals,
        boundaries,
        intrinsics,
    })
}

/// Draws `x_T` with the same shape as the latent grid.
pub fn initial_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

/// Codec, denoiser and schedule used together at inference.
pub struct Pipeline {
    pub codec: Codec,
    pub denoiser: Denoiser,
    /// Configuration the denoiser was trained with.
    pub train: TrainConfig,
    pub schedule: NoiseSchedule,
    pub geometry: GeometryConfig,
}

impl Pipeline {
    pub fn new(codec: Codec, denoiser: Denoiser, train: TrainConfig, geometry: GeometryConfig) -> Result<Self> {
        if train.horizon != denoiser.horizon() {
            return Err(invalid(format!(
                "training horizon {} differs from the denoiser's {}",
                train.horizon,
                denoiser.horizon()
            )));
        }
        if codec.config().latent_channels != denoiser.config().latent_channels {
            return Err(invalid("codec and denoiser disagree on latent channels"));
        }
        let schedule = train.schedule()?;
        Ok(Self {
            codec,
            denoiser,
            train,
            schedule,
            geometry,
        })
    }

    pub fn condition(&self, prepared: &Prepared) -> Result<VisualCondition> {
        let depth = match self.denoiser.config().condition {
            ConditionMode::Refined => Some(&prepared.depth_input),
            ConditionMode::RgbOnly => None,
        };
        self.denoiser.condition(&prepared.sample.rgb, depth)
    }

    /// DDIM reverse pass over `plan` from seeded noise; returns the final
    /// latent and the number of denoiser calls.
    pub fn sample_latent(&self, c: &VisualCondition, plan: &TimestepPlan, seed: u64) -> Result<(DepthLatent, usize)> {
        if plan.horizon() != self.schedule.horizon() || plan.horizon() != self.denoiser.horizon() {
            return Err(invalid(format!(
                "plan horizon {} does not match the trained horizon {}",
                plan.horizon(),
                self.denoiser.horizon()
            )));
        }
        let (h, w) = c.spatial();
        let d = self.denoiser.config().latent_channels;
        let mut x = DepthLatent::new(initial_noise(&[d, h, w], seed))?;
        let mut calls = 0;
        for (t, t_prev) in plan.transitions() {
            let pred = self.denoiser.predict(&x, t, c)?;
            calls += 1;
            x = ddim_step(&x, &pred, t, t_prev, &self.schedule)?;
        }
        Ok((x, calls))
    }

    /// Full inference on a prepared sample.
    pub fn infer_prepared(&self, prepared: &Prepared, plan: &TimestepPlan, seed: u64) -> Result<DepthMap> {
        let c = self.condition(prepared)?;
        let (x0, _) = self.sample_latent(&c, plan, seed)?;
        let out = self.codec.decode(&x0)?;
        if out.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("decoded depth is not finite".into()));
        }
        Ok(out)
    }

    /// Preprocesses `sample` and runs inference.
    pub fn infer(&self, sample: &SceneSample, plan: &TimestepPlan, seed: u64) -> Result<DepthMap> {
        let prepared = prepare(sample.clone(), &self.geometry, &self.codec.normalization())?;
        self.infer_prepared(&prepared, plan, seed)
    }
}
