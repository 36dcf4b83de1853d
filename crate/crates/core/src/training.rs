//! Loss terms, timestep sampling, and the two training stages: the depth
//! codec first, then the conditioned denoiser against the frozen codec.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::codec::{pixel_loss, pixel_loss_graph, Codec, CodecConfig, DepthNormalization};
use crate::denoiser::{ConditionMode, DepthLatent, Denoiser, DenoiserConfig};
use crate::error::{invalid, shape, Error, Result};
use crate::geometry::DepthMap;
use crate::nn::{Adam, AdamConfig, Bound, GradAccumulator};
use crate::pipeline::Prepared;
use crate::scheduler::{make_schedule, make_timestep_plan, NoiseSchedule, TimestepPlan};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Diffusion horizon `T`.
    pub horizon: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Inference steps; also the plan sampled from when `train_on_plan`.
    pub inference_count: usize,
    /// Draw training timesteps from the inference plan only.
    pub train_on_plan: bool,
    /// Weight of the latent mean-squared error.
    pub lambda1: f64,
    /// Weight of the decoded pixel loss.
    pub lambda2: f64,
    /// Weight of the latent root-mean-square distance.
    pub lambda3: f64,
    /// `λ` inside the pixel loss.
    pub pixel_lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            inference_count: 20,
            train_on_plan: false,
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.1,
            pixel_lambda: 0.5,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 20,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("loss weight {k} must be non-negative, got {v}")));
            }
        }
        if self.inference_count == 0 || self.inference_count > self.horizon {
            return Err(invalid(format!(
                "inference_count {} must lie in [1, horizon {}]",
                self.inference_count, self.horizon
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pixel_lambda) {
            return Err(invalid("pixel_lambda must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.horizon, self.beta_start, self.beta_end)
    }

    pub fn plan(&self) -> Result<TimestepPlan> {
        make_timestep_plan(self.horizon, self.inference_count)
    }

    fn adam(&self, total_steps: usize) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            total_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the mean squared latent magnitude.
    pub latent_reg: f64,
    pub pixel_lambda: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr: 2e-3,
            latent_reg: 1e-4,
            pixel_lambda: 0.5,
            seed: 0,
        }
    }
}

fn same_shape(a: &DepthLatent, b: &DepthLatent) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(shape(format!(
            "latents {:?} and {:?} differ in shape",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    Ok(())
}

/// Mean squared error between predicted and true clean latents.
pub fn diffusion_loss(pred: &DepthLatent, truth: &DepthLatent) -> Result<f64> {
    same_shape(pred, truth)?;
    let (p, t) = (pred.tensor().data(), truth.tensor().data());
    Ok(p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64)
}

/// Root-mean-square distance between predicted and true latents.
pub fn latent_l2(pred: &DepthLatent, truth: &DepthLatent) -> Result<f64> {
    diffusion_loss(pred, truth).map(f64::sqrt)
}

/// The three weighted terms and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ddim: f64,
    pub pixel: f64,
    pub l2: f64,
    pub total: f64,
}

/// `λ1·L_ddim + λ2·L_pixel + λ3·L_2`.
pub fn total_loss(
    pred: &DepthLatent,
    truth: &DepthLatent,
    decoded_pred: &DepthMap,
    gt_depth: &DepthMap,
    norm: &DepthNormalization,
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    for (k, v) in [("lambda1", cfg.lambda1), ("lambda2", cfg.lambda2), ("lambda3", cfg.lambda3)] {
        if !(v >= 0.0) {
            return Err(invalid(format!("loss weight {k} must be non-negative, got {v}")));
        }
    }
    let ddim = diffusion_loss(pred, truth)?;
    let pixel = pixel_loss(decoded_pred, gt_depth, norm, cfg.pixel_lambda)?;
    let l2 = latent_l2(pred, truth)?;
    Ok(LossTerms {
        ddim,
        pixel,
        l2,
        total: cfg.lambda1 * ddim + cfg.lambda2 * pixel + cfg.lambda3 * l2,
    })
}

/// Uniform over the plan entries when training on the plan, otherwise
/// uniform over `[0, T-1]`.
pub fn sample_training_timestep(cfg: &TrainConfig, plan: &TimestepPlan, rng: &mut ChaCha8Rng) -> i64 {
    if cfg.train_on_plan {
        let steps = plan.steps();
        steps[rng.gen_range(0..steps.len())]
    } else {
        rng.gen_range(0..cfg.horizon as i64)
    }
}

fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

/// Normalized ground truth as a `[1, H, W]` tensor.
pub fn normalized_depth(depth: &DepthMap, norm: &DepthNormalization) -> Tensor {
    let data = depth.values().iter().map(|&v| norm.normalize(v)).collect();
    Tensor::from_vec(&[1, depth.height(), depth.width()], data).expect("depth dims")
}

/// Everything one denoiser training example needs.
pub struct DiffusionExample<'a> {
    pub prepared: &'a Prepared,
    /// Clean latent of the ground truth.
    pub x0: &'a Tensor,
    /// Normalized ground truth `[1, H, W]`.
    pub gt_norm: &'a Tensor,
    pub t: i64,
    pub noise: &'a Tensor,
}

/// Builds the training loss for one example; returns the scalar loss var
/// and the individual terms.
pub fn denoiser_loss_graph(
    g: &mut Graph,
    p: &Bound,
    den: &Denoiser,
    codec: &Codec,
    codec_p: &Bound,
    ex: &DiffusionExample,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(Var, LossTerms)> {
    let ab = schedule.alpha_bar(ex.t)?;
    let x_t = crate::scheduler::mix_with_noise(ex.x0, ex.noise, ab)?;
    let rgb = g.constant(ex.prepared.sample.rgb.clone());
    let depth = match den.config().condition {
        ConditionMode::Refined => Some(g.constant(ex.prepared.depth_input.clone())),
        ConditionMode::RgbOnly => None,
    };
    let c = den.condition_graph(g, p, rgb, depth);
    let xt = g.constant(x_t);
    let (pred, _) = den.predict_graph(g, p, xt, ex.t, c);
    let x0 = g.constant(ex.x0.clone());
    let l_ddim = g.mse(pred, x0);
    let decoded = codec.decode_graph(g, codec_p, pred);
    let gt = g.constant(ex.gt_norm.clone());
    let l_pix = pixel_loss_graph(g, decoded, gt, cfg.pixel_lambda);
    let l_2 = g.sqrt(l_ddim);
    let a = g.scale(l_ddim, cfg.lambda1);
    let b = g.scale(l_pix, cfg.lambda2);
    let c3 = g.scale(l_2, cfg.lambda3);
    let ab_sum = g.add(a, b);
    let loss = g.add(ab_sum, c3);
    let terms = LossTerms {
        ddim: g.value(l_ddim).item(),
        pixel: g.value(l_pix).item(),
        l2: g.value(l_2).item(),
        total: g.value(loss).item(),
    };
    Ok((loss, terms))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub ddim: f64,
    pub pixel: f64,
    pub l2: f64,
    pub lr: f64,
    /// Seconds since the stage started; the only non-reproducible field.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    /// Newline-delimited JSON.
    pub fn to_ndjson(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    /// Mean batch loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.records {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.loss;
            out[r.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

fn check_finite(stage: &str, step: usize, terms: &LossTerms) -> Result<()> {
    if !terms.total.is_finite() {
        return Err(Error::Numerical(format!(
            "{stage} loss became non-finite at step {step} (ddim {}, pixel {}, l2 {})",
            terms.ddim, terms.pixel, terms.l2
        )));
    }
    Ok(())
}

/// Trains the depth codec on ground-truth maps, then fits the latent
/// standardization on the same maps.
pub fn train_codec(depths: &[DepthMap], codec_cfg: &CodecConfig, cfg: &CodecTrainConfig) -> Result<(Codec, TrainLog)> {
    if depths.is_empty() {
        return Err(invalid("codec training needs at least one depth map"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || cfg.latent_reg < 0.0 {
        return Err(invalid("codec training needs batch_size > 0, lr > 0, latent_reg >= 0"));
    }
    let mut codec = Codec::new(codec_cfg, cfg.seed)?;
    let norm = codec.normalization();
    let inputs: Vec<Tensor> = depths.iter().map(|d| codec.encoder_input(d)).collect::<Result<_>>()?;
    let targets: Vec<Tensor> = depths.iter().map(|d| normalized_depth(d, &norm)).collect();
    let steps_per_epoch = depths.len().div_ceil(cfg.batch_size);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: steps_per_epoch * cfg.epochs,
        },
        codec.params(),
    );
    let frozen = codec.stat_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..depths.len()).collect();
    let mut log = TrainLog::default();
    let start = Instant::now();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = GradAccumulator::new(codec.params().len());
            let mut sum = LossTerms::default();
            for &i in batch {
                let mut g = Graph::new();
                let p = codec.params().bind(&mut g, true);
                let x = g.constant(inputs[i].clone());
                let z = codec.encode_graph(&mut g, &p, x);
                let y = codec.decode_graph(&mut g, &p, z);
                let t = g.constant(targets[i].clone());
                let l_pix = pixel_loss_graph(&mut g, y, t, cfg.pixel_lambda);
                let zz = g.mul(z, z);
                let reg = g.mean(zz);
                let reg = g.scale(reg, cfg.latent_reg);
                let loss = g.add(l_pix, reg);
                sum.pixel += g.value(l_pix).item();
                sum.l2 += g.value(reg).item();
                sum.total += g.value(loss).item();
                let mut grads = g.backward(loss);
                acc.add(&p, &mut grads);
            }
            let n = batch.len() as f64;
            let terms = LossTerms {
                ddim: 0.0,
                pixel: sum.pixel / n,
                l2: sum.l2 / n,
                total: sum.total / n,
            };
            check_finite("codec", step, &terms)?;
            let mut grads = acc.mean();
            for id in frozen {
                grads[id.index()] = None;
            }
            let lr = adam.current_lr();
            adam.step(codec.params_mut(), &grads);
            log.records.push(LogRecord {
                stage: "codec".into(),
                epoch,
                step,
                loss: terms.total,
                ddim: 0.0,
                pixel: terms.pixel,
                l2: terms.l2,
                lr,
                wall_time: start.elapsed().as_secs_f64(),
            });
            step += 1;
        }
        log::info!(
            "codec epoch {epoch}: mean loss {:.5}",
            log.epoch_means().last().copied().unwrap_or(f64::NAN)
        );
    }
    codec.fit_latent_stats(depths)?;
    Ok((codec, log))
}

/// Trains the denoiser against a frozen codec.
pub fn train_diffusion(
    data: &[Prepared],
    codec: &Codec,
    den_cfg: &DenoiserConfig,
    cfg: &TrainConfig,
) -> Result<(Denoiser, TrainLog)> {
    train_diffusion_with(data, codec, den_cfg, cfg, |_| {})
}

/// [`train_diffusion`] with a callback after every optimizer step.
pub fn train_diffusion_with(
    data: &[Prepared],
    codec: &Codec,
    den_cfg: &DenoiserConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<(Denoiser, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("diffusion training needs at least one sample"));
    }
    if den_cfg.latent_channels != codec.config().latent_channels {
        return Err(invalid(format!(
            "denoiser latent_channels {} differs from the codec's {}",
            den_cfg.latent_channels,
            codec.config().latent_channels
        )));
    }
    let schedule = cfg.schedule()?;
    let plan = cfg.plan()?;
    let norm = codec.normalization();
    let mut den = Denoiser::new(den_cfg, cfg.horizon, cfg.seed)?;
    let x0s: Vec<Tensor> = data
        .iter()
        .map(|p| codec.encode(&p.sample.gt_depth).map(DepthLatent::into_tensor))
        .collect::<Result<_>>()?;
    let gts: Vec<Tensor> = data.iter().map(|p| normalized_depth(&p.sample.gt_depth, &norm)).collect();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut adam = Adam::new(cfg.adam(steps_per_epoch * cfg.epochs), den.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d1ff);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let start = Instant::now();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = GradAccumulator::new(den.params().len());
            let mut sum = LossTerms::default();
            for &i in batch {
                let t = sample_training_timestep(cfg, &plan, &mut rng);
                let noise = standard_normal(x0s[i].shape(), &mut rng);
                let ex = DiffusionExample {
                    prepared: &data[i],
                    x0: &x0s[i],
                    gt_norm: &gts[i],
                    t,
                    noise: &noise,
                };
                let mut g = Graph::new();
                let p = den.params().bind(&mut g, true);
                let cp = codec.params().bind(&mut g, false);
                let (loss, terms) = denoiser_loss_graph(&mut g, &p, &den, codec, &cp, &ex, &schedule, cfg)?;
                check_finite("diffusion", step, &terms)?;
                sum.ddim += terms.ddim;
                sum.pixel += terms.pixel;
                sum.l2 += terms.l2;
                sum.total += terms.total;
                let mut grads = g.backward(loss);
                acc.add(&p, &mut grads);
            }
            let n = batch.len() as f64;
            let lr = adam.current_lr();
            adam.step(den.params_mut(), &acc.mean());
            if !den.params().all_finite() {
                return Err(Error::Numerical(format!("denoiser parameters became non-finite at step {step}")));
            }
            let rec = LogRecord {
                stage: "diffusion".into(),
                epoch,
                step,
                loss: sum.total / n,
                ddim: sum.ddim / n,
                pixel: sum.pixel / n,
                l2: sum.l2 / n,
                lr,
                wall_time: start.elapsed().as_secs_f64(),
            };
            on_step(&rec);
            log.records.push(rec);
            step += 1;
        }
        log::info!(
            "diffusion epoch {epoch}: mean loss {:.5}",
            log.epoch_means().last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok((den, log))
}
