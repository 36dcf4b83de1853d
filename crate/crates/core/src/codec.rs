//! Depth encoder/decoder between full-resolution depth maps and the
//! quarter-resolution latent grid, plus the pixel loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::denoiser::DepthLatent;
use crate::error::{invalid, shape, Error, Result};
use crate::geometry::DepthMap;
use crate::nn::{Bound, Conv2d, ParamId, ParamStore, Upconv2d};
use crate::tensor::Tensor;

/// Linear map from meters to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthNormalization {
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for DepthNormalization {
    fn default() -> Self {
        Self { d_min: 0.2, d_max: 2.0 }
    }
}

impl DepthNormalization {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        let n = Self { d_min, d_max };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min.is_finite() && self.d_max.is_finite() && self.d_min < self.d_max) {
            return Err(invalid(format!(
                "depth range needs d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, meters: f64) -> f64 {
        (meters - self.d_min) / (self.d_max - self.d_min)
    }

    pub fn denormalize(&self, unit: f64) -> f64 {
        self.d_min + unit * (self.d_max - self.d_min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub latent_channels: usize,
    /// Encoder widths after the first and second stride-2 stage.
    pub hidden: [usize; 2],
    pub normalization: DepthNormalization,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            hidden: [16, 32],
            normalization: DepthNormalization::default(),
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.hidden.contains(&0) {
            return Err(invalid("codec widths must be positive"));
        }
        self.normalization.validate()
    }
}

struct Layers {
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    enc_out: Conv2d,
    dec_in: Conv2d,
    up1: Upconv2d,
    up2: Upconv2d,
    /// Per-channel latent mean and standard deviation used to standardize
    /// encoder output; fitted after training, identity until then.
    stat_mean: ParamId,
    stat_std: ParamId,
}

/// Normalized depths outside this band mean the scene violates the range.
const RANGE_SLACK: f64 = 0.05;
/// Keeps decoded depth strictly inside `(d_min, d_max)` when the sigmoid
/// saturates in floating point.
const UNIT_MARGIN: f64 = 1e-9;

pub struct Codec {
    cfg: CodecConfig,
    params: ParamStore,
    layers: Layers,
}

impl Codec {
    pub fn new(cfg: &CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let [h1, h2] = cfg.hidden;
        let d = cfg.latent_channels;
        let layers = Layers {
            enc1: Conv2d::new(&mut ps, &mut rng, "encoder", "conv1", 3, h1, 3, 2),
            enc2: Conv2d::new(&mut ps, &mut rng, "encoder", "conv2", h1, h2, 3, 2),
            enc3: Conv2d::new(&mut ps, &mut rng, "encoder", "conv3", h2, h2, 3, 1),
            enc_out: Conv2d::new(&mut ps, &mut rng, "encoder", "out", h2, d, 1, 1),
            dec_in: Conv2d::new(&mut ps, &mut rng, "decoder", "conv1x1", d, h2, 1, 1),
            up1: Upconv2d::new(&mut ps, &mut rng, "decoder", "deconv1", h2, h1),
            up2: Upconv2d::new(&mut ps, &mut rng, "decoder", "deconv2", h1, 3),
            stat_mean: ps.add("latent_stats", "mean", Tensor::zeros(&[d])),
            stat_std: ps.add("latent_stats", "std", Tensor::full(&[d], 1.0)),
        };
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            layers,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn normalization(&self) -> DepthNormalization {
        self.cfg.normalization
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Normalized depth replicated to three identical channels.
    pub fn encoder_input(&self, depth: &DepthMap) -> Result<Tensor> {
        let (h, w) = (depth.height(), depth.width());
        if h % 4 != 0 || w % 4 != 0 {
            return Err(shape(format!("depth is {h}x{w}; both sides must be divisible by 4")));
        }
        if depth.validity().iter().any(|v| !v) {
            return Err(invalid(format!(
                "encode needs complete depth; {} of {} pixels are invalid",
                h * w - depth.valid_count(),
                h * w
            )));
        }
        let norm = self.cfg.normalization;
        let plane: Vec<f64> = depth.values().iter().map(|&v| norm.normalize(v)).collect();
        if let Some(v) = plane.iter().find(|v| **v < -RANGE_SLACK || **v > 1.0 + RANGE_SLACK) {
            return Err(invalid(format!(
                "depth {:.4} m lies outside the configured range [{}, {}] m",
                norm.denormalize(*v),
                norm.d_min,
                norm.d_max
            )));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
        Tensor::from_vec(&[3, h, w], data)
    }

    /// Encoder on a `[3,H,W]` input, returning the standardized latent.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let l = &self.layers;
        let a = l.enc1.forward(g, p, x);
        let a = g.silu(a);
        let a = l.enc2.forward(g, p, a);
        let a = g.silu(a);
        let a = l.enc3.forward(g, p, a);
        let a = g.silu(a);
        let z = l.enc_out.forward(g, p, a);
        let neg_mean = g.scale(p.var(l.stat_mean), -1.0);
        let z = g.add_channel(z, neg_mean);
        let inv = g.value(p.var(l.stat_std)).map(|s| 1.0 / s);
        let inv = g.constant(inv);
        g.mul_channel(z, inv)
    }

    /// Decoder from a standardized latent to the three sigmoid channels.
    pub fn decode_channels_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Var {
        let l = &self.layers;
        let z = g.mul_channel(z, p.var(l.stat_std));
        let z = g.add_channel(z, p.var(l.stat_mean));
        let a = l.dec_in.forward(g, p, z);
        let a = g.silu(a);
        let a = l.up1.forward(g, p, a);
        let a = g.silu(a);
        let a = l.up2.forward(g, p, a);
        g.sigmoid(a)
    }

    /// Decoder to normalized depth `[1,H,W]` (mean of the three channels).
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Var {
        let ch = self.decode_channels_graph(g, p, z);
        g.channel_mean(ch)
    }

    pub fn encode(&self, depth: &DepthMap) -> Result<DepthLatent> {
        let x = self.encoder_input(depth)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let z = self.encode_graph(&mut g, &p, xv);
        DepthLatent::new(g.value(z).clone())
    }

    fn check_latent(&self, latent: &DepthLatent) -> Result<()> {
        if latent.channels() != self.cfg.latent_channels {
            return Err(shape(format!(
                "latent has {} channels, codec expects {}",
                latent.channels(),
                self.cfg.latent_channels
            )));
        }
        Ok(())
    }

    /// The three decoded channels in `(0, 1)`.
    pub fn decode_channels(&self, latent: &DepthLatent) -> Result<Tensor> {
        self.check_latent(latent)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(latent.tensor().clone());
        let ch = self.decode_channels_graph(&mut g, &p, z);
        Ok(g.value(ch).clone())
    }

    pub fn decode(&self, latent: &DepthLatent) -> Result<DepthMap> {
        let ch = self.decode_channels(latent)?;
        let (_, h, w) = ch.chw();
        let unit = average_channels(&ch);
        let norm = self.cfg.normalization;
        let values = unit
            .into_iter()
            .map(|u| norm.denormalize(u.clamp(UNIT_MARGIN, 1.0 - UNIT_MARGIN)))
            .collect();
        DepthMap::dense(h, w, values)
    }

    /// Sets the latent standardization from raw encoder outputs.
    pub fn fit_latent_stats(&mut self, depths: &[DepthMap]) -> Result<()> {
        if depths.is_empty() {
            return Err(invalid("latent statistics need at least one depth map"));
        }
        let d = self.cfg.latent_channels;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut count = 0usize;
        let mean_id = self.layers.stat_mean;
        let std_id = self.layers.stat_std;
        *self.params.get_mut(mean_id) = Tensor::zeros(&[d]);
        *self.params.get_mut(std_id) = Tensor::full(&[d], 1.0);
        for depth in depths {
            let z = self.encode(depth)?;
            let t = z.tensor();
            let plane = t.len() / d;
            for (c, chunk) in t.data().chunks(plane).enumerate() {
                sum[c] += chunk.iter().sum::<f64>();
                sq[c] += chunk.iter().map(|v| v * v).sum::<f64>();
            }
            count += plane;
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        *self.params.get_mut(mean_id) = Tensor::from_vec(&[d], mean)?;
        *self.params.get_mut(std_id) = Tensor::from_vec(&[d], std)?;
        if !self.params.all_finite() {
            return Err(Error::Numerical("latent statistics are not finite".into()));
        }
        Ok(())
    }

    /// Ids of the standardization entries, which training leaves alone.
    pub fn stat_ids(&self) -> [ParamId; 2] {
        [self.layers.stat_mean, self.layers.stat_std]
    }
}

/// Channel mean written relative to channel 0, so equal channels return
/// that channel bit for bit.
fn average_channels(ch: &Tensor) -> Vec<f64> {
    let (c, h, w) = ch.chw();
    let d = ch.data();
    let base = &d[..h * w];
    let mut dev = vec![0.0; h * w];
    for plane in d.chunks(h * w).skip(1) {
        for ((o, v), b) in dev.iter_mut().zip(plane).zip(base) {
            *o += v - b;
        }
    }
    base.iter().zip(dev).map(|(b, s)| b + s / c as f64).collect()
}

/// `sqrt(mean(δ²) + λ·mean(δ)²)` over two equally long buffers.
pub fn pixel_loss_values(pred: &[f64], gt: &[f64], lambda: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(shape(format!("pixel loss on {} vs {} pixels", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(invalid("pixel loss over zero pixels"));
    }
    check_lambda(lambda)?;
    let n = pred.len() as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let d = p - g;
        s1 += d;
        s2 += d * d;
    }
    Ok((s2 / n + lambda * (s1 / n) * (s1 / n)).sqrt())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("pixel loss lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Pixel loss between two depth maps in normalized depth units, over every
/// pixel regardless of validity.
pub fn pixel_loss(pred: &DepthMap, gt: &DepthMap, norm: &DepthNormalization, lambda: f64) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(shape(format!(
            "pixel loss between {}x{} and {}x{} maps",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let span = norm.d_max - norm.d_min;
    let p: Vec<f64> = pred.values().iter().map(|v| v / span).collect();
    let g: Vec<f64> = gt.values().iter().map(|v| v / span).collect();
    pixel_loss_values(&p, &g, lambda)
}

/// Graph form of the pixel loss on normalized depth tensors.
pub fn pixel_loss_graph(g: &mut Graph, pred: Var, gt: Var, lambda: f64) -> Var {
    let d = g.sub(pred, gt);
    let sq = g.mul(d, d);
    let m2 = g.mean(sq);
    let m1 = g.mean(d);
    let m1sq = g.mul(m1, m1);
    let m1sq = g.scale(m1sq, lambda);
    let s = g.add(m2, m1sq);
    g.sqrt(s)
}
