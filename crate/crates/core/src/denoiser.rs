//! Conditioned denoising network: multi-scale RGB/depth feature extraction,
//! fusion into the visual condition, and the x0-predicting trunk.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, shape, Result};
use crate::nn::{Bound, Conv2d, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Noisy or clean latent `[D, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthLatent(Tensor);

impl DepthLatent {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(shape(format!("latent must be [D,h,w], got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(invalid("latent holds non-finite values"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    /// `(h, w)` spatial size.
    pub fn spatial(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }
}

/// Fused condition `c`, `[C, H/4, W/4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualCondition(Tensor);

impl VisualCondition {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(shape(format!("condition must be [C,h,w], got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(invalid("condition holds non-finite values"));
        }
        Ok(Self(t))
    }

    pub fn features(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }
}

/// Which inputs feed the condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    /// RGB plus the refined depth branch.
    Refined,
    /// RGB alone.
    RgbOnly,
}

/// Channels of the depth-branch input: normalized refined depth and the mask.
pub const DEPTH_INPUT_CHANNELS: usize = 2;
pub const RGB_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Latent channels `D`.
    pub latent_channels: usize,
    /// Trunk and condition width `C`.
    pub channels: usize,
    /// Residual bottleneck blocks `N`.
    pub blocks: usize,
    /// Inner width of each bottleneck.
    pub bottleneck: usize,
    /// Sinusoidal timestep embedding width (even).
    pub time_dim: usize,
    /// Feature channels at scales 1, 1/2, 1/4 for each branch.
    pub pyramid_channels: [usize; 3],
    /// Squeeze-excite reduction factor.
    pub se_reduction: usize,
    /// Initial value of every per-channel residual gain.
    pub residual_init: f64,
    pub condition: ConditionMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            channels: 64,
            blocks: 4,
            bottleneck: 16,
            time_dim: 32,
            pyramid_channels: [8, 16, 32],
            se_reduction: 4,
            residual_init: 0.1,
            condition: ConditionMode::Refined,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_channels", self.latent_channels),
            ("channels", self.channels),
            ("blocks", self.blocks),
            ("bottleneck", self.bottleneck),
            ("time_dim", self.time_dim),
            ("se_reduction", self.se_reduction),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(invalid(format!("denoiser.{k} must be positive")));
            }
        }
        if self.pyramid_channels.contains(&0) {
            return Err(invalid("denoiser.pyramid_channels entries must be positive"));
        }
        if self.time_dim % 2 != 0 {
            return Err(invalid(format!("denoiser.time_dim must be even, got {}", self.time_dim)));
        }
        if self.se_reduction > self.channels {
            return Err(invalid("denoiser.se_reduction exceeds denoiser.channels"));
        }
        if !self.residual_init.is_finite() {
            return Err(invalid("denoiser.residual_init must be finite"));
        }
        Ok(())
    }
}

struct Block {
    reduce: Conv2d,
    mid: Conv2d,
    expand: Conv2d,
    film_scale: Linear,
    film_shift: Linear,
    se_down: Linear,
    se_up: Linear,
    gain: ParamId,
}

struct Layers {
    rgb: [Conv2d; 3],
    depth: Option<[Conv2d; 3]>,
    proj: Conv2d,
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    out: Conv2d,
    time1: Linear,
    time2: Linear,
    input: Conv2d,
    blocks: Vec<Block>,
    head: Conv2d,
}

/// What a forward pass exposes besides its output.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// Row-stochastic self-attention weights `[N, N]`.
    pub attention: Option<Tensor>,
    /// Channel-attention gates per block.
    pub gates: Vec<Tensor>,
}

/// Parameters plus the architecture that uses them.
pub struct Denoiser {
    cfg: DenoiserConfig,
    horizon: usize,
    params: ParamStore,
    layers: Layers,
}

fn pyramid(ps: &mut ParamStore, rng: &mut ChaCha8Rng, group: &str, cin: usize, ch: [usize; 3]) -> [Conv2d; 3] {
    [
        Conv2d::new(ps, rng, group, "s1", cin, ch[0], 3, 1),
        Conv2d::new(ps, rng, group, "s2", ch[0], ch[1], 3, 2),
        Conv2d::new(ps, rng, group, "s4", ch[1], ch[2], 3, 2),
    ]
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, horizon: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if horizon == 0 {
            return Err(invalid("diffusion horizon must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let rgb = pyramid(&mut ps, &mut rng, "rgb_pyramid", RGB_CHANNELS, cfg.pyramid_channels);
        let depth = match cfg.condition {
            ConditionMode::Refined => Some(pyramid(
                &mut ps,
                &mut rng,
                "depth_pyramid",
                DEPTH_INPUT_CHANNELS,
                cfg.pyramid_channels,
            )),
            ConditionMode::RgbOnly => None,
        };
        let branches = if depth.is_some() { 2 } else { 1 };
        let fused_in = branches * cfg.pyramid_channels.iter().sum::<usize>();
        let c = cfg.channels;
        let proj = Conv2d::new(&mut ps, &mut rng, "fusion.proj", "conv", fused_in, c, 1, 1);
        let query = Conv2d::new(&mut ps, &mut rng, "fusion.attn", "query", c, c, 1, 1);
        let key = Conv2d::new(&mut ps, &mut rng, "fusion.attn", "key", c, c, 1, 1);
        let value = Conv2d::new(&mut ps, &mut rng, "fusion.attn", "value", c, c, 1, 1);
        let out = Conv2d::new(&mut ps, &mut rng, "fusion.attn", "out", c, c, 1, 1);
        let time1 = Linear::new(&mut ps, &mut rng, "time", "fc1", cfg.time_dim, c);
        let time2 = Linear::new(&mut ps, &mut rng, "time", "fc2", c, c);
        let input = Conv2d::new(&mut ps, &mut rng, "trunk.input", "conv", cfg.latent_channels + c, c, 1, 1);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let se_mid = (c / cfg.se_reduction).max(1);
        for i in 0..cfg.blocks {
            let g = format!("trunk.block{i}");
            let b = cfg.bottleneck;
            blocks.push(Block {
                reduce: Conv2d::new(&mut ps, &mut rng, &g, "reduce", c, b, 1, 1),
                mid: Conv2d::new(&mut ps, &mut rng, &g, "mid", b, b, 3, 1),
                expand: Conv2d::new(&mut ps, &mut rng, &g, "expand", b, c, 1, 1),
                film_scale: Linear::new(&mut ps, &mut rng, &g, "film_scale", c, b),
                film_shift: Linear::new(&mut ps, &mut rng, &g, "film_shift", c, b),
                se_down: Linear::new(&mut ps, &mut rng, &g, "se_down", c, se_mid),
                se_up: Linear::new(&mut ps, &mut rng, &g, "se_up", se_mid, c),
                gain: ps.add(&g, "gain", Tensor::full(&[c], cfg.residual_init)),
            });
        }
        let head = Conv2d::new(&mut ps, &mut rng, "head", "conv", c, cfg.latent_channels, 1, 1);
        Ok(Self {
            cfg: cfg.clone(),
            horizon,
            params: ps,
            layers: Layers {
                rgb,
                depth,
                proj,
                query,
                key,
                value,
                out,
                time1,
                time2,
                input,
                blocks,
                head,
            },
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_image(&self, image: &Tensor, channels: usize, what: &str) -> Result<(usize, usize)> {
        if image.shape().len() != 3 || image.shape()[0] != channels {
            return Err(shape(format!(
                "{what} input must be [{channels},H,W], got {:?}",
                image.shape()
            )));
        }
        let (_, h, w) = image.chw();
        if h % 4 != 0 || w % 4 != 0 {
            let (ph, pw) = ((4 - h % 4) % 4, (4 - w % 4) % 4);
            return Err(shape(format!(
                "{what} input is {h}x{w}; both sides must be divisible by 4 (pad by {ph} rows and {pw} columns)"
            )));
        }
        Ok((h, w))
    }

    fn pyramid_graph(g: &mut Graph, p: &Bound, convs: &[Conv2d; 3], x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(3);
        let mut h = x;
        for conv in convs {
            let y = conv.forward(g, p, h);
            h = g.silu(y);
            out.push(h);
        }
        out
    }

    /// Feature maps at scales 1, 1/2 and 1/4 of an `[K, H, W]` image.
    pub fn extract_multiscale(&self, image: &Tensor, depth_branch: bool) -> Result<Vec<Tensor>> {
        let convs = if depth_branch {
            self.check_image(image, DEPTH_INPUT_CHANNELS, "depth")?;
            self.layers
                .depth
                .as_ref()
                .ok_or_else(|| invalid("rgb_only denoiser has no depth branch"))?
        } else {
            self.check_image(image, RGB_CHANNELS, "rgb")?;
            &self.layers.rgb
        };
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let vars = Self::pyramid_graph(&mut g, &p, convs, x);
        Ok(vars.into_iter().map(|v| g.value(v).clone()).collect())
    }

    fn fuse_graph(&self, g: &mut Graph, p: &Bound, rgb: &[Var], depth: Option<&[Var]>) -> (Var, Var) {
        let mut parts = Vec::with_capacity(6);
        for (i, &r) in rgb.iter().enumerate() {
            let k = 1 << (2 - i);
            parts.push(g.avg_pool(r, k));
            if let Some(d) = depth {
                parts.push(g.avg_pool(d[i], k));
            }
        }
        let cat = g.concat(&parts);
        let x = self.layers.proj.forward(g, p, cat);
        let (c, h, w) = g.value(x).chw();
        let n = h * w;
        let q = self.layers.query.forward(g, p, x);
        let k = self.layers.key.forward(g, p, x);
        let v = self.layers.value.forward(g, p, x);
        let q = g.reshape(q, &[c, n]);
        let k = g.reshape(k, &[c, n]);
        let v = g.reshape(v, &[c, n]);
        let scores = g.matmul(q, k, true, false);
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let mixed = g.matmul(v, attn, false, true);
        let mixed = g.reshape(mixed, &[c, h, w]);
        let o = self.layers.out.forward(g, p, mixed);
        (g.add(x, o), attn)
    }

    fn check_pyramids(&self, rgb: &[Tensor], depth: Option<&[Tensor]>) -> Result<()> {
        let ch = self.cfg.pyramid_channels;
        let check = |pyr: &[Tensor], what: &str| -> Result<(usize, usize)> {
            if pyr.len() != 3 {
                return Err(shape(format!("{what} pyramid has {} levels, expected 3", pyr.len())));
            }
            let (_, h, w) = pyr[0].chw();
            for (i, t) in pyr.iter().enumerate() {
                let want = [ch[i], h >> i, w >> i];
                if t.shape() != want {
                    return Err(shape(format!(
                        "{what} pyramid level {i} is {:?}, expected {want:?}",
                        t.shape()
                    )));
                }
            }
            Ok((h, w))
        };
        let dims = check(rgb, "rgb")?;
        match (depth, self.cfg.condition) {
            (Some(d), ConditionMode::Refined) => {
                if check(d, "depth")? != dims {
                    return Err(shape("rgb and depth pyramids come from different image sizes"));
                }
            }
            (None, ConditionMode::RgbOnly) => {}
            (Some(_), ConditionMode::RgbOnly) => return Err(invalid("rgb_only denoiser given a depth pyramid")),
            (None, ConditionMode::Refined) => return Err(invalid("refined denoiser needs a depth pyramid")),
        }
        Ok(())
    }

    /// Fuses feature pyramids into the visual condition.
    pub fn fuse_features(&self, rgb: &[Tensor], depth: Option<&[Tensor]>) -> Result<VisualCondition> {
        self.fuse_features_traced(rgb, depth).map(|(c, _)| c)
    }

    pub fn fuse_features_traced(&self, rgb: &[Tensor], depth: Option<&[Tensor]>) -> Result<(VisualCondition, Tensor)> {
        self.check_pyramids(rgb, depth)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let r: Vec<Var> = rgb.iter().map(|t| g.constant(t.clone())).collect();
        let d: Option<Vec<Var>> = depth.map(|ts| ts.iter().map(|t| g.constant(t.clone())).collect());
        let (c, attn) = self.fuse_graph(&mut g, &p, &r, d.as_deref());
        Ok((VisualCondition::new(g.value(c).clone())?, g.value(attn).clone()))
    }

    /// Full condition path inside a graph: images to `c`.
    pub fn condition_graph(&self, g: &mut Graph, p: &Bound, rgb: Var, depth: Option<Var>) -> Var {
        let r = Self::pyramid_graph(g, p, &self.layers.rgb, rgb);
        let d = match (&self.layers.depth, depth) {
            (Some(convs), Some(x)) => Some(Self::pyramid_graph(g, p, convs, x)),
            _ => None,
        };
        self.fuse_graph(g, p, &r, d.as_deref()).0
    }

    /// Builds `c` from an `[3,H,W]` RGB image and, for the refined mode, the
    /// `[2,H,W]` depth-branch input.
    pub fn condition(&self, rgb: &Tensor, depth: Option<&Tensor>) -> Result<VisualCondition> {
        let dims = self.check_image(rgb, RGB_CHANNELS, "rgb")?;
        match (self.cfg.condition, depth) {
            (ConditionMode::Refined, Some(d)) => {
                if self.check_image(d, DEPTH_INPUT_CHANNELS, "depth")? != dims {
                    return Err(shape("rgb and depth inputs differ in size"));
                }
            }
            (ConditionMode::Refined, None) => return Err(invalid("refined denoiser needs the depth input")),
            (ConditionMode::RgbOnly, _) => {}
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let r = g.constant(rgb.clone());
        let d = match self.cfg.condition {
            ConditionMode::Refined => depth.map(|t| g.constant(t.clone())),
            ConditionMode::RgbOnly => None,
        };
        let c = self.condition_graph(&mut g, &p, r, d);
        VisualCondition::new(g.value(c).clone())
    }

    /// Sinusoidal embedding of `t` with `dim` entries.
    pub fn timestep_embedding(t: i64, dim: usize) -> Tensor {
        let half = dim / 2;
        let mut v = vec![0.0; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v[i] = (t as f64 * freq).sin();
            v[half + i] = (t as f64 * freq).cos();
        }
        Tensor::from_vec(&[dim], v).unwrap()
    }

    /// Trunk inside a graph; returns the x0 estimate and the channel gates.
    pub fn predict_graph(&self, g: &mut Graph, p: &Bound, x_t: Var, t: i64, c: Var) -> (Var, Vec<Var>) {
        let l = &self.layers;
        let emb = g.constant(Self::timestep_embedding(t, self.cfg.time_dim));
        let e = l.time1.forward(g, p, emb);
        let e = g.silu(e);
        let temb = l.time2.forward(g, p, e);
        let temb_act = g.silu(temb);

        let cat = g.concat(&[x_t, c]);
        let h0 = l.input.forward(g, p, cat);
        let mut h = g.add_channel(h0, temb);
        let mut gates = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let a = g.silu(h);
            let a = b.reduce.forward(g, p, a);
            let s = b.film_scale.forward(g, p, temb_act);
            let s = g.add_const(s, 1.0);
            let a = g.mul_channel(a, s);
            let sh = b.film_shift.forward(g, p, temb_act);
            let a = g.add_channel(a, sh);
            let a = g.silu(a);
            let a = b.mid.forward(g, p, a);
            let a = g.silu(a);
            let a = b.expand.forward(g, p, a);
            let sq = g.spatial_mean(a);
            let z = b.se_down.forward(g, p, sq);
            let z = g.silu(z);
            let z = b.se_up.forward(g, p, z);
            let gate = g.sigmoid(z);
            gates.push(gate);
            let a = g.mul_channel(a, gate);
            let a = g.mul_channel(a, p.var(b.gain));
            h = g.add(h, a);
        }
        (l.head.forward(g, p, h), gates)
    }

    fn check_predict(&self, x_t: &DepthLatent, t: i64, c: &VisualCondition) -> Result<()> {
        if x_t.channels() != self.cfg.latent_channels {
            return Err(shape(format!(
                "latent has {} channels, model expects {}",
                x_t.channels(),
                self.cfg.latent_channels
            )));
        }
        if c.channels() != self.cfg.channels {
            return Err(shape(format!(
                "condition has {} channels, model expects {}",
                c.channels(),
                self.cfg.channels
            )));
        }
        if x_t.spatial() != c.spatial() {
            return Err(shape(format!(
                "latent grid {:?} does not match condition grid {:?}",
                x_t.spatial(),
                c.spatial()
            )));
        }
        if t < 0 || t as usize >= self.horizon {
            return Err(invalid(format!("timestep {t} outside [0, {})", self.horizon)));
        }
        Ok(())
    }

    /// x0 estimate from `(x_t, t, c)`.
    pub fn predict(&self, x_t: &DepthLatent, t: i64, c: &VisualCondition) -> Result<DepthLatent> {
        self.predict_traced(x_t, t, c).map(|(x, _)| x)
    }

    pub fn predict_traced(&self, x_t: &DepthLatent, t: i64, c: &VisualCondition) -> Result<(DepthLatent, Trace)> {
        self.check_predict(x_t, t, c)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x_t.tensor().clone());
        let cv = g.constant(c.features().clone());
        let (out, gates) = self.predict_graph(&mut g, &p, xv, t, cv);
        let trace = Trace {
            attention: None,
            gates: gates.iter().map(|v| g.value(*v).clone()).collect(),
        };
        Ok((DepthLatent::new(g.value(out).clone())?, trace))
    }

    /// Head applied to the embedded input, i.e. the trunk with every residual
    /// branch removed.
    pub fn embedded_head(&self, x_t: &DepthLatent, t: i64, c: &VisualCondition) -> Result<DepthLatent> {
        self.check_predict(x_t, t, c)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let l = &self.layers;
        let emb = g.constant(Self::timestep_embedding(t, self.cfg.time_dim));
        let e = l.time1.forward(&mut g, &p, emb);
        let e = g.silu(e);
        let temb = l.time2.forward(&mut g, &p, e);
        let xv = g.constant(x_t.tensor().clone());
        let cv = g.constant(c.features().clone());
        let cat = g.concat(&[xv, cv]);
        let h0 = l.input.forward(&mut g, &p, cat);
        let h = g.add_channel(h0, temb);
        let out = l.head.forward(&mut g, &p, h);
        DepthLatent::new(g.value(out).clone())
    }
}

/// Seeds a fresh generator for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
