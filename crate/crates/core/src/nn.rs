//! Parameter storage and the handful of layers shared by the codec and the
//! denoiser.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the store, which is also the position in gradient vectors.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    /// Fully qualified name, e.g. `trunk.block0.expand.weight`.
    pub name: String,
    /// Named group the parameter belongs to, e.g. `trunk.block0`.
    pub group: String,
    pub value: Tensor,
}

/// Ordered collection of named, grouped parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: &str, name: &str, value: Tensor) -> ParamId {
        let full = format!("{group}.{name}");
        debug_assert!(self.entries.iter().all(|e| e.name != full), "duplicate parameter {full}");
        self.entries.push(ParamEntry {
            name: full,
            group: group.to_string(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.group) {
                out.push(e.group.clone());
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// Places every parameter on the graph as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    g.variable(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Replaces values from `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &[SerializedParam]) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.entries.len()
            )));
        }
        for (e, s) in self.entries.iter_mut().zip(other) {
            if e.name != s.name {
                return Err(Error::Checkpoint(format!("expected tensor {}, found {}", e.name, s.name)));
            }
            if e.value.shape() != s.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: model shape {:?}, checkpoint shape {:?}",
                    e.name,
                    e.value.shape(),
                    s.shape
                )));
            }
            e.value = Tensor::from_vec(&s.shape, s.data.clone())
                .map_err(|err| Error::Checkpoint(err.to_string()))?;
        }
        Ok(())
    }

    pub fn serialize(&self) -> Vec<SerializedParam> {
        self.entries
            .iter()
            .map(|e| SerializedParam {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                data: e.value.data().to_vec(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SerializedParam {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: &str,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let bound = (3.0 / (cin * k * k) as f64).sqrt();
        let weight = ps.add(group, &format!("{name}.weight"), uniform(rng, &[cout, cin, k, k], bound));
        let bias = ps.add(group, &format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Stride-2 transposed convolution that exactly doubles spatial size.
#[derive(Clone, Debug)]
pub struct Upconv2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upconv2d {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, group: &str, name: &str, cin: usize, cout: usize) -> Self {
        // each output pixel receives ~ k*k/stride^2 taps per input channel
        let bound = (3.0 / (cin * 9) as f64 * 4.0).sqrt();
        let weight = ps.add(group, &format!("{name}.weight"), uniform(rng, &[cin, cout, 3, 3], bound));
        let bias = ps.add(group, &format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv_transpose2d(x, p.var(self.weight), Some(p.var(self.bias)), 2, 1, 1)
    }
}

/// Dense layer on `[in]` vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, group: &str, name: &str, cin: usize, cout: usize) -> Self {
        let bound = (3.0 / cin as f64).sqrt();
        let weight = ps.add(group, &format!("{name}.weight"), uniform(rng, &[cout, cin], bound));
        let bias = ps.add(group, &format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let n = g.value(x).len();
        let col = g.reshape(x, &[n, 1]);
        let y = g.matmul(p.var(self.weight), col, false, false);
        let m = g.shape(y)[0];
        let y = g.reshape(y, &[m]);
        g.add(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Total optimizer steps, for the cosine learning-rate decay.
    pub total_steps: usize,
}

/// Adam with cosine learning-rate decay.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, ps: &ParamStore) -> Self {
        let m = ps.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        let v = ps.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self { cfg, m, v, step: 0 }
    }

    pub fn current_lr(&self) -> f64 {
        let total = self.cfg.total_steps.max(1) as f64;
        let progress = (self.step as f64 / total).min(1.0);
        self.cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Applies one update; `grads` is aligned with the store's entries.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &[Option<Tensor>]) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = ps.entries[i].value.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Accumulates per-sample gradients into a batch mean.
pub struct GradAccumulator {
    sums: Vec<Option<Tensor>>,
    count: usize,
}

impl GradAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            sums: (0..n).map(|_| None).collect(),
            count: 0,
        }
    }

    pub fn add(&mut self, bound: &Bound, grads: &mut crate::autograd::Gradients) {
        for (i, v) in bound.vars().iter().enumerate() {
            if let Some(g) = grads.take(*v) {
                match &mut self.sums[i] {
                    Some(s) => s.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.count += 1;
    }

    pub fn mean(mut self) -> Vec<Option<Tensor>> {
        let inv = 1.0 / self.count.max(1) as f64;
        for s in self.sums.iter_mut().flatten() {
            s.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        self.sums
    }
}
