//! A small reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Each forward pass records its operations on a fresh [`Graph`]; calling
//! [`Graph::backward`] walks the tape in reverse. Shape errors inside the tape
//! are programming errors and panic; public APIs validate shapes before
//! building a graph.

use crate::tensor::{col2im, conv_out, gemm, im2col, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Silu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Concat(Vec<Var>),
    AvgPool(Var, usize),
    SpatialMean(Var),
    ChannelMean(Var),
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    Sqrt(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that gradients flow into.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 2-D convolution. `x: [C,H,W]`, `w: [O,C,k,k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.shape(w).to_vec();
        assert!(ws.len() == 4 && ws[1] == c && ws[2] == ws[3], "conv weight {ws:?} vs input channels {c}");
        let (o, k) = (ws[0], ws[2]);
        let (cols, oh, ow) = if k == 1 && stride == 1 && pad == 0 {
            (self.value(x).data().to_vec(), h, wd)
        } else {
            im2col(self.value(x).data(), c, h, wd, k, stride, pad)
        };
        let mut out = vec![0.0; o * oh * ow];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), o);
            for (oc, chunk) in out.chunks_mut(oh * ow).enumerate() {
                chunk.fill(bias[oc]);
            }
        }
        gemm(o, c * k * k, oh * ow, self.value(w).data(), false, &cols, false, &mut out, 1.0);
        let needs = self.ng(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].needs_grad);
        let keep = if self.nodes[w.0].needs_grad { cols } else { Vec::new() };
        self.push(
            Tensor::from_vec(&[o, oh, ow], out).unwrap(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols: keep,
            },
            needs,
        )
    }

    /// Transposed convolution (adjoint of [`Graph::conv2d`] with the same
    /// geometry). `x: [C,H,W]`, `w: [C,O,k,k]`. `out_pad` extra rows/cols are
    /// added on the bottom/right so a stride-2 layer exactly doubles the size.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.shape(w).to_vec();
        assert!(ws.len() == 4 && ws[0] == c && ws[2] == ws[3], "deconv weight {ws:?} vs input channels {c}");
        let (o, k) = (ws[1], ws[2]);
        let oh = (h - 1) * stride + k + out_pad - 2 * pad;
        let ow = (wd - 1) * stride + k + out_pad - 2 * pad;
        debug_assert_eq!(conv_out(oh, k, stride, pad), h);
        debug_assert_eq!(conv_out(ow, k, stride, pad), wd);
        let mut cols = vec![0.0; o * k * k * h * wd];
        gemm(o * k * k, c, h * wd, self.value(w).data(), true, self.value(x).data(), false, &mut cols, 0.0);
        let mut out = col2im(&cols, o, oh, ow, k, stride, pad, h, wd);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (oc, chunk) in out.chunks_mut(oh * ow).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[oc]);
            }
        }
        let needs = self.ng(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].needs_grad);
        self.push(
            Tensor::from_vec(&[o, oh, ow], out).unwrap(),
            Op::ConvTranspose2d { x, w, b, stride, pad },
            needs,
        )
    }

    /// Matrix product of 2-D operands (rank-3 `[C,H,W]` is viewed as `[C,H*W]`).
    pub fn matmul(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Var {
        let (ar, ac) = as_matrix(self.shape(a));
        let (br, bc) = as_matrix(self.shape(b));
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape(a), self.shape(b));
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), a_t, self.value(b).data(), b_t, &mut out, 0.0);
        let needs = self.ng(&[a, b]);
        self.push(Tensor::from_vec(&[m, n], out).unwrap(), Op::MatMul { a, b, a_t, b_t }, needs)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.shape(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y);
        let needs = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y);
        let needs = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y);
        let needs = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), needs)
    }

    /// Adds a per-channel vector `v: [C]` to `x: [C, ...]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let c = self.shape(x)[0];
        assert_eq!(self.value(v).len(), c, "add_channel: vector length vs channels");
        let plane = self.value(x).len() / c;
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for (ci, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|e| *e += vv[ci]);
        }
        let needs = self.ng(&[x, v]);
        self.push(out, Op::AddChannel(x, v), needs)
    }

    /// Scales each channel of `x: [C, ...]` by `v: [C]`.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Var {
        let c = self.shape(x)[0];
        assert_eq!(self.value(v).len(), c, "mul_channel: vector length vs channels");
        let plane = self.value(x).len() / c;
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for (ci, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|e| *e *= vv[ci]);
        }
        let needs = self.ng(&[x, v]);
        self.push(out, Op::MulChannel(x, v), needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|e| e * s);
        let needs = self.ng(&[x]);
        self.push(v, Op::Scale(x, s), needs)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e + c);
        let needs = self.ng(&[x]);
        self.push(v, Op::AddConst(x), needs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * sigmoid(e));
        let needs = self.ng(&[x]);
        self.push(v, Op::Silu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let needs = self.ng(&[x]);
        self.push(v, Op::Sigmoid(x), needs)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = as_matrix(self.shape(x));
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            row.iter_mut().for_each(|e| *e /= s);
        }
        debug_assert_eq!(out.len(), r * c);
        let needs = self.ng(&[x]);
        self.push(out, Op::SoftmaxRows(x), needs)
    }

    /// Concatenates `[C_i, H, W]` tensors along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (_, h, w) = self.value(xs[0]).chw();
        let mut data = Vec::new();
        let mut c = 0;
        for &x in xs {
            let (ci, hi, wi) = self.value(x).chw();
            assert!(hi == h && wi == w, "concat spatial mismatch");
            c += ci;
            data.extend_from_slice(self.value(x).data());
        }
        let needs = self.ng(xs);
        self.push(Tensor::from_vec(&[c, h, w], data).unwrap(), Op::Concat(xs.to_vec()), needs)
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by {k}");
        if k == 1 {
            return x;
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let inv = 1.0 / (k * k) as f64;
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ci * oh + y / k) * ow + xx / k] += src[(ci * h + y) * w + xx] * inv;
                }
            }
        }
        let needs = self.ng(&[x]);
        self.push(Tensor::from_vec(&[c, oh, ow], out).unwrap(), Op::AvgPool(x, k), needs)
    }

    /// Mean over all non-channel axes: `[C, ...] -> [C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let c = self.shape(x)[0];
        let plane = self.value(x).len() / c;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let needs = self.ng(&[x]);
        self.push(Tensor::from_vec(&[c], out).unwrap(), Op::SpatialMean(x), needs)
    }

    /// Mean over channels: `[C,H,W] -> [1,H,W]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let src = self.value(x).data();
        let mut out = vec![0.0; h * w];
        for ch in src.chunks(h * w) {
            for (o, v) in out.iter_mut().zip(ch) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= c as f64);
        let needs = self.ng(&[x]);
        self.push(Tensor::from_vec(&[1, h, w], out).unwrap(), Op::ChannelMean(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).expect("reshape element count");
        let needs = self.ng(&[x]);
        self.push(v, Op::Reshape(x), needs)
    }

    /// Mean of all entries, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let needs = self.ng(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), needs)
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let needs = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Elementwise square root.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::sqrt);
        let needs = self.ng(&[x]);
        self.push(v, Op::Sqrt(x), needs)
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Gradients of the scalar `loss` with respect to all graph nodes.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(self.shape(loss), vec![1.0]).unwrap());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (c, h, wd) = self.value(*x).chw();
                let ws = self.shape(*w);
                let (o, k) = (ws[0], ws[2]);
                let (_, oh, ow) = node.value.chw();
                let ck = c * k * k;
                if let Some(b) = b {
                    if want(*b) {
                        let db: Vec<f64> = gd.chunks(oh * ow).map(|ch| ch.iter().sum()).collect();
                        acc(*b, Tensor::from_vec(&[o], db).unwrap(), grads);
                    }
                }
                if want(*w) {
                    let mut dw = vec![0.0; o * ck];
                    gemm(o, oh * ow, ck, gd, false, cols, true, &mut dw, 0.0);
                    acc(*w, Tensor::from_vec(ws, dw).unwrap(), grads);
                }
                if want(*x) {
                    let mut dcols = vec![0.0; ck * oh * ow];
                    gemm(ck, o, oh * ow, self.value(*w).data(), true, gd, false, &mut dcols, 0.0);
                    let dx = if k == 1 && *stride == 1 && *pad == 0 {
                        dcols
                    } else {
                        col2im(&dcols, c, h, wd, k, *stride, *pad, oh, ow)
                    };
                    acc(*x, Tensor::from_vec(&[c, h, wd], dx).unwrap(), grads);
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (c, h, wd) = self.value(*x).chw();
                let ws = self.shape(*w);
                let (o, k) = (ws[1], ws[2]);
                let (_, oh, ow) = node.value.chw();
                if let Some(b) = b {
                    if want(*b) {
                        let db: Vec<f64> = gd.chunks(oh * ow).map(|ch| ch.iter().sum()).collect();
                        acc(*b, Tensor::from_vec(&[o], db).unwrap(), grads);
                    }
                }
                let (gcols, gh, gw) = im2col(gd, o, oh, ow, k, *stride, *pad);
                debug_assert_eq!((gh, gw), (h, wd));
                if want(*w) {
                    let mut dw = vec![0.0; c * o * k * k];
                    gemm(c, h * wd, o * k * k, self.value(*x).data(), false, &gcols, true, &mut dw, 0.0);
                    acc(*w, Tensor::from_vec(ws, dw).unwrap(), grads);
                }
                if want(*x) {
                    let mut dx = vec![0.0; c * h * wd];
                    gemm(c, o * k * k, h * wd, self.value(*w).data(), false, &gcols, false, &mut dx, 0.0);
                    acc(*x, Tensor::from_vec(&[c, h, wd], dx).unwrap(), grads);
                }
            }
            Op::MatMul { a, b, a_t, b_t } => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let (ar, ac) = as_matrix(self.shape(*a));
                let k = if *a_t { ar } else { ac };
                if want(*a) {
                    // dA = dC * op(B)^T  (or its transpose when A is stored transposed)
                    let mut da = vec![0.0; ar * ac];
                    if *a_t {
                        gemm(k, n, m, self.value(*b).data(), *b_t, gd, true, &mut da, 0.0);
                    } else {
                        gemm(m, n, k, gd, false, self.value(*b).data(), !*b_t, &mut da, 0.0);
                    }
                    acc(*a, Tensor::from_vec(self.shape(*a), da).unwrap(), grads);
                }
                if want(*b) {
                    let (br, bc) = as_matrix(self.shape(*b));
                    let mut db = vec![0.0; br * bc];
                    if *b_t {
                        gemm(n, m, k, gd, true, self.value(*a).data(), *a_t, &mut db, 0.0);
                    } else {
                        gemm(k, m, n, self.value(*a).data(), !*a_t, gd, false, &mut db, 0.0);
                    }
                    acc(*b, Tensor::from_vec(self.shape(*b), db).unwrap(), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|e| -e), grads);
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let t = zip_with(g, self.value(*b), |x, y| x * y);
                    acc(*a, t, grads);
                }
                if want(*b) {
                    let t = zip_with(g, self.value(*a), |x, y| x * y);
                    acc(*b, t, grads);
                }
            }
            Op::AddChannel(x, v) => {
                acc(*x, g.clone(), grads);
                if want(*v) {
                    let c = self.value(*v).len();
                    let plane = g.len() / c;
                    let dv: Vec<f64> = gd.chunks(plane).map(|ch| ch.iter().sum()).collect();
                    acc(*v, Tensor::from_vec(self.shape(*v), dv).unwrap(), grads);
                }
            }
            Op::MulChannel(x, v) => {
                let vv = self.value(*v).data();
                let c = vv.len();
                let plane = g.len() / c;
                if want(*x) {
                    let mut dx = g.clone();
                    for (ci, ch) in dx.data_mut().chunks_mut(plane).enumerate() {
                        ch.iter_mut().for_each(|e| *e *= vv[ci]);
                    }
                    acc(*x, dx, grads);
                }
                if want(*v) {
                    let xv = self.value(*x).data();
                    let dv: Vec<f64> = (0..c)
                        .map(|ci| {
                            let r = ci * plane..(ci + 1) * plane;
                            gd[r.clone()].iter().zip(&xv[r]).map(|(a, b)| a * b).sum()
                        })
                        .collect();
                    acc(*v, Tensor::from_vec(self.shape(*v), dv).unwrap(), grads);
                }
            }
            Op::Scale(x, s) => acc(*x, g.map(|e| e * s), grads),
            Op::AddConst(x) => acc(*x, g.clone(), grads),
            Op::Silu(x) => {
                let t = zip_with(g, self.value(*x), |gg, v| {
                    let s = sigmoid(v);
                    gg * s * (1.0 + v * (1.0 - s))
                });
                acc(*x, t, grads);
            }
            Op::Sigmoid(x) => {
                let t = zip_with(g, &node.value, |gg, y| gg * y * (1.0 - y));
                acc(*x, t, grads);
            }
            Op::SoftmaxRows(x) => {
                let (_, c) = as_matrix(node.value.shape());
                let mut dx = vec![0.0; g.len()];
                for ((drow, grow), yrow) in dx
                    .chunks_mut(c)
                    .zip(gd.chunks(c))
                    .zip(node.value.data().chunks(c))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                acc(*x, Tensor::from_vec(node.value.shape(), dx).unwrap(), grads);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if want(x) {
                        let t = Tensor::from_vec(self.shape(x), gd[off..off + n].to_vec()).unwrap();
                        acc(x, t, grads);
                    }
                    off += n;
                }
            }
            Op::AvgPool(x, k) => {
                let (c, h, w) = self.value(*x).chw();
                let (oh, ow) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[(ci * h + y) * w + xx] = gd[(ci * oh + y / k) * ow + xx / k] * inv;
                        }
                    }
                }
                acc(*x, Tensor::from_vec(&[c, h, w], dx).unwrap(), grads);
            }
            Op::SpatialMean(x) => {
                let xs = self.shape(*x);
                let c = xs[0];
                let plane = self.value(*x).len() / c;
                let mut dx = Vec::with_capacity(c * plane);
                for &gc in gd {
                    dx.extend(std::iter::repeat(gc / plane as f64).take(plane));
                }
                acc(*x, Tensor::from_vec(xs, dx).unwrap(), grads);
            }
            Op::ChannelMean(x) => {
                let (c, h, w) = self.value(*x).chw();
                let mut dx = Vec::with_capacity(c * h * w);
                for _ in 0..c {
                    dx.extend(gd.iter().map(|v| v / c as f64));
                }
                acc(*x, Tensor::from_vec(&[c, h, w], dx).unwrap(), grads);
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(self.shape(*x)).unwrap();
                acc(*x, t, grads);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, Tensor::full(self.shape(*x), gd[0] / n as f64), grads);
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), gd[0]), grads),
            Op::Sqrt(x) => {
                let t = zip_with(g, &node.value, |gg, y| gg * 0.5 / y);
                acc(*x, t, grads);
            }
        }
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (shape[0], 1),
        2 => (shape[0], shape[1]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
