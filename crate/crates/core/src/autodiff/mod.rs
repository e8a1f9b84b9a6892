//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every forward op appends a node to a [`Tape`] and returns a [`Var`]
//! handle. Nodes only ever reference earlier nodes, so the tape is already
//! in topological order and [`Tape::backward`] is a single reverse sweep.
//! The tape is rebuilt for every forward pass.

mod conv;
mod gradcheck;
mod tensor;

pub use gradcheck::{
    finite_difference_check, finite_difference_check_coords, finite_difference_check_floor, GradCheckReport,
    DEFAULT_REL_FLOOR,
};
pub use tensor::Tensor;

use conv::{col2im_add, gemm, im2col, ConvGeometry};

use crate::error::{dim_err, Error, Result};

/// Default floor for cosine-similarity norms.
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        batch: usize,
        // One im2col matrix per batch item, kept only when a kernel
        // gradient will be needed.
        cols: Vec<Vec<f64>>,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: f64,
    },
    Sigmoid(Var),
    Relu(Var),
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    SpatialMean(Var),
    DownsampleAvg(Var),
    MaskChannels {
        features: Var,
        mask: Var,
    },
    Cosine {
        a: Var,
        b: Var,
        eps: f64,
    },
    Sum(Var),
    Reshape(Var),
    Bce {
        pred: Var,
        target: Vec<f64>,
        eps: f64,
    },
    Dice {
        pred: Var,
        target: Vec<f64>,
        smooth: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when it does not require grad or the
    /// loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but zero-filled for unreachable leaves.
    pub fn get_or_zero(&self, tape: &Tape, var: Var) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(var).len()])
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    /// 2-D cross-correlation of `[N,C,H,W]` input with `[F,C,kh,kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(input), self.shape(kernel));
        if xs.len() != 4 || ks.len() != 4 {
            return dim_err(format!("conv2d expects 4-d input and kernel, got {xs:?} and {ks:?}"));
        }
        if xs[1] != ks[1] {
            return dim_err(format!(
                "conv2d: input has {} channels but kernel expects {}",
                xs[1], ks[1]
            ));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d stride must be >= 1".into()));
        }
        let geom = ConvGeometry {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            filters: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
        };
        if geom.kh > geom.height + 2 * padding || geom.kw > geom.width + 2 * padding {
            return dim_err(format!("conv2d kernel {ks:?} larger than padded input {xs:?}"));
        }
        let batch = xs[0];
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let pixels = geom.out_pixels();
        let patch = geom.patch_len();
        let in_len = geom.channels * geom.height * geom.width;
        let keep_cols = self.requires_grad(kernel);
        let mut out = vec![0.0; batch * geom.filters * pixels];
        let mut saved = Vec::new();
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            let mut cols = vec![0.0; patch * pixels];
            for n in 0..batch {
                im2col(&geom, &x[n * in_len..(n + 1) * in_len], &mut cols);
                let dst = &mut out[n * geom.filters * pixels..(n + 1) * geom.filters * pixels];
                gemm(geom.filters, patch, pixels, k, false, &cols, false, 0.0, dst);
                if keep_cols {
                    let fresh = if n + 1 < batch { vec![0.0; patch * pixels] } else { Vec::new() };
                    saved.push(std::mem::replace(&mut cols, fresh));
                }
            }
        }
        let value = Tensor::new(vec![batch, geom.filters, oh, ow], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                cols: saved,
            },
            rg,
        ))
    }

    /// Adds a per-channel bias `[F]` to a `[N,F,H,W]` tensor.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let bs = self.shape(bias);
        if xs.len() != 4 || bs != [xs[1]] {
            return dim_err(format!("bias_add: bias {bs:?} does not match input {xs:?}"));
        }
        let plane = xs[2] * xs[3];
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(input).data().to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let bv = b[i % xs[1]];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(xs, data)?;
        let rg = self.rg(&[input, bias]);
        Ok(self.push(value, Op::BiasAdd { input, bias }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.map_unary(a, Op::Affine { input: a, scale }, |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// `1 - a`.
    pub fn complement(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Rectifier; the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Nearest-neighbour 2× upsampling over the two trailing axes.
    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return dim_err(format!("upsample needs at least 2 axes, got {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value(a).len() / (h * w).max(1);
        let src = self.value(a).data();
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            let sp = &src[p * h * w..(p + 1) * h * w];
            let dp = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dp[y * 2 * w + x] = sp[(y / 2) * w + x / 2];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape[n - 2] *= 2;
        shape[n - 1] *= 2;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Upsample2x(a), rg))
    }

    /// Concatenates two `[N,C,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return dim_err(format!("concat_channels: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (ca, cb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(sa[0] * (ca + cb));
        for n in 0..sa[0] {
            out.extend_from_slice(&xa[n * ca..(n + 1) * ca]);
            out.extend_from_slice(&xb[n * cb..(n + 1) * cb]);
        }
        let value = Tensor::new(vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ConcatChannels(a, b), rg))
    }

    /// Per-channel mean of a `[C,h,w]` map.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 {
            return dim_err(format!("spatial_mean expects [C,h,w] with h,w >= 1, got {s:?}"));
        }
        let plane = s[1] * s[2];
        let inv = 1.0 / plane as f64;
        let data = self
            .value(a)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() * inv)
            .collect();
        let value = Tensor::new(vec![s[0]], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SpatialMean(a), rg))
    }

    /// Block-mean downsampling of an `[H,W]` map to `[th,tw]`.
    pub fn downsample_avg(&mut self, a: Var, th: usize, tw: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || th == 0 || tw == 0 || !s[0].is_multiple_of(th) || !s[1].is_multiple_of(tw) {
            return dim_err(format!("cannot downsample {s:?} to [{th}, {tw}]"));
        }
        let (bh, bw) = (s[0] / th, s[1] / tw);
        let inv = 1.0 / (bh * bw) as f64;
        let src = self.value(a).data();
        let mut out = vec![0.0; th * tw];
        for (i, o) in out.iter_mut().enumerate() {
            let (ty, tx) = (i / tw, i % tw);
            let mut acc = 0.0;
            for y in ty * bh..(ty + 1) * bh {
                acc += src[y * s[1] + tx * bw..y * s[1] + (tx + 1) * bw].iter().sum::<f64>();
            }
            *o = acc * inv;
        }
        let value = Tensor::new(vec![th, tw], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::DownsampleAvg(a), rg))
    }

    /// Multiplies every channel of a `[C,h,w]` map by an `[h,w]` mask.
    pub fn mask_channels(&mut self, features: Var, mask: Var) -> Result<Var> {
        let (fs, ms) = (self.shape(features).to_vec(), self.shape(mask).to_vec());
        if fs.len() != 3 || ms.len() != 2 || fs[1..] != ms[..] {
            return dim_err(format!("mask {ms:?} does not fit feature map {fs:?}"));
        }
        let m = self.value(mask).data();
        let data = self
            .value(features)
            .data()
            .chunks(m.len())
            .flat_map(|c| c.iter().zip(m).map(|(f, w)| f * w))
            .collect();
        let value = Tensor::new(fs, data)?;
        let rg = self.rg(&[features, mask]);
        Ok(self.push(value, Op::MaskChannels { features, mask }, rg))
    }

    /// Cosine similarity of two equal-length vectors as a scalar.
    ///
    /// Returns 0 when either norm is below `eps`; otherwise
    /// `a·b / max(|a||b|, eps)`, clamped to [-1, 1].
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape(a, b, "cosine_similarity")?;
        let c = cosine_value(self.value(a).data(), self.value(b).data(), eps);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine { a, b, eps }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Mean binary cross entropy with the prediction clamped to
    /// `[eps, 1 - eps]`. Pixels outside the clamp get zero gradient.
    pub fn bce(&mut self, pred: Var, target: &[f64], eps: f64) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return dim_err(format!("bce: {} predictions vs {} targets", p.len(), target.len()));
        }
        let loss = bce_value(p, target, eps);
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Soft Dice loss `1 - (2Σpy + s) / (Σp + Σy + s)`.
    pub fn dice(&mut self, pred: Var, target: &[f64], smooth: f64) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return dim_err(format!("dice: {} predictions vs {} targets", p.len(), target.len()));
        }
        let (inter, total) = dice_sums(p, target);
        let loss = 1.0 - (2.0 * inter + smooth) / (total + smooth);
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                pred,
                target: target.to_vec(),
                smooth,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The tape is left intact, so repeated calls produce identical
    /// gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only leaves and the nodes that require grad keep their buffers.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
                cols,
            } => {
                let pixels = geom.out_pixels();
                let patch = geom.patch_len();
                let in_len = geom.channels * geom.height * geom.width;
                let out_len = geom.filters * pixels;
                if self.requires_grad(*kernel) {
                    let dk = self.grad_buf(grads, *kernel);
                    for n in 0..*batch {
                        let go = &g[n * out_len..(n + 1) * out_len];
                        gemm(geom.filters, pixels, patch, go, false, &cols[n], true, 1.0, dk);
                    }
                }
                if self.requires_grad(*input) {
                    let k = self.value(*kernel).data();
                    let mut dcols = vec![0.0; patch * pixels];
                    let dx = self.grad_buf(grads, *input);
                    for n in 0..*batch {
                        let go = &g[n * out_len..(n + 1) * out_len];
                        gemm(patch, geom.filters, pixels, k, true, go, false, 0.0, &mut dcols);
                        col2im_add(geom, &dcols, &mut dx[n * in_len..(n + 1) * in_len]);
                    }
                }
            }
            Op::BiasAdd { input, bias } => {
                if self.requires_grad(*input) {
                    accumulate(self.grad_buf(grads, *input), g);
                }
                if self.requires_grad(*bias) {
                    let s = node.value.shape();
                    let (f, plane) = (s[1], s[2] * s[3]);
                    let db = self.grad_buf(grads, *bias);
                    for (j, chunk) in g.chunks(plane).enumerate() {
                        db[j % f] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        accumulate(self.grad_buf(grads, v), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let y = self.value(*b).data();
                    let da = self.grad_buf(grads, *a);
                    for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                        *d += gi * yi;
                    }
                }
                if self.requires_grad(*b) {
                    let x = self.value(*a).data();
                    let db = self.grad_buf(grads, *b);
                    for ((d, gi), xi) in db.iter_mut().zip(g).zip(x) {
                        *d += gi * xi;
                    }
                }
            }
            Op::Affine { input, scale } => {
                if self.requires_grad(*input) {
                    let da = self.grad_buf(grads, *input);
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += scale * gi;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.requires_grad(*a) {
                    let da = self.grad_buf(grads, *a);
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(node.value.data()) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(a) => {
                if self.requires_grad(*a) {
                    let x = self.value(*a).data();
                    let da = self.grad_buf(grads, *a);
                    for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Upsample2x(a) => {
                if self.requires_grad(*a) {
                    let s = self.shape(*a);
                    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                    let da = self.grad_buf(grads, *a);
                    let planes = da.len() / (h * w).max(1);
                    for p in 0..planes {
                        let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dp = &mut da[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                dp[(y / 2) * w + x / 2] += gp[y * 2 * w + x];
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let batch = node.value.shape()[0];
                let ca = self.value(*a).len() / batch;
                let cb = self.value(*b).len() / batch;
                if self.requires_grad(*a) {
                    let da = self.grad_buf(grads, *a);
                    for n in 0..batch {
                        let src = &g[n * (ca + cb)..n * (ca + cb) + ca];
                        accumulate(&mut da[n * ca..(n + 1) * ca], src);
                    }
                }
                if self.requires_grad(*b) {
                    let db = self.grad_buf(grads, *b);
                    for n in 0..batch {
                        let src = &g[n * (ca + cb) + ca..(n + 1) * (ca + cb)];
                        accumulate(&mut db[n * cb..(n + 1) * cb], src);
                    }
                }
            }
            Op::SpatialMean(a) => {
                if self.requires_grad(*a) {
                    let s = self.shape(*a);
                    let plane = s[1] * s[2];
                    let inv = 1.0 / plane as f64;
                    let da = self.grad_buf(grads, *a);
                    for (chunk, gi) in da.chunks_mut(plane).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += gi * inv);
                    }
                }
            }
            Op::DownsampleAvg(a) => {
                if self.requires_grad(*a) {
                    let s = self.shape(*a).to_vec();
                    let (th, tw) = (node.value.shape()[0], node.value.shape()[1]);
                    let (bh, bw) = (s[0] / th, s[1] / tw);
                    let inv = 1.0 / (bh * bw) as f64;
                    let da = self.grad_buf(grads, *a);
                    for y in 0..s[0] {
                        for x in 0..s[1] {
                            da[y * s[1] + x] += g[(y / bh) * tw + x / bw] * inv;
                        }
                    }
                }
            }
            Op::MaskChannels { features, mask } => {
                let m = self.value(*mask).data();
                let plane = m.len();
                if self.requires_grad(*features) {
                    let df = self.grad_buf(grads, *features);
                    for (dc, gc) in df.chunks_mut(plane).zip(g.chunks(plane)) {
                        for ((d, gi), w) in dc.iter_mut().zip(gc).zip(m) {
                            *d += gi * w;
                        }
                    }
                }
                if self.requires_grad(*mask) {
                    let f = self.value(*features).data();
                    let dm = self.grad_buf(grads, *mask);
                    for (fc, gc) in f.chunks(plane).zip(g.chunks(plane)) {
                        for ((d, gi), fi) in dm.iter_mut().zip(gc).zip(fc) {
                            *d += gi * fi;
                        }
                    }
                }
            }
            Op::Cosine { a, b, eps } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let (da_vec, db_vec) = cosine_grad(x, y, *eps);
                let gs = g[0];
                if self.requires_grad(*a) {
                    let da = self.grad_buf(grads, *a);
                    for (d, v) in da.iter_mut().zip(&da_vec) {
                        *d += gs * v;
                    }
                }
                if self.requires_grad(*b) {
                    let db = self.grad_buf(grads, *b);
                    for (d, v) in db.iter_mut().zip(&db_vec) {
                        *d += gs * v;
                    }
                }
            }
            Op::Sum(a) => {
                if self.requires_grad(*a) {
                    let gs = g[0];
                    self.grad_buf(grads, *a).iter_mut().for_each(|d| *d += gs);
                }
            }
            Op::Reshape(a) => {
                if self.requires_grad(*a) {
                    accumulate(self.grad_buf(grads, *a), g);
                }
            }
            Op::Bce { pred, target, eps } => {
                if self.requires_grad(*pred) {
                    let p = self.value(*pred).data();
                    let inv_n = g[0] / p.len() as f64;
                    let dp = self.grad_buf(grads, *pred);
                    for ((d, &pi), &yi) in dp.iter_mut().zip(p).zip(target) {
                        if pi > *eps && pi < 1.0 - eps {
                            *d += inv_n * ((1.0 - yi) / (1.0 - pi) - yi / pi);
                        }
                    }
                }
            }
            Op::Dice {
                pred,
                target,
                smooth,
            } => {
                if self.requires_grad(*pred) {
                    let p = self.value(*pred).data();
                    let (inter, total) = dice_sums(p, target);
                    let num = 2.0 * inter + smooth;
                    let den = total + smooth;
                    let gs = g[0];
                    let dp = self.grad_buf(grads, *pred);
                    for (d, &yi) in dp.iter_mut().zip(target) {
                        *d += -gs * (2.0 * yi * den - num) / (den * den);
                    }
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity on plain slices; same rule as [`Tape::cosine_similarity`].
pub fn cosine_value(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let (saa, sbb) = (dot(a, a), dot(b, b));
    if saa.sqrt() < eps || sbb.sqrt() < eps {
        return 0.0;
    }
    // sqrt(saa * sbb) rather than |a|*|b| so that cos(v, v) is exactly 1.
    let denom = (saa * sbb).sqrt().max(eps);
    (dot(a, b) / denom).clamp(-1.0, 1.0)
}

fn cosine_grad(a: &[f64], b: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (saa, sbb) = (dot(a, a), dot(b, b));
    if saa.sqrt() < eps || sbb.sqrt() < eps {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let norm_prod = (saa * sbb).sqrt();
    if norm_prod < eps {
        let da = b.iter().map(|v| v / eps).collect();
        let db = a.iter().map(|v| v / eps).collect();
        return (da, db);
    }
    let c = dot(a, b) / norm_prod;
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / norm_prod - c * x / saa)
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / norm_prod - c * y / sbb)
        .collect();
    (da, db)
}

pub(crate) fn bce_value(p: &[f64], y: &[f64], eps: f64) -> f64 {
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            let q = pi.clamp(eps, 1.0 - eps);
            -(yi * q.ln() + (1.0 - yi) * (1.0 - q).ln())
        })
        .sum();
    total / p.len().max(1) as f64
}

fn dice_sums(p: &[f64], y: &[f64]) -> (f64, f64) {
    let inter = dot(p, y);
    let total = p.iter().sum::<f64>() + y.iter().sum::<f64>();
    (inter, total)
}

#[cfg(test)]
mod tests;
