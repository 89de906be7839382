//! A small tape-based reverse-mode automatic differentiation engine over
//! dense NCHW tensors.
//!
//! A [`Graph`] records every operation as it is evaluated; node indices are
//! a topological order, so [`Graph::backward`] is a single reverse sweep.
//! One graph belongs to one thread of control. Parameters live outside the
//! graph (see [`ParamStore`]) and are bound as leaves for each step.

mod adam;
mod checkpoint;
mod conv;
mod gradcheck;
mod real;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, Param, ParamStore};
pub use conv::ConvGeom;
pub use gradcheck::{gradient_check, GradCheck, REL_FLOOR};
pub use real::Real;

use conv::{col2im, im2col};
use real::matmul;

use crate::error::{Error, Result};

/// `[batch, channels, height, width]`; lower-rank values pad with ones.
pub type Shape = [usize; 4];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which statistics a normalization layer uses.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a, T> {
    /// Normalize with statistics of the current batch.
    Batch,
    /// Normalize with fixed per-channel statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

#[derive(Debug)]
pub struct BatchNormOutput<T> {
    pub out: Var,
    /// Per-channel batch mean and biased variance when [`NormStats::Batch`] was used.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    ChannelSum(Var),
    BroadcastMul { weights: Var, features: Var },
    SpatialSoftmax(Var),
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    Upsample2(Var),
    Concat(Var, Var),
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
}

struct Node<T> {
    value: Vec<T>,
    shape: Shape,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, if `v` takes part in it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, a: &Shape, b: &Shape) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Vec<T>, shape: Shape, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, values: Vec<T>, shape: Shape, requires_grad: bool) -> Result<Var> {
        if values.len() != numel(&shape) {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", values.len())));
        }
        Ok(self.push(values, shape, Op::Leaf, requires_grad))
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, values: Vec<T>, shape: Shape) -> Result<Var> {
        self.leaf(values, shape, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, values: Vec<T>, shape: Shape) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(what, &sa, &sb));
        }
        Ok(sa)
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let shape = self.same_shape(a, b, what)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, shape, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let (shape, rg) = (self.shape(a), self.rg(&[a]));
        self.push(value, shape, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.map(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(vec![s], [1, 1, 1, 1], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s: T = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(vec![s / n], [1, 1, 1, 1], Op::Mean(a), rg)
    }

    /// `[n, c, h, w] -> [n, 1, h, w]` by summing over channels.
    pub fn channel_sum(&mut self, a: Var) -> Var {
        let [n, c, h, w] = self.shape(a);
        let x = self.value(a);
        let hw = h * w;
        let mut out = vec![T::zero(); n * hw];
        for b in 0..n {
            let o = &mut out[b * hw..(b + 1) * hw];
            for ci in 0..c {
                let src = &x[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                for (d, &s) in o.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, [n, 1, h, w], Op::ChannelSum(a), rg)
    }

    /// Multiplies `features` `[n, c, h, w]` by `weights` `[n, 1, h, w]`
    /// broadcast over channels.
    pub fn broadcast_mul(&mut self, weights: Var, features: Var) -> Result<Var> {
        let [wn, wc, wh, ww] = self.shape(weights);
        let fs @ [n, c, h, w] = self.shape(features);
        if wn != n || wc != 1 || wh != h || ww != w {
            return Err(shape_err("broadcast_mul", &self.shape(weights), &fs));
        }
        let (wv, fv) = (self.value(weights), self.value(features));
        let hw = h * w;
        let mut out = vec![T::zero(); numel(&fs)];
        for b in 0..n {
            let wb = &wv[b * hw..(b + 1) * hw];
            for ci in 0..c {
                let base = (b * c + ci) * hw;
                for i in 0..hw {
                    out[base + i] = wb[i] * fv[base + i];
                }
            }
        }
        let rg = self.rg(&[weights, features]);
        Ok(self.push(out, fs, Op::BroadcastMul { weights, features }, rg))
    }

    /// Softmax over all `h·w` positions of each `(batch, channel)` plane,
    /// computed as `exp(s - max) / Σ exp(s - max)`.
    pub fn spatial_softmax(&mut self, a: Var) -> Var {
        let [n, c, h, w] = self.shape(a);
        let hw = h * w;
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        for p in 0..n * c {
            let src = &x[p * hw..(p + 1) * hw];
            let dst = &mut out[p * hw..(p + 1) * hw];
            // f64 accumulation keeps f32 planes normalised to within a few ulp
            let m = src.iter().copied().fold(T::neg_infinity(), T::max).to_f64().unwrap_or(0.0);
            let e: Vec<f64> = src.iter().map(|s| (s.to_f64().unwrap_or(f64::NAN) - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (d, e) in dst.iter_mut().zip(e) {
                *d = T::from_f64(e / z).unwrap_or_else(T::nan);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, [n, c, h, w], Op::SpatialSoftmax(a), rg)
    }

    /// Cross-correlation of `input` `[n, cin, h, w]` with `kernel`
    /// `[cout, cin, k, k]` and optional `bias` `[1, cout, 1, 1]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, dilation: usize, padding: usize) -> Result<Var> {
        let [n, cin, h, w] = self.shape(input);
        let ks @ [cout, kc, k, k2] = self.shape(kernel);
        if kc != cin || k != k2 {
            return Err(shape_err("conv2d input/kernel", &self.shape(input), &ks));
        }
        if let Some(b) = bias {
            if self.shape(b) != [1, cout, 1, 1] {
                return Err(shape_err("conv2d bias", &self.shape(b), &[1, cout, 1, 1]));
            }
        }
        let geom = ConvGeom::new(k, stride, dilation, padding)?;
        let (oh, ow) = (geom.output_len(h)?, geom.output_len(w)?);
        let ckk = cin * k * k;
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let mut cols = Vec::new();
        let x = self.value(input);
        let kv = self.value(kernel);
        for b in 0..n {
            im2col(&x[b * cin * h * w..], cin, h, w, &geom, oh, ow, &mut cols);
            matmul(cout, ckk, oh * ow, kv, false, &cols, false, &mut out[b * cout * oh * ow..], false);
        }
        if let Some(bv) = bias {
            let bv = self.value(bv);
            for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
                let bias = bv[i % cout];
                chunk.iter_mut().for_each(|v| *v = *v + bias);
            }
        }
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(out, [n, cout, oh, ow], Op::Conv2d { input, kernel, bias, geom }, rg))
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`] w.r.t. its
    /// input); `kernel` is `[cin, cout, k, k]`.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let [n, cin, h, w] = self.shape(input);
        let ks @ [kc, cout, k, k2] = self.shape(kernel);
        if kc != cin || k != k2 {
            return Err(shape_err("conv_transpose2d input/kernel", &self.shape(input), &ks));
        }
        if let Some(b) = bias {
            if self.shape(b) != [1, cout, 1, 1] {
                return Err(shape_err("conv_transpose2d bias", &self.shape(b), &[1, cout, 1, 1]));
            }
        }
        let geom = ConvGeom::new(k, stride, 1, padding)?;
        let (oh, ow) = (geom.transposed_len(h)?, geom.transposed_len(w)?);
        let ckk = cout * k * k;
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let mut cols = vec![T::zero(); ckk * h * w];
        let x = self.value(input);
        let kv = self.value(kernel);
        for b in 0..n {
            matmul(ckk, cin, h * w, kv, true, &x[b * cin * h * w..], false, &mut cols, false);
            col2im(&cols, cout, oh, ow, &geom, h, w, &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow]);
        }
        if let Some(bv) = bias {
            let bv = self.value(bv);
            for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
                let bias = bv[i % cout];
                chunk.iter_mut().for_each(|v| *v = *v + bias);
            }
        }
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(out, [n, cout, oh, ow], Op::ConvTranspose2d { input, kernel, bias, geom }, rg))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(input);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!("max_pool2 on {h}x{w}")));
        }
        let x = self.value(input);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(out, [n, c, oh, ow], Op::MaxPool2 { input, argmax }, rg))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample_nearest2(&mut self, input: Var) -> Var {
        let [n, c, h, w] = self.shape(input);
        let x = self.value(input);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[p * oh * ow + oy * ow + ox] = x[p * h * w + (oy / 2) * w + ox / 2];
                }
            }
        }
        let rg = self.rg(&[input]);
        self.push(out, [n, c, oh, ow], Op::Upsample2(input), rg)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa @ [n, ca, h, w] = self.shape(a);
        let sb @ [nb, cb, hb, wb] = self.shape(b);
        if n != nb || h != hb || w != wb {
            return Err(shape_err("concat_channels", &sa, &sb));
        }
        let hw = h * w;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&va[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&vb[i * cb * hw..(i + 1) * cb * hw]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, [n, ca + cb, h, w], Op::Concat(a, b), rg))
    }

    /// Per-channel normalization followed by a learned affine map;
    /// `gamma` and `beta` are `[1, c, 1, 1]`.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, stats: NormStats<'_, T>, eps: T) -> Result<BatchNormOutput<T>> {
        let xs @ [n, c, h, w] = self.shape(input);
        for p in [gamma, beta] {
            if self.shape(p) != [1, c, 1, 1] {
                return Err(shape_err("batch_norm affine", &self.shape(p), &[1, c, 1, 1]));
            }
        }
        let hw = h * w;
        let count = T::from_usize(n * hw).unwrap();
        let x = self.value(input);
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s = s + x[(b * c + ci) * hw..(b * c + ci + 1) * hw].iter().copied().sum();
                    }
                    let m = s / count;
                    let mut v = T::zero();
                    for b in 0..n {
                        for &xi in &x[(b * c + ci) * hw..(b * c + ci + 1) * hw] {
                            v = v + (xi - m) * (xi - m);
                        }
                    }
                    mean[ci] = m;
                    var[ci] = v / count;
                }
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!("running stats for {} channels, input has {c}", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ci in 0..c {
                let base = (b * c + ci) * hw;
                for i in base..base + hw {
                    xhat[i] = (x[i] - mean[ci]) * inv_std[ci];
                    out[i] = g[ci] * xhat[i] + bt[ci];
                }
            }
        }
        let rg = self.rg(&[input, gamma, beta]);
        let v = self.push(out, xs, Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch }, rg);
        Ok(BatchNormOutput {
            out: v,
            batch_stats: batch.then_some((mean, var)),
        })
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accum<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.accum(grads, v) {
                        g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.accum(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
                }
                if let Some(g) = self.accum(grads, *b) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g - d);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(g) = self.accum(grads, *a) {
                    for i in 0..g.len() {
                        g[i] = g[i] + gy[i] * vb[i];
                    }
                }
                if let Some(g) = self.accum(grads, *b) {
                    for i in 0..g.len() {
                        g[i] = g[i] + gy[i] * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(g) = self.accum(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d * *c);
                }
            }
            Op::AddScalar(a) => {
                if let Some(g) = self.accum(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                if let Some(g) = self.accum(grads, *a) {
                    for i in 0..g.len() {
                        if x[i] > T::zero() {
                            g[i] = g[i] + gy[i];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                if let Some(g) = self.accum(grads, *a) {
                    for i in 0..g.len() {
                        g[i] = g[i] + gy[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                if let Some(g) = self.accum(grads, *a) {
                    for i in 0..g.len() {
                        if x[i] > *lo && x[i] < *hi {
                            g[i] = g[i] + gy[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(g) = self.accum(grads, *a) {
                    g.iter_mut().for_each(|g| *g = *g + gy[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(g) = self.accum(grads, *a) {
                    let d = gy[0] / T::from_usize(g.len()).unwrap();
                    g.iter_mut().for_each(|g| *g = *g + d);
                }
            }
            Op::ChannelSum(a) => {
                let [n, c, h, w] = self.shape(*a);
                let hw = h * w;
                if let Some(g) = self.accum(grads, *a) {
                    for b in 0..n {
                        for ci in 0..c {
                            let dst = &mut g[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                            for (d, &s) in dst.iter_mut().zip(&gy[b * hw..(b + 1) * hw]) {
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
            Op::BroadcastMul { weights, features } => {
                let [n, c, h, w] = self.shape(*features);
                let hw = h * w;
                let (wv, fv) = (self.value(*weights), self.value(*features));
                if let Some(g) = self.accum(grads, *features) {
                    for b in 0..n {
                        for ci in 0..c {
                            let base = (b * c + ci) * hw;
                            for i in 0..hw {
                                g[base + i] = g[base + i] + gy[base + i] * wv[b * hw + i];
                            }
                        }
                    }
                }
                if let Some(g) = self.accum(grads, *weights) {
                    for b in 0..n {
                        for ci in 0..c {
                            let base = (b * c + ci) * hw;
                            for i in 0..hw {
                                g[b * hw + i] = g[b * hw + i] + gy[base + i] * fv[base + i];
                            }
                        }
                    }
                }
            }
            Op::SpatialSoftmax(a) => {
                let [n, c, h, w] = self.shape(*a);
                let hw = h * w;
                let y = &node.value;
                if let Some(g) = self.accum(grads, *a) {
                    for p in 0..n * c {
                        let r = p * hw..(p + 1) * hw;
                        let dot: T = y[r.clone()].iter().zip(&gy[r.clone()]).map(|(&a, &b)| a * b).sum();
                        for i in r {
                            g[i] = g[i] + y[i] * (gy[i] - dot);
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel, bias, geom } => {
                let [n, cin, h, w] = self.shape(*input);
                let [cout, _, k, _] = self.shape(*kernel);
                let [_, _, oh, ow] = node.shape;
                let ckk = cin * k * k;
                let x = self.value(*input);
                let kv = self.value(*kernel);
                let mut cols = Vec::new();
                let mut dcols = vec![T::zero(); ckk * oh * ow];
                let want_k = self.nodes[kernel.0].requires_grad;
                let want_x = self.nodes[input.0].requires_grad;
                let mut dk = want_k.then(|| vec![T::zero(); cout * ckk]);
                let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
                for b in 0..n {
                    let gyb = &gy[b * cout * oh * ow..(b + 1) * cout * oh * ow];
                    if let Some(dk) = dk.as_mut() {
                        im2col(&x[b * cin * h * w..], cin, h, w, geom, oh, ow, &mut cols);
                        matmul(cout, oh * ow, ckk, gyb, false, &cols, true, dk, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        matmul(ckk, cout, oh * ow, kv, true, gyb, false, &mut dcols, false);
                        col2im(&dcols, cin, h, w, geom, oh, ow, &mut dx[b * cin * h * w..(b + 1) * cin * h * w]);
                    }
                }
                if let (Some(d), Some(g)) = (dk, self.accum(grads, *kernel)) {
                    g.iter_mut().zip(d).for_each(|(g, d)| *g = *g + d);
                }
                if let (Some(d), Some(g)) = (dx, self.accum(grads, *input)) {
                    g.iter_mut().zip(d).for_each(|(g, d)| *g = *g + d);
                }
                if let Some(b) = bias {
                    self.bias_grad(grads, *b, gy, cout, oh * ow);
                }
            }
            Op::ConvTranspose2d { input, kernel, bias, geom } => {
                let [n, cin, h, w] = self.shape(*input);
                let [_, cout, k, _] = self.shape(*kernel);
                let [_, _, oh, ow] = node.shape;
                let ckk = cout * k * k;
                let x = self.value(*input);
                let kv = self.value(*kernel);
                let mut cols = Vec::new();
                let want_k = self.nodes[kernel.0].requires_grad;
                let want_x = self.nodes[input.0].requires_grad;
                let mut dk = want_k.then(|| vec![T::zero(); cin * ckk]);
                let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
                for b in 0..n {
                    im2col(&gy[b * cout * oh * ow..], cout, oh, ow, geom, h, w, &mut cols);
                    if let Some(dk) = dk.as_mut() {
                        matmul(cin, h * w, ckk, &x[b * cin * h * w..], false, &cols, true, dk, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        matmul(cin, ckk, h * w, kv, false, &cols, false, &mut dx[b * cin * h * w..], true);
                    }
                }
                if let (Some(d), Some(g)) = (dk, self.accum(grads, *kernel)) {
                    g.iter_mut().zip(d).for_each(|(g, d)| *g = *g + d);
                }
                if let (Some(d), Some(g)) = (dx, self.accum(grads, *input)) {
                    g.iter_mut().zip(d).for_each(|(g, d)| *g = *g + d);
                }
                if let Some(b) = bias {
                    self.bias_grad(grads, *b, gy, cout, oh * ow);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(g) = self.accum(grads, *input) {
                    for (&i, &d) in argmax.iter().zip(gy) {
                        g[i as usize] = g[i as usize] + d;
                    }
                }
            }
            Op::Upsample2(a) => {
                let [n, c, h, w] = self.shape(*a);
                let (oh, ow) = (2 * h, 2 * w);
                if let Some(g) = self.accum(grads, *a) {
                    for p in 0..n * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let i = p * h * w + (oy / 2) * w + ox / 2;
                                g[i] = g[i] + gy[p * oh * ow + oy * ow + ox];
                            }
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.shape(*a);
                let cb = self.shape(*b)[1];
                let hw = h * w;
                if let Some(g) = self.accum(grads, *a) {
                    for i in 0..n {
                        let src = &gy[i * (ca + cb) * hw..(i * (ca + cb) + ca) * hw];
                        let dst = &mut g[i * ca * hw..(i + 1) * ca * hw];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                    }
                }
                if let Some(g) = self.accum(grads, *b) {
                    for i in 0..n {
                        let src = &gy[(i * (ca + cb) + ca) * hw..(i + 1) * (ca + cb) * hw];
                        let dst = &mut g[i * cb * hw..(i + 1) * cb * hw];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch } => {
                let [n, c, h, w] = self.shape(*input);
                let hw = h * w;
                let count = T::from_usize(n * hw).unwrap();
                let gv = self.value(*gamma);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ci in 0..c {
                        let base = (b * c + ci) * hw;
                        for i in base..base + hw {
                            sum_dy[ci] = sum_dy[ci] + gy[i];
                            sum_dy_xhat[ci] = sum_dy_xhat[ci] + gy[i] * xhat[i];
                        }
                    }
                }
                if let Some(g) = self.accum(grads, *gamma) {
                    g.iter_mut().zip(&sum_dy_xhat).for_each(|(g, &d)| *g = *g + d);
                }
                if let Some(g) = self.accum(grads, *beta) {
                    g.iter_mut().zip(&sum_dy).for_each(|(g, &d)| *g = *g + d);
                }
                if let Some(g) = self.accum(grads, *input) {
                    for b in 0..n {
                        for ci in 0..c {
                            let base = (b * c + ci) * hw;
                            let scale = gv[ci] * inv_std[ci];
                            for i in base..base + hw {
                                let d = if *batch {
                                    scale / count * (count * gy[i] - sum_dy[ci] - xhat[i] * sum_dy_xhat[ci])
                                } else {
                                    scale * gy[i]
                                };
                                g[i] = g[i] + d;
                            }
                        }
                    }
                }
            }
        }
    }

    fn bias_grad(&self, grads: &mut [Option<Vec<T>>], bias: Var, gy: &[T], cout: usize, plane: usize) {
        if let Some(g) = self.accum(grads, bias) {
            for (i, chunk) in gy.chunks(plane).enumerate() {
                let s: T = chunk.iter().copied().sum();
                g[i % cout] = g[i % cout] + s;
            }
        }
    }
}
