//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each op appends one node
//! holding its value and the handles of its parents; [`Tape::backward`]
//! walks the nodes in reverse insertion order, which is a valid reverse
//! topological order because parents always precede children.

use super::kernels::{self, ConvGeom};
use super::tensor::{axis_blocks, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sqrt(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Variance(Var),
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    MatMul(Var, Var),
    Conv2d { x: Var, k: Var, bias: Option<Var>, geom: ConvGeom },
    Upsample2(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L2Normalize(Var, usize),
    ChannelMean(Var),
    BroadcastChannels(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const NORM_FLOOR: f64 = 1e-12;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose2(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar_var", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).item();
        Ok(self.unary_with(a, Op::MulScalarVar(a, s), &[a, s], |x| x * c))
    }

    fn unary_with(&mut self, a: Var, op: Op, parents: &[Var], f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, parents)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.max(0.0).sqrt())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.clamp(a, lo, f64::INFINITY)
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Population variance over all elements.
    pub fn variance(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.len() as f64;
        let m = t.data().iter().sum::<f64>() / n;
        let v = t.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        self.push(Tensor::scalar(v), Op::Variance(a), &[a])
    }

    // ---- layout ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshaped(shape).map_err(|_| Error::dim("reshape", self.shape(a), shape))?;
        Ok(self.push(v.with_grad(false), Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[r, c] = t.shape() else {
            return Err(Error::Shape(format!("transpose expects rank 2, got {:?}", t.shape())));
        };
        let v = Tensor::new(&[c, r], transpose2(t.data(), r, c))?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut extent = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &first, s));
            }
            extent += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = extent;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_blocks(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, Op::Slice { src: a, axis, start }, &[a]))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        };
        if k != k2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Grouped cross-correlation of a `Cin x H x W` map with a
    /// `Cout x Cin/groups x kh x kw` kernel. Output extents use floor
    /// division, `(H + 2 pad - kh) / stride + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        let (&[cin, h, w], &[cout, cin_g, kh, kw]) = (tx.shape(), tk.shape()) else {
            return Err(Error::dim("conv2d", tx.shape(), tk.shape()));
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
            return Err(Error::dim("conv2d", tx.shape(), tk.shape()));
        }
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d needs odd kernel extents and stride >= 1, got {kh}x{kw} stride {stride}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d output extent would be empty: input {h}x{w}, kernel {kh}x{kw}, pad {pad}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            groups,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, tx.data(), tk.data(), bias.map(|b| self.value(b).data()));
        let v = Tensor::new(&[cout, geom.ho, geom.wo], out)?;
        let mut parents = vec![x, k];
        parents.extend(bias);
        Ok(self.push(v, Op::Conv2d { x, k, bias, geom }, &parents))
    }

    /// Nearest-neighbour x2 upsampling of a `C x H x W` map.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[c, h, w] = t.shape() else {
            return Err(Error::Shape(format!("upsample2 expects rank 3, got {:?}", t.shape())));
        };
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x] = t.data()[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let v = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        Ok(self.push(v, Op::Upsample2(a), &[a]))
    }

    // ---- normalizations ------------------------------------------------

    fn check_axis(&self, a: Var, axis: usize, op: &str) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::Shape(format!("{op}: axis {axis} invalid for {:?}", self.shape(a))));
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilized by subtracting the running max.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let t = self.value(a);
        let (outer, n, inner) = axis_blocks(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (out[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[idx(k)] /= s;
                }
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        Ok(self.push(v, Op::Softmax(a, axis), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "log_softmax")?;
        let t = self.value(a);
        let (outer, n, inner) = axis_blocks(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..n).map(|k| (out[idx(k)] - mx).exp()).sum::<f64>().ln();
                for k in 0..n {
                    out[idx(k)] -= lse;
                }
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        Ok(self.push(v, Op::LogSoftmax(a, axis), &[a]))
    }

    /// Divides each fibre along `axis` by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "l2_normalize")?;
        let t = self.value(a);
        let (outer, n, inner) = axis_blocks(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let norm = (0..n).map(|k| out[idx(k)] * out[idx(k)]).sum::<f64>().sqrt().max(NORM_FLOOR);
                for k in 0..n {
                    out[idx(k)] /= norm;
                }
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        Ok(self.push(v, Op::L2Normalize(a, axis), &[a]))
    }

    /// Per-channel spatial mean of a `C x H x W` map, giving `[C]`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[c, h, w] = t.shape() else {
            return Err(Error::Shape(format!("channel_mean expects rank 3, got {:?}", t.shape())));
        };
        let n = (h * w) as f64;
        let data = t.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
        let v = Tensor::new(&[c], data)?;
        Ok(self.push(v, Op::ChannelMean(a), &[a]))
    }

    /// Broadcasts a `[C]` vector to a `C x H x W` map.
    pub fn broadcast_channels(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.value(a);
        let &[c] = t.shape() else {
            return Err(Error::Shape(format!("broadcast_channels expects rank 1, got {:?}", t.shape())));
        };
        let mut data = Vec::with_capacity(c * h * w);
        for &v in t.data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let v = Tensor::new(&[c, h, w], data)?;
        Ok(self.push(v, Op::BroadcastChannels(a), &[a]))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Gradients of the one-element `loss` with respect to every leaf that
    /// requires them. Gradients reaching a node along several paths add up.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(root.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                self.propagate(i, g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, zip_map(&g, val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, zip_map(&g, val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, zip_map(&g, val(*b), |x, y| x / y));
                }
                if wants(*b) {
                    let gb = zip_map(&zip_map(&g, out, |x, q| x * q), val(*b), |x, y| -x / y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = val(*a).shape();
                self.accumulate(grads, *a, g.reshaped(shape).unwrap());
            }
            Op::MulScalarVar(a, s) => {
                let c = val(*s).item();
                if wants(*s) {
                    let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, Tensor::new(val(*s).shape(), vec![gs]).unwrap());
                }
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::Relu(a) => {
                self.accumulate(grads, *a, zip_map(&g, val(*a), |d, x| if x > 0.0 { d } else { 0.0 }))
            }
            Op::Gelu(a) => {
                let gx = zip_map(&g, val(*a), |d, x| {
                    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    d * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                self.accumulate(grads, *a, gx);
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, zip_map(&g, out, |d, y| d * y * (1.0 - y))),
            Op::Softplus(a) => self.accumulate(grads, *a, zip_map(&g, val(*a), |d, x| d * sigmoid(x))),
            Op::Sqrt(a) => {
                self.accumulate(grads, *a, zip_map(&g, out, |d, y| if y > 0.0 { d / (2.0 * y) } else { 0.0 }))
            }
            Op::Abs(a) => self.accumulate(grads, *a, zip_map(&g, val(*a), |d, x| d * sign(x))),
            Op::Clamp(a, lo, hi) => {
                let gx = zip_map(&g, val(*a), |d, x| if x >= *lo && x <= *hi { d } else { 0.0 });
                self.accumulate(grads, *a, gx);
            }
            Op::Sum(a) => {
                let d = g.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), d));
            }
            Op::Mean(a) => {
                let t = val(*a);
                self.accumulate(grads, *a, Tensor::full(t.shape(), g.item() / t.len() as f64));
            }
            Op::Variance(a) => {
                let t = val(*a);
                let n = t.len() as f64;
                let m = t.data().iter().sum::<f64>() / n;
                let d = g.item();
                self.accumulate(grads, *a, t.map(|x| 2.0 * d * (x - m) / n));
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let gt = Tensor::new(&[r, c], transpose2(g.data(), c, r)).unwrap();
                self.accumulate(grads, *a, gt);
            }
            Op::Concat(parts, axis) => {
                let (outer, n, inner) = axis_blocks(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = val(p).shape()[*axis];
                    if wants(p) {
                        let mut data = Vec::with_capacity(val(p).len());
                        for o in 0..outer {
                            let base = (o * n + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + ext * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(val(p).shape(), data).unwrap());
                    }
                    offset += ext;
                }
            }
            Op::Slice { src, axis, start } => {
                let shape = val(*src).shape();
                let (outer, n, inner) = axis_blocks(shape, *axis);
                let len = out.shape()[*axis];
                let mut gs = Tensor::zeros(shape);
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gs.data_mut()[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *src, gs);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, 0.0);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], ga).unwrap());
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, 0.0);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], gb).unwrap());
                }
            }
            Op::Conv2d { x, k, bias, geom } => {
                let want_b = bias.is_some_and(wants);
                let (dx, dk, db) = kernels::conv2d_backward(
                    geom,
                    val(*x).data(),
                    val(*k).data(),
                    g.data(),
                    wants(*x),
                    wants(*k),
                    want_b,
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(val(*x).shape(), dx).unwrap());
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *k, Tensor::new(val(*k).shape(), dk).unwrap());
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accumulate(grads, *b, Tensor::new(val(*b).shape(), db).unwrap());
                }
            }
            Op::Upsample2(a) => {
                let shape = val(*a).shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let mut ga = Tensor::zeros(shape);
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            ga.data_mut()[(ch * h + y / 2) * w + x / 2] += g.data()[(ch * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_blocks(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g.data()[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] = y[idx(k)] * (g.data()[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape(), gx).unwrap());
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, n, inner) = axis_blocks(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let gsum: f64 = (0..n).map(|k| g.data()[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] = g.data()[idx(k)] - y[idx(k)].exp() * gsum;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape(), gx).unwrap());
            }
            Op::L2Normalize(a, axis) => {
                let (outer, n, inner) = axis_blocks(out.shape(), *axis);
                let (x, y) = (val(*a).data(), out.data());
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let raw = (0..n).map(|k| x[idx(k)] * x[idx(k)]).sum::<f64>().sqrt();
                        let norm = raw.max(NORM_FLOOR);
                        let dot: f64 = if raw > NORM_FLOOR {
                            (0..n).map(|k| g.data()[idx(k)] * y[idx(k)]).sum()
                        } else {
                            0.0
                        };
                        for k in 0..n {
                            gx[idx(k)] = (g.data()[idx(k)] - y[idx(k)] * dot) / norm;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape(), gx).unwrap());
            }
            Op::ChannelMean(a) => {
                let shape = val(*a).shape();
                let hw = shape[1] * shape[2];
                let mut data = Vec::with_capacity(val(*a).len());
                for &d in g.data() {
                    data.extend(std::iter::repeat_n(d / hw as f64, hw));
                }
                self.accumulate(grads, *a, Tensor::new(shape, data).unwrap());
            }
            Op::BroadcastChannels(a) => {
                let hw = out.shape()[1] * out.shape()[2];
                let data = g.data().chunks(hw).map(|p| p.iter().sum()).collect();
                self.accumulate(grads, *a, Tensor::new(val(*a).shape(), data).unwrap());
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

        let m = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 9.0, -7.0]));
        let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let z = tape.constant(Tensor::zeros(&[3, 4]));
        let mi = tape.matmul(m, eye).unwrap();
        assert_eq!(tape.value(mi), tape.value(m));
        let mz = tape.matmul(m, z).unwrap();
        assert!(tape.value(mz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 3, 3], |i| i as f64 + 1.0));
        let one = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, one, None, 1, 0, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let delta = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 0 { 1.0 } else { 0.0 }));
        let s = tape.conv2d(x, delta, None, 1, 1, 1).unwrap();
        // input shifted down-right by one pixel
        assert_eq!(tape.value(s).data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);

        let ones = tape.constant(Tensor::ones(&[1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let nine = tape.conv2d(ones, k, None, 1, 0, 1).unwrap();
        assert_eq!(tape.value(nine).data(), &[9.0]);
    }

    #[test]
    fn conv_rejects_even_kernel_and_empty_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let k2 = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(tape.conv2d(x, k2, None, 1, 0, 1), Err(Error::Shape(_))));
        let k5 = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(tape.conv2d(x, k5, None, 1, 0, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(z, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.softmax(x, 0).unwrap();
        // e^k / (e + e^2 + e^3)
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, &expect) in [0.09003, 0.24473, 0.66524].iter().enumerate() {
            let v = tape.value(s).data()[k];
            assert!((v - expect).abs() < 1e-5);
            assert!((v - ((k + 1) as f64).exp() / denom).abs() < 1e-15);
        }
        let shifted = tape.constant(t(&[3], &[101.0, 102.0, 103.0]));
        let s2 = tape.softmax(shifted, 0).unwrap();
        assert!(tape.value(s).max_abs_diff(tape.value(s2)) <= 1e-12);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let c = tape.constant(Tensor::full(&[3, 4], 2.5));
        let m = tape.mean(c);
        let v = tape.variance(c);
        assert_eq!(tape.value(m).item(), 2.5);
        assert_eq!(tape.value(v).item(), 0.0);
        let u = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let up = tape.upsample2(u).unwrap();
        assert_eq!(
            tape.value(up).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(x, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.5, -1.5, 2.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.5, -1.5, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.5, -1.5, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::ones(&[2]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }
}
