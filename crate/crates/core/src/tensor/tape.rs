//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and enough context to
//! replay its vector-Jacobian product. `backward` walks the nodes in reverse
//! recording order. Parameters are borrowed, not copied, so a tape lives no
//! longer than the parameter store it reads from. A fresh tape is built for
//! each forward pass.

use std::borrow::Cow;

use super::kernels::{self, ConvGeom};
use super::{numel, Tensor};
use crate::error::{shape_err, PftError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Strided view of an axis: `outer` blocks of `len` items, each `inner` apart.
#[derive(Debug, Clone, Copy)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    SumAxis(Var, Axis),
    Softmax(Var, Axis),
    LogSoftmax(Var, Axis),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cols: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    LogClamped(Var, f64),
    Pow(Var, f64),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool2 {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
    },
    Resize {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
    },
    Concat(Vec<Var>, usize),
    Narrow(Var, Axis, usize),
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros if `v` was not reached.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = K * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf with explicit `requires_grad`.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(t.into_data()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.tensor(v);
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.value(a).iter().map(|&x| f(x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip_map(a, b, |x, y| x / y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Div(a, b), &[a, b]))
    }

    /// Adds the vector `b` (length = last axis of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let n = xs.last().copied().unwrap_or(0);
        if self.shape(b) != [n] {
            return shape_err("add_row", xs, self.shape(b));
        }
        let bv = self.value(b);
        let v: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &xv)| xv + bv[i % n])
            .collect();
        Ok(self.push(xs.to_vec(), v, Op::AddRow(x, b), &[x, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        self.push(self.shape(a).to_vec(), v, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Elementwise product with a constant (non-differentiable) array.
    pub fn mul_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return shape_err("mul_const", self.shape(a), &[c.len()]);
        }
        let v: Vec<f64> = self.value(a).iter().zip(c).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), v, Op::MulConst(a, c.to_vec()), &[a]))
    }

    /// Matrix product over the last two axes. Leading batch axes must agree,
    /// or one operand may be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", &sa, &sb);
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if k != k2 || !(ba == bb || ba.is_empty() || bb.is_empty()) {
            return shape_err("matmul", &sa, &sb);
        }
        let batch_dims = if ba.is_empty() { bb } else { ba };
        let batch: usize = batch_dims.iter().product();
        let (a_batched, b_batched) = (!ba.is_empty(), !bb.is_empty());
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                let bo = if b_batched { i * k * n } else { 0 };
                kernels::matmul_acc(
                    &av[ao..ao + m * k],
                    &bv[bo..bo + k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul {
            a,
            b,
            batch,
            a_batched,
            b_batched,
            m,
            k,
            n,
        };
        Ok(self.push(shape, out, op, &[a, b]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", &s, perm);
        }
        let idx = kernels::permute_index(&s, perm);
        let src = self.value(a);
        let v = idx.iter().map(|&i| src[i]).collect();
        let shape = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(shape, v, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return shape_err("transpose", self.shape(a), &[0, 0]);
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return shape_err("reshape", self.shape(a), shape);
        }
        let v = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<Axis> {
        let s = self.shape(a);
        if axis >= s.len() {
            return shape_err(op, s, &[axis]);
        }
        Ok(Axis::of(s, axis))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ax = self.check_axis("sum_axis", a, axis)?;
        let x = self.value(a);
        let mut out = vec![0.0; ax.outer * ax.inner];
        for o in 0..ax.outer {
            for l in 0..ax.len {
                let src = &x[(o * ax.len + l) * ax.inner..(o * ax.len + l + 1) * ax.inner];
                add_into(&mut out[o * ax.inner..(o + 1) * ax.inner], src);
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape.remove(axis);
        Ok(self.push(shape, out, Op::SumAxis(a, ax), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(a).get(axis).unwrap_or(&1) as f64;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    fn softmax_values(x: &[f64], ax: Axis, log: bool) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let at = |l: usize| (o * ax.len + l) * ax.inner + i;
                let max = (0..ax.len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..ax.len).map(|l| (x[at(l)] - max).exp()).sum();
                for l in 0..ax.len {
                    out[at(l)] = if log {
                        x[at(l)] - max - z.ln()
                    } else {
                        (x[at(l)] - max).exp() / z
                    };
                }
            }
        }
        out
    }

    /// Numerically stable softmax along `axis` (per-slice max subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ax = self.check_axis("softmax", a, axis)?;
        let v = Self::softmax_values(self.value(a), ax, false);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Softmax(a, ax), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ax = self.check_axis("log_softmax", a, axis)?;
        let v = Self::softmax_values(self.value(a), ax, true);
        Ok(self.push(self.shape(a).to_vec(), v, Op::LogSoftmax(a, ax), &[a]))
    }

    /// Layer normalization over the last axis with `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = s.last().copied().unwrap_or(0);
        if cols == 0 {
            return Err(PftError::Config("layer_norm over an empty channel axis".into()));
        }
        if self.shape(gain) != [cols] {
            return shape_err("layer_norm", &s, self.shape(gain));
        }
        if self.shape(bias) != [cols] {
            return shape_err("layer_norm", &s, self.shape(bias));
        }
        let rows = self.value(x).len() / cols;
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            cols,
            xhat,
            rstd,
        };
        Ok(self.push(s, out, op, &[x, gain, bias]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| gelu_parts(x).0);
        self.push(self.shape(a).to_vec(), v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(self.shape(a).to_vec(), v, Op::Sigmoid(a), &[a])
    }

    /// `log(sigmoid(x))`, stable for large |x|.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, log_sigmoid);
        self.push(self.shape(a).to_vec(), v, Op::LogSigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push(self.shape(a).to_vec(), v, Op::Exp(a), &[a])
    }

    /// `ln(max(x, floor))`; zero gradient where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let v = self.map(a, |x| x.max(floor).ln());
        self.push(self.shape(a).to_vec(), v, Op::LogClamped(a, floor), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.log_clamped(a, 0.0)
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.map(a, |x| x.powf(p));
        self.push(self.shape(a).to_vec(), v, Op::Pow(a, p), &[a])
    }

    /// `x @ w + b` on the last axis, with `w` stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Grouped 2-D cross-correlation on `[C_in, H, W]` with zero "same" padding.
    /// `weight` is `[C_out, C_in / groups, k, k]` with `k` odd.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let [c_in, h, w] = super::chw(&xs, "conv2d")?;
        let [c_out, cin_g, k, k2] = match ws.as_slice() {
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => return shape_err("conv2d", &xs, &ws),
        };
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(PftError::Config(format!(
                "conv2d: channels {c_in}->{c_out} not divisible by {groups} groups"
            )));
        }
        if k != k2 || k % 2 == 0 || cin_g != c_in / groups {
            return shape_err("conv2d", &xs, &ws);
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return shape_err("conv2d", &ws, self.shape(b));
            }
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            h,
            w,
            k,
            groups,
        };
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        );
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(vec![c_out, h, w], out, Op::Conv2d { x, weight, bias, geom }, &inputs))
    }

    /// 2x2 average pooling with stride 2 on `[C, H, W]` (H, W even).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [c, h, w] = super::chw(self.shape(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err("avg_pool2", self.shape(x), &[c, h / 2, w / 2]);
        }
        let out = kernels::avg_pool2_forward(self.value(x), c, h, w);
        Ok(self.push(vec![c, h / 2, w / 2], out, Op::AvgPool2 { x, c, h, w }, &[x]))
    }

    /// Bilinear resize of `[C, H, W]`, align-corners = false.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [c, h, w] = super::chw(self.shape(x), "resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(PftError::Config("resize target must be at least 1x1".into()));
        }
        let out = kernels::resize_forward(self.value(x), c, h, w, out_h, out_w);
        Ok(self.push(vec![c, out_h, out_w], out, Op::Resize { x, c, h, w }, &[x]))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| PftError::Config("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", &base, &[axis]);
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !compatible {
                return shape_err("concat", &base, s);
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p)[o * len..(o + 1) * len]);
            }
        }
        Ok(self.push(shape, out, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ax = self.check_axis("narrow", a, axis)?;
        if start + len > ax.len {
            return shape_err("narrow", self.shape(a), &[start, len]);
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(ax.outer * len * ax.inner);
        for o in 0..ax.outer {
            let from = (o * ax.len + start) * ax.inner;
            out.extend_from_slice(&x[from..from + len * ax.inner]);
        }
        let mut shape = self.shape(a).to_vec();
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Narrow(a, ax, start), &[a]))
    }

    /// Reverse-mode sweep from a scalar `root`. Gradients accumulate as a sum
    /// over all paths.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(PftError::NonScalarRoot(root_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Allocates the gradient slot for `v`; false when `v` is frozen.
        let slot = |v: Var, grads: &mut [Option<Vec<f64>>]| -> bool {
            if !nodes[v.0].requires_grad {
                return false;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; nodes[v.0].value.len()]);
            }
            true
        };
        macro_rules! acc {
            ($v:expr) => {
                grads[$v.0].as_mut().unwrap().as_mut_slice()
            };
        }
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if slot(v, grads) {
                        add_into(acc!(v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if slot(*a, grads) {
                    add_into(acc!(a), g);
                }
                if slot(*b, grads) {
                    acc!(b).iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if slot(*a, grads) {
                    for ((d, gv), bx) in acc!(a).iter_mut().zip(g).zip(bv) {
                        *d += gv * bx;
                    }
                }
                if slot(*b, grads) {
                    for ((d, gv), ax) in acc!(b).iter_mut().zip(g).zip(av) {
                        *d += gv * ax;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if slot(*a, grads) {
                    for ((d, gv), bx) in acc!(a).iter_mut().zip(g).zip(bv) {
                        *d += gv / bx;
                    }
                }
                if slot(*b, grads) {
                    for (i, d) in acc!(b).iter_mut().enumerate() {
                        *d -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if slot(*x, grads) {
                    add_into(acc!(x), g);
                }
                if slot(*b, grads) {
                    let db = acc!(b);
                    let n = db.len();
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                }
            }
            Op::Scale(a, c) => {
                if slot(*a, grads) {
                    acc!(a).iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
            }
            Op::AddScalar(a) => {
                if slot(*a, grads) {
                    add_into(acc!(a), g);
                }
            }
            Op::MulConst(a, c) => {
                if slot(*a, grads) {
                    for ((d, gv), cv) in acc!(a).iter_mut().zip(g).zip(c) {
                        *d += gv * cv;
                    }
                }
            }
            &Op::MatMul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                if slot(a, grads) {
                    let da = acc!(a);
                    for i in 0..batch {
                        let ao = if a_batched { i * m * k } else { 0 };
                        let bo = if b_batched { i * k * n } else { 0 };
                        kernels::matmul_grad_a(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[bo..bo + k * n],
                            &mut da[ao..ao + m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if slot(b, grads) {
                    let db = acc!(b);
                    for i in 0..batch {
                        let ao = if a_batched { i * m * k } else { 0 };
                        let bo = if b_batched { i * k * n } else { 0 };
                        kernels::matmul_grad_b(
                            &g[i * m * n..(i + 1) * m * n],
                            &av[ao..ao + m * k],
                            &mut db[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Permute(a, perm) => {
                if slot(*a, grads) {
                    let idx = kernels::permute_index(&nodes[a.0].shape, perm);
                    let da = acc!(a);
                    for (o, &i) in idx.iter().enumerate() {
                        da[i] += g[o];
                    }
                }
            }
            Op::Reshape(a) => {
                if slot(*a, grads) {
                    add_into(acc!(a), g);
                }
            }
            Op::Sum(a) => {
                if slot(*a, grads) {
                    acc!(a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis(a, ax) => {
                if slot(*a, grads) {
                    let da = acc!(a);
                    for o in 0..ax.outer {
                        let gs = &g[o * ax.inner..(o + 1) * ax.inner];
                        for l in 0..ax.len {
                            let from = (o * ax.len + l) * ax.inner;
                            add_into(&mut da[from..from + ax.inner], gs);
                        }
                    }
                }
            }
            Op::Softmax(a, ax) => {
                if slot(*a, grads) {
                    let da = acc!(a);
                    for o in 0..ax.outer {
                        for i in 0..ax.inner {
                            let at = |l: usize| (o * ax.len + l) * ax.inner + i;
                            let s: f64 = (0..ax.len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..ax.len {
                                da[at(l)] += y[at(l)] * (g[at(l)] - s);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(a, ax) => {
                if slot(*a, grads) {
                    let da = acc!(a);
                    for o in 0..ax.outer {
                        for i in 0..ax.inner {
                            let at = |l: usize| (o * ax.len + l) * ax.inner + i;
                            let s: f64 = (0..ax.len).map(|l| g[at(l)]).sum();
                            for l in 0..ax.len {
                                da[at(l)] += g[at(l)] - y[at(l)].exp() * s;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            } => {
                let cols = *cols;
                let gv = self.value(*gain);
                if slot(*x, grads) {
                    let dx = acc!(x);
                    for (r, rs) in rstd.iter().enumerate() {
                        let row = r * cols..(r + 1) * cols;
                        let (gr, hr) = (&g[row.clone()], &xhat[row.clone()]);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            dx[r * cols + c] += rs * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
                if slot(*gain, grads) {
                    let dg = acc!(gain);
                    for (i, (gi, hi)) in g.iter().zip(xhat).enumerate() {
                        dg[i % cols] += gi * hi;
                    }
                }
                if slot(*bias, grads) {
                    let db = acc!(bias);
                    for (i, gi) in g.iter().enumerate() {
                        db[i % cols] += gi;
                    }
                }
            }
            Op::Gelu(a) => {
                if slot(*a, grads) {
                    let av = self.value(*a);
                    for ((d, gv), x) in acc!(a).iter_mut().zip(g).zip(av) {
                        *d += gv * gelu_parts(*x).1;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if slot(*a, grads) {
                    for ((d, gv), s) in acc!(a).iter_mut().zip(g).zip(y.iter()) {
                        *d += gv * s * (1.0 - s);
                    }
                }
            }
            Op::LogSigmoid(a) => {
                if slot(*a, grads) {
                    let av = self.value(*a);
                    for ((d, gv), x) in acc!(a).iter_mut().zip(g).zip(av) {
                        *d += gv * sigmoid(-x);
                    }
                }
            }
            Op::Exp(a) => {
                if slot(*a, grads) {
                    for ((d, gv), e) in acc!(a).iter_mut().zip(g).zip(y.iter()) {
                        *d += gv * e;
                    }
                }
            }
            Op::LogClamped(a, floor) => {
                if slot(*a, grads) {
                    let av = self.value(*a);
                    for ((d, gv), x) in acc!(a).iter_mut().zip(g).zip(av) {
                        if *x > *floor {
                            *d += gv / x;
                        }
                    }
                }
            }
            Op::Pow(a, p) => {
                if slot(*a, grads) {
                    let av = self.value(*a);
                    for ((d, gv), x) in acc!(a).iter_mut().zip(g).zip(av) {
                        *d += gv * p * x.powf(p - 1.0);
                    }
                }
            }
            Op::Conv2d { x, weight, bias, geom } => {
                let want_x = slot(*x, grads);
                let want_w = slot(*weight, grads);
                let want_b = bias.map(|b| slot(b, grads)).unwrap_or(false);
                // Three disjoint slots; take them out to hand out &mut at once.
                let mut dx = want_x.then(|| grads[x.0].take().unwrap());
                let mut dw = want_w.then(|| grads[weight.0].take().unwrap());
                let mut db = want_b.then(|| grads[bias.unwrap().0].take().unwrap());
                kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*weight),
                    g,
                    *geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(v) = dx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = dw {
                    grads[weight.0] = Some(v);
                }
                if let Some(v) = db {
                    grads[bias.unwrap().0] = Some(v);
                }
            }
            &Op::AvgPool2 { x, c, h, w } => {
                if slot(x, grads) {
                    kernels::avg_pool2_backward(g, acc!(x), c, h, w);
                }
            }
            &Op::Resize { x, c, h, w } => {
                if slot(x, grads) {
                    let (oh, ow) = (node.shape[1], node.shape[2]);
                    kernels::resize_backward(g, acc!(x), c, h, w, oh, ow);
                }
            }
            Op::Concat(parts, axis) => {
                let base = &node.shape;
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let row = base[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].shape[*axis] * inner;
                    if slot(*p, grads) {
                        let dp = acc!(p);
                        for o in 0..outer {
                            add_into(
                                &mut dp[o * len..(o + 1) * len],
                                &g[o * row + offset..o * row + offset + len],
                            );
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow(a, ax, start) => {
                if slot(*a, grads) {
                    let len = node.shape.iter().product::<usize>() / (ax.outer * ax.inner).max(1);
                    let da = acc!(a);
                    for o in 0..ax.outer {
                        let from = (o * ax.len + start) * ax.inner;
                        add_into(
                            &mut da[from..from + len * ax.inner],
                            &g[o * len * ax.inner..(o + 1) * len * ax.inner],
                        );
                    }
                }
            }
        }
    }
}
