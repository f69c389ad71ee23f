//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Each op
//! appends a node, so inputs always precede outputs and the backward pass
//! is a single sweep in reverse insertion order. A node only records how
//! it was produced when at least one input requires a gradient; other
//! nodes are stored as constants.
//!
//! Shape rules per op:
//!
//! | op | inputs | output |
//! |----|--------|--------|
//! | `add`, `sub`, `mul` | two tensors of identical shape | same shape |
//! | `matmul` | `[m, k]`, `[k, n]` | `[m, n]` |
//! | `conv2d` | `[N, C, H, W]`, weight `[O, C, kh, kw]`, bias `[O]` | `[N, O, H', W']` |
//! | `max_pool2d`, `mean_pool2d` | `[N, C, H, W]` | `[N, C, (H-k)/s+1, (W-k)/s+1]` |
//! | `softmax`, `log_softmax` | any, normalized over the last axis | same shape |
//! | `sum`, `mean` | any | scalar `[]` |
//! | `broadcast` | numpy-style, right-aligned | target shape |
//! | `reshape` | any with equal element count | target shape |
//! | `slice` | any, half-open range on one axis | shortened axis |

use super::array::{check_same_shape, Tensor};
use super::kernels::{self, ConvGeom, PoolGeom};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var, [usize; 3]),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool(Var, Vec<usize>),
    MeanPool(Var, PoolGeom),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Softplus(Var),
    XLogX(Var),
    Sum(Var),
    Mean(Var),
    Broadcast(Var),
    Reshape(Var),
    Slice {
        x: Var,
        axis_outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        end: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`. `None`
    /// before `backward`, or when `v` does not require a gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("graph input of shape {:?}", value.shape()),
            });
        }
        Ok(self.push_raw(value, requires_grad, Op::Leaf))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.push_raw(value, rg, op)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, &[a], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul(a, b, [m, k, n])))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let bad = |detail: String| Err(Error::shape("conv2d", detail));
        if tx.ndim() != 4 || tw.ndim() != 4 {
            return bad(format!("input {:?}, weight {:?}", tx.shape(), tw.shape()));
        }
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs[1] != ws[1] {
            return bad(format!(
                "input has {} channels, weight {:?} expects {}",
                xs[1], ws, ws[1]
            ));
        }
        if stride == 0 {
            return bad("stride must be positive".into());
        }
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            return bad(format!("kernel {:?} larger than padded input {:?}", ws, xs));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return bad(format!(
                    "bias {:?} for {} output channels",
                    self.value(b).shape(),
                    ws[0]
                ));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            out_h: (xs[2] + 2 * padding - ws[2]) / stride + 1,
            out_w: (xs[3] + 2 * padding - ws[3]) / stride + 1,
        };
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(&geom, tx.data(), tw.data(), bias);
        let value = Tensor::new(vec![geom.batch, geom.out_c, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, &inputs, Op::Conv2d { x, w, b, geom }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    fn pool_geom(&self, op: &'static str, x: Var, kernel: usize, stride: usize) -> Result<PoolGeom> {
        let s = self.value(x).shape();
        if s.len() != 4 || kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
            return Err(Error::shape(
                op,
                format!("input {:?} with kernel {} stride {}", s, kernel, stride),
            ));
        }
        Ok(PoolGeom {
            planes: s[0] * s[1],
            in_h: s[2],
            in_w: s[3],
            kernel,
            stride,
            out_h: (s[2] - kernel) / stride + 1,
            out_w: (s[3] - kernel) / stride + 1,
        })
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let g = self.pool_geom("max_pool2d", x, kernel, stride)?;
        let s = self.value(x).shape().to_vec();
        let (out, arg) = kernels::max_pool_forward(&g, self.value(x).data());
        let value = Tensor::new(vec![s[0], s[1], g.out_h, g.out_w], out)?;
        Ok(self.push(value, &[x], Op::MaxPool(x, arg)))
    }

    pub fn mean_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let g = self.pool_geom("mean_pool2d", x, kernel, stride)?;
        let s = self.value(x).shape().to_vec();
        let out = kernels::mean_pool_forward(&g, self.value(x).data());
        let value = Tensor::new(vec![s[0], s[1], g.out_h, g.out_w], out)?;
        Ok(self.push(value, &[x], Op::MeanPool(x, g)))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() == 0 {
            return Err(Error::shape("softmax", "needs at least one axis"));
        }
        let mut out = Vec::with_capacity(t.numel());
        for row in t.rows() {
            out.extend(softmax_row(row));
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(value, &[x], Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() == 0 {
            return Err(Error::shape("log_softmax", "needs at least one axis"));
        }
        let mut out = Vec::with_capacity(t.numel());
        for row in t.rows() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(value, &[x], Op::LogSoftmax(x)))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// `x ln x` with the continuous extension `0 ln 0 = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        self.unary(a, xlogx, Op::XLogX(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(m), &[a], Op::Mean(a)))
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        let ok = s.len() <= shape.len()
            && s
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .all(|(&from, &to)| from == to || from == 1);
        if !ok {
            return Err(Error::shape(
                "broadcast",
                format!("cannot broadcast {:?} to {:?}", s, shape),
            ));
        }
        let map = kernels::broadcast_index_map(s, shape);
        let data = map.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, &[a], Op::Broadcast(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to {:?}", t.shape(), shape),
            ));
        }
        let value = Tensor::new(shape, t.data().to_vec())?;
        Ok(self.push(value, &[a], Op::Reshape(a)))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("{}..{} on axis {} of {:?}", start, end, axis, s),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            data.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        let axis_len = s[axis];
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            &[a],
            Op::Slice {
                x: a,
                axis_outer: outer,
                axis_len,
                inner,
                start,
                end,
            },
        ))
    }

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires one. A graph supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; rebuild it with a new forward pass".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::Graph("backward on an empty graph".into()));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                context: "loss passed to backward".into(),
            });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape"))
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::MatMul(a, b, [m, k, n]) => {
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(*m, *n, *k, g, false, val(*b), true, &mut da, false);
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(*k, *m, *n, val(*a), true, g, false, &mut db, false);
                    acc(*b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let need = (needs(*x), needs(*w), b.is_some_and(needs));
                let cg = kernels::conv2d_backward(geom, val(*x), val(*w), g, need);
                if let Some(dx) = cg.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = cg.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    acc(*b, db);
                }
            }
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::MaxPool(a, arg) => {
                let mut dx = vec![0.0; val(*a).len()];
                for (gi, &src) in g.iter().zip(arg) {
                    dx[src] += gi;
                }
                acc(*a, dx);
            }
            Op::MeanPool(a, geom) => {
                let mut dx = vec![0.0; val(*a).len()];
                kernels::mean_pool_backward(geom, g, &mut dx);
                acc(*a, dx);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let k = y.shape().last().copied().unwrap_or(1).max(1);
                let mut dx = Vec::with_capacity(g.len());
                for (yr, gr) in y.data().chunks(k).zip(g.chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                acc(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let k = y.shape().last().copied().unwrap_or(1).max(1);
                let mut dx = Vec::with_capacity(g.len());
                for (yr, gr) in y.data().chunks(k).zip(g.chunks(k)) {
                    let gs: f64 = gr.iter().sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| g - y.exp() * gs));
                }
                acc(*a, dx);
            }
            Op::Log(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
            Op::Softplus(a) => acc(
                *a,
                g.iter().zip(val(*a)).map(|(g, x)| g * sigmoid(*x)).collect(),
            ),
            Op::XLogX(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| g * (x.max(f64::MIN_POSITIVE).ln() + 1.0))
                    .collect(),
            ),
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Broadcast(a) => {
                let map = kernels::broadcast_index_map(
                    self.nodes[a.0].value.shape(),
                    node.value.shape(),
                );
                let mut dx = vec![0.0; val(*a).len()];
                for (gi, &src) in g.iter().zip(&map) {
                    dx[src] += gi;
                }
                acc(*a, dx);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Slice {
                x,
                axis_outer,
                axis_len,
                inner,
                start,
                end,
            } => {
                let mut dx = vec![0.0; val(*x).len()];
                let width = (end - start) * inner;
                for o in 0..*axis_outer {
                    let dst = o * axis_len * inner + start * inner;
                    dx[dst..dst + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                acc(*x, dx);
            }
        }
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row.iter().map(move |v| (v - m).exp() / z)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`: `ln(e^y - 1)`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
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

pub fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}
