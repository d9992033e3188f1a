//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation appends a node holding its output value plus whatever
//! forward state its backward rule needs. [`Tape::backward`] walks the nodes
//! in exact reverse order, accumulating gradients additively, and stores a
//! gradient on every node that requires one.

use super::kernels::{self, Dims, Window};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise unary functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Conv2d { input: Var, filters: Var, bias: Var, win: Window },
    ConvTranspose2d { input: Var, filters: Var, win: Window },
    L2Normalize { input: Var, eps: f64, norms: Vec<f64> },
    Concat(Var, Var),
    Slice { input: Var, start: usize },
    Reshape(Var),
    Tile(Var),
    Row { table: Var, row: usize },
    Sum(Var),
    Logistic { scores: Var, targets: Vec<bool>, pos_weight: f64, neg_weight: f64, normalizer: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Channel count and per-channel stride for channel-axis normalization.
fn channel_layout(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [d] => Ok((*d, 1)),
        [c, h, w] => Ok((*c, h * w)),
        s => Err(Error::dim("l2_normalize", format!("expected rank 1 or 3, got {s:?}"))),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient written by the last [`Tape::backward`]; `None` before backward
    /// or for nodes that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = match (av.shape(), bv.shape()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            (sa, sb) => return Err(Error::dim("matmul", format!("operands must be matrices, got {sa:?} and {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner extents disagree: {:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn unary(&mut self, f: Unary, x: Var) -> Var {
        let value = match f {
            Unary::Relu => self.value(x).map(|v| v.max(0.0)),
            Unary::Sigmoid => self.value(x).map(sigmoid),
            Unary::Tanh => self.value(x).map(f64::tanh),
        };
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Unary(f, x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Cross-correlation with zero padding.
    ///
    /// `input: [C_in, H, W]`, `filters: [C_out, C_in, kh, kw]`, `bias: [C_out]`.
    pub fn conv2d(&mut self, input: Var, filters: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ci, h, w) = self.value(input).chw()?;
        let (co, fci, kh, kw) = match self.value(filters).shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(Error::dim("conv2d", format!("filters must be rank 4, got {s:?}"))),
        };
        if fci != ci {
            return Err(Error::dim("conv2d", format!("input has {ci} channels, filters expect {fci}")));
        }
        if self.value(bias).shape() != [co] {
            return Err(Error::dim("conv2d", format!("bias shape {:?}, expected [{co}]", self.value(bias).shape())));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let ho = (h + 2 * pad).checked_sub(kh).map(|v| v / stride + 1).unwrap_or(0);
        let wo = (w + 2 * pad).checked_sub(kw).map(|v| v / stride + 1).unwrap_or(0);
        if ho == 0 || wo == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad} gives empty output"),
            ));
        }
        let win = Window { kh, kw, stride, pad };
        let od = Dims::new(co, ho, wo);
        let mut out = vec![0.0; od.len()];
        for (c, plane) in out.chunks_mut(od.plane()).enumerate() {
            plane.fill(self.value(bias).data()[c]);
        }
        kernels::correlate(self.value(input).data(), Dims::new(ci, h, w), self.value(filters).data(), win, &mut out, od);
        let value = Tensor::new(vec![co, ho, wo], out)?;
        let rg = self.any_grad(&[input, filters, bias]);
        Ok(self.push(value, Op::Conv2d { input, filters, bias, win }, rg))
    }

    /// Transposed convolution: each input element stamps `value * filter` onto a
    /// stride-spaced output grid, then `crop` rows/columns are removed from each side.
    ///
    /// `input: [C_in, h, w]`, `filters: [C_in, C_out, k, k]`.
    pub fn conv_transpose2d(&mut self, input: Var, filters: Var, stride: usize, crop: usize) -> Result<Var> {
        let (ci, h, w) = self.value(input).chw()?;
        let (fci, co, kh, kw) = match self.value(filters).shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(Error::dim("conv_transpose2d", format!("filters must be rank 4, got {s:?}"))),
        };
        if fci != ci {
            return Err(Error::dim("conv_transpose2d", format!("input has {ci} channels, filters expect {fci}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv_transpose2d", "stride must be positive"));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if 2 * crop >= full_h || 2 * crop >= full_w {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("crop {crop} too large for uncropped output {full_h}x{full_w}"),
            ));
        }
        let od = Dims::new(co, full_h - 2 * crop, full_w - 2 * crop);
        let win = Window { kh, kw, stride, pad: crop };
        let mut out = vec![0.0; od.len()];
        kernels::scatter(self.value(input).data(), Dims::new(ci, h, w), self.value(filters).data(), win, &mut out, od);
        let value = Tensor::new(vec![od.c, od.h, od.w], out)?;
        let rg = self.any_grad(&[input, filters]);
        Ok(self.push(value, Op::ConvTranspose2d { input, filters, win }, rg))
    }

    /// `v / max(||v||, eps)`. For a `[C, H, W]` map the norm is taken along
    /// channels independently at each location.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (c, stride) = channel_layout(xv)?;
        let src = xv.data();
        let mut norms = vec![0.0; stride];
        for ch in 0..c {
            for (loc, n) in norms.iter_mut().enumerate() {
                let v = src[ch * stride + loc];
                *n += v * v;
            }
        }
        norms.iter_mut().for_each(|n| *n = n.sqrt());
        let mut out = src.to_vec();
        for ch in 0..c {
            for loc in 0..stride {
                out[ch * stride + loc] /= norms[loc].max(eps);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::L2Normalize { input: x, eps, norms }, rg))
    }

    /// Stacks along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() == 0 || av.rank() != bv.rank() || av.shape()[1..] != bv.shape()[1..] {
            return Err(Error::dim("concat", format!("cannot stack {:?} and {:?}", av.shape(), bv.shape())));
        }
        let mut shape = av.shape().to_vec();
        shape[0] += bv.shape()[0];
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// `len` entries of the leading axis starting at `start`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 || start + len > xv.shape()[0] || len == 0 {
            return Err(Error::dim("slice", format!("[{start}, {}) out of range for {:?}", start + len, xv.shape())));
        }
        let inner: usize = xv.shape()[1..].iter().product();
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let data = xv.data()[start * inner..(start + len) * inner].to_vec();
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Slice { input: x, start: start * inner }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Repeats a `[D]` vector at every location of an `h x w` grid: `[D, h, w]`.
    pub fn tile(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        let [d] = xv.shape()[..] else {
            return Err(Error::dim("tile", format!("expected a vector, got {:?}", xv.shape())));
        };
        let mut data = Vec::with_capacity(d * h * w);
        for &v in xv.data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let value = Tensor::new(vec![d, h, w], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Tile(x), rg))
    }

    /// Row `row` of a `[N, D]` table as a `[D]` vector.
    pub fn row(&mut self, table: Var, row: usize) -> Result<Var> {
        let tv = self.value(table);
        let [n, d] = tv.shape()[..] else {
            return Err(Error::dim("row", format!("expected a matrix, got {:?}", tv.shape())));
        };
        if row >= n {
            return Err(Error::contract("row", format!("index {row} out of range for {n} rows")));
        }
        let value = Tensor::from_vec(tv.data()[row * d..(row + 1) * d].to_vec());
        let rg = self.any_grad(&[table]);
        Ok(self.push(value, Op::Row { table, row }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    /// Weighted logistic loss summed over elements and divided by `normalizer`:
    /// `pos_weight * softplus(-v)` where the target is set, `neg_weight * softplus(v)` elsewhere.
    pub fn logistic_loss(
        &mut self,
        scores: Var,
        targets: &[bool],
        pos_weight: f64,
        neg_weight: f64,
        normalizer: f64,
    ) -> Result<Var> {
        let sv = self.value(scores);
        if sv.len() != targets.len() {
            return Err(Error::dim(
                "logistic_loss",
                format!("{} scores ({:?}) vs {} targets", sv.len(), sv.shape(), targets.len()),
            ));
        }
        let total: f64 = sv
            .data()
            .iter()
            .zip(targets)
            .map(|(&v, &t)| if t { pos_weight * softplus(-v) } else { neg_weight * softplus(v) })
            .sum();
        let value = Tensor::scalar(total / normalizer);
        let rg = self.any_grad(&[scores]);
        let op = Op::Logistic { scores, targets: targets.to_vec(), pos_weight, neg_weight, normalizer };
        Ok(self.push(value, op, rg))
    }

    /// Back-propagates from a scalar `loss`, writing `d loss / d node` into every
    /// node that requires a gradient (zeros for nodes the loss does not reach).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad {
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor::new(node.value.shape().to_vec(), data)?)
            } else {
                None
            };
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for t in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * bv.data()[t * n + j];
                            }
                            ga[r * k + t] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        for t in 0..k {
                            let x = av.data()[r * k + t];
                            for j in 0..n {
                                gb[t * n + j] += x * g[r * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::Unary(f, x) => {
                let (xv, yv) = (nodes[x.0].value.data(), node.value.data());
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        let d = match f {
                            Unary::Relu => {
                                if xv[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => yv[j] * (1.0 - yv[j]),
                            Unary::Tanh => 1.0 - yv[j] * yv[j],
                        };
                        gx[j] += g[j] * d;
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * f)),
            Op::Conv2d { input, filters, bias, win } => {
                let xv = &nodes[input.0].value;
                let wv = &nodes[filters.0].value;
                let (ci, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let od = Dims::new(node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                let id = Dims::new(ci, h, w);
                acc(*input, &mut |gx| kernels::scatter(g, od, wv.data(), *win, gx, id));
                acc(*filters, &mut |gw| kernels::filter_grad(g, od, xv.data(), id, *win, gw));
                acc(*bias, &mut |gb| {
                    for (c, plane) in g.chunks(od.plane()).enumerate() {
                        gb[c] += plane.iter().sum::<f64>();
                    }
                });
            }
            Op::ConvTranspose2d { input, filters, win } => {
                let xv = &nodes[input.0].value;
                let wv = &nodes[filters.0].value;
                let id = Dims::new(xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let od = Dims::new(node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                acc(*input, &mut |gx| kernels::correlate(g, od, wv.data(), *win, gx, id));
                acc(*filters, &mut |gw| kernels::filter_grad(xv.data(), id, g, od, *win, gw));
            }
            Op::L2Normalize { input, eps, norms } => {
                let y = node.value.data();
                let c = y.len() / norms.len();
                let stride = norms.len();
                acc(*input, &mut |gx| {
                    for (loc, &n) in norms.iter().enumerate() {
                        if n > *eps {
                            let dot: f64 = (0..c).map(|ch| y[ch * stride + loc] * g[ch * stride + loc]).sum();
                            for ch in 0..c {
                                let j = ch * stride + loc;
                                gx[j] += (g[j] - y[j] * dot) / n;
                            }
                        } else {
                            for ch in 0..c {
                                let j = ch * stride + loc;
                                gx[j] += g[j] / eps;
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let split = nodes[a.0].value.len();
                acc(*a, &mut |ga| ga.iter_mut().zip(&g[..split]).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(&g[split..]).for_each(|(x, y)| *x += y));
            }
            Op::Slice { input, start } => {
                acc(*input, &mut |gx| {
                    gx[*start..*start + g.len()].iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            Op::Tile(x) => {
                let plane = g.len() / nodes[x.0].value.len();
                acc(*x, &mut |gx| {
                    for (d, chunk) in g.chunks(plane).enumerate() {
                        gx[d] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Row { table, row } => {
                acc(*table, &mut |gt| {
                    let d = g.len();
                    gt[row * d..(row + 1) * d].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Logistic { scores, targets, pos_weight, neg_weight, normalizer } => {
                let sv = nodes[scores.0].value.data();
                let up = g[0] / normalizer;
                acc(*scores, &mut |gs| {
                    for j in 0..gs.len() {
                        let p = sigmoid(sv[j]);
                        let d = if targets[j] { pos_weight * (p - 1.0) } else { neg_weight * p };
                        gs[j] += up * d;
                    }
                });
            }
        }
    }
}
