//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! execution order. [`Tape::backward`] replays the records in reverse and
//! returns a gradient for every leaf registered with `requires_grad`.
//! Operations whose inputs are all constants are stored without their
//! backward record, so evaluation-only tapes stay cheap.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use super::kernels::{self, Broadcast, Grouping};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Relu(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Sum(Var, Vec<usize>),
    Softmax(Var, Vec<usize>),
    LogSoftmax(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2(Var, Vec<usize>),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SqDist(Var, Var),
    IndexSelect(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Relu(..) => "relu",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Sum(..) => "sum",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2(..) => "max_pool2",
            Op::Norm { .. } => "channel_norm",
            Op::SqDist(..) => "sq_dist",
            Op::IndexSelect(..) => "index_select",
            Op::Concat(..) => "concat",
            Op::Gather(..) => "gather",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::SqDist(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Sum(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::MaxPool2(a, _)
            | Op::IndexSelect(a, _)
            | Op::Gather(a, _) => vec![*a],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
            Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(vs, _) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    leaf_grad: bool,
}

/// Per-channel statistics of one batch-normalized activation, reported so the
/// owning layer can update its running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_leaf.get(&v)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.by_leaf.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

/// Records operations for reverse-mode differentiation.
///
/// A tape is single-threaded; independent tapes share no state.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input tensor.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            leaf_grad: requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        let requires_grad = op.inputs().iter().any(|i| nodes[i.0].requires_grad);
        // Constant nodes are never visited by backward; only the normalization
        // record carries a payload worth dropping.
        let op = if !requires_grad && matches!(op, Op::Norm { .. }) {
            Op::Leaf
        } else {
            op
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
            leaf_grad: false,
        });
        Ok(Var(id))
    }

    // ----- elementwise -------------------------------------------------

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Broadcast)> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        let bc = Broadcast::new(name, ta.shape(), tb.shape())?;
        let out = bc.apply(ta.data(), tb.data(), f);
        Ok((Tensor::from_parts(bc.out_shape.clone(), out), bc))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("add", a, b, |x, y| x + y)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(t, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("div", a, b, |x, y| x / y)?;
        self.push(t, Op::Div(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::Offset(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Log(a))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::sqrt);
        self.push(t, Op::Sqrt(a))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    // ----- linear algebra ---------------------------------------------

    /// Matrix product of 2-D operands, or batched product of 3-D operands
    /// sharing the leading batch dimension. `trans_*` transposes the last two
    /// axes of that operand.
    pub fn matmul_t(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let dims = kernels::MatDims::new(ta.shape(), tb.shape(), trans_a, trans_b)?;
            let mut out = vec![0.0; dims.batch * dims.m * dims.n];
            dims.forward(ta.data(), tb.data(), &mut out);
            Tensor::from_parts(dims.out_shape(), out)
        };
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (n×d)
    /// and `b` (m×d), giving n×m.
    pub fn sq_dist(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
                return Err(Error::shape("sq_dist", ta.shape(), tb.shape()));
            }
            let (n, m, d) = (ta.shape()[0], tb.shape()[0], ta.shape()[1]);
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let ai = &ta.data()[i * d..(i + 1) * d];
                for j in 0..m {
                    let bj = &tb.data()[j * d..(j + 1) * d];
                    out[i * m + j] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
                }
            }
            Tensor::from_parts(vec![n, m], out)
        };
        self.push(out, Op::SqDist(a, b))
    }

    // ----- shape ------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(a))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = {
            let v = self.value(a);
            kernels::check_perm(v.shape(), perm)?;
            let (shape, data) = kernels::permute(v.shape(), v.data(), perm);
            Tensor::from_parts(shape, data)
        };
        self.push(t, Op::Permute(a, perm.to_vec()))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: self.shape(a),
                reason: "needs rank >= 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    /// Selects rows along axis 0.
    pub fn index_select(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = {
            let v = self.value(a);
            let rows = v.shape()[0];
            if indices.is_empty() {
                return Err(Error::InvalidArgument("index_select with no indices".into()));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
                return Err(Error::InvalidArgument(format!(
                    "index_select: index {bad} out of range for {rows} rows"
                )));
            }
            let inner: usize = v.shape()[1..].iter().product();
            let mut data = Vec::with_capacity(inner * indices.len());
            for &i in indices {
                data.extend_from_slice(&v.data()[i * inner..(i + 1) * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[0] = indices.len();
            Tensor::from_parts(shape, data)
        };
        self.push(t, Op::IndexSelect(a, indices.to_vec()))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let first = inputs
                .first()
                .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
            let base = nodes[first.0].value.shape().to_vec();
            if axis >= base.len() {
                return Err(Error::InvalidArgument(format!(
                    "concat axis {axis} out of range for rank {}",
                    base.len()
                )));
            }
            let outer: usize = base[..axis].iter().product();
            let mut total = 0;
            for v in inputs {
                let s = nodes[v.0].value.shape();
                let ok = s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y);
                if !ok {
                    return Err(Error::shape("concat", &base, s));
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let block: usize = t.shape()[axis..].iter().product();
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::from_parts(shape, data)
        };
        self.push(t, Op::Concat(inputs.to_vec(), axis))
    }

    /// Picks `a[i, indices[i]]` from a 2-D tensor.
    pub fn gather(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = {
            let v = self.value(a);
            if v.rank() != 2 || v.shape()[0] != indices.len() {
                return Err(Error::shape("gather", v.shape(), &[indices.len()]));
            }
            let n = v.shape()[1];
            let mut out = Vec::with_capacity(indices.len());
            for (i, &j) in indices.iter().enumerate() {
                if j >= n {
                    return Err(Error::InvalidArgument(format!(
                        "gather: index {j} out of range for {n} columns"
                    )));
                }
                out.push(v.data()[i * n + j]);
            }
            Tensor::from_parts(vec![indices.len()], out)
        };
        self.push(t, Op::Gather(a, indices.to_vec()))
    }

    // ----- reductions -------------------------------------------------

    /// Sums over `axes`, removing them. Reducing every axis yields shape `[1]`.
    pub fn sum_axes(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = {
            let v = self.value(a);
            let g = Grouping::new("sum", v.shape(), axes)?;
            let mut out = vec![0.0; g.groups];
            g.for_each(|flat, grp| out[grp] += v.data()[flat]);
            Tensor::from_parts(g.out_shape.clone(), out)
        };
        self.push(t, Op::Sum(a, axes.to_vec()))
    }

    pub fn mean_axes(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let count: usize = {
            let v = self.value(a);
            axes.iter().map(|&ax| v.shape().get(ax).copied().unwrap_or(1)).product()
        };
        let s = self.sum_axes(a, axes)?;
        self.scale(s, 1.0 / count as f64)
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        self.sum_axes(a, &(0..rank).collect::<Vec<_>>())
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        self.mean_axes(a, &(0..rank).collect::<Vec<_>>())
    }

    /// Softmax normalized jointly over the axis set `axes`.
    pub fn softmax(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = {
            let v = self.value(a);
            let g = Grouping::new("softmax", v.shape(), axes)?;
            Tensor::from_parts(v.shape().to_vec(), kernels::softmax(&g, v.data(), false))
        };
        self.push(t, Op::Softmax(a, axes.to_vec()))
    }

    pub fn log_softmax(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = {
            let v = self.value(a);
            let g = Grouping::new("log_softmax", v.shape(), axes)?;
            Tensor::from_parts(v.shape().to_vec(), kernels::softmax(&g, v.data(), true))
        };
        self.push(t, Op::LogSoftmax(a, axes.to_vec()))
    }

    // ----- convolutional layers --------------------------------------

    /// 2-D convolution over NCHW input with square kernels and symmetric
    /// zero padding.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let geo = kernels::ConvGeometry::new(tx.shape(), tw.shape(), stride, pad)?;
            let b = match bias {
                Some(b) => {
                    let tb = &nodes[b.0].value;
                    if tb.shape() != [geo.c_out] {
                        return Err(Error::shape("conv2d", tw.shape(), tb.shape()));
                    }
                    Some(tb.data())
                }
                None => None,
            };
            let out = geo.forward(tx.data(), tw.data(), b);
            Tensor::from_parts(geo.out_shape(), out)
        };
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
        )
    }

    /// 2×2 max pooling with stride 2 (floor on odd sizes).
    pub fn max_pool2(&self, x: Var) -> Result<Var> {
        let (t, argmax) = {
            let v = self.value(x);
            if v.rank() != 4 || v.shape()[2] < 2 || v.shape()[3] < 2 {
                return Err(Error::InvalidShape {
                    op: "max_pool2",
                    shape: v.shape().to_vec(),
                    reason: "expects NCHW with H, W >= 2".into(),
                });
            }
            let (shape, data, argmax) = kernels::max_pool2(v.shape(), v.data());
            (Tensor::from_parts(shape, data), argmax)
        };
        self.push(t, Op::MaxPool2(x, argmax))
    }

    /// Per-channel normalization over (N, H, W) using the batch statistics,
    /// followed by a learned affine map. Accepts NCHW or NC input.
    pub fn channel_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (t, xhat, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (tg, tb) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            let layout = kernels::ChannelLayout::new(tx.shape())?;
            if tg.shape() != [layout.channels] || tb.shape() != [layout.channels] {
                return Err(Error::shape("channel_norm", tx.shape(), tg.shape()));
            }
            if layout.count() < 2 {
                return Err(Error::InvalidShape {
                    op: "channel_norm",
                    shape: tx.shape().to_vec(),
                    reason: "batch statistics need at least two values per channel".into(),
                });
            }
            let (mean, var) = layout.moments(tx.data());
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let (y, xhat) = layout.normalize(tx.data(), &mean, &inv_std, tg.data(), tb.data());
            let n = layout.count() as f64;
            let unbiased = var.iter().map(|v| v * n / (n - 1.0)).collect();
            (
                Tensor::from_parts(tx.shape().to_vec(), y),
                xhat,
                inv_std,
                BatchStats {
                    mean,
                    var: unbiased,
                },
            )
        };
        let v = self.push(
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
        )?;
        Ok((v, stats))
    }

    /// Per-channel normalization with fixed statistics.
    pub fn channel_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (t, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (tg, tb) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            let layout = kernels::ChannelLayout::new(tx.shape())?;
            if tg.shape() != [layout.channels]
                || tb.shape() != [layout.channels]
                || mean.len() != layout.channels
                || var.len() != layout.channels
            {
                return Err(Error::shape("channel_norm", tx.shape(), tg.shape()));
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let (y, xhat) = layout.normalize(tx.data(), mean, &inv_std, tg.data(), tb.data());
            (Tensor::from_parts(tx.shape().to_vec(), y), xhat, inv_std)
        };
        self.push(
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
        )
    }

    // ----- differentiation ----------------------------------------------

    /// Pattern of piecewise branches taken by non-smooth ops (relu signs and
    /// max-pool winners). Two evaluations with equal patterns lie in the same
    /// smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for node in nodes.iter() {
            match &node.op {
                Op::Relu(a) => out.extend(
                    nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .map(|&x| usize::from(x > 0.0)),
                ),
                Op::MaxPool2(_, argmax) => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Autodiff(format!("loss {loss:?} is not on this tape")))?;
        if root.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Autodiff(
                "detached graph: loss does not depend on any requires_grad leaf".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads)?;
        }

        let mut by_leaf = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate().take(loss.0 + 1) {
            if node.leaf_grad {
                let data = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                by_leaf.insert(Var(id), Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        for (id, node) in nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.leaf_grad {
                by_leaf.insert(Var(id), Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { by_leaf })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, delta: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(delta),
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let bc = Broadcast::new("add", val(*a).shape(), val(*b).shape())?;
            if wants(nodes, *a) {
                accumulate(grads, nodes, *a, bc.reduce_lhs(g));
            }
            if wants(nodes, *b) {
                let mut gb = bc.reduce_rhs(g);
                if matches!(node.op, Op::Sub(..)) {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let bc = Broadcast::new("mul", ta.shape(), tb.shape())?;
            if wants(nodes, *a) {
                let prod = bc.map_grad(g, ta.data(), tb.data(), |gi, _, y| gi * y);
                accumulate(grads, nodes, *a, bc.reduce_lhs(&prod));
            }
            if wants(nodes, *b) {
                let prod = bc.map_grad(g, ta.data(), tb.data(), |gi, x, _| gi * x);
                accumulate(grads, nodes, *b, bc.reduce_rhs(&prod));
            }
        }
        Op::Div(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let bc = Broadcast::new("div", ta.shape(), tb.shape())?;
            if wants(nodes, *a) {
                let prod = bc.map_grad(g, ta.data(), tb.data(), |gi, _, y| gi / y);
                accumulate(grads, nodes, *a, bc.reduce_lhs(&prod));
            }
            if wants(nodes, *b) {
                let prod =
                    bc.map_grad(g, ta.data(), tb.data(), |gi, x, y| -gi * x / (y * y));
                accumulate(grads, nodes, *b, bc.reduce_rhs(&prod));
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.iter().map(|x| x * c).collect()),
        Op::Offset(a) | Op::Reshape(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Exp(a) => {
            let y = node.value.data();
            accumulate(grads, nodes, *a, g.iter().zip(y).map(|(g, y)| g * y).collect());
        }
        Op::Log(a) => {
            let x = val(*a).data();
            accumulate(grads, nodes, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
        }
        Op::Sqrt(a) => {
            let y = node.value.data();
            accumulate(
                grads,
                nodes,
                *a,
                g.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect(),
            );
        }
        Op::Square(a) => {
            let x = val(*a).data();
            accumulate(grads, nodes, *a, g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect());
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            accumulate(
                grads,
                nodes,
                *a,
                g.iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            );
        }
        Op::MatMul {
            a,
            b,
            trans_a,
            trans_b,
        } => {
            let (ta, tb) = (val(*a), val(*b));
            let dims = kernels::MatDims::new(ta.shape(), tb.shape(), *trans_a, *trans_b)?;
            if wants(nodes, *a) {
                let mut ga = vec![0.0; ta.numel()];
                dims.grad_lhs(g, tb.data(), &mut ga);
                accumulate(grads, nodes, *a, ga);
            }
            if wants(nodes, *b) {
                let mut gb = vec![0.0; tb.numel()];
                dims.grad_rhs(g, ta.data(), &mut gb);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Permute(a, perm) => {
            let inv = kernels::invert_perm(perm);
            let (_, data) = kernels::permute(node.value.shape(), g, &inv);
            accumulate(grads, nodes, *a, data);
        }
        Op::Sum(a, axes) => {
            let ta = val(*a);
            let grouping = Grouping::new("sum", ta.shape(), axes)?;
            let mut ga = vec![0.0; ta.numel()];
            grouping.for_each(|flat, grp| ga[flat] = g[grp]);
            accumulate(grads, nodes, *a, ga);
        }
        Op::Softmax(a, axes) => {
            let y = node.value.data();
            let grouping = Grouping::new("softmax", node.value.shape(), axes)?;
            let mut dot = vec![0.0; grouping.groups];
            grouping.for_each(|flat, grp| dot[grp] += g[flat] * y[flat]);
            let mut ga = vec![0.0; y.len()];
            grouping.for_each(|flat, grp| ga[flat] = y[flat] * (g[flat] - dot[grp]));
            accumulate(grads, nodes, *a, ga);
        }
        Op::LogSoftmax(a, axes) => {
            let y = node.value.data();
            let grouping = Grouping::new("log_softmax", node.value.shape(), axes)?;
            let mut gsum = vec![0.0; grouping.groups];
            grouping.for_each(|flat, grp| gsum[grp] += g[flat]);
            let mut ga = vec![0.0; y.len()];
            grouping.for_each(|flat, grp| ga[flat] = g[flat] - y[flat].exp() * gsum[grp]);
            accumulate(grads, nodes, *a, ga);
        }
        Op::Conv2d {
            x,
            w,
            bias,
            stride,
            pad,
        } => {
            let (tx, tw) = (val(*x), val(*w));
            let geo = kernels::ConvGeometry::new(tx.shape(), tw.shape(), *stride, *pad)?;
            let want_x = wants(nodes, *x);
            let want_w = wants(nodes, *w);
            let (gx, gw) = geo.backward(tx.data(), tw.data(), g, want_x, want_w);
            if let Some(gx) = gx {
                accumulate(grads, nodes, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(grads, nodes, *w, gw);
            }
            if let Some(b) = bias {
                if wants(nodes, *b) {
                    accumulate(grads, nodes, *b, geo.bias_grad(g));
                }
            }
        }
        Op::MaxPool2(x, argmax) => {
            let mut gx = vec![0.0; val(*x).numel()];
            for (o, &i) in argmax.iter().enumerate() {
                gx[i] += g[o];
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::Norm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let tx = val(*x);
            let layout = kernels::ChannelLayout::new(tx.shape())?;
            let tg = val(*gamma);
            let (gx, ggamma, gbeta) =
                layout.norm_backward(g, xhat, inv_std, tg.data(), *batch_stats);
            if wants(nodes, *x) {
                accumulate(grads, nodes, *x, gx);
            }
            accumulate(grads, nodes, *gamma, ggamma);
            accumulate(grads, nodes, *beta, gbeta);
        }
        Op::SqDist(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (n, m, d) = (ta.shape()[0], tb.shape()[0], ta.shape()[1]);
            let mut ga = vec![0.0; n * d];
            let mut gb = vec![0.0; m * d];
            for i in 0..n {
                for j in 0..m {
                    let gij = 2.0 * g[i * m + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        let diff = ta.data()[i * d + k] - tb.data()[j * d + k];
                        ga[i * d + k] += gij * diff;
                        gb[j * d + k] -= gij * diff;
                    }
                }
            }
            accumulate(grads, nodes, *a, ga);
            accumulate(grads, nodes, *b, gb);
        }
        Op::IndexSelect(a, indices) => {
            let ta = val(*a);
            let inner: usize = ta.shape()[1..].iter().product();
            let mut ga = vec![0.0; ta.numel()];
            for (r, &i) in indices.iter().enumerate() {
                for k in 0..inner {
                    ga[i * inner + k] += g[r * inner + k];
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Concat(inputs, axis) => {
            let outer: usize = node.value.shape()[..*axis].iter().product();
            let blocks: Vec<usize> = inputs
                .iter()
                .map(|v| val(*v).shape()[*axis..].iter().product())
                .collect();
            let row: usize = blocks.iter().sum();
            let mut offset = 0;
            for (v, &block) in inputs.iter().zip(&blocks) {
                if wants(nodes, *v) {
                    let mut gv = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let start = o * row + offset;
                        gv.extend_from_slice(&g[start..start + block]);
                    }
                    accumulate(grads, nodes, *v, gv);
                }
                offset += block;
            }
        }
        Op::Gather(a, indices) => {
            let ta = val(*a);
            let n = ta.shape()[1];
            let mut ga = vec![0.0; ta.numel()];
            for (i, &j) in indices.iter().enumerate() {
                ga[i * n + j] += g[i];
            }
            accumulate(grads, nodes, *a, ga);
        }
    }
    Ok(())
}
