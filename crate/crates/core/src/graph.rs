//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] is an append-only list of nodes. Each node stores its value,
//! the ids of its inputs and a backward rule mapping the output gradient to
//! input gradients. Inputs always precede the node that consumes them, so a
//! single reverse sweep visits nodes in a valid order.

use std::cell::Cell;
use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::scalar::Scalar;
use crate::tensor::{numel, Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

macro_rules! op_kinds {
    ($($variant:ident => $name:literal),* $(,)?) => {
        /// Identifies the operation that produced a node.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum OpKind {
            Leaf,
            $($variant),*
        }

        impl OpKind {
            /// Every differentiable operation class, in report order.
            pub const DIFFERENTIABLE: &'static [OpKind] = &[$(OpKind::$variant),*];

            pub fn name(self) -> &'static str {
                match self {
                    OpKind::Leaf => "leaf",
                    $(OpKind::$variant => $name),*
                }
            }

            pub fn from_name(name: &str) -> Option<OpKind> {
                match name {
                    $($name => Some(OpKind::$variant),)*
                    _ => None,
                }
            }
        }
    };
}

op_kinds! {
    Add => "add",
    Sub => "sub",
    Mul => "mul",
    Scale => "scale",
    Matmul => "matmul",
    Conv2d => "conv2d",
    Softmax => "softmax",
    LayerNorm => "layer_norm",
    Gelu => "gelu",
    Relu => "relu",
    Sigmoid => "sigmoid",
    Abs => "abs",
    Sum => "sum",
    Mean => "mean",
    Concat => "concat",
    Slice => "slice",
    Reshape => "reshape",
    Upsample => "upsample",
    AvgPool => "avg_pool",
    ChannelMean => "channel_mean",
    ChannelMax => "channel_max",
    GlobalAvgPool => "global_avg_pool",
    L2Normalize => "l2_normalize",
    WindowPartition => "window_partition",
    WindowMerge => "window_merge",
    Rfft2 => "rfft2",
    Irfft2 => "irfft2",
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

thread_local! {
    static CORRUPT_BACKWARD: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Test hook: perturbs the backward rule of `kind` on the current thread so
/// that gradient checks can prove they detect a broken rule.
#[doc(hidden)]
pub fn set_corrupt_backward(kind: Option<OpKind>) {
    CORRUPT_BACKWARD.with(|c| c.set(kind));
}

/// What a backward rule sees: the output gradient plus forward values.
pub struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    kind: OpKind,
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            kind: OpKind::Leaf,
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].kind
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    /// Every node, oldest first.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Appends an operation node. Used by the op constructors here and by
    /// domain modules that define their own differentiable operations.
    pub fn push(&mut self, kind: OpKind, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            kind,
            value,
            inputs: inputs.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` for every node that reaches it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.require_scalar(loss)?;
        self.sweep(loss, Tensor::ones(self.shape(loss)), true)
    }

    /// Like [`backward`](Self::backward) but keeps only leaf gradients,
    /// releasing intermediate ones as soon as they are consumed.
    pub fn backward_leaves(&self, loss: Var) -> Result<Gradients<T>> {
        self.require_scalar(loss)?;
        self.sweep(loss, Tensor::ones(self.shape(loss)), false)
    }

    /// Vector-Jacobian product: gradients of `sum(seed * output)`.
    pub fn backward_from(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::contract(format!(
                "seed gradient {:?} does not match output {:?}",
                seed.shape(),
                self.shape(output)
            )));
        }
        self.sweep(output, seed, true)
    }

    fn require_scalar(&self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss);
        if numel(&loss_shape) != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {loss_shape:?}"
            )));
        }
        Ok(())
    }

    fn sweep(&self, loss: Var, seed: Tensor<T>, retain: bool) -> Result<Gradients<T>> {
        let corrupt = CORRUPT_BACKWARD.with(|c| c.get());
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || grads[i].is_none() {
                continue;
            }
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let (before, rest) = grads.split_at_mut(i);
            let grad = rest[0].as_ref().expect("checked above");
            let ctx = BackwardCtx {
                grad,
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let input_grads = rule(&ctx)?;
            for (inp, g) in node.inputs.iter().zip(input_grads) {
                let Some(mut g) = g else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[inp.0].value.shape() {
                    return Err(Error::contract(format!(
                        "backward of {} produced gradient {:?} for input of shape {:?}",
                        node.kind,
                        g.shape(),
                        self.nodes[inp.0].value.shape()
                    )));
                }
                if corrupt == Some(node.kind) {
                    g.scale_in_place(T::of(1.5));
                }
                match &mut before[inp.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            if !retain {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise arithmetic with broadcasting -------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, a, b, |x, y| x * y)
    }

    fn binary(&mut self, kind: OpKind, a: Var, b: Var, f: fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or(Error::Shape {
            op: kind.name(),
            lhs: sa,
            rhs: sb,
        })?;
        let value = broadcast_zip(self.value(a), self.value(b), out_shape, f);
        let backward: BackwardFn<T> = Box::new(move |ctx| {
            let g = ctx.grad;
            let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
            let (ga, gb) = match kind {
                OpKind::Add => (
                    ctx.needs[0].then(|| reduce_to(g, sa)),
                    ctx.needs[1].then(|| reduce_to(g, sb)),
                ),
                OpKind::Sub => (
                    ctx.needs[0].then(|| reduce_to(g, sa)),
                    ctx.needs[1].then(|| reduce_to(&g.map(|v| -v), sb)),
                ),
                _ => (
                    ctx.needs[0].then(|| reduce_to(&broadcast_zip(g, y, out_shape, |u, v| u * v), sa)),
                    ctx.needs[1].then(|| reduce_to(&broadcast_zip(g, x, out_shape, |u, v| u * v), sb)),
                ),
            };
            Ok(vec![ga, gb])
        });
        Ok(self.push(kind, &[a, b], value, backward))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let st = T::of(s);
        let value = self.value(a).map(|v| v * st);
        self.push(
            OpKind::Scale,
            &[a],
            value,
            Box::new(move |ctx| Ok(vec![Some(ctx.grad.map(|v| v * st))])),
        )
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(
            OpKind::Matmul,
            &[a, b],
            value,
            Box::new(move |ctx| {
                let (ga, gb) = kernels::matmul_backward(
                    ctx.inputs[0],
                    ctx.inputs[1],
                    ta,
                    tb,
                    ctx.grad,
                    ctx.needs[0],
                    ctx.needs[1],
                )?;
                Ok(vec![ga, gb])
            }),
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let value = kernels::conv2d(self.value(x), self.value(w), bias.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            OpKind::Conv2d,
            &inputs,
            value,
            Box::new(move |ctx| {
                let need_b = ctx.needs.get(2).copied().unwrap_or(false);
                let (gx, gw, gb) = kernels::conv2d_backward(
                    ctx.inputs[0],
                    ctx.inputs[1],
                    ctx.grad,
                    spec,
                    ctx.needs[0],
                    ctx.needs[1],
                    need_b,
                )?;
                let mut out = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    out.push(gb);
                }
                Ok(out)
            }),
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = kernels::softmax(self.value(x), axis)?;
        Ok(self.push(
            OpKind::Softmax,
            &[x],
            value,
            Box::new(move |ctx| Ok(vec![Some(kernels::softmax_backward(ctx.output, ctx.grad, axis)?)])),
        ))
    }

    /// Channel layer norm; `eps` is fixed at 1e-5.
    pub fn layer_norm(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let (value, stats) = kernels::layer_norm(self.value(x), self.value(scale), self.value(bias), LAYER_NORM_EPS)?;
        Ok(self.push(
            OpKind::LayerNorm,
            &[x, scale, bias],
            value,
            Box::new(move |ctx| {
                let (gx, gs, gb) = kernels::layer_norm_backward(&stats, ctx.inputs[1], ctx.grad);
                Ok(vec![Some(gx), Some(gs), Some(gb)])
            }),
        ))
    }

    // ---- pointwise nonlinearities ------------------------------------------

    fn unary(&mut self, kind: OpKind, x: Var, f: fn(T) -> T, df: fn(T, T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(
            kind,
            &[x],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let xs = ctx.inputs[0].data();
                let ys = ctx.output.data();
                let data = g
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
                    .collect();
                Ok(vec![Some(Tensor::from_vec(ctx.grad.shape(), data)?)])
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(OpKind::Gelu, x, gelu, |x, _| gelu_grad(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            OpKind::Relu,
            x,
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(OpKind::Sigmoid, x, sigmoid, |_, y| y * (T::one() - y))
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(
            OpKind::Abs,
            x,
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let value = Tensor::scalar(self.value(x).sum());
        self.push(
            OpKind::Sum,
            &[x],
            value,
            Box::new(move |ctx| Ok(vec![Some(Tensor::full(shape, ctx.grad.item()))])),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let inv = T::of(1.0 / numel(&shape) as f64);
        let value = Tensor::scalar(self.value(x).sum() * inv);
        self.push(
            OpKind::Mean,
            &[x],
            value,
            Box::new(move |ctx| Ok(vec![Some(Tensor::full(shape, ctx.grad.item() * inv))])),
        )
    }

    /// Mean over channels: `N x C x H x W -> N x 1 x H x W`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let inv = T::of(1.0 / c as f64);
        let xv = self.value(x);
        let value = Tensor::from_fn([n, 1, h, w], |ni, _, hi, wi| {
            (0..c).map(|ci| xv.at(ni, ci, hi, wi)).sum::<T>() * inv
        });
        self.push(
            OpKind::ChannelMean,
            &[x],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad;
                Ok(vec![Some(Tensor::from_fn([n, c, h, w], |ni, _, hi, wi| {
                    g.at(ni, 0, hi, wi) * inv
                }))])
            }),
        )
    }

    /// Max over channels; the gradient routes to the first maximal channel.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let xv = self.value(x);
        let mut argmax = vec![0usize; n * h * w];
        let value = Tensor::from_fn([n, 1, h, w], |ni, _, hi, wi| {
            let mut best = 0;
            for ci in 1..c {
                if xv.at(ni, ci, hi, wi) > xv.at(ni, best, hi, wi) {
                    best = ci;
                }
            }
            argmax[(ni * h + hi) * w + wi] = best;
            xv.at(ni, best, hi, wi)
        });
        self.push(
            OpKind::ChannelMax,
            &[x],
            value,
            Box::new(move |ctx| {
                let mut gx = Tensor::zeros([n, c, h, w]);
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            let ci = argmax[(ni * h + hi) * w + wi];
                            gx.set(ni, ci, hi, wi, ctx.grad.at(ni, 0, hi, wi));
                        }
                    }
                }
                Ok(vec![Some(gx)])
            }),
        )
    }

    /// Spatial mean: `N x C x H x W -> N x C x 1 x 1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let plane = h * w;
        let inv = T::of(1.0 / plane as f64);
        let xd = self.value(x).data();
        let data = (0..n * c)
            .map(|i| xd[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_vec([n, c, 1, 1], data).expect("sized above");
        self.push(
            OpKind::GlobalAvgPool,
            &[x],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let data = (0..n * c * plane).map(|i| g[i / plane] * inv).collect();
                Ok(vec![Some(Tensor::from_vec([n, c, h, w], data)?)])
            }),
        )
    }

    /// Scales every row along the last axis to unit L2 norm,
    /// `x / sqrt(sum(x^2) + 1e-12)`.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let len = shape[3];
        let eps = T::of(1e-12);
        let xd = self.value(x).data();
        let inv: Vec<T> = xd
            .chunks(len)
            .map(|row| T::one() / (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt())
            .collect();
        let data = xd
            .chunks(len)
            .zip(&inv)
            .flat_map(|(row, &r)| row.iter().map(move |&v| v * r))
            .collect();
        let value = Tensor::from_vec(shape, data).expect("same length");
        self.push(
            OpKind::L2Normalize,
            &[x],
            value,
            Box::new(move |ctx| {
                let xd = ctx.inputs[0].data();
                let gd = ctx.grad.data();
                let mut out = Vec::with_capacity(xd.len());
                for ((xr, gr), &r) in xd.chunks(len).zip(gd.chunks(len)).zip(&inv) {
                    let dot: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    let r3 = r * r * r;
                    out.extend(xr.iter().zip(gr).map(|(&xv, &gv)| gv * r - xv * r3 * dot));
                }
                Ok(vec![Some(Tensor::from_vec(shape, out)?)])
            }),
        )
    }

    // ---- layout -------------------------------------------------------------

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_channels(&values)?;
        let widths: Vec<usize> = values.iter().map(|t| t.shape()[1]).collect();
        Ok(self.push(
            OpKind::Concat,
            parts,
            value,
            Box::new(move |ctx| {
                let mut start = 0;
                let mut out = Vec::with_capacity(widths.len());
                for (&wdt, &need) in widths.iter().zip(&ctx.needs) {
                    out.push(if need {
                        Some(ctx.grad.slice_channels(start, wdt)?)
                    } else {
                        None
                    });
                    start += wdt;
                }
                Ok(out)
            }),
        ))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        let value = self.value(x).slice_channels(start, len)?;
        Ok(self.push(
            OpKind::Slice,
            &[x],
            value,
            Box::new(move |ctx| {
                let [n, c, h, w] = shape;
                let plane = h * w;
                let mut gx = Tensor::zeros(shape);
                let g = ctx.grad.data();
                for ni in 0..n {
                    let dst = (ni * c + start) * plane;
                    let src = ni * len * plane;
                    gx.data_mut()[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
                }
                Ok(vec![Some(gx)])
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let from = self.shape(x);
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(
            OpKind::Reshape,
            &[x],
            value,
            Box::new(move |ctx| Ok(vec![Some(ctx.grad.clone().reshape(from)?)])),
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let value = kernels::upsample_nearest(self.value(x), factor);
        self.push(
            OpKind::Upsample,
            &[x],
            value,
            Box::new(move |ctx| Ok(vec![Some(kernels::upsample_nearest_backward(ctx.grad, factor))])),
        )
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = kernels::avg_pool(self.value(x), factor)?;
        Ok(self.push(
            OpKind::AvgPool,
            &[x],
            value,
            Box::new(move |ctx| Ok(vec![Some(kernels::avg_pool_backward(ctx.grad, factor))])),
        ))
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

// 0.5 * (1 + tanh(u)) == sigmoid(2u), which needs one exp instead of tanh.
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    x * sigmoid(u + u)
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let s = sigmoid(u + u);
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    s + T::of(2.0) * x * s * (T::one() - s) * du
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn strides_for(shape: Shape, out: Shape) -> [usize; 4] {
    let mut s = [0; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        s[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    s
}

fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out: Shape, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == out && b.shape() == out {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(out, data).expect("same shape");
    }
    let (sa, sb) = (strides_for(a.shape(), out), strides_for(b.shape(), out));
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(numel(&out));
    for n in 0..out[0] {
        for c in 0..out[1] {
            for h in 0..out[2] {
                let ra = n * sa[0] + c * sa[1] + h * sa[2];
                let rb = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out[3] {
                    data.push(f(ad[ra + w * sa[3]], bd[rb + w * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(out, data).expect("sized by loop")
}

/// Sums `g` over the axes along which `shape` was broadcast.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: Shape) -> Tensor<T> {
    let gs = g.shape();
    if gs == shape {
        return g.clone();
    }
    let st = strides_for(shape, gs);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let gd = g.data();
    let mut i = 0;
    for n in 0..gs[0] {
        for c in 0..gs[1] {
            for h in 0..gs[2] {
                let r = n * st[0] + c * st[1] + h * st[2];
                for w in 0..gs[3] {
                    od[r + w * st[3]] += gd[i];
                    i += 1;
                }
            }
        }
    }
    out
}
