//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value, so
//! insertion order is a topological order and [`Graph::backward`] simply walks
//! the tape in reverse, visiting each node once and summing gradient
//! contributions into its inputs.
//!
//! Only the shapes the encoder and loss need are supported; there is no
//! general broadcasting.

pub mod kernels;
mod tensor;

pub use tensor::Tensor;
pub(crate) use tensor::{expand_axes, join_feature_shape, split_feature_shape};

use crate::error::{Error, Result};
use kernels::ConvGeom;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the input values, the forward output and the gradient
/// of the loss with respect to that output, and returns one optional gradient
/// per input (same shape as the input).
pub trait CustomOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
    ) -> Vec<Option<Vec<f32>>>;
}

enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Var, Var),
    UpsampleNearest {
        x: Var,
        factor: [usize; 3],
    },
    UpsampleLinear {
        x: Var,
        factor: [usize; 3],
    },
    L2Normalize {
        x: Var,
        eps: f32,
        norms: Vec<f32>,
    },
    Dot(Var, Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Scale(Var, f32),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf: no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// N-d convolution over a `[C, (D,) H, W]` map with a
    /// `[O, C, (kd,) kh, kw]` kernel and optional `[O]` bias.
    pub fn conv(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let rank = x.shape().len() - 1;
        let (in_ch, in_sp) = split_feature_shape(x.shape())?;
        if w.shape().len() != rank + 2 || w.shape()[1] != in_ch {
            return Err(Error::shape(format!(
                "conv kernel {:?} incompatible with input {:?}",
                w.shape(),
                x.shape()
            )));
        }
        let out_ch = w.shape()[0];
        let kernel = expand_axes(&w.shape()[2..], rank, 1)?;
        let geom = ConvGeom::new(
            in_ch,
            out_ch,
            in_sp,
            kernel,
            expand_axes(stride, rank, 1)?,
            expand_axes(pad, rank, 0)?,
        )?;
        let b = match bias {
            Some(b) => {
                let bt = self.value(b);
                if bt.shape() != [out_ch] {
                    return Err(Error::shape(format!(
                        "conv bias {:?} for {out_ch} outputs",
                        bt.shape()
                    )));
                }
                Some(bt.data())
            }
            None => None,
        };
        let out = kernels::conv_forward(&geom, x.data(), w.data(), b);
        let value = Tensor::new(join_feature_shape(out_ch, geom.output, rank), out)?;
        let rg =
            self.tracked(input) || self.tracked(weight) || bias.is_some_and(|b| self.tracked(b));
        Ok(self.push(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.tracked(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "add {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() < 2 || ta.shape()[1..] != tb.shape()[1..] {
            return Err(Error::shape(format!(
                "concat {:?} with {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] += tb.shape()[0];
        let mut out = ta.data().to_vec();
        out.extend_from_slice(tb.data());
        let value = Tensor::new(shape, out)?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.shape().len() - 1;
        let (c, sp) = split_feature_shape(t.shape())?;
        let f = expand_axes(factor, rank, 1)?;
        let out = kernels::upsample_nearest_forward(t.data(), c, sp, f);
        let osp = [sp[0] * f[0], sp[1] * f[1], sp[2] * f[2]];
        let value = Tensor::new(join_feature_shape(c, osp, rank), out)?;
        let rg = self.tracked(x);
        Ok(self.push(value, Op::UpsampleNearest { x, factor: f }, rg))
    }

    /// Linear upsampling by an integer factor per axis (half-pixel centers,
    /// edges clamped).
    pub fn upsample_linear(&mut self, x: Var, factor: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.shape().len() - 1;
        let (c, sp) = split_feature_shape(t.shape())?;
        let f = expand_axes(factor, rank, 1)?;
        let osp = [sp[0] * f[0], sp[1] * f[1], sp[2] * f[2]];
        let out = kernels::resample_linear_forward(t.data(), c, sp, osp, f);
        let value = Tensor::new(join_feature_shape(c, osp, rank), out)?;
        let rg = self.tracked(x);
        Ok(self.push(value, Op::UpsampleLinear { x, factor: f }, rg))
    }

    /// Divides every spatial location's channel vector by `max(‖v‖, eps)`.
    pub fn l2_normalize_channels(&mut self, x: Var, eps: f32) -> Result<Var> {
        let t = self.value(x);
        let c = *t
            .shape()
            .first()
            .ok_or_else(|| Error::shape("l2 normalize of a scalar"))?;
        let (y, norms) = kernels::l2_normalize_forward(t.data(), c, eps);
        let value = Tensor::new(t.shape().to_vec(), y)?;
        let rg = self.tracked(x);
        Ok(self.push(value, Op::L2Normalize { x, eps, norms }, rg))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::shape(format!(
                "dot of {} and {} elements",
                ta.len(),
                tb.len()
            )));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| *x as f64 * *y as f64)
            .sum();
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::scalar(s as f32), Op::Dot(a, b), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f32::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f32::ln, Op::Log(x))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.tracked(x);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.tracked(x);
        self.push(value, op, rg)
    }

    /// Records an externally computed op whose backward is supplied by `op`.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.tracked(v));
        self.push(value, Op::Custom { inputs, op }, rg)
    }

    fn accumulate(&mut self, v: Var, g: &[f32]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(t) => t.add_assign(g),
            None => {
                node.grad =
                    Some(Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape"));
            }
        }
    }

    /// Back-propagates from a scalar `loss`, summing gradients into every
    /// tracked node. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.accumulate(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (v, g) in contributions {
                self.accumulate(v, &g);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, grad: &Tensor) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let g = grad.data();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (
                    self.tracked(*input),
                    self.tracked(*weight),
                    bias.is_some_and(|b| self.tracked(b)),
                );
                let grads =
                    kernels::conv_backward(geom, val(*input).data(), val(*weight).data(), g, need);
                let mut out = vec![];
                if let Some(dx) = grads.input {
                    out.push((*input, dx));
                }
                if let Some(dw) = grads.weight {
                    out.push((*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    out.push((*b, db));
                }
                out
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&a, &d)| if a > 0.0 { d } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Concat(a, b) => {
                let na = val(*a).len();
                vec![(*a, g[..na].to_vec()), (*b, g[na..].to_vec())]
            }
            Op::UpsampleNearest { x, factor } => {
                let (c, sp) = split_feature_shape(val(*x).shape()).expect("validated in forward");
                vec![(*x, kernels::upsample_nearest_backward(g, c, sp, *factor))]
            }
            Op::UpsampleLinear { x, factor } => {
                let (c, sp) = split_feature_shape(val(*x).shape()).expect("validated in forward");
                let osp = [sp[0] * factor[0], sp[1] * factor[1], sp[2] * factor[2]];
                vec![(
                    *x,
                    kernels::resample_linear_backward(g, c, sp, osp, *factor),
                )]
            }
            Op::L2Normalize { x, eps, norms } => {
                let c = val(*x).shape()[0];
                vec![(
                    *x,
                    kernels::l2_normalize_backward(node.value.data(), norms, g, c, *eps),
                )]
            }
            Op::Dot(a, b) => {
                let s = g[0];
                let da = val(*b).data().iter().map(|v| v * s).collect();
                let db = val(*a).data().iter().map(|v| v * s).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Exp(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(y, d)| y * d)
                    .collect();
                vec![(*x, dx)]
            }
            Op::Log(x) => {
                let dx = val(*x).data().iter().zip(g).map(|(v, d)| d / v).collect();
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Scale(x, k) => vec![(*x, g.iter().map(|d| d * k).collect())],
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                op.backward(&ins, &node.value, grad)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(g, &v)| g.map(|g| (v, g)))
                    .collect()
            }
        }
    }
}
