//! Reverse-mode automatic differentiation on a dynamic, append-only tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each primitive appends one
//! node holding its output value and the ids of its operands, so the node
//! list is topologically ordered by construction and `backward` is a single
//! reverse sweep.

use std::collections::HashMap;

use indexmap::IndexMap;

use super::kernels;
use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, b: Option<Var>, stride: usize },
    Dense { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Shift(Var, Var),
    Concat(Vec<Var>),
    Tile(Var),
    Sum(Var),
    Dot(Var, Var),
    Softmax(Var),
    LogSumExp(Var),
    Reshape(Var),
    Select(Var, usize),
    Gather(Var, Vec<usize>),
    Stack(Vec<Var>),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Atan2(Var, Var),
    WrapAngle(Var),
    Egocentric(Var, Var),
    Compose(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Shift(..) => "shift",
            Op::Concat(_) => "concat",
            Op::Tile(_) => "tile",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::Softmax(_) => "softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::Reshape(_) => "reshape",
            Op::Select(..) => "select",
            Op::Gather(..) => "gather",
            Op::Stack(_) => "stack",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Exp(_) => "exp",
            Op::Atan2(..) => "atan2",
            Op::WrapAngle(_) => "wrap_angle",
            Op::Egocentric(..) => "egocentric",
            Op::Compose(..) => "compose",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Deliberately corrupts one primitive's adjoint. Used as a negative control
/// for gradient checking.
#[derive(Clone, Copy, Debug)]
pub struct AdjointFault {
    pub op: &'static str,
    pub factor: f64,
}

/// Names of every primitive, as reported in errors and matched by [`AdjointFault`].
pub const OP_NAMES: [&str; 27] = [
    "leaf", "conv2d", "dense", "relu", "add", "sub", "mul", "scale", "scale_by", "shift", "concat", "tile", "sum", "dot",
    "softmax", "logsumexp", "reshape", "select", "gather", "stack", "sin", "cos", "exp", "atan2", "wrap_angle", "egocentric", "compose",
];

impl AdjointFault {
    /// Parses `op:factor`, e.g. `conv2d:1.01`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (op, factor) = spec.split_once(':').unwrap_or((spec, "1.01"));
        let op = OP_NAMES
            .iter()
            .find(|n| **n == op)
            .ok_or_else(|| Error::Config(format!("unknown op `{op}` for fault injection")))?;
        let factor = factor.parse().map_err(|_| Error::Config(format!("bad fault factor `{factor}`")))?;
        Ok(AdjointFault { op, factor })
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    fault: Option<AdjointFault>,
}

/// Result of [`Graph::backward`]: parameter gradients keyed like the
/// [`ParameterStore`] plus adjoints of every node that required a gradient.
#[derive(Clone, Debug)]
pub struct Gradients {
    params: IndexMap<String, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Zero gradients for every trainable parameter of `store`.
    pub fn zeros_like(store: &ParameterStore) -> Self {
        let params = store
            .iter()
            .filter(|(_, _, trainable)| *trainable)
            .map(|(n, t, _)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Gradients { params, nodes: Vec::new() }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adjoint of a node, `None` when the node did not require a gradient.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }

    /// In-place `self += other`, in `self`'s key order.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in self.params.iter_mut() {
            let o = other.params.get(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            g.add_assign(o);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.values_mut() {
            *g = g.scale(factor);
        }
    }

    pub fn into_params(self) -> IndexMap<String, Tensor> {
        self.params
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, fault: AdjointFault) {
        self.fault = Some(fault);
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

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Current tape length, for use with [`Graph::truncate`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after `mark`. Vars created after the mark become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.params.retain(|_, v| v.0 < mark);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => operands(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.leaf(Tensor::scalar(value), false)
    }

    /// Differentiable leaf that is not a parameter (inputs under gradient checks, poses).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Binds a named parameter; repeated calls return the same node. Frozen
    /// parameters enter as constants.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let (value, trainable) = store.get_with_flag(name).ok_or_else(|| Error::UnknownParam(name.into()))?;
        let v = self.leaf(value.clone(), trainable)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(k), b.map(|b| self.value(b)), stride)?;
        self.push(out, Op::Conv2d { x, k, b, stride })
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::dense(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push(out, Op::Dense { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v.max(0.0)).collect())?;
        self.push(out, Op::Relu(x))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        Tensor::new(ta.shape(), ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).scale(factor);
        self.push(out, Op::Scale(x, factor))
    }

    fn check_scalar(&self, op: &'static str, s: Var) -> Result<f64> {
        let t = self.value(s);
        if t.len() != 1 {
            return Err(Error::shape(op, format!("expected a scalar, got {:?}", t.shape())));
        }
        Ok(t.item())
    }

    /// Tensor times a scalar node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.check_scalar("scale_by", s)?;
        let out = self.value(x).scale(sv);
        self.push(out, Op::ScaleBy(x, s))
    }

    /// Tensor plus a scalar node, broadcast.
    pub fn shift(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.check_scalar("shift", s)?;
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v + sv).collect())?;
        self.push(out, Op::Shift(x, s))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", format!("leading extents {:?} vs {:?}", &s[..s.len() - 1], lead)));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let positions: usize = lead.iter().product();
        let mut out = Vec::with_capacity(positions * total);
        for pos in 0..positions {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[pos * w..][..w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Concat(parts.to_vec()))
    }

    /// Broadcasts a vector of length n to `h×w×n`.
    pub fn tile(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.value(v);
        if t.rank() != 1 {
            return Err(Error::shape("tile", format!("expected a vector, got {:?}", t.shape())));
        }
        let n = t.len();
        let data: Vec<f64> = (0..h * w).flat_map(|_| t.data().iter().copied()).collect();
        let out = Tensor::new(&[h, w, n], data)?;
        self.push(out, Op::Tile(v))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Scalar product of two tensors with equal element counts (flattened).
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 {
            return Err(Error::shape("softmax", format!("expected a vector, got {:?}", t.shape())));
        }
        let out = Tensor::vector(kernels::softmax(t.data()));
        self.push(out, Op::Softmax(x))
    }

    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let v = kernels::logsumexp(self.value(x).data())?;
        self.push(Tensor::scalar(v), Op::LogSumExp(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        self.push(out, Op::Reshape(x))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let v = *t
            .data()
            .get(index)
            .ok_or_else(|| Error::shape("select", format!("index {index} out of {}", t.len())))?;
        self.push(Tensor::scalar(v), Op::Select(x, index))
    }

    /// `y[i] = x[indices[i]]` over the flat data of `x`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            out.push(*d.get(i).ok_or_else(|| Error::shape("gather", format!("index {i} out of {}", d.len())))?);
        }
        self.push(Tensor::vector(out), Op::Gather(x, indices.to_vec()))
    }

    /// Stacks scalar nodes into a vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("stack of nothing".into()));
        }
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            out.push(self.check_scalar("stack", p)?);
        }
        self.push(Tensor::vector(out), Op::Stack(parts.to_vec()))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| f(*v)).collect())?;
        self.push(out, op)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sin(x), f64::sin)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Cos(x), f64::cos)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x), f64::exp)
    }

    /// Wraps angles into (−π, π]. The adjoint is the identity away from the seam.
    pub fn wrap_angle(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::WrapAngle(x), crate::geometry::wrap_angle)
    }

    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        let out = self.zip_same("atan2", y, x, f64::atan2)?;
        self.push(out, Op::Atan2(y, x))
    }

    /// `target` (x, y, yaw) re-expressed in `origin`'s frame and encoded as
    /// (x, y, sin yaw, cos yaw).
    pub fn egocentric_encode(&mut self, target: Var, origin: Var) -> Result<Var> {
        let t = pose3("egocentric", self.value(target))?;
        let o = pose3("egocentric", self.value(origin))?;
        let (s, c) = o[2].sin_cos();
        let (dx, dy) = (t[0] - o[0], t[1] - o[1]);
        let yaw = t[2] - o[2];
        let out = Tensor::vector(vec![c * dx + s * dy, -s * dx + c * dy, yaw.sin(), yaw.cos()]);
        self.push(out, Op::Egocentric(target, origin))
    }

    /// Applies a local-frame motion (dx, dy, dyaw) to a pose (x, y, yaw).
    pub fn compose(&mut self, base: Var, motion: Var) -> Result<Var> {
        let b = pose3("compose", self.value(base))?;
        let m = pose3("compose", self.value(motion))?;
        let (s, c) = b[2].sin_cos();
        let out = Tensor::vector(vec![
            b[0] + c * m[0] - s * m[1],
            b[1] + s * m[0] + c * m[1],
            crate::geometry::wrap_angle(b[2] + m[2]),
        ]);
        self.push(out, Op::Compose(base, motion))
    }

    /// Reverse sweep from a scalar node. Returns gradients for every trainable
    /// parameter in `store` (zero when unreached) and adjoints for all nodes
    /// that required a gradient.
    pub fn backward(&self, output: Var, store: &ParameterStore) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", format!("output must be scalar, got {:?}", self.value(output).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(Tensor::new(self.value(output).shape(), vec![1.0])?);
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut contrib = self.adjoints(node, &g)?;
            if let Some(f) = self.fault.filter(|f| f.op == node.op.name()) {
                for (_, t) in contrib.iter_mut() {
                    *t = t.scale(f.factor);
                }
            }
            for (v, t) in contrib {
                assert!(v.0 < idx, "tape is not topologically ordered");
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => acc.add_assign(&t),
                    None => grads[v.0] = Some(t),
                }
            }
            grads[idx] = Some(g);
        }

        let mut out = Gradients::zeros_like(store);
        for (name, g) in out.params.iter_mut() {
            if let Some(v) = self.params.get(name) {
                if let Some(Some(t)) = grads.get(v.0) {
                    *g = t.clone();
                }
            }
        }
        out.nodes = grads;
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn adjoints(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape(), data);
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, k, b, stride } => {
                let (gx, gk, gb) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*k),
                    *stride,
                    g,
                    self.needs(*x),
                    self.needs(*k),
                )?;
                let mut v = Vec::with_capacity(3);
                v.extend(gx.map(|t| (*x, t)));
                v.extend(gk.map(|t| (*k, t)));
                if let Some(b) = b {
                    v.push((*b, gb));
                }
                v
            }
            Op::Dense { x, w, b } => {
                let (gx, gw) = kernels::dense_backward(self.value(*x), self.value(*w), g, self.needs(*x), self.needs(*w));
                let mut v = Vec::with_capacity(3);
                v.extend(gx.map(|t| (*x, t)));
                v.extend(gw.map(|t| (*w, t)));
                if let Some(b) = b {
                    v.push((*b, g.clone()));
                }
                v
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                vec![(*x, like(*x, xd.iter().zip(gd).map(|(a, g)| if *a > 0.0 { *g } else { 0.0 }).collect())?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, like(*a, gd.iter().zip(bd).map(|(g, y)| g * y).collect())?),
                    (*b, like(*b, gd.iter().zip(ad).map(|(g, x)| g * x).collect())?),
                ]
            }
            Op::Scale(x, f) => vec![(*x, g.scale(*f))],
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                let xd = self.value(*x).data();
                let gs: f64 = gd.iter().zip(xd).map(|(g, x)| g * x).sum();
                vec![(*x, g.scale(sv)), (*s, Tensor::scalar(gs))]
            }
            Op::Shift(x, s) => vec![(*x, g.clone()), (*s, Tensor::scalar(gd.iter().sum()))],
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| *self.value(*p).shape().last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let positions = g.len() / total;
                let mut bufs: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(w * positions)).collect();
                for pos in 0..positions {
                    let mut off = pos * total;
                    for (buf, &w) in bufs.iter_mut().zip(&widths) {
                        buf.extend_from_slice(&gd[off..off + w]);
                        off += w;
                    }
                }
                parts.iter().zip(bufs).map(|(p, b)| Ok((*p, like(*p, b)?))).collect::<Result<_>>()?
            }
            Op::Tile(v) => {
                let n = self.value(*v).len();
                let mut acc = vec![0.0; n];
                for chunk in gd.chunks_exact(n) {
                    for (a, c) in acc.iter_mut().zip(chunk) {
                        *a += c;
                    }
                }
                vec![(*v, like(*v, acc)?)]
            }
            Op::Sum(x) => vec![(*x, Tensor::filled(self.value(*x).shape(), gd[0]))],
            Op::Dot(a, b) => vec![(*a, self.value(*b).scale(gd[0]).reshaped(self.value(*a).shape())?), (*b, self.value(*a).scale(gd[0]).reshaped(self.value(*b).shape())?)],
            Op::Softmax(x) => {
                let y = node.value.data();
                let inner: f64 = y.iter().zip(gd).map(|(y, g)| y * g).sum();
                vec![(*x, like(*x, y.iter().zip(gd).map(|(y, g)| y * (g - inner)).collect())?)]
            }
            Op::LogSumExp(x) => {
                let p = kernels::softmax(self.value(*x).data());
                vec![(*x, like(*x, p.into_iter().map(|p| p * gd[0]).collect())?)]
            }
            Op::Reshape(x) => vec![(*x, g.reshaped(self.value(*x).shape())?)],
            Op::Select(x, i) => {
                let mut t = Tensor::zeros(self.value(*x).shape());
                t.data_mut()[*i] = gd[0];
                vec![(*x, t)]
            }
            Op::Gather(x, idx) => {
                let mut t = Tensor::zeros(self.value(*x).shape());
                for (i, g) in idx.iter().zip(gd) {
                    t.data_mut()[*i] += g;
                }
                vec![(*x, t)]
            }
            Op::Stack(parts) => parts.iter().zip(gd).map(|(p, g)| (*p, Tensor::scalar(*g))).collect(),
            Op::Sin(x) => {
                let xd = self.value(*x).data();
                vec![(*x, like(*x, xd.iter().zip(gd).map(|(x, g)| g * x.cos()).collect())?)]
            }
            Op::Cos(x) => {
                let xd = self.value(*x).data();
                vec![(*x, like(*x, xd.iter().zip(gd).map(|(x, g)| -g * x.sin()).collect())?)]
            }
            Op::Exp(x) => {
                let y = node.value.data();
                vec![(*x, like(*x, y.iter().zip(gd).map(|(y, g)| g * y).collect())?)]
            }
            Op::WrapAngle(x) => vec![(*x, g.clone())],
            Op::Atan2(y, x) => {
                let (yd, xd) = (self.value(*y).data(), self.value(*x).data());
                let mut gy = Vec::with_capacity(yd.len());
                let mut gx = Vec::with_capacity(xd.len());
                for ((yv, xv), g) in yd.iter().zip(xd).zip(gd) {
                    let r2 = xv * xv + yv * yv;
                    gy.push(g * xv / r2);
                    gx.push(-g * yv / r2);
                }
                vec![(*y, like(*y, gy)?), (*x, like(*x, gx)?)]
            }
            Op::Egocentric(target, origin) => {
                let t = self.value(*target).data();
                let o = self.value(*origin).data();
                let (s, c) = o[2].sin_cos();
                let (dx, dy) = (t[0] - o[0], t[1] - o[1]);
                let (rx, ry) = (c * dx + s * dy, -s * dx + c * dy);
                let (sy, cy) = (t[2] - o[2]).sin_cos();
                let (g0, g1, g2, g3) = (gd[0], gd[1], gd[2], gd[3]);
                let gt = vec![c * g0 - s * g1, s * g0 + c * g1, g2 * cy - g3 * sy];
                let go = vec![-c * g0 + s * g1, -s * g0 - c * g1, g0 * ry - g1 * rx - g2 * cy + g3 * sy];
                vec![(*target, Tensor::vector(gt)), (*origin, Tensor::vector(go))]
            }
            Op::Compose(base, motion) => {
                let b = self.value(*base).data();
                let m = self.value(*motion).data();
                let (s, c) = b[2].sin_cos();
                let (g0, g1, g2) = (gd[0], gd[1], gd[2]);
                let gb = vec![g0, g1, g0 * (-s * m[0] - c * m[1]) + g1 * (c * m[0] - s * m[1]) + g2];
                let gm = vec![c * g0 + s * g1, -s * g0 + c * g1, g2];
                vec![(*base, Tensor::vector(gb)), (*motion, Tensor::vector(gm))]
            }
        };
        Ok(out)
    }
}

fn pose3<'a>(op: &'static str, t: &'a Tensor) -> Result<&'a [f64]> {
    if t.shape() != [3] {
        return Err(Error::shape(op, format!("pose must have shape [3], got {:?}", t.shape())));
    }
    Ok(t.data())
}

fn operands(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { x, k, b, .. } => [Some(*x), Some(*k), *b].into_iter().flatten().collect(),
        Op::Dense { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
        Op::Relu(x)
        | Op::Scale(x, _)
        | Op::Tile(x)
        | Op::Sum(x)
        | Op::Softmax(x)
        | Op::LogSumExp(x)
        | Op::Reshape(x)
        | Op::Select(x, _)
        | Op::Gather(x, _)
        | Op::Sin(x)
        | Op::Cos(x)
        | Op::Exp(x)
        | Op::WrapAngle(x) => vec![*x],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::ScaleBy(a, b)
        | Op::Shift(a, b)
        | Op::Dot(a, b)
        | Op::Atan2(a, b)
        | Op::Egocentric(a, b)
        | Op::Compose(a, b) => vec![*a, *b],
        Op::Concat(parts) | Op::Stack(parts) => parts.clone(),
    }
}
