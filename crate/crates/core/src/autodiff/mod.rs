//! Eager, tape-based reverse-mode differentiation.
//!
//! Every op computes its value when recorded and appends one node to the
//! [`Tape`]. The backward pass expresses each vector-Jacobian product with
//! the same recorded ops, so the adjoints it produces are ordinary tape nodes
//! and can be differentiated again (double backprop). The set of ops is
//! closed under taking adjoints: e.g. the input adjoint of `conv2d` is
//! `conv2d_input_adjoint`, whose own adjoints are `conv2d` and
//! `conv2d_weight_adjoint`.

pub mod kernels;

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::error::{contract_err, dim_err, value_err, Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    DivEps(Var, Var, f64),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Expand(Var),
    SumAxis(Var, usize),
    BroadcastAxis(Var, usize),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d(Var, Var, ConvGeom),
    ConvInputAdjoint(Var, Var, ConvGeom),
    ConvWeightAdjoint(Var, Var, ConvGeom),
    AvgPool(Var, usize),
    AvgPoolAdjoint(Var, usize),
    Gather(Var, Rc<[usize]>),
    Scatter(Var, Rc<[usize]>),
    Softmax(Var),
    SoftmaxCrossEntropy(Var, Rc<[usize]>),
    ComplexPack(Var, Var),
    Component(Var, usize),
    Dft2(Var, bool),
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | DivEps(a, b, _) | MatMul(a, b) | Conv2d(a, b, _)
            | ConvInputAdjoint(a, b, _) | ConvWeightAdjoint(a, b, _) | ComplexPack(a, b) => [Some(a), Some(b)],
            ScalarMul(a, _) | AddScalar(a) | Log(a) | Exp(a) | Square(a) | Sqrt(a) | Relu(a) | Reshape(a)
            | Sum(a) | Mean(a) | Expand(a) | SumAxis(a, _) | BroadcastAxis(a, _) | Transpose(a) | AvgPool(a, _)
            | AvgPoolAdjoint(a, _) | Softmax(a) | Component(a, _) | Dft2(a, _) => [Some(a), None],
            Gather(a, _) | Scatter(a, _) | SoftmaxCrossEntropy(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The closed set of user-facing op kinds accepted by [`Tape::record`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    ScalarMul,
    MatMul,
    Conv2d,
    AvgPool2d,
    MaxPool2d,
    Relu,
    Reshape,
    Sum,
    Mean,
    Log,
    Exp,
    Square,
    Sqrt,
    SoftmaxCrossEntropy,
    ComplexPack,
    Dft2Unitary,
    DivEps,
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use OpKind::*;
        Ok(match s {
            "add" => Add,
            "sub" => Sub,
            "mul" => Mul,
            "scalar-mul" => ScalarMul,
            "matmul" => MatMul,
            "conv2d" => Conv2d,
            "avgpool2d" => AvgPool2d,
            "maxpool2d" => MaxPool2d,
            "relu" => Relu,
            "reshape" => Reshape,
            "sum" => Sum,
            "mean" => Mean,
            "log" => Log,
            "exp" => Exp,
            "square" => Square,
            "sqrt" => Sqrt,
            "softmax-cross-entropy" => SoftmaxCrossEntropy,
            "complex-pack" => ComplexPack,
            "dft2-unitary" => Dft2Unitary,
            "elementwise-div-with-eps" => DivEps,
            other => return contract_err(format!("unknown op kind {other:?}")),
        })
    }
}

/// Attributes for [`Tape::record`]; only the fields an op kind reads matter.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub scalar: f64,
    pub stride: usize,
    pub padding: usize,
    pub kernel: usize,
    pub shape: Vec<usize>,
    pub targets: Vec<usize>,
    pub eps: f64,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    values: HashMap<Var, Tensor>,
    nodes: HashMap<Var, Var>,
}

impl GradientMap {
    /// Gradient of a leaf; `None` means the root does not depend on it (zero gradient).
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.values.get(&leaf)
    }

    /// Gradient as a tape node, present only when `create_graph` was set.
    pub fn node(&self, leaf: Var) -> Option<Var> {
        self.nodes.get(&leaf).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Append-only record of differentiable computations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.nodes.len()).finish()
    }
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

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().flatten().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Generic entry point over the closed op set.
    pub fn record(&mut self, kind: OpKind, parents: &[Var], attrs: &Attrs) -> Result<Var> {
        let want = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul | OpKind::Conv2d | OpKind::ComplexPack | OpKind::DivEps => 2,
            _ => 1,
        };
        if parents.len() != want {
            return contract_err(format!("{kind:?} takes {want} parents, got {}", parents.len()));
        }
        let a = parents[0];
        let b = parents.get(1).copied().unwrap_or(a);
        match kind {
            OpKind::Add => self.add(a, b),
            OpKind::Sub => self.sub(a, b),
            OpKind::Mul => self.mul(a, b),
            OpKind::ScalarMul => Ok(self.scale(a, attrs.scalar)),
            OpKind::MatMul => self.matmul(a, b),
            OpKind::Conv2d => self.conv2d(a, b, attrs.stride.max(1), attrs.padding),
            OpKind::AvgPool2d => self.avgpool2d(a, attrs.kernel),
            OpKind::MaxPool2d => self.maxpool2d(a, attrs.kernel),
            OpKind::Relu => Ok(self.relu(a)),
            OpKind::Reshape => self.reshape(a, &attrs.shape),
            OpKind::Sum => Ok(self.sum(a)),
            OpKind::Mean => Ok(self.mean(a)),
            OpKind::Log => Ok(self.log(a)),
            OpKind::Exp => Ok(self.exp(a)),
            OpKind::Square => Ok(self.square(a)),
            OpKind::Sqrt => Ok(self.sqrt(a)),
            OpKind::SoftmaxCrossEntropy => self.softmax_cross_entropy(a, &attrs.targets),
            OpKind::ComplexPack => self.complex_pack(a, b),
            OpKind::Dft2Unitary => self.dft2(a, false),
            OpKind::DivEps => self.div_eps(a, b, attrs.eps),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `a / (b + eps)` elementwise.
    pub fn div_eps(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape(a, b, "div_eps")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / (y + eps));
        Ok(self.push(v, Op::DivEps(a, b, eps)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::ScalarMul(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).numel() != 1 {
            return dim_err(format!("expand needs a one-element tensor, got {:?}", self.shape(a)));
        }
        let v = Tensor::full(shape, self.value(a).item());
        Ok(self.push(v, Op::Expand(a)))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis >= self.value(a).rank() {
            return dim_err(format!("sum_axis: axis {axis} out of range for {:?}", self.shape(a)));
        }
        let v = kernels::sum_axis(self.value(a), axis);
        Ok(self.push(v, Op::SumAxis(a, axis)))
    }

    /// Inserts a new axis of length `size` at `axis`, repeating the values.
    pub fn broadcast_axis(&mut self, a: Var, axis: usize, size: usize) -> Result<Var> {
        if axis > self.value(a).rank() {
            return dim_err(format!("broadcast_axis: axis {axis} out of range for {:?}", self.shape(a)));
        }
        let v = kernels::broadcast_axis(self.value(a), axis, size);
        Ok(self.push(v, Op::BroadcastAxis(a, axis)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let v = kernels::matmul(self.value(a), self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return dim_err(format!("transpose needs rank 2, got {:?}", self.shape(a)));
        }
        let v = kernels::transpose(self.value(a));
        Ok(self.push(v, Op::Transpose(a)))
    }

    /// Cross-correlation of `x: (B, Cin, H, W)` with `w: (Cout, Cin, K, K)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom { stride, padding };
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return dim_err(format!("conv2d: input {sx:?} incompatible with kernel {sw:?}"));
        }
        if geom.out_len(sx[2], sw[2]).is_none() || geom.out_len(sx[3], sw[3]).is_none() {
            return dim_err(format!("conv2d: kernel {sw:?} larger than padded input {sx:?}"));
        }
        let v = kernels::conv2d(self.value(x), self.value(w), geom);
        Ok(self.push(v, Op::Conv2d(x, w, geom)))
    }

    fn conv_input_adjoint(&mut self, gy: Var, w: Var, geom: ConvGeom, in_hw: (usize, usize)) -> Var {
        let v = kernels::conv2d_input_adjoint(self.value(gy), self.value(w), geom, in_hw);
        self.push(v, Op::ConvInputAdjoint(gy, w, geom))
    }

    fn conv_weight_adjoint(&mut self, x: Var, gy: Var, geom: ConvGeom, k_hw: (usize, usize)) -> Var {
        let v = kernels::conv2d_weight_adjoint(self.value(x), self.value(gy), geom, k_hw);
        self.push(v, Op::ConvWeightAdjoint(x, gy, geom))
    }

    fn check_pool(&self, x: Var, k: usize) -> Result<()> {
        let s = self.shape(x);
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return dim_err(format!("pool window {k} does not tile input {s:?}"));
        }
        Ok(())
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check_pool(x, k)?;
        let v = kernels::avgpool2d(self.value(x), k);
        Ok(self.push(v, Op::AvgPool(x, k)))
    }

    fn avgpool_adjoint(&mut self, g: Var, k: usize) -> Var {
        let v = kernels::avgpool2d_adjoint(self.value(g), k);
        self.push(v, Op::AvgPoolAdjoint(g, k))
    }

    /// Max pooling; ties go to the first maximum in row-major window order.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check_pool(x, k)?;
        let s = self.shape(x);
        let out_shape = [s[0], s[1], s[2] / k, s[3] / k];
        let idx: Rc<[usize]> = kernels::maxpool2d_argmax(self.value(x), k).into();
        let v = kernels::gather(self.value(x), &idx, &out_shape);
        Ok(self.push(v, Op::Gather(x, idx)))
    }

    fn gather(&mut self, x: Var, idx: Rc<[usize]>, shape: &[usize]) -> Var {
        let v = kernels::gather(self.value(x), &idx, shape);
        self.push(v, Op::Gather(x, idx))
    }

    fn scatter(&mut self, g: Var, idx: Rc<[usize]>, shape: &[usize]) -> Var {
        let v = kernels::scatter(self.value(g), &idx, shape);
        self.push(v, Op::Scatter(g, idx))
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return dim_err(format!("softmax needs rank 2, got {:?}", self.shape(x)));
        }
        let v = kernels::softmax_rows(self.value(x));
        Ok(self.push(v, Op::Softmax(x)))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return dim_err(format!("cross-entropy: logits {s:?} vs {} targets", targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= s[1]) {
            return value_err(format!("label {t} out of range for {} classes", s[1]));
        }
        let v = Tensor::scalar(kernels::softmax_cross_entropy(self.value(logits), targets));
        Ok(self.push(v, Op::SoftmaxCrossEntropy(logits, targets.into())))
    }

    /// Interleaves real and imaginary parts along a new trailing axis of length 2.
    pub fn complex_pack(&mut self, re: Var, im: Var) -> Result<Var> {
        self.same_shape(re, im, "complex_pack")?;
        let v = kernels::complex_pack(self.value(re), self.value(im));
        Ok(self.push(v, Op::ComplexPack(re, im)))
    }

    /// Real (`c = 0`) or imaginary (`c = 1`) part of an interleaved tensor.
    pub fn component(&mut self, z: Var, c: usize) -> Result<Var> {
        if self.shape(z).last() != Some(&2) || c > 1 {
            return dim_err(format!("component {c} of non-interleaved shape {:?}", self.shape(z)));
        }
        let v = kernels::component(self.value(z), c);
        Ok(self.push(v, Op::Component(z, c)))
    }

    /// Unitary 2D DFT (or inverse) over the trailing `(n, n, 2)` axes.
    pub fn dft2(&mut self, z: Var, inverse: bool) -> Result<Var> {
        let s = self.shape(z);
        let r = s.len();
        if r < 3 || s[r - 1] != 2 || s[r - 2] != s[r - 3] {
            return dim_err(format!("dft2 needs trailing (n, n, 2) axes, got {s:?}"));
        }
        crate::spectral::check_side(s[r - 2])?;
        let v = kernels::dft2_interleaved(self.value(z), inverse);
        Ok(self.push(v, Op::Dft2(z, inverse)))
    }

    fn zeros_like(&mut self, v: Var) -> Var {
        let z = Tensor::zeros(self.shape(v));
        self.constant(z)
    }

    /// Records the contribution of output adjoint `g` of node `out` to each
    /// parent whose `need` flag is set.
    fn vjp(&mut self, out: Var, g: Var, need: &dyn Fn(Var) -> bool) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes[out.0].op.clone();
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(a) {
                    res.push((a, g));
                }
                if need(b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    res.push((a, g));
                }
                if need(b) {
                    let n = self.scale(g, -1.0);
                    res.push((b, n));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    let ga = self.mul(g, b)?;
                    res.push((a, ga));
                }
                if need(b) {
                    let gb = self.mul(g, a)?;
                    res.push((b, gb));
                }
            }
            Op::DivEps(a, b, eps) => {
                if need(a) {
                    let ga = self.div_eps(g, b, eps)?;
                    res.push((a, ga));
                }
                if need(b) {
                    let t = self.mul(g, out)?;
                    let t = self.div_eps(t, b, eps)?;
                    let gb = self.scale(t, -1.0);
                    res.push((b, gb));
                }
            }
            Op::ScalarMul(a, c) => {
                let ga = self.scale(g, c);
                res.push((a, ga));
            }
            Op::AddScalar(a) => res.push((a, g)),
            Op::Log(a) => {
                let ga = self.div_eps(g, a, 0.0)?;
                res.push((a, ga));
            }
            Op::Exp(a) => {
                let ga = self.mul(g, out)?;
                res.push((a, ga));
            }
            Op::Square(a) => {
                let two_a = self.scale(a, 2.0);
                let ga = self.mul(g, two_a)?;
                res.push((a, ga));
            }
            Op::Sqrt(a) => {
                let half = self.scale(g, 0.5);
                let ga = self.div_eps(half, out, 0.0)?;
                res.push((a, ga));
            }
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                let ga = self.mul(g, mask)?;
                res.push((a, ga));
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.reshape(g, &shape)?;
                res.push((a, ga));
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.expand(g, &shape)?;
                res.push((a, ga));
            }
            Op::Mean(a) => {
                let shape = self.shape(a).to_vec();
                let n = self.value(a).numel() as f64;
                let e = self.expand(g, &shape)?;
                let ga = self.scale(e, 1.0 / n);
                res.push((a, ga));
            }
            Op::Expand(a) => {
                let s = self.sum(g);
                let shape = self.shape(a).to_vec();
                let ga = self.reshape(s, &shape)?;
                res.push((a, ga));
            }
            Op::SumAxis(a, axis) => {
                let size = self.shape(a)[axis];
                let ga = self.broadcast_axis(g, axis, size)?;
                res.push((a, ga));
            }
            Op::BroadcastAxis(a, axis) => {
                let ga = self.sum_axis(g, axis)?;
                res.push((a, ga));
            }
            Op::MatMul(a, b) => {
                if need(a) {
                    let bt = self.transpose(b)?;
                    let ga = self.matmul(g, bt)?;
                    res.push((a, ga));
                }
                if need(b) {
                    let at = self.transpose(a)?;
                    let gb = self.matmul(at, g)?;
                    res.push((b, gb));
                }
            }
            Op::Transpose(a) => {
                let ga = self.transpose(g)?;
                res.push((a, ga));
            }
            Op::Conv2d(x, w, geom) => {
                if need(x) {
                    let s = self.shape(x);
                    let hw = (s[2], s[3]);
                    let gx = self.conv_input_adjoint(g, w, geom, hw);
                    res.push((x, gx));
                }
                if need(w) {
                    let s = self.shape(w);
                    let k = (s[2], s[3]);
                    let gw = self.conv_weight_adjoint(x, g, geom, k);
                    res.push((w, gw));
                }
            }
            Op::ConvInputAdjoint(gy, w, geom) => {
                if need(gy) {
                    let r = self.conv2d(g, w, geom.stride, geom.padding)?;
                    res.push((gy, r));
                }
                if need(w) {
                    let s = self.shape(w);
                    let k = (s[2], s[3]);
                    let r = self.conv_weight_adjoint(g, gy, geom, k);
                    res.push((w, r));
                }
            }
            Op::ConvWeightAdjoint(x, gy, geom) => {
                if need(x) {
                    let s = self.shape(x);
                    let hw = (s[2], s[3]);
                    let r = self.conv_input_adjoint(gy, g, geom, hw);
                    res.push((x, r));
                }
                if need(gy) {
                    let r = self.conv2d(x, g, geom.stride, geom.padding)?;
                    res.push((gy, r));
                }
            }
            Op::AvgPool(a, k) => {
                let ga = self.avgpool_adjoint(g, k);
                res.push((a, ga));
            }
            Op::AvgPoolAdjoint(a, k) => {
                let ga = self.avgpool2d(g, k)?;
                res.push((a, ga));
            }
            Op::Gather(a, idx) => {
                let shape = self.shape(a).to_vec();
                let ga = self.scatter(g, idx, &shape);
                res.push((a, ga));
            }
            Op::Scatter(a, idx) => {
                let shape = self.shape(a).to_vec();
                let ga = self.gather(g, idx, &shape);
                res.push((a, ga));
            }
            Op::Softmax(a) => {
                // s * (g - rowsum(g * s))
                let cols = self.shape(a)[1];
                let gs = self.mul(g, out)?;
                let rs = self.sum_axis(gs, 1)?;
                let rb = self.broadcast_axis(rs, 1, cols)?;
                let d = self.sub(g, rb)?;
                let ga = self.mul(out, d)?;
                res.push((a, ga));
            }
            Op::SoftmaxCrossEntropy(logits, targets) => {
                let shape = self.shape(logits).to_vec();
                let mut onehot = Tensor::zeros(&shape);
                for (r, &t) in targets.iter().enumerate() {
                    onehot.data_mut()[r * shape[1] + t] = 1.0;
                }
                let onehot = self.constant(onehot);
                let s = self.softmax(logits)?;
                let d = self.sub(s, onehot)?;
                let d = self.scale(d, 1.0 / shape[0] as f64);
                let ge = self.expand(g, &shape)?;
                let ga = self.mul(ge, d)?;
                res.push((logits, ga));
            }
            Op::ComplexPack(re, im) => {
                if need(re) {
                    let r = self.component(g, 0)?;
                    res.push((re, r));
                }
                if need(im) {
                    let i = self.component(g, 1)?;
                    res.push((im, i));
                }
            }
            Op::Component(z, c) => {
                let zero = self.zeros_like(g);
                let gz = if c == 0 { self.complex_pack(g, zero)? } else { self.complex_pack(zero, g)? };
                res.push((z, gz));
            }
            Op::Dft2(z, inverse) => {
                // Unitary: the real-inner-product adjoint is the inverse transform.
                let gz = self.dft2(g, !inverse)?;
                res.push((z, gz));
            }
        }
        Ok(res)
    }

    /// Adjoint nodes of `root` with respect to each of `wrt`, recorded on the
    /// tape so they can be differentiated again. Leaves the root does not
    /// depend on get a zero constant.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let adj = self.propagate(root, wrt)?;
        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adj.get(w.0).copied().flatten() {
                Some(g) => out.push(g),
                None => out.push(self.zeros_like(w)),
            }
        }
        Ok(out)
    }

    fn propagate(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>> {
        if self.value(root).numel() != 1 {
            return contract_err(format!("backward root must be scalar, got shape {:?}", self.shape(root)));
        }
        let end = root.0 + 1;
        let mut needed = vec![false; end];
        for &w in wrt {
            if w.0 < end && self.nodes[w.0].requires_grad {
                needed[w.0] = true;
            }
        }
        for i in 0..end {
            if !needed[i] && self.nodes[i].requires_grad {
                needed[i] = self.nodes[i].op.parents().iter().flatten().any(|p| needed[p.0]);
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; end];
        if !needed[root.0] {
            return Ok(adj);
        }
        let seed = Tensor::full(self.shape(root), 1.0);
        adj[root.0] = Some(self.constant(seed));
        for i in (0..end).rev() {
            let Some(g) = adj[i] else { continue };
            if !needed[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let contributions = self.vjp(Var(i), g, &|p: Var| needed[p.0])?;
            for (p, c) in contributions {
                adj[p.0] = Some(match adj[p.0] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }
        Ok(adj)
    }

    /// Gradients of a scalar root for every differentiable leaf it depends on.
    ///
    /// With `create_graph` the adjoint nodes stay on the tape (see
    /// [`GradientMap::node`]); otherwise the tape is restored to its length
    /// before the call.
    pub fn backward(&mut self, root: Var, create_graph: bool) -> Result<GradientMap> {
        let leaves: Vec<Var> = (0..=root.0)
            .filter(|&i| self.nodes[i].requires_grad && matches!(self.nodes[i].op, Op::Leaf))
            .map(Var)
            .collect();
        let mark = self.nodes.len();
        let adj = self.propagate(root, &leaves)?;
        let mut map = GradientMap::default();
        for leaf in leaves {
            if let Some(g) = adj[leaf.0] {
                map.values.insert(leaf, self.value(g).clone());
                if create_graph {
                    map.nodes.insert(leaf, g);
                }
            }
        }
        if !create_graph {
            self.truncate(mark);
        }
        Ok(map)
    }

    /// Gradient of a scalar root with respect to one leaf, without keeping
    /// the backward graph.
    pub fn grad_input(&mut self, root: Var, input: Var) -> Result<Tensor> {
        let mark = self.nodes.len();
        let g = self.grad(root, &[input])?[0];
        let out = self.value(g).clone();
        self.truncate(mark);
        Ok(out)
    }
}
