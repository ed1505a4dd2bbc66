use std::collections::HashMap;

use crate::diffcore::kernels::{self, ConvDims, Padding};
use crate::diffcore::{Bindings, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Input { name: String, differentiable: bool },
    Constant,
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv2d { x: NodeId, kernel: NodeId, bias: Option<NodeId>, padding: Padding },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Relu(NodeId),
    Sin(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Softplus(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
}

impl<T> Op<T> {
    fn label(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant => "constant",
            Op::Affine { .. } => "affine",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu(_) => "relu",
            Op::Sin(_) => "sin",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Softplus(_) => "softplus",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Reverse-mode differentiable computation graph.
///
/// Nodes are appended in topological order by the builder methods, which
/// validate shapes eagerly. [`Graph::forward`] binds every named input and
/// evaluates all nodes; [`Graph::backward`] then propagates the gradient of
/// a scalar root back to every differentiable input.
///
/// The primitive set is closed: affine maps, 3×3 convolution, batch
/// normalization, relu, sin, square, sqrt, softplus, elementwise
/// add/sub/mul (either operand may be a one-element tensor), scaling by a
/// constant, sum and mean.
#[derive(Clone, Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    values: Vec<Vec<T>>,
    saved: Vec<Vec<T>>,
    inputs: HashMap<String, NodeId>,
    cache: HashMap<String, NodeId>,
    forwarded: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> Result<Vec<usize>> {
    if a == b {
        Ok(a.to_vec())
    } else if numel(a) == 1 && numel(b) == 1 {
        Ok(if a.len() >= b.len() { a } else { b }.to_vec())
    } else if numel(a) == 1 {
        Ok(b.to_vec())
    } else if numel(b) == 1 {
        Ok(a.to_vec())
    } else {
        Err(Error::Shape(format!("{op}: {a:?} vs {b:?}")))
    }
}

/// Reduces an elementwise gradient onto an operand that may have been
/// broadcast from a single value.
fn reduce_to<T: Real>(grad: Vec<T>, len: usize) -> Vec<T> {
    if grad.len() == len {
        grad
    } else {
        vec![grad.iter().copied().sum()]
    }
}

fn zip_broadcast<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    if a.len() == b.len() {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else if a.len() == 1 {
        b.iter().map(|&y| f(a[0], y)).collect()
    } else {
        a.iter().map(|&x| f(x, b[0])).collect()
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn conv_dims(xs: &[usize], ks: &[usize]) -> ConvDims {
    let (batch, c_in, h, w) = if xs.len() == 3 {
        (1, xs[0], xs[1], xs[2])
    } else {
        (xs[0], xs[1], xs[2], xs[3])
    };
    ConvDims {
        batch,
        c_in,
        c_out: ks[0],
        h,
        w,
    }
}

/// `(batch, channels, inner)` view of a batchnorm input `[B, C, ...]`.
fn bn_dims(xs: &[usize]) -> (usize, usize, usize) {
    (xs[0], xs[1], xs[2..].iter().product())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            saved: Vec::new(),
            inputs: HashMap::new(),
            cache: HashMap::new(),
            forwarded: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        let needs_grad = match &op {
            Op::Input { differentiable, .. } => *differentiable,
            Op::Constant => false,
            Op::Affine { x, w, b } => {
                self.ng(*x) || self.ng(*w) || b.is_some_and(|b| self.ng(b))
            }
            Op::Conv2d { x, kernel, bias, .. } => {
                self.ng(*x) || self.ng(*kernel) || bias.is_some_and(|b| self.ng(b))
            }
            Op::BatchNorm { x, gamma, beta } => self.ng(*x) || self.ng(*gamma) || self.ng(*beta),
            Op::Relu(a)
            | Op::Sin(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Softplus(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => self.ng(*a),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.ng(*a) || self.ng(*b),
        };
        self.nodes.push(Node {
            op,
            shape,
            needs_grad,
        });
        self.values.push(Vec::new());
        self.saved.push(Vec::new());
        self.forwarded = false;
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Named leaf bound at forward time. Requesting the same name twice
    /// returns the same node; shape and differentiability must agree.
    pub fn input(
        &mut self,
        name: &str,
        shape: impl Into<Vec<usize>>,
        differentiable: bool,
    ) -> Result<NodeId> {
        let shape = shape.into();
        if let Some(&id) = self.inputs.get(name) {
            let node = &self.nodes[id.0];
            if node.shape != shape || node.needs_grad != differentiable {
                return Err(Error::Shape(format!(
                    "input `{name}` redeclared as {shape:?} (was {:?})",
                    node.shape
                )));
            }
            return Ok(id);
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
                differentiable,
            },
            shape,
        );
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        let id = self.push(Op::Constant, shape);
        self.values[id.0] = value.into_data();
        id
    }

    pub fn scalar(&mut self, value: T) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Memoizes a sub-graph under `key` so repeated builders share nodes.
    pub fn cached(
        &mut self,
        key: &str,
        build: impl FnOnce(&mut Self) -> Result<NodeId>,
    ) -> Result<NodeId> {
        if let Some(&id) = self.cache.get(key) {
            return Ok(id);
        }
        let id = build(self)?;
        self.cache.insert(key.to_string(), id);
        Ok(id)
    }

    /// `x[n, in] · w[in, out] + b[out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::Shape(format!("affine: x {xs:?} · w {ws:?}")));
        }
        let shape = vec![xs[0], ws[1]];
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(Error::Shape(format!(
                    "affine bias {:?}, expected [{}]",
                    self.shape(b),
                    ws[1]
                )));
            }
        }
        Ok(self.push(Op::Affine { x, w, b }, shape))
    }

    /// 3×3 convolution of `x[B, c_in, H, W]` (or `[c_in, H, W]`) with
    /// `kernel[c_out, c_in, 3, 3]`, one-pixel halo, output the same size.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        padding: Padding,
    ) -> Result<NodeId> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if ks.len() != 4 {
            return Err(Error::Shape(format!("conv2d kernel {ks:?}")));
        }
        if ks[2] != 3 || ks[3] != 3 {
            return Err(Error::KernelSize(ks[2..].to_vec()));
        }
        let ch = match xs.len() {
            3 => 0,
            4 => 1,
            _ => return Err(Error::Shape(format!("conv2d input {xs:?}"))),
        };
        if xs[ch] != ks[1] {
            return Err(Error::Shape(format!("conv2d: input {xs:?} vs kernel {ks:?}")));
        }
        if xs[ch + 1] < 3 || xs[ch + 2] < 3 {
            return Err(Error::Shape(format!("conv2d needs H, W >= 3, got {xs:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::Shape(format!("conv2d bias {:?}", self.shape(b))));
            }
        }
        let mut shape = xs.clone();
        shape[ch] = ks[0];
        Ok(self.push(
            Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
            },
            shape,
        ))
    }

    /// Batch normalization without running statistics over `x[B, C, ...]`.
    pub fn batchnorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape(format!("batchnorm input {xs:?}")));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [xs[1]] {
                return Err(Error::Shape(format!(
                    "batchnorm parameter {:?} for {xs:?}",
                    self.shape(p)
                )));
            }
        }
        Ok(self.push(Op::BatchNorm { x, gamma, beta }, xs))
    }

    fn unary(&mut self, op: Op<T>, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(op, shape)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu(a), a)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sin(a), a)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Square(a), a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sqrt(a), a)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus(a), a)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        self.unary(Op::Scale(a, c), a)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = broadcast_shape(self.shape(a), self.shape(b), "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = broadcast_shape(self.shape(a), self.shape(b), "sub")?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = broadcast_shape(self.shape(a), self.shape(b), "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), Vec::new())
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), Vec::new())
    }

    /// Names and shapes of every input leaf, in creation order.
    pub fn input_names(&self) -> Vec<(&str, &[usize], bool)> {
        let mut out: Vec<_> = self
            .inputs
            .values()
            .map(|&id| {
                let n = &self.nodes[id.0];
                let Op::Input { name, differentiable } = &n.op else {
                    unreachable!()
                };
                (id, name.as_str(), n.shape.as_slice(), *differentiable)
            })
            .collect();
        out.sort_by_key(|e| e.0);
        out.into_iter().map(|(_, n, s, d)| (n, s, d)).collect()
    }

    /// Binds every input from `inputs` and evaluates all nodes in order.
    /// Fails on unbound inputs, shape mismatches, or the first node that
    /// produces a non-finite value.
    pub fn forward(&mut self, inputs: &impl Bindings<T>) -> Result<()> {
        self.forwarded = false;
        for i in 0..self.nodes.len() {
            let value = self.eval_node(i, inputs)?;
            if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{} node #{i} (element {bad})",
                    self.nodes[i].op.label()
                )));
            }
            if !matches!(self.nodes[i].op, Op::Constant) {
                self.values[i] = value;
            }
        }
        self.forwarded = true;
        Ok(())
    }

    fn eval_node(&mut self, i: usize, inputs: &impl Bindings<T>) -> Result<Vec<T>> {
        let (done, rest) = self.values.split_at(i);
        let v = |id: NodeId| done[id.0].as_slice();
        let node = &self.nodes[i];
        let out = match &node.op {
            Op::Input { name, .. } => {
                let t = inputs
                    .lookup(name)
                    .ok_or_else(|| Error::Unbound(name.clone()))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::Shape(format!(
                        "input `{name}` bound to {:?}, declared {:?}",
                        t.shape(),
                        node.shape
                    )));
                }
                t.data().to_vec()
            }
            Op::Constant => rest[0].clone(),
            Op::Affine { x, w, b } => {
                let (n, k) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let m = self.nodes[w.0].shape[1];
                let mut y = vec![T::zero(); n * m];
                let beta = if let Some(b) = b {
                    for row in y.chunks_mut(m) {
                        row.copy_from_slice(v(*b));
                    }
                    T::one()
                } else {
                    T::zero()
                };
                T::gemm(n, k, m, T::one(), v(*x), k as isize, 1, v(*w), m as isize, 1, beta, &mut y, m as isize, 1);
                y
            }
            Op::Conv2d { x, kernel, bias, padding } => {
                let d = conv_dims(&self.nodes[x.0].shape, &self.nodes[kernel.0].shape);
                kernels::conv2d_forward(&d, v(*x), v(*kernel), bias.map(v), *padding)
            }
            Op::BatchNorm { x, gamma, beta } => {
                let (b, c, inner) = bn_dims(&self.nodes[x.0].shape);
                let (y, mut xhat, inv_std) =
                    kernels::batchnorm_forward(v(*x), b, c, inner, v(*gamma), v(*beta));
                xhat.extend_from_slice(&inv_std);
                self.saved[i] = xhat;
                y
            }
            Op::Relu(a) => v(*a).iter().map(|&x| x.max(T::zero())).collect(),
            Op::Sin(a) => v(*a).iter().map(|&x| x.sin()).collect(),
            Op::Square(a) => v(*a).iter().map(|&x| x * x).collect(),
            Op::Sqrt(a) => v(*a).iter().map(|&x| x.sqrt()).collect(),
            Op::Softplus(a) => v(*a).iter().map(|&x| softplus(x)).collect(),
            Op::Scale(a, c) => v(*a).iter().map(|&x| x * *c).collect(),
            Op::Add(a, b) => zip_broadcast(v(*a), v(*b), |x, y| x + y),
            Op::Sub(a, b) => zip_broadcast(v(*a), v(*b), |x, y| x - y),
            Op::Mul(a, b) => zip_broadcast(v(*a), v(*b), |x, y| x * y),
            Op::Sum(a) => vec![v(*a).iter().copied().sum()],
            Op::Mean(a) => {
                let s: T = v(*a).iter().copied().sum();
                vec![s / T::lit(v(*a).len() as f64)]
            }
        };
        Ok(out)
    }

    /// Value of a node after [`Graph::forward`].
    pub fn value(&self, id: NodeId) -> Result<Tensor<T>> {
        if !self.forwarded && !matches!(self.nodes[id.0].op, Op::Constant) {
            return Err(Error::NotForwarded);
        }
        Ok(Tensor::from_raw(
            self.nodes[id.0].shape.clone(),
            self.values[id.0].clone(),
        ))
    }

    /// Scalar value of a one-element node after [`Graph::forward`].
    pub fn scalar_value(&self, id: NodeId) -> Result<T> {
        let t = self.value(id)?;
        if !t.is_scalar() {
            return Err(Error::NonScalarRoot(t.shape().to_vec()));
        }
        Ok(t.item())
    }

    /// Gradient of the scalar `root` with respect to every differentiable
    /// input. Inputs the root does not depend on receive zeros.
    pub fn backward(&self, root: NodeId) -> Result<ParamSet<T>> {
        if !self.forwarded {
            return Err(Error::NotForwarded);
        }
        if numel(self.shape(root)) != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[root.0] = Some(vec![T::one()]);
        let mut out = ParamSet::new();

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let val = |id: NodeId| self.values[id.0].as_slice();
            match &node.op {
                Op::Input { name, .. } => {
                    out.insert(name.clone(), Tensor::from_raw(node.shape.clone(), g))?;
                }
                Op::Constant => {}
                Op::Affine { x, w, b } => {
                    let (rows, k) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let m = self.nodes[w.0].shape[1];
                    if self.ng(*x) {
                        let gx = slot(&mut grads, *x, rows * k);
                        // dx = dy · wᵀ
                        T::gemm(rows, m, k, T::one(), &g, m as isize, 1, val(*w), 1, m as isize, T::one(), gx, k as isize, 1);
                    }
                    if self.ng(*w) {
                        let gw = slot(&mut grads, *w, k * m);
                        // dw = xᵀ · dy
                        T::gemm(k, rows, m, T::one(), val(*x), 1, k as isize, &g, m as isize, 1, T::one(), gw, m as isize, 1);
                    }
                    if let Some(b) = b.filter(|b| self.ng(*b)) {
                        let gb = slot(&mut grads, b, m);
                        for row in g.chunks(m) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                }
                Op::Conv2d { x, kernel, bias, padding } => {
                    let d = conv_dims(&self.nodes[x.0].shape, &self.nodes[kernel.0].shape);
                    let nx = numel(&self.nodes[x.0].shape);
                    let nk = numel(&self.nodes[kernel.0].shape);
                    let mut gx = self.ng(*x).then(|| take_slot(&mut grads, *x, nx));
                    let mut gk = self.ng(*kernel).then(|| take_slot(&mut grads, *kernel, nk));
                    let bias = bias.filter(|b| self.ng(*b));
                    let mut gb = bias.map(|b| take_slot(&mut grads, b, d.c_out));
                    kernels::conv2d_backward(
                        &d,
                        val(*x),
                        val(*kernel),
                        *padding,
                        &g,
                        gx.as_deref_mut(),
                        gk.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    if let Some(v) = gx {
                        grads[x.0] = Some(v);
                    }
                    if let Some(v) = gk {
                        grads[kernel.0] = Some(v);
                    }
                    if let (Some(b), Some(v)) = (bias, gb) {
                        grads[b.0] = Some(v);
                    }
                }
                Op::BatchNorm { x, gamma, beta } => {
                    let (bsz, c, inner) = bn_dims(&self.nodes[x.0].shape);
                    let len = bsz * c * inner;
                    let (xhat, inv_std) = self.saved[i].split_at(len);
                    let mut gx = self.ng(*x).then(|| take_slot(&mut grads, *x, len));
                    let mut gg = self.ng(*gamma).then(|| take_slot(&mut grads, *gamma, c));
                    let mut gbt = self.ng(*beta).then(|| take_slot(&mut grads, *beta, c));
                    kernels::batchnorm_backward(
                        &g,
                        xhat,
                        inv_std,
                        val(*gamma),
                        bsz,
                        c,
                        inner,
                        gx.as_deref_mut(),
                        gg.as_deref_mut(),
                        gbt.as_deref_mut(),
                    );
                    if let Some(v) = gx {
                        grads[x.0] = Some(v);
                    }
                    if let Some(v) = gg {
                        grads[gamma.0] = Some(v);
                    }
                    if let Some(v) = gbt {
                        grads[beta.0] = Some(v);
                    }
                }
                Op::Relu(a) => {
                    let xa = val(*a);
                    accumulate(&mut grads, *a, g.iter().zip(xa).map(|(&g, &x)| {
                        if x > T::zero() { g } else { T::zero() }
                    }));
                }
                Op::Sin(a) => {
                    let xa = val(*a);
                    accumulate(&mut grads, *a, g.iter().zip(xa).map(|(&g, &x)| g * x.cos()));
                }
                Op::Square(a) => {
                    let xa = val(*a);
                    let two = T::lit(2.0);
                    accumulate(&mut grads, *a, g.iter().zip(xa).map(|(&g, &x)| g * two * x));
                }
                Op::Sqrt(a) => {
                    let y = self.values[i].as_slice();
                    let half = T::lit(0.5);
                    accumulate(&mut grads, *a, g.iter().zip(y).map(|(&g, &y)| g * half / y));
                }
                Op::Softplus(a) => {
                    let xa = val(*a);
                    accumulate(&mut grads, *a, g.iter().zip(xa).map(|(&g, &x)| g * sigmoid(x)));
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.iter().map(|&g| g * *c));
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                    if self.ng(*a) {
                        let ga = reduce_to(g.clone(), val(*a).len());
                        accumulate(&mut grads, *a, ga.into_iter());
                    }
                    if self.ng(*b) {
                        let gb = reduce_to(g.iter().map(|&v| v * sign).collect(), val(*b).len());
                        accumulate(&mut grads, *b, gb.into_iter());
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if self.ng(*a) {
                        let ga = reduce_to(zip_broadcast(&g, vb, |g, y| g * y), va.len());
                        accumulate(&mut grads, *a, ga.into_iter());
                    }
                    if self.ng(*b) {
                        let gb = reduce_to(zip_broadcast(&g, va, |g, x| g * x), vb.len());
                        accumulate(&mut grads, *b, gb.into_iter());
                    }
                }
                Op::Sum(a) => {
                    let len = val(*a).len();
                    accumulate(&mut grads, *a, std::iter::repeat_n(g[0], len));
                }
                Op::Mean(a) => {
                    let len = val(*a).len();
                    let s = g[0] / T::lit(len as f64);
                    accumulate(&mut grads, *a, std::iter::repeat_n(s, len));
                }
            }
        }

        for (name, shape, differentiable) in self.input_names() {
            if differentiable && !out.contains(name) {
                out.insert(name, Tensor::zeros(shape.to_vec()))?;
            }
        }
        Ok(out)
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut [T] {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn take_slot<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> Vec<T> {
    grads[id.0].take().unwrap_or_else(|| vec![T::zero(); len])
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, g: impl Iterator<Item = T>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        empty => *empty = Some(g.collect()),
    }
}
