//! Expression graphs with forward evaluation and reverse-mode gradients.
//!
//! A graph is an append-only arena of operations; operands always precede
//! their consumers, so the arena order is a topological order and the graph
//! is acyclic by construction. Evaluation and differentiation are pure:
//! repeated calls with identical bindings produce bitwise-identical tensors.
//!
//! Subgradient conventions at non-differentiable points are fixed for
//! determinism: `abs'(0) = 0`, max ties route to the lowest flat index, and
//! clamp passes gradient only strictly inside its interval.

use std::collections::HashMap;
use std::fmt;

use super::tensor::{strides_of, Tensor};

/// Handle to a node inside an [`ExprGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Graph operations. Elementwise binary ops broadcast trailing-aligned
/// shapes with unit extents, NumPy style.
#[derive(Debug, Clone)]
pub enum Op {
    Constant(Tensor),
    Input(String),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Abs(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// Elementwise power with a fixed exponent.
    Pow(NodeId, f64),
    Clamp(NodeId, f64, f64),
    /// Sum over the given axes (`None` reduces everything to a scalar).
    Sum(NodeId, Option<Vec<usize>>),
    /// Inner product of two same-shaped tensors, yielding a scalar.
    Dot(NodeId, NodeId),
    /// Max over one axis, or over all elements when `None`.
    MaxReduce(NodeId, Option<usize>),
    /// Softmax along the given axis.
    Softmax(NodeId, usize),
    /// Max pooling over the last two axes with an odd kernel, stride 1 and
    /// replicate padding, so the output shape equals the input shape.
    MaxPool2d(NodeId, usize),
    /// Reinterprets the operand under a new shape of equal element count.
    Reshape(NodeId, Vec<usize>),
    /// Dense `(m, k) x (k, n) -> (m, n)` product. Equivalent to a broadcast
    /// multiply followed by an axis sum, fused so the classifier's layers
    /// never materialize the `(m, k, n)` intermediate.
    MatMul(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant(_) => "constant",
            Op::Input(_) => "input",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Abs(_) => "abs",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Pow(..) => "pow",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Dot(..) => "dot",
            Op::MaxReduce(..) => "max-reduce",
            Op::Softmax(..) => "softmax",
            Op::MaxPool2d(..) => "max-pool-2d",
            Op::Reshape(..) => "reshape",
            Op::MatMul(..) => "matmul",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Constant(_) | Op::Input(_) => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Dot(a, b)
            | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a)
            | Op::Abs(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Pow(a, _)
            | Op::Clamp(a, _, _)
            | Op::Sum(a, _)
            | Op::MaxReduce(a, _)
            | Op::Softmax(a, _)
            | Op::MaxPool2d(a, _)
            | Op::Reshape(a, _) => vec![*a],
        }
    }
}

/// Errors produced while building, evaluating or differentiating a graph.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    UnboundInput { name: String },
    UnknownInput { name: String },
    ShapeMismatch { node: usize, op: &'static str, detail: String },
    InvalidNode { node: usize, op: &'static str, detail: String },
    NonFinite { node: usize, op: &'static str },
    NonScalarRoot { shape: Vec<usize> },
    InvalidStep { step: f64 },
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::UnboundInput { name } => write!(f, "input '{name}' is not bound"),
            GraphError::UnknownInput { name } => {
                write!(f, "'{name}' is not an input of this graph")
            }
            GraphError::ShapeMismatch { node, op, detail } => {
                write!(f, "shape mismatch at node {node} ({op}): {detail}")
            }
            GraphError::InvalidNode { node, op, detail } => {
                write!(f, "invalid node {node} ({op}): {detail}")
            }
            GraphError::NonFinite { node, op } => {
                write!(f, "non-finite value produced at node {node} ({op})")
            }
            GraphError::NonScalarRoot { shape } => {
                write!(f, "gradient requires a scalar root, got shape {shape:?}")
            }
            GraphError::InvalidStep { step } => {
                write!(f, "finite-difference step must be positive, got {step}")
            }
        }
    }
}

impl std::error::Error for GraphError {}

/// Input bindings for evaluation: a name-to-tensor map.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    map: HashMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> &mut Self {
        self.map.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

impl<const N: usize> From<[(&str, Tensor); N]> for Bindings {
    fn from(pairs: [(&str, Tensor); N]) -> Self {
        let mut b = Bindings::new();
        for (name, t) in pairs {
            b.set(name, t);
        }
        b
    }
}

/// Per-coordinate result of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdCoordinate {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Report of [`ExprGraph::finite_difference_check`].
#[derive(Debug, Clone)]
pub struct FdReport {
    pub coordinates: Vec<FdCoordinate>,
    pub max_rel_err: f64,
}

/// Directed acyclic computation graph over [`Tensor`]s.
#[derive(Debug, Clone, Default)]
pub struct ExprGraph {
    nodes: Vec<Op>,
    inputs: HashMap<String, NodeId>,
}

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(op);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.push(Op::Constant(Tensor::scalar(value).expect("finite scalar")))
    }

    /// Declares (or retrieves) the input with the given name.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Abs(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn pow(&mut self, a: NodeId, exponent: f64) -> NodeId {
        self.push(Op::Pow(a, exponent))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp(a, lo, hi))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a, None))
    }

    pub fn sum_axes(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        self.push(Op::Sum(a, Some(axes.to_vec())))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Dot(a, b))
    }

    pub fn max_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MaxReduce(a, None))
    }

    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::MaxReduce(a, Some(axis)))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::Softmax(a, axis))
    }

    pub fn max_pool_2d(&mut self, a: NodeId, kernel: usize) -> NodeId {
        self.push(Op::MaxPool2d(a, kernel))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// Scales a node by a fixed factor.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let k = self.scalar(factor);
        self.mul(a, k)
    }

    /// `max(x, 0)` built from primitives as `(x + |x|) / 2`.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let abs = self.abs(a);
        let sum = self.add(a, abs);
        self.scale(sum, 0.5)
    }

    fn reachable(&self, root: NodeId) -> Result<Vec<bool>, GraphError> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if seen[id.0] {
                continue;
            }
            seen[id.0] = true;
            stack.extend(self.nodes[id.0].operands());
        }
        Ok(seen)
    }

    fn forward(
        &self,
        root: NodeId,
        bindings: &Bindings,
    ) -> Result<(Vec<Option<Tensor>>, Vec<bool>), GraphError> {
        let seen = self.reachable(root)?;
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for idx in 0..=root.0 {
            if !seen[idx] {
                continue;
            }
            let value = self.eval_node(idx, &values, bindings)?;
            values[idx] = Some(value);
        }
        Ok((values, seen))
    }

    /// Evaluates the subgraph rooted at `root`. Deterministic for fixed
    /// bindings; errors if a reachable input is unbound, shapes are
    /// inconsistent, or a node produces a non-finite value.
    pub fn evaluate(&self, root: NodeId, bindings: &Bindings) -> Result<Tensor, GraphError> {
        let (values, _) = self.forward(root, bindings)?;
        Ok(values[root.0].clone().expect("root evaluated"))
    }

    /// Reverse-mode gradient of a scalar `root` with respect to the bound
    /// input `wrt`. If the root does not depend on `wrt`, the gradient is a
    /// zero tensor of the binding's shape.
    pub fn gradient(
        &self,
        root: NodeId,
        bindings: &Bindings,
        wrt: &str,
    ) -> Result<Tensor, GraphError> {
        Ok(self.gradients(root, bindings, &[wrt])?.pop().expect("one gradient"))
    }

    /// Gradients with respect to several inputs from a single backward pass.
    pub fn gradients(
        &self,
        root: NodeId,
        bindings: &Bindings,
        wrt: &[&str],
    ) -> Result<Vec<Tensor>, GraphError> {
        Ok(self.value_and_gradients(root, bindings, wrt)?.1)
    }

    /// The scalar root value together with its gradients, sharing one
    /// forward pass.
    pub fn value_and_gradients(
        &self,
        root: NodeId,
        bindings: &Bindings,
        wrt: &[&str],
    ) -> Result<(f64, Vec<Tensor>), GraphError> {
        for name in wrt {
            if bindings.get(name).is_none() {
                return Err(GraphError::UnknownInput { name: name.to_string() });
            }
        }
        let (values, seen) = self.forward(root, bindings)?;
        let root_value = values[root.0].as_ref().expect("root evaluated");
        if !root_value.is_scalar() && root_value.len() != 1 {
            return Err(GraphError::NonScalarRoot { shape: root_value.shape().to_vec() });
        }

        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[root.0] = Some(Tensor::filled(root_value.shape(), 1.0).expect("unit seed"));
        for idx in (0..=root.0).rev() {
            if !seen[idx] {
                continue;
            }
            let Some(adjoint) = adjoints[idx].take() else { continue };
            self.backward_node(idx, &adjoint, &values, &mut adjoints)?;
            adjoints[idx] = Some(adjoint);
        }

        let mut out = Vec::with_capacity(wrt.len());
        for name in wrt {
            let bound = bindings.get(name).expect("checked above");
            let grad = self
                .inputs
                .get(*name)
                .and_then(|id| adjoints[id.0].clone())
                .unwrap_or_else(|| Tensor::zeros(bound.shape()));
            if grad.data().iter().any(|v| !v.is_finite()) {
                return Err(GraphError::NonFinite { node: root.0, op: "gradient" });
            }
            out.push(grad);
        }
        let value = values[root.0].as_ref().expect("root evaluated").data()[0];
        Ok((value, out))
    }

    /// Central-difference comparison against the reverse-mode gradient.
    ///
    /// The relative error denominator is `max(|analytic|, |numeric|, 1e-8)`.
    pub fn finite_difference_check(
        &self,
        root: NodeId,
        bindings: &Bindings,
        wrt: &str,
        step: f64,
    ) -> Result<FdReport, GraphError> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(GraphError::InvalidStep { step });
        }
        let base = bindings
            .get(wrt)
            .ok_or_else(|| GraphError::UnknownInput { name: wrt.to_string() })?
            .clone();
        let analytic = self.gradient(root, bindings, wrt)?;
        let mut coordinates = Vec::with_capacity(base.len());
        let mut max_rel_err = 0.0f64;
        let mut probe = bindings.clone();
        for index in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[index] += step;
            probe.set(wrt, plus);
            let f_plus = scalar_value(&self.evaluate(root, &probe)?);
            let mut minus = base.clone();
            minus.data_mut()[index] -= step;
            probe.set(wrt, minus);
            let f_minus = scalar_value(&self.evaluate(root, &probe)?);
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic.data()[index];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel_err = (a - numeric).abs() / denom;
            max_rel_err = max_rel_err.max(rel_err);
            coordinates.push(FdCoordinate { index, analytic: a, numeric, rel_err });
        }
        probe.set(wrt, base);
        Ok(FdReport { coordinates, max_rel_err })
    }

    fn eval_node(
        &self,
        idx: usize,
        values: &[Option<Tensor>],
        bindings: &Bindings,
    ) -> Result<Tensor, GraphError> {
        let op = &self.nodes[idx];
        let val = |id: NodeId| values[id.0].as_ref().expect("operand evaluated");
        let result = match op {
            Op::Constant(t) => Ok(t.clone()),
            Op::Input(name) => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| GraphError::UnboundInput { name: name.clone() }),
            Op::Add(a, b) => zip_broadcast(val(*a), val(*b), |x, y| x + y)
                .map_err(|detail| shape_err(idx, op, detail)),
            Op::Sub(a, b) => zip_broadcast(val(*a), val(*b), |x, y| x - y)
                .map_err(|detail| shape_err(idx, op, detail)),
            Op::Mul(a, b) => zip_broadcast(val(*a), val(*b), |x, y| x * y)
                .map_err(|detail| shape_err(idx, op, detail)),
            Op::Div(a, b) => zip_broadcast(val(*a), val(*b), |x, y| x / y)
                .map_err(|detail| shape_err(idx, op, detail)),
            Op::Neg(a) => Ok(map_unary(val(*a), |x| -x)),
            Op::Abs(a) => Ok(map_unary(val(*a), f64::abs)),
            Op::Exp(a) => Ok(map_unary(val(*a), f64::exp)),
            Op::Log(a) => Ok(map_unary(val(*a), f64::ln)),
            Op::Pow(a, e) => {
                let e = *e;
                Ok(map_unary(val(*a), |x| pow_fixed(x, e)))
            }
            Op::Clamp(a, lo, hi) => {
                if !(lo <= hi) {
                    return Err(GraphError::InvalidNode {
                        node: idx,
                        op: op.name(),
                        detail: format!("clamp bounds [{lo}, {hi}] are inverted"),
                    });
                }
                let (lo, hi) = (*lo, *hi);
                Ok(map_unary(val(*a), |x| x.clamp(lo, hi)))
            }
            Op::Sum(a, axes) => {
                sum_forward(val(*a), axes.as_deref()).map_err(|detail| invalid_err(idx, op, detail))
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if ta.shape() != tb.shape() {
                    return Err(shape_err(
                        idx,
                        op,
                        format!("dot operands {:?} vs {:?}", ta.shape(), tb.shape()),
                    ));
                }
                let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
                Tensor::new(Vec::new(), vec![s]).map_err(|_| nonfinite_err(idx, op))
            }
            Op::MaxReduce(a, axis) => {
                max_forward(val(*a), *axis).map_err(|detail| invalid_err(idx, op, detail))
            }
            Op::Softmax(a, axis) => {
                softmax_forward(val(*a), *axis).map_err(|detail| invalid_err(idx, op, detail))
            }
            Op::MaxPool2d(a, kernel) => {
                max_pool_forward(val(*a), *kernel).map_err(|detail| invalid_err(idx, op, detail))
            }
            Op::Reshape(a, shape) => {
                val(*a).reshaped(shape).map_err(|e| invalid_err(idx, op, e.to_string()))
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                matmul_forward(ta, tb).map_err(|detail| shape_err(idx, op, detail))
            }
        }?;
        if let Some(bad) = result.data().iter().find(|v| !v.is_finite()) {
            let _ = bad;
            return Err(nonfinite_err(idx, op));
        }
        Ok(result)
    }

    fn backward_node(
        &self,
        idx: usize,
        adjoint: &Tensor,
        values: &[Option<Tensor>],
        adjoints: &mut [Option<Tensor>],
    ) -> Result<(), GraphError> {
        let op = &self.nodes[idx];
        let val = |id: NodeId| values[id.0].as_ref().expect("operand evaluated");
        let accumulate = |adjoints: &mut [Option<Tensor>], id: NodeId, grad: Tensor| {
            match &mut adjoints[id.0] {
                Some(existing) => {
                    for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                        *e += g;
                    }
                }
                slot @ None => *slot = Some(grad),
            }
        };
        match op {
            Op::Constant(_) | Op::Input(_) => {}
            Op::Add(a, b) => {
                accumulate(adjoints, *a, reduce_to_shape(adjoint, val(*a).shape()));
                accumulate(adjoints, *b, reduce_to_shape(adjoint, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                accumulate(adjoints, *a, reduce_to_shape(adjoint, val(*a).shape()));
                let neg = map_unary(adjoint, |x| -x);
                accumulate(adjoints, *b, reduce_to_shape(&neg, val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let ga = zip_broadcast(adjoint, val(*b), |g, y| g * y).expect("forward validated");
                accumulate(adjoints, *a, reduce_to_shape(&ga, val(*a).shape()));
                let gb = zip_broadcast(adjoint, val(*a), |g, x| g * x).expect("forward validated");
                accumulate(adjoints, *b, reduce_to_shape(&gb, val(*b).shape()));
            }
            Op::Div(a, b) => {
                let ga = zip_broadcast(adjoint, val(*b), |g, y| g / y).expect("forward validated");
                accumulate(adjoints, *a, reduce_to_shape(&ga, val(*a).shape()));
                let quotient = values[idx].as_ref().expect("node evaluated");
                let gq = zip_broadcast(adjoint, quotient, |g, q| g * q).expect("same shape");
                let gb = zip_broadcast(&gq, val(*b), |g, y| -g / y).expect("forward validated");
                accumulate(adjoints, *b, reduce_to_shape(&gb, val(*b).shape()));
            }
            Op::Neg(a) => accumulate(adjoints, *a, map_unary(adjoint, |x| -x)),
            Op::Abs(a) => {
                // abs'(0) = 0 by convention.
                let grad = zip_same(adjoint, val(*a), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                accumulate(adjoints, *a, grad);
            }
            Op::Exp(a) => {
                let out = values[idx].as_ref().expect("node evaluated");
                accumulate(adjoints, *a, zip_same(adjoint, out, |g, y| g * y));
            }
            Op::Log(a) => {
                accumulate(adjoints, *a, zip_same(adjoint, val(*a), |g, x| g / x));
            }
            Op::Pow(a, e) => {
                let e = *e;
                let grad = zip_same(adjoint, val(*a), |g, x| g * e * pow_fixed(x, e - 1.0));
                accumulate(adjoints, *a, grad);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let grad =
                    zip_same(adjoint, val(*a), |g, x| if x > lo && x < hi { g } else { 0.0 });
                accumulate(adjoints, *a, grad);
            }
            Op::Sum(a, axes) => {
                accumulate(adjoints, *a, sum_backward(adjoint, val(*a).shape(), axes.as_deref()));
            }
            Op::Dot(a, b) => {
                let g = adjoint.data()[0];
                accumulate(adjoints, *a, map_unary(val(*b), |y| g * y));
                accumulate(adjoints, *b, map_unary(val(*a), |x| g * x));
            }
            Op::MaxReduce(a, axis) => {
                accumulate(adjoints, *a, max_backward(adjoint, val(*a), *axis));
            }
            Op::Softmax(a, axis) => {
                let out = values[idx].as_ref().expect("node evaluated");
                accumulate(adjoints, *a, softmax_backward(adjoint, out, *axis));
            }
            Op::MaxPool2d(a, kernel) => {
                accumulate(adjoints, *a, max_pool_backward(adjoint, val(*a), *kernel));
            }
            Op::Reshape(a, _) => {
                let grad = Tensor::new(val(*a).shape().to_vec(), adjoint.data().to_vec())
                    .expect("same element count");
                accumulate(adjoints, *a, grad);
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(adjoint, val(*a), val(*b));
                accumulate(adjoints, *a, ga);
                accumulate(adjoints, *b, gb);
            }
        }
        Ok(())
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor, String> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(format!("matmul operands {sa:?} x {sb:?}"));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let (da, db) = (a.data(), b.data());
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = da[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &db[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(unchecked(vec![m, n], out))
}

fn matmul_backward(adjoint: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (g, da, db) = (adjoint.data(), a.data(), b.data());
    // dA = g . B^T
    let mut ga = vec![0.0f64; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &db[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            ga[i * k + kk] = s;
        }
    }
    // dB = A^T . g
    let mut gb = vec![0.0f64; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = da[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &mut gb[kk * n..(kk + 1) * n];
            for (o, &gv) in brow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    (unchecked(vec![m, k], ga), unchecked(vec![k, n], gb))
}

fn shape_err(node: usize, op: &Op, detail: String) -> GraphError {
    GraphError::ShapeMismatch { node, op: op.name(), detail }
}

fn invalid_err(node: usize, op: &Op, detail: String) -> GraphError {
    GraphError::InvalidNode { node, op: op.name(), detail }
}

fn nonfinite_err(node: usize, op: &Op) -> GraphError {
    GraphError::NonFinite { node, op: op.name() }
}

fn scalar_value(t: &Tensor) -> f64 {
    t.as_scalar().expect("scalar tensor")
}

fn pow_fixed(x: f64, e: f64) -> f64 {
    if e == 2.0 {
        x * x
    } else if e == 1.0 {
        x
    } else if e == 0.0 {
        1.0
    } else {
        x.powf(e)
    }
}

fn map_unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    unchecked(t.shape().to_vec(), data)
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    unchecked(a.shape().to_vec(), data)
}

// eval_node re-checks finiteness on every node output, so internal kernels
// can skip Tensor::new's validation pass.
fn unchecked(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::from_raw_unchecked(shape, data)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, String> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(format!("cannot broadcast {a:?} with {b:?}"));
        };
    }
    Ok(out)
}

/// Strides for reading a tensor of shape `shape` as if broadcast to `out`,
/// right-aligned, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let offset = out.len() - shape.len();
    let mut eff = vec![0usize; out.len()];
    for i in 0..shape.len() {
        eff[offset + i] = if shape[i] == 1 && out[offset + i] != 1 { 0 } else { strides[i] };
    }
    eff
}

/// Pads a shape/stride pair on the left so the rank becomes exactly 3;
/// prepended axes have extent 1 (their stride is never consulted).
fn pad3(shape: &[usize], strides: &[usize]) -> ([usize; 3], [usize; 3]) {
    let mut s = [1usize; 3];
    let mut t = [0usize; 3];
    let offset = 3 - shape.len();
    for i in 0..shape.len() {
        s[offset + i] = shape[i];
        t[offset + i] = strides[i];
    }
    (s, t)
}

/// `out[i] = f(a[strided], b[strided])` over a row-major output. Rank <= 3
/// runs as nested loops (the training graphs never exceed rank 3); higher
/// ranks fall back to an odometer walk.
fn strided_zip(
    out: &mut [f64],
    shape: &[usize],
    a: &[f64],
    sa: &[usize],
    b: &[f64],
    sb: &[usize],
    f: impl Fn(f64, f64) -> f64,
) {
    if shape.len() <= 3 {
        let (s, ta) = pad3(shape, sa);
        let (_, tb) = pad3(shape, sb);
        let mut slot = 0usize;
        for i0 in 0..s[0] {
            for i1 in 0..s[1] {
                let base_a = i0 * ta[0] + i1 * ta[1];
                let base_b = i0 * tb[0] + i1 * tb[1];
                for i2 in 0..s[2] {
                    out[slot] = f(a[base_a + i2 * ta[2]], b[base_b + i2 * tb[2]]);
                    slot += 1;
                }
            }
        }
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for slot in out.iter_mut() {
        *slot = f(a[oa], b[ob]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
        }
    }
}

/// `out[strided] += src[i]` over a row-major source.
fn strided_accumulate(src: &[f64], shape: &[usize], out: &mut [f64], so: &[usize]) {
    if shape.len() <= 3 {
        let (s, to) = pad3(shape, so);
        let mut slot = 0usize;
        for i0 in 0..s[0] {
            for i1 in 0..s[1] {
                let base = i0 * to[0] + i1 * to[1];
                for i2 in 0..s[2] {
                    out[base + i2 * to[2]] += src[slot];
                    slot += 1;
                }
            }
        }
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut ot = 0usize;
    for &g in src {
        out[ot] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ot += so[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            ot -= so[ax] * shape[ax];
        }
    }
}

/// `out[i] = src[strided]` over a row-major output.
fn strided_gather(out: &mut [f64], shape: &[usize], src: &[f64], ss: &[usize]) {
    if shape.len() <= 3 {
        let (s, ts) = pad3(shape, ss);
        let mut slot = 0usize;
        for i0 in 0..s[0] {
            for i1 in 0..s[1] {
                let base = i0 * ts[0] + i1 * ts[1];
                for i2 in 0..s[2] {
                    out[slot] = src[base + i2 * ts[2]];
                    slot += 1;
                }
            }
        }
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut os = 0usize;
    for slot in out.iter_mut() {
        *slot = src[os];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            os += ss[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            os -= ss[ax] * shape[ax];
        }
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, String> {
    if a.shape() == b.shape() {
        return Ok(zip_same(a, b, f));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![0.0f64; n];
    strided_zip(&mut data, &out_shape, a.data(), &sa, b.data(), &sb, f);
    Ok(unchecked(out_shape, data))
}

/// Sums `grad` down to `target` (undoing broadcasting): extra leading axes
/// and axes broadcast from extent 1 are reduced.
fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let out_shape = grad.shape();
    let st = broadcast_strides(target, out_shape);
    let mut data = vec![0.0f64; target.iter().product()];
    strided_accumulate(grad.data(), out_shape, &mut data, &st);
    unchecked(target.to_vec(), data)
}

fn check_axes(axes: &[usize], rank: usize) -> Result<(), String> {
    for (i, &ax) in axes.iter().enumerate() {
        if ax >= rank {
            return Err(format!("axis {ax} out of range for rank {rank}"));
        }
        if axes[..i].contains(&ax) {
            return Err(format!("duplicate axis {ax}"));
        }
    }
    Ok(())
}

fn removed_axes_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &e)| e)
        .collect()
}

fn sum_forward(t: &Tensor, axes: Option<&[usize]>) -> Result<Tensor, String> {
    match axes {
        None => {
            let s: f64 = t.data().iter().sum();
            Ok(unchecked(Vec::new(), vec![s]))
        }
        Some(axes) => {
            check_axes(axes, t.shape().len())?;
            let out_shape = removed_axes_shape(t.shape(), axes);
            let mut data = vec![0.0f64; out_shape.iter().product()];
            // Output stride per input axis; zero on reduced axes.
            let out_strides = strides_of(&out_shape);
            let mut eff = vec![0usize; t.shape().len()];
            let mut kept = 0usize;
            for (i, e) in eff.iter_mut().enumerate() {
                if !axes.contains(&i) {
                    *e = out_strides[kept];
                    kept += 1;
                }
            }
            strided_accumulate(t.data(), t.shape(), &mut data, &eff);
            Ok(unchecked(out_shape, data))
        }
    }
}

fn sum_backward(adjoint: &Tensor, input_shape: &[usize], axes: Option<&[usize]>) -> Tensor {
    match axes {
        None => {
            let g = adjoint.data()[0];
            unchecked(input_shape.to_vec(), vec![g; input_shape.iter().product()])
        }
        Some(axes) => {
            let out_strides = strides_of(adjoint.shape());
            let mut eff = vec![0usize; input_shape.len()];
            let mut kept = 0usize;
            for (i, e) in eff.iter_mut().enumerate() {
                if !axes.contains(&i) {
                    *e = out_strides[kept];
                    kept += 1;
                }
            }
            let mut data = vec![0.0f64; input_shape.iter().product()];
            strided_gather(&mut data, input_shape, adjoint.data(), &eff);
            unchecked(input_shape.to_vec(), data)
        }
    }
}

/// First (lowest flat index) argmax over the reduced region of each output
/// cell; ties route there by convention.
fn max_argmax(t: &Tensor, axis: Option<usize>) -> Result<(Tensor, Vec<usize>), String> {
    match axis {
        None => {
            if t.is_empty() {
                return Err("max-reduce over empty tensor".to_string());
            }
            let mut best = t.data()[0];
            let mut arg = 0usize;
            for (i, &v) in t.data().iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            Ok((unchecked(Vec::new(), vec![best]), vec![arg]))
        }
        Some(axis) => {
            let shape = t.shape();
            if axis >= shape.len() {
                return Err(format!("axis {axis} out of range for rank {}", shape.len()));
            }
            if shape[axis] == 0 {
                return Err("max-reduce over empty axis".to_string());
            }
            let outer: usize = shape[..axis].iter().product();
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let out_shape = removed_axes_shape(shape, &[axis]);
            let mut out = vec![0.0f64; outer * inner];
            let mut args = vec![0usize; outer * inner];
            let data = t.data();
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = data[o * len * inner + i];
                    let mut arg = o * len * inner + i;
                    for k in 1..len {
                        let flat = (o * len + k) * inner + i;
                        if data[flat] > best {
                            best = data[flat];
                            arg = flat;
                        }
                    }
                    out[o * inner + i] = best;
                    args[o * inner + i] = arg;
                }
            }
            Ok((unchecked(out_shape, out), args))
        }
    }
}

fn max_forward(t: &Tensor, axis: Option<usize>) -> Result<Tensor, String> {
    max_argmax(t, axis).map(|(v, _)| v)
}

fn max_backward(adjoint: &Tensor, input: &Tensor, axis: Option<usize>) -> Tensor {
    let (_, args) = max_argmax(input, axis).expect("forward validated");
    let mut data = vec![0.0f64; input.len()];
    for (cell, &arg) in args.iter().enumerate() {
        data[arg] += adjoint.data()[cell];
    }
    unchecked(input.shape().to_vec(), data)
}

fn softmax_forward(t: &Tensor, axis: usize) -> Result<Tensor, String> {
    let shape = t.shape();
    if axis >= shape.len() {
        return Err(format!("axis {axis} out of range for rank {}", shape.len()));
    }
    if shape[axis] == 0 {
        return Err("softmax over empty axis".to_string());
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let data = t.data();
    let mut out = vec![0.0f64; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..len {
                m = m.max(data[at(k)]);
            }
            let mut z = 0.0f64;
            for k in 0..len {
                let e = (data[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[at(k)] /= z;
            }
        }
    }
    Ok(unchecked(shape.to_vec(), out))
}

fn softmax_backward(adjoint: &Tensor, output: &Tensor, axis: usize) -> Tensor {
    let shape = output.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let (g, y) = (adjoint.data(), output.data());
    let mut out = vec![0.0f64; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut dot = 0.0f64;
            for k in 0..len {
                dot += g[at(k)] * y[at(k)];
            }
            for k in 0..len {
                out[at(k)] = y[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    unchecked(shape.to_vec(), out)
}

fn pool_geometry(shape: &[usize], kernel: usize) -> Result<(usize, usize, usize), String> {
    if shape.len() < 2 {
        return Err(format!("max-pool-2d needs rank >= 2, got {shape:?}"));
    }
    if kernel == 0 || kernel % 2 == 0 {
        return Err(format!("kernel must be odd and positive, got {kernel}"));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    if h == 0 || w == 0 {
        return Err("max-pool-2d over empty plane".to_string());
    }
    let lead: usize = shape[..shape.len() - 2].iter().product();
    Ok((lead, h, w))
}

/// Max pooling over an `h`-by-`w` plane: odd kernel, stride 1, replicate
/// padding (edge values extend outward). Shared with label-space boundary
/// detection.
pub(crate) fn max_pool_plane(data: &[f64], h: usize, w: usize, kernel: usize) -> Vec<f64> {
    let r = (kernel / 2) as isize;
    let mut out = vec![0.0f64; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut best = f64::NEG_INFINITY;
            for di in -r..=r {
                let si = (i + di).clamp(0, h as isize - 1) as usize;
                for dj in -r..=r {
                    let sj = (j + dj).clamp(0, w as isize - 1) as usize;
                    let v = data[si * w + sj];
                    if v > best {
                        best = v;
                    }
                }
            }
            out[(i as usize) * w + j as usize] = best;
        }
    }
    out
}

fn max_pool_forward(t: &Tensor, kernel: usize) -> Result<Tensor, String> {
    let (lead, h, w) = pool_geometry(t.shape(), kernel)?;
    if kernel == 1 {
        return Ok(t.clone());
    }
    let mut out = vec![0.0f64; t.len()];
    for l in 0..lead {
        let plane = &t.data()[l * h * w..(l + 1) * h * w];
        out[l * h * w..(l + 1) * h * w].copy_from_slice(&max_pool_plane(plane, h, w, kernel));
    }
    Ok(unchecked(t.shape().to_vec(), out))
}

fn max_pool_backward(adjoint: &Tensor, input: &Tensor, kernel: usize) -> Tensor {
    let (lead, h, w) = pool_geometry(input.shape(), kernel).expect("forward validated");
    let r = (kernel / 2) as isize;
    let mut out = vec![0.0f64; input.len()];
    let data = input.data();
    let g = adjoint.data();
    for l in 0..lead {
        let base = l * h * w;
        for i in 0..h as isize {
            for j in 0..w as isize {
                // First maximum in window scan order (after clamping to the
                // edge) receives the gradient.
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0usize;
                for di in -r..=r {
                    let si = (i + di).clamp(0, h as isize - 1) as usize;
                    for dj in -r..=r {
                        let sj = (j + dj).clamp(0, w as isize - 1) as usize;
                        let flat = base + si * w + sj;
                        if data[flat] > best {
                            best = data[flat];
                            arg = flat;
                        }
                    }
                }
                out[arg] += g[base + (i as usize) * w + j as usize];
            }
        }
    }
    unchecked(input.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vec1(values: &[f64]) -> Tensor {
        Tensor::vector(values).unwrap()
    }

    #[test]
    fn l1_distance_example() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let y = g.input("y");
        let diff = g.sub(x, y);
        let abs = g.abs(diff);
        let root = g.sum_all(abs);
        let b = Bindings::from([("x", vec1(&[0.8])), ("y", vec1(&[0.5]))]);
        let out = g.evaluate(root, &b).unwrap();
        assert_abs_diff_eq!(out.as_scalar().unwrap(), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn dot_example() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let y = g.input("y");
        let root = g.dot(x, y);
        let b = Bindings::from([("x", vec1(&[1.0, 0.0])), ("y", vec1(&[0.7, 0.2]))]);
        assert_abs_diff_eq!(
            g.evaluate(root, &b).unwrap().as_scalar().unwrap(),
            0.7,
            epsilon = 1e-15
        );
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let root = g.softmax(x, 0);
        let b = Bindings::from([("x", vec1(&[0.0, 0.0]))]);
        let out = g.evaluate(root, &b).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_normalizes_along_axis() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let root = g.softmax(x, 0);
        let t = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = Bindings::from([("x", t)]);
        let out = g.evaluate(root, &b).unwrap();
        for col in 0..4 {
            let s: f64 = (0..3).map(|r| out.data()[r * 4 + col]).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let root = g.sum_all(x);
        let b = Bindings::from([("x", vec1(&[0.3, -1.2, 4.0]))]);
        let grad = g.gradient(root, &b, "x").unwrap();
        assert_eq!(grad.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_dot_self() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let root = g.dot(x, x);
        let b = Bindings::from([("x", vec1(&[0.5]))]);
        let grad = g.gradient(root, &b, "x").unwrap();
        assert_eq!(grad.data(), &[1.0]);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let y = g.input("y");
        let diff = g.sub(x, y);
        let abs = g.abs(diff);
        let root = g.sum_all(abs);
        let b = Bindings::from([("x", vec1(&[0.3])), ("y", vec1(&[0.3]))]);
        let grad = g.gradient(root, &b, "x").unwrap();
        assert_eq!(grad.data(), &[0.0]);
    }

    #[test]
    fn unused_input_gets_zero_gradient() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let _t = g.input("t");
        let root = g.sum_all(x);
        let b = Bindings::from([("x", vec1(&[1.0, 2.0])), ("t", vec1(&[5.0, 6.0, 7.0]))]);
        let grad = g.gradient(root, &b, "t").unwrap();
        assert_eq!(grad.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let root = g.abs(x);
        let b = Bindings::from([("x", vec1(&[1.0, 2.0]))]);
        assert!(matches!(
            g.gradient(root, &b, "x"),
            Err(GraphError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn unbound_input_is_reported() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let root = g.sum_all(x);
        let err = g.evaluate(root, &Bindings::new()).unwrap_err();
        assert_eq!(err, GraphError::UnboundInput { name: "x".to_string() });
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let y = g.input("y");
        let root = g.add(x, y);
        let b = Bindings::from([("x", vec1(&[1.0, 2.0])), ("y", vec1(&[1.0, 2.0, 3.0]))]);
        match g.evaluate(root, &b) {
            Err(GraphError::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, root.0);
                assert_eq!(op, "add");
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_is_referentially_transparent() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let sm = g.softmax(x, 0);
        let e = g.exp(sm);
        let root = g.sum_all(e);
        let b = Bindings::from([("x", vec1(&[0.1, -2.3, 0.7]))]);
        let a = g.evaluate(root, &b).unwrap();
        let c = g.evaluate(root, &b).unwrap();
        assert_eq!(a.data(), c.data());
    }

    #[test]
    fn broadcasting_matmul_pattern() {
        // (2,3) x (3,2) contraction via reshape + broadcast mul + axis sum.
        let mut g = ExprGraph::new();
        let w = g.input("w"); // (2,3)
        let x = g.input("x"); // (3,2)
        let wr = g.reshape(w, &[2, 3, 1]);
        let xr = g.reshape(x, &[1, 3, 2]);
        let prod = g.mul(wr, xr);
        let out = g.sum_axes(prod, &[1]); // (2,2)
        let root = g.sum_all(out);
        let b = Bindings::from([
            ("w", Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()),
            ("x", Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap()),
        ]);
        let out_v = g.evaluate(out, &b).unwrap();
        // w @ x = [[4, 5], [10, 11]]
        assert_eq!(out_v.shape(), &[2, 2]);
        assert_eq!(out_v.data(), &[4.0, 5.0, 10.0, 11.0]);
        let grad = g.gradient(root, &b, "w").unwrap();
        // d(sum(w@x))/dw = row sums of x broadcast: [1,1,2] per row.
        assert_eq!(grad.data(), &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn max_reduce_ties_route_to_lowest_index() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let root = g.max_all(x);
        let b = Bindings::from([("x", vec1(&[2.0, 2.0, 1.0]))]);
        let grad = g.gradient(root, &b, "x").unwrap();
        assert_eq!(grad.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_k1_is_identity() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let root = g.max_pool_2d(x, 1);
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, -2.5]).unwrap();
        let b = Bindings::from([("x", t.clone())]);
        assert_eq!(g.evaluate(root, &b).unwrap(), t);
    }

    #[test]
    fn max_pool_replicates_edges() {
        // Single row: with k=3, the left edge sees itself twice.
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let root = g.max_pool_2d(x, 3);
        let t = Tensor::new(vec![1, 3], vec![5.0, 1.0, 2.0]).unwrap();
        let b = Bindings::from([("x", t)]);
        let out = g.evaluate(root, &b).unwrap();
        assert_eq!(out.data(), &[5.0, 5.0, 2.0]);
    }

    #[test]
    fn max_pool_even_kernel_rejected() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let root = g.max_pool_2d(x, 2);
        let b = Bindings::from([("x", Tensor::zeros(&[2, 2]))]);
        assert!(matches!(g.evaluate(root, &b), Err(GraphError::InvalidNode { .. })));
    }

    #[test]
    fn fd_check_log() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let lg = g.log(x);
        let root = g.sum_all(lg);
        let b = Bindings::from([("x", vec1(&[0.5]))]);
        let report = g.finite_difference_check(root, &b, "x", 1e-5).unwrap();
        assert_abs_diff_eq!(report.coordinates[0].analytic, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.coordinates[0].numeric, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn fd_check_sum_of_squares() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let sq = g.pow(x, 2.0);
        let root = g.sum_all(sq);
        let b = Bindings::from([("x", vec1(&[0.3, -0.7, 1.1]))]);
        let report = g.finite_difference_check(root, &b, "x", 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn matmul_matches_broadcast_contraction() {
        let w = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 1.5, 2.0]).unwrap();
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let mut g = ExprGraph::new();
        let wi = g.input("w");
        let xi = g.input("x");
        let mm = g.matmul(wi, xi);
        let wr = g.reshape(wi, &[2, 3, 1]);
        let xr = g.reshape(xi, &[1, 3, 4]);
        let prod = g.mul(wr, xr);
        let summed = g.sum_axes(prod, &[1]);
        let diff = g.sub(mm, summed);
        let abs = g.abs(diff);
        let root = g.sum_all(abs);
        let b = Bindings::from([("w", w), ("x", x)]);
        let dev = g.evaluate(root, &b).unwrap().as_scalar().unwrap();
        assert!(dev < 1e-12, "deviation {dev}");
    }

    #[test]
    fn fd_check_matmul_gradients() {
        let mut g = ExprGraph::new();
        let w = g.input("w");
        let x = g.input("x");
        let mm = g.matmul(w, x);
        let sq = g.pow(mm, 2.0);
        let root = g.sum_all(sq);
        let b = Bindings::from([
            ("w", Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.1, 0.9, 0.2, -0.4]).unwrap()),
            ("x", Tensor::new(vec![3, 2], vec![1.0, 0.5, -0.25, 0.75, 0.1, -0.6]).unwrap()),
        ]);
        for wrt in ["w", "x"] {
            let report = g.finite_difference_check(root, &b, wrt, 1e-5).unwrap();
            assert!(report.max_rel_err < 1e-7, "{wrt}: {}", report.max_rel_err);
        }
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let mut g = ExprGraph::new();
        let a = g.input("a");
        let b = g.input("b");
        let root = g.matmul(a, b);
        let bind = Bindings::from([("a", Tensor::zeros(&[2, 3])), ("b", Tensor::zeros(&[2, 3]))]);
        assert!(matches!(g.evaluate(root, &bind), Err(GraphError::ShapeMismatch { .. })));
    }

    #[test]
    fn fd_check_rejects_bad_step() {
        let mut g = ExprGraph::new();
        let x = g.input("x");
        let root = g.sum_all(x);
        let b = Bindings::from([("x", vec1(&[1.0]))]);
        assert!(matches!(
            g.finite_difference_check(root, &b, "x", 0.0),
            Err(GraphError::InvalidStep { .. })
        ));
    }
}
