use std::collections::HashMap;

use crate::real::Real;

use super::{GraphError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive operation set. Everything else the model needs is composed
/// from these.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// Same-shape add, or `[.., n] + [n]` / `[.., n] + [1, n]` bias broadcast.
    Add,
    /// Same-shape elementwise product.
    Mul,
    /// Concatenate along the last axis.
    Concat,
    /// Select rows of a `[rows, d]` table.
    GatherRows(Vec<usize>),
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Square,
    ReduceSum,
    ReduceMean,
}

/// Data-free tag of a [`Primitive`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimKind {
    MatMul,
    Add,
    Mul,
    Concat,
    GatherRows,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Square,
    ReduceSum,
    ReduceMean,
}

impl PrimKind {
    pub const ALL: [PrimKind; 13] = [
        PrimKind::MatMul,
        PrimKind::Add,
        PrimKind::Mul,
        PrimKind::Concat,
        PrimKind::GatherRows,
        PrimKind::Relu,
        PrimKind::Sigmoid,
        PrimKind::Exp,
        PrimKind::Log,
        PrimKind::Softplus,
        PrimKind::Square,
        PrimKind::ReduceSum,
        PrimKind::ReduceMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimKind::MatMul => "matmul",
            PrimKind::Add => "add",
            PrimKind::Mul => "mul",
            PrimKind::Concat => "concat",
            PrimKind::GatherRows => "gather_rows",
            PrimKind::Relu => "relu",
            PrimKind::Sigmoid => "sigmoid",
            PrimKind::Exp => "exp",
            PrimKind::Log => "log",
            PrimKind::Softplus => "softplus",
            PrimKind::Square => "square",
            PrimKind::ReduceSum => "reduce_sum",
            PrimKind::ReduceMean => "reduce_mean",
        }
    }
}

impl Primitive {
    pub fn kind(&self) -> PrimKind {
        match self {
            Primitive::MatMul => PrimKind::MatMul,
            Primitive::Add => PrimKind::Add,
            Primitive::Mul => PrimKind::Mul,
            Primitive::Concat => PrimKind::Concat,
            Primitive::GatherRows(_) => PrimKind::GatherRows,
            Primitive::Relu => PrimKind::Relu,
            Primitive::Sigmoid => PrimKind::Sigmoid,
            Primitive::Exp => PrimKind::Exp,
            Primitive::Log => PrimKind::Log,
            Primitive::Softplus => PrimKind::Softplus,
            Primitive::Square => PrimKind::Square,
            Primitive::ReduceSum => PrimKind::ReduceSum,
            Primitive::ReduceMean => PrimKind::ReduceMean,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Option<Primitive>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    trainable: bool,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the trainable leaves.
#[derive(Debug)]
pub struct Gradients<T> {
    map: HashMap<NodeId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.map.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A recorded forward computation supporting one reverse sweep.
///
/// Nodes are appended in evaluation order, so inputs always precede the nodes
/// that consume them.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<(PrimKind, f64)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn shape_err(op: PrimKind, dims: Vec<Vec<usize>>) -> GraphError {
    GraphError::Shape { op: op.name(), dims }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), fault: None }
    }

    /// Add `delta` to every adjoint propagated through `kind`. Used to verify
    /// that gradient checks catch broken adjoints.
    pub fn inject_adjoint_fault(&mut self, kind: PrimKind, delta: f64) {
        self.fault = Some((kind, delta));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            trainable,
            needs_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    fn check(&self, id: NodeId) -> Result<(), GraphError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(GraphError::UnknownNode(id.0))
        }
    }

    /// Evaluate `prim` on `inputs` and record it.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        for &i in inputs {
            self.check(i)?;
        }
        let kind = prim.kind();
        let arity = match kind {
            PrimKind::MatMul | PrimKind::Add | PrimKind::Mul => Some(2),
            PrimKind::Concat => None,
            _ => Some(1),
        };
        if let Some(a) = arity {
            if inputs.len() != a {
                return Err(GraphError::Arity { op: kind.name(), expected: a, got: inputs.len() });
            }
        } else if inputs.is_empty() {
            return Err(GraphError::Arity { op: kind.name(), expected: 1, got: 0 });
        }
        let value = self.forward(&prim, inputs)?;
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { op: Some(prim), inputs: inputs.to_vec(), value, trainable: false, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn forward(&self, prim: &Primitive, inputs: &[NodeId]) -> Result<Tensor<T>, GraphError> {
        let kind = prim.kind();
        let x = &self.nodes[inputs[0].0].value;
        let map = |f: &dyn Fn(T) -> T| Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
        match prim {
            Primitive::MatMul => {
                let y = &self.nodes[inputs[1].0].value;
                if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
                    return Err(shape_err(kind, vec![x.shape().to_vec(), y.shape().to_vec()]));
                }
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                let mut out = vec![T::zero(); m * n];
                T::gemm(m, k, n, x.data(), false, y.data(), false, &mut out, false);
                Tensor::new(vec![m, n], out)
            }
            Primitive::Add => {
                let y = &self.nodes[inputs[1].0].value;
                if x.shape() == y.shape() {
                    let d = x.data().iter().zip(y.data()).map(|(&a, &b)| a + b).collect();
                    Tensor::new(x.shape().to_vec(), d)
                } else if is_bias_of(x, y) {
                    let n = y.len();
                    let d = x.data().iter().enumerate().map(|(i, &a)| a + y.data()[i % n]).collect();
                    Tensor::new(x.shape().to_vec(), d)
                } else {
                    Err(shape_err(kind, vec![x.shape().to_vec(), y.shape().to_vec()]))
                }
            }
            Primitive::Mul => {
                let y = &self.nodes[inputs[1].0].value;
                if x.shape() != y.shape() {
                    return Err(shape_err(kind, vec![x.shape().to_vec(), y.shape().to_vec()]));
                }
                let d = x.data().iter().zip(y.data()).map(|(&a, &b)| a * b).collect();
                Tensor::new(x.shape().to_vec(), d)
            }
            Primitive::Concat => {
                let parts: Vec<&Tensor<T>> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                let lead = &x.shape()[..x.shape().len() - 1];
                if parts.iter().any(|p| &p.shape()[..p.shape().len() - 1] != lead) {
                    return Err(shape_err(kind, parts.iter().map(|p| p.shape().to_vec()).collect()));
                }
                let rows = x.rows();
                let width: usize = parts.iter().map(|p| p.cols()).sum();
                let mut out = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    for p in &parts {
                        out.extend_from_slice(p.row(r));
                    }
                }
                let mut shape = lead.to_vec();
                shape.push(width);
                Tensor::new(shape, out)
            }
            Primitive::GatherRows(idx) => {
                if x.shape().len() != 2 {
                    return Err(shape_err(kind, vec![x.shape().to_vec()]));
                }
                if idx.is_empty() {
                    return Err(shape_err(kind, vec![x.shape().to_vec(), vec![0]]));
                }
                let rows = x.shape()[0];
                let d = x.shape()[1];
                let mut out = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    if i >= rows {
                        return Err(GraphError::GatherIndex { index: i, rows });
                    }
                    out.extend_from_slice(x.row(i));
                }
                Tensor::new(vec![idx.len(), d], out)
            }
            Primitive::Relu => map(&|v| if v > T::zero() { v } else { T::zero() }),
            Primitive::Sigmoid => map(&sigmoid),
            Primitive::Exp => map(&|v| v.exp()),
            Primitive::Log => {
                if let Some(&bad) = x.data().iter().find(|&&v| !(v > T::zero())) {
                    return Err(GraphError::Domain { op: kind.name(), value: bad.as_f64() });
                }
                map(&|v| v.ln())
            }
            Primitive::Softplus => map(&softplus),
            Primitive::Square => map(&|v| v * v),
            Primitive::ReduceSum => Ok(Tensor::scalar(sum_ordered(x.data()))),
            Primitive::ReduceMean => Ok(Tensor::scalar(sum_ordered(x.data()) / T::of(x.len() as f64))),
        }
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// trainable leaf that the loss depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, GraphError> {
        self.check(loss)?;
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(GraphError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let deltas = self.adjoint(op, &node.inputs, &node.value, &g);
            for (input, delta) in node.inputs.iter().zip(deltas) {
                let Some(mut delta) = delta else { continue };
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                if let Some((kind, amount)) = self.fault {
                    if kind == op.kind() {
                        let a = T::of(amount);
                        delta.iter_mut().for_each(|d| *d = *d + a);
                    }
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a = *a + d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        let mut map = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[id];
            if node.trainable {
                if let Some(g) = g {
                    map.insert(NodeId(id), Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(Gradients { map })
    }

    /// Vector-Jacobian products of `op` for each input. `None` marks an input
    /// whose adjoint is not needed.
    fn adjoint(&self, op: &Primitive, inputs: &[NodeId], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let want = |i: usize| self.nodes[inputs[i].0].needs_grad;
        let x = &self.nodes[inputs[0].0].value;
        let unary = |f: &dyn Fn(usize) -> T| -> Vec<Option<Vec<T>>> {
            vec![Some((0..g.len()).map(|i| g[i] * f(i)).collect())]
        };
        match op {
            Primitive::MatMul => {
                let y = &self.nodes[inputs[1].0].value;
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                let dx = want(0).then(|| {
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, y.data(), true, &mut d, false);
                    d
                });
                let dy = want(1).then(|| {
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, x.data(), true, g, false, &mut d, false);
                    d
                });
                vec![dx, dy]
            }
            Primitive::Add => {
                let y = &self.nodes[inputs[1].0].value;
                let dx = want(0).then(|| g.to_vec());
                let dy = want(1).then(|| {
                    if y.shape() == x.shape() {
                        g.to_vec()
                    } else {
                        let n = y.len();
                        let mut d = vec![T::zero(); n];
                        for (i, &gi) in g.iter().enumerate() {
                            d[i % n] = d[i % n] + gi;
                        }
                        d
                    }
                });
                vec![dx, dy]
            }
            Primitive::Mul => {
                let y = &self.nodes[inputs[1].0].value;
                let dx = want(0).then(|| g.iter().zip(y.data()).map(|(&a, &b)| a * b).collect());
                let dy = want(1).then(|| g.iter().zip(x.data()).map(|(&a, &b)| a * b).collect());
                vec![dx, dy]
            }
            Primitive::Concat => {
                let widths: Vec<usize> = inputs.iter().map(|i| self.nodes[i.0].value.cols()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                widths
                    .iter()
                    .enumerate()
                    .map(|(j, &w)| {
                        let start = off;
                        off += w;
                        want(j).then(|| {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * total + start..r * total + start + w]);
                            }
                            d
                        })
                    })
                    .collect()
            }
            Primitive::GatherRows(idx) => {
                let d = x.shape()[1];
                let mut dx = vec![T::zero(); x.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[i * d + c] = dx[i * d + c] + g[r * d + c];
                    }
                }
                vec![Some(dx)]
            }
            Primitive::Relu => {
                let xd = x.data();
                unary(&|i| if xd[i] > T::zero() { T::one() } else { T::zero() })
            }
            Primitive::Sigmoid => {
                let yd = out.data();
                unary(&|i| yd[i] * (T::one() - yd[i]))
            }
            Primitive::Exp => {
                let yd = out.data();
                unary(&|i| yd[i])
            }
            Primitive::Log => {
                let xd = x.data();
                unary(&|i| T::one() / xd[i])
            }
            Primitive::Softplus => {
                let xd = x.data();
                unary(&|i| sigmoid(xd[i]))
            }
            Primitive::Square => {
                let xd = x.data();
                unary(&|i| T::of(2.0) * xd[i])
            }
            Primitive::ReduceSum => vec![Some(vec![g[0]; x.len()])],
            Primitive::ReduceMean => vec![Some(vec![g[0] / T::of(x.len() as f64); x.len()])],
        }
    }

    /// Sign pattern of every relu input, used to detect finite-difference
    /// probes that cross a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut p = Vec::new();
        for n in &self.nodes {
            if let Some(Primitive::Relu) = n.op {
                p.extend(self.nodes[n.inputs[0].0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        p
    }

    // ---- composed helpers ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Concat, parts)
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId, GraphError> {
        self.apply(Primitive::GatherRows(indices), &[table])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Softplus, &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::Square, &[x])
    }

    pub fn reduce_sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::ReduceSum, &[x])
    }

    pub fn reduce_mean(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.apply(Primitive::ReduceMean, &[x])
    }

    /// `c * x` via an elementwise product with a constant.
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, GraphError> {
        let k = self.constant(Tensor::full(self.value(x).shape().to_vec(), T::of(c)));
        self.mul(x, k)
    }

    /// `x + c` via a broadcast bias add.
    pub fn shift(&mut self, x: NodeId, c: f64) -> Result<NodeId, GraphError> {
        let k = self.constant(Tensor::full(vec![self.value(x).cols()], T::of(c)));
        self.add(x, k)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Per-row sum of a `[rows, cols]` matrix as `[rows, 1]`.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let cols = self.value(x).cols();
        let ones = self.constant(Tensor::full(vec![cols, 1], T::one()));
        self.matmul(x, ones)
    }

    /// Sum of several same-shaped nodes, left to right.
    pub fn sum_all(&mut self, xs: &[NodeId]) -> Result<NodeId, GraphError> {
        let (&first, rest) = xs.split_first().ok_or(GraphError::Arity { op: "add", expected: 1, got: 0 })?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }
}

fn is_bias_of<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> bool {
    let n = x.cols();
    x.shape().len() >= 2 && y.len() == n && (y.shape() == [n] || y.shape() == [1, n])
}

/// Left-to-right summation; fixed order keeps results reproducible.
pub(crate) fn sum_ordered<T: Real>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |a, &b| a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(v(&[0.0]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        let sp = g.softplus(z).unwrap();
        assert!((g.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let a = g.constant(v(&[1.0, 2.0]));
        let b = g.constant(v(&[3.0]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(v(&[3.0]));
        let y = g.square(x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().data(), &[6.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param(v(&[0.0]));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().data(), &[0.25]);

        let mut g = Graph::<f64>::new();
        let a = g.param(v(&[1.0, 2.0]));
        let b = g.constant(v(&[3.0, 4.0]));
        let p = g.mul(a, b).unwrap();
        let s = g.reduce_sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(v(&[1.0, 2.0]));
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(GraphError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_and_index_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        match g.matmul(a, b) {
            Err(GraphError::Shape { op, dims }) => {
                assert_eq!(op, "matmul");
                assert_eq!(dims, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        match g.gather_rows(a, vec![0, 2]) {
            Err(GraphError::GatherIndex { index, rows }) => assert_eq!((index, rows), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
        let neg = g.constant(v(&[1.0, -1.0]));
        assert!(matches!(g.log(neg), Err(GraphError::Domain { .. })));
    }

    #[test]
    fn bias_broadcast() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = g.param(v(&[10., 20.]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11., 22., 13., 24.]);
        let s = g.reduce_sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2., 2.]);
        // Leading-dim broadcast only.
        let c = g.constant(v(&[1.0]));
        assert!(g.add(x, c).is_err());
    }

    #[test]
    fn relu_kink_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(v(&[0.0, 1.0, -1.0]));
        let y = g.relu(x).unwrap();
        let s = g.reduce_sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut g = Graph::<f64>::new();
        let t = g.param(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let rows = g.gather_rows(t, vec![1, 1, 0]).unwrap();
        let w = g.constant(Tensor::matrix(3, 2, vec![1., 2., 10., 20., 100., 200.]).unwrap());
        let p = g.mul(rows, w).unwrap();
        let s = g.reduce_sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(t).unwrap().data(), &[100., 200., 11., 22., 0., 0.]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(v(&[2.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.reduce_sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn fault_injection_perturbs_adjoint() {
        let mut g = Graph::<f64>::new();
        let x = g.param(v(&[3.0]));
        let y = g.square(x).unwrap();
        g.inject_adjoint_fault(PrimKind::Square, 1e-2);
        let d = g.backward(y).unwrap().get(x).unwrap().data()[0];
        assert!((d - 6.01).abs() < 1e-12);
    }
}
