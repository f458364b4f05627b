use std::cell::RefCell;
use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::GraphError;

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of an operation defined outside the tape.
///
/// `vjp` receives the forward input values, the cached output and the output
/// cotangent, and returns one cotangent per input (same shapes as the inputs).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Result<Vec<Tensor>, GraphError>;
}

enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Relu(NodeId),
    Elu(NodeId),
    Recip(NodeId),
    Clamp(NodeId, f64, f64),
    Minimum(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize, usize),
    Element(NodeId, usize),
    Transpose(NodeId),
    Reshape(NodeId),
    Custom(Vec<NodeId>, Box<dyn CustomOp>),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf | Constant => Vec::new(),
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | MulScalar(a, b) | Minimum(a, b) => vec![*a, *b],
            Scale(a, _) | Offset(a) | Tanh(a) | Exp(a) | Square(a) | Relu(a) | Elu(a)
            | Recip(a) | Clamp(a, _, _) | Sum(a) | Mean(a) | Slice(a, _, _, _)
            | Element(a, _) | Transpose(a) | Reshape(a) => vec![*a],
            Concat(xs, _) | Custom(xs, _) => xs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in evaluation order, so every node's inputs have smaller
/// ids. A tape is built per forward pass and dropped afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, NodeId)>>,
}

/// Result of [`Tape::backward`]: gradients of the root with respect to every leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    leaf_shapes: HashMap<usize, Vec<usize>>,
    params: Vec<(String, NodeId)>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zeros if the root does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.leaf_shapes.get(&id.0).map_or(&[][..], |s| s)),
        }
    }

    pub fn by_name(&self, name: &str) -> Option<Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| self.wrt(*id))
    }

    /// Named parameter gradients in registration order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(n, id)| (n.clone(), self.wrt(*id)))
            .collect()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> GraphError {
    GraphError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), GraphError> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a, b));
    }
    Ok(())
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

    pub fn value(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes.borrow()[id.0].value.data()[0]
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    fn push(&self, op: Op, value: Tensor) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            ref other => other.inputs().iter().any(|i| nodes[i.0].requires_grad),
        };
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(nodes.len() - 1)
    }

    fn unary(&self, a: NodeId, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> NodeId {
        let v = f(&self.nodes.borrow()[a.0].value);
        self.push(op, v)
    }

    /// Named trainable leaf. Registration order defines the flattening order of
    /// [`Gradients::named`].
    pub fn param(&self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.params.borrow_mut().push((name.to_string(), id));
        id
    }

    /// Unnamed differentiable leaf (inputs under test, states).
    pub fn input(&self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&self, a: NodeId) -> NodeId {
        let v = self.value(a);
        self.constant(v)
    }

    pub fn param_ids(&self) -> Vec<(String, NodeId)> {
        self.params.borrow().clone()
    }

    pub fn matmul(&self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let v = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        Ok(self.push(Op::MatMul(a, b), v))
    }

    fn binary(
        &self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, GraphError> {
        let v = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape(name, x, y)?;
            x.zip_map(y, f)
        };
        Ok(self.push(op, v))
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// Matrix plus row vector broadcast over rows.
    pub fn add_row(&self, m: NodeId, row: NodeId) -> Result<NodeId, GraphError> {
        let v = {
            let nodes = self.nodes.borrow();
            let (x, r) = (&nodes[m.0].value, &nodes[row.0].value);
            let (rows, cols) = x.dims2();
            if x.rank() != 2 || r.len() != cols {
                return Err(mismatch("add_row", x, r));
            }
            let mut out = x.clone();
            for i in 0..rows {
                for j in 0..cols {
                    out.data_mut()[i * cols + j] += r.data()[j];
                }
            }
            out
        };
        Ok(self.push(Op::AddRow(m, row), v))
    }

    /// Tensor times a scalar node.
    pub fn mul_scalar(&self, a: NodeId, s: NodeId) -> Result<NodeId, GraphError> {
        let v = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[s.0].value);
            if y.len() != 1 {
                return Err(mismatch("mul_scalar", x, y));
            }
            x.scaled(y.item())
        };
        Ok(self.push(Op::MulScalar(a, s), v))
    }

    pub fn scale(&self, a: NodeId, factor: f64) -> NodeId {
        self.unary(a, |x| x.scaled(factor), Op::Scale(a, factor))
    }

    /// Adds a constant tensor of the same shape (gradient passes through).
    pub fn offset(&self, a: NodeId, shift: &Tensor) -> Result<NodeId, GraphError> {
        let v = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            same_shape("offset", x, shift)?;
            x.zip_map(shift, |p, q| p + q)
        };
        Ok(self.push(Op::Offset(a), v))
    }

    pub fn add_const(&self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x.map(|v| v + c), Op::Offset(a))
    }

    pub fn tanh(&self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.map(f64::tanh), Op::Tanh(a))
    }

    pub fn exp(&self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.map(f64::exp), Op::Exp(a))
    }

    pub fn square(&self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.map(|v| v * v), Op::Square(a))
    }

    /// max(x, 0); subgradient 0 at the kink.
    pub fn relu(&self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.map(|v| v.max(0.0)), Op::Relu(a))
    }

    pub fn elu(&self, a: NodeId) -> NodeId {
        self.unary(
            a,
            |x| x.map(|v| if v > 0.0 { v } else { v.exp() - 1.0 }),
            Op::Elu(a),
        )
    }

    pub fn recip(&self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.map(|v| 1.0 / v), Op::Recip(a))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, |x| x.map(|v| v.clamp(lo, hi)), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&self, a: NodeId) -> NodeId {
        self.unary(a, |x| Tensor::scalar(x.sum()), Op::Sum(a))
    }

    pub fn mean(&self, a: NodeId) -> NodeId {
        self.unary(
            a,
            |x| Tensor::scalar(x.sum() / x.len().max(1) as f64),
            Op::Mean(a),
        )
    }

    pub fn transpose(&self, a: NodeId) -> NodeId {
        self.unary(a, Tensor::transpose, Op::Transpose(a))
    }

    pub fn reshape(&self, a: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        let v = self.value(a).reshaped(shape.to_vec())?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Single element (flat row-major index) as a scalar node.
    pub fn element(&self, a: NodeId, index: usize) -> Result<NodeId, GraphError> {
        let v = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            match x.data().get(index) {
                Some(&v) => Tensor::scalar(v),
                None => {
                    return Err(GraphError::ShapeMismatch {
                        op: "element",
                        lhs: x.shape().to_vec(),
                        rhs: vec![index],
                    })
                }
            }
        };
        Ok(self.push(Op::Element(a, index), v))
    }

    /// Concatenation along `axis`. Axis 0 joins scalars/vectors into a vector or
    /// stacks matrix rows; axis 1 joins matrix columns.
    pub fn concat(&self, parts: &[NodeId], axis: usize) -> Result<NodeId, GraphError> {
        let v = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.0].value).collect();
            concat_values(&vals, axis)?
        };
        Ok(self.push(Op::Concat(parts.to_vec(), axis), v))
    }

    /// Half-open range `[start, end)` along `axis` (0 = vector entries or matrix rows,
    /// 1 = matrix columns).
    pub fn slice(
        &self,
        a: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId, GraphError> {
        let v = {
            let nodes = self.nodes.borrow();
            slice_value(&nodes[a.0].value, axis, start, end)?
        };
        Ok(self.push(Op::Slice(a, axis, start, end), v))
    }

    /// Records an externally computed operation with its own VJP.
    pub fn custom(&self, inputs: &[NodeId], output: Tensor, op: Box<dyn CustomOp>) -> NodeId {
        self.push(Op::Custom(inputs.to_vec(), op), output)
    }

    /// Whether `root` is computed from `node` through a differentiable path.
    pub fn reaches(&self, root: NodeId, node: NodeId) -> bool {
        let nodes = self.nodes.borrow();
        if node.0 > root.0 || !nodes[node.0].requires_grad {
            return false;
        }
        let mut live = vec![false; root.0 + 1];
        live[root.0] = true;
        for k in (node.0 + 1..=root.0).rev() {
            if live[k] && nodes[k].requires_grad {
                for i in nodes[k].op.inputs() {
                    live[i.0] = true;
                }
            }
        }
        live[node.0]
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, GraphError> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(GraphError::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(root_val.shape(), 1.0));

        for k in (0..=root.0).rev() {
            let node = &nodes[k];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[k].take() else { continue };
            let contributions = vjp(&nodes, node, &g)?;
            for (input, cot) in contributions {
                if !nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&cot),
                    slot => *slot = Some(cot),
                }
            }
        }

        let mut leaf_shapes = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) {
                leaf_shapes.insert(i, n.value.shape().to_vec());
            }
        }
        Ok(Gradients {
            grads,
            leaf_shapes,
            params: self.params.borrow().clone(),
        })
    }
}

fn concat_values(vals: &[&Tensor], axis: usize) -> Result<Tensor, GraphError> {
    let first = vals.first().ok_or(GraphError::ShapeMismatch {
        op: "concat",
        lhs: vec![],
        rhs: vec![],
    })?;
    match axis {
        0 if vals.iter().all(|v| v.rank() <= 1) => {
            let data: Vec<f64> = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
            Ok(Tensor::vector(data))
        }
        0 => {
            let cols = first.dims2().1;
            let mut data = Vec::new();
            let mut rows = 0;
            for v in vals {
                if v.rank() != 2 || v.dims2().1 != cols {
                    return Err(mismatch("concat", first, v));
                }
                rows += v.dims2().0;
                data.extend_from_slice(v.data());
            }
            Ok(Tensor::matrix(rows, cols, data))
        }
        1 => {
            let rows = first.dims2().0;
            let mut cols = 0;
            for v in vals {
                if v.rank() != 2 || v.dims2().0 != rows {
                    return Err(mismatch("concat", first, v));
                }
                cols += v.dims2().1;
            }
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for v in vals {
                    let c = v.dims2().1;
                    data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
                }
            }
            Ok(Tensor::matrix(rows, cols, data))
        }
        _ => Err(mismatch("concat", first, first)),
    }
}

fn slice_value(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor, GraphError> {
    let bad = || GraphError::ShapeMismatch {
        op: "slice",
        lhs: x.shape().to_vec(),
        rhs: vec![axis, start, end],
    };
    if start > end {
        return Err(bad());
    }
    match (x.rank(), axis) {
        (1, 0) => {
            if end > x.len() {
                return Err(bad());
            }
            Ok(Tensor::vector(x.data()[start..end].to_vec()))
        }
        (2, 0) => {
            let (rows, cols) = x.dims2();
            if end > rows {
                return Err(bad());
            }
            Ok(Tensor::matrix(
                end - start,
                cols,
                x.data()[start * cols..end * cols].to_vec(),
            ))
        }
        (2, 1) => {
            let (rows, cols) = x.dims2();
            if end > cols {
                return Err(bad());
            }
            let mut data = Vec::with_capacity(rows * (end - start));
            for i in 0..rows {
                data.extend_from_slice(&x.data()[i * cols + start..i * cols + end]);
            }
            Ok(Tensor::matrix(rows, end - start, data))
        }
        _ => Err(bad()),
    }
}

fn vjp(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>, GraphError> {
    let val = |id: NodeId| &nodes[id.0].value;
    let out = &node.value;
    Ok(match &node.op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::MatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            // Vectors act as single columns.
            let (m, _) = x.dims2();
            let (_, n) = y.dims2();
            let g2 = g.clone().reshaped(vec![m, n])?;
            let y2 = y.clone().reshaped(vec![y.dims2().0, n])?;
            let ga = g2.matmul(&y2.transpose())?;
            let gb = x.transpose().matmul(&g2)?.reshaped(y.shape().to_vec())?;
            vec![(*a, ga), (*b, gb)]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scaled(-1.0))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), |p, q| p * q)),
            (*b, g.zip_map(val(*a), |p, q| p * q)),
        ],
        Op::Minimum(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let mut ga = g.clone();
            let mut gb = g.clone();
            for i in 0..g.len() {
                if x.data()[i] <= y.data()[i] {
                    gb.data_mut()[i] = 0.0;
                } else {
                    ga.data_mut()[i] = 0.0;
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::AddRow(m, r) => {
            let (rows, cols) = g.dims2();
            let mut gr = vec![0.0; cols];
            for i in 0..rows {
                for j in 0..cols {
                    gr[j] += g.data()[i * cols + j];
                }
            }
            let gr = Tensor::new(val(*r).shape().to_vec(), gr)?;
            vec![(*m, g.clone()), (*r, gr)]
        }
        Op::MulScalar(a, s) => {
            let sv = val(*s).item();
            let gs = Tensor::new(val(*s).shape().to_vec(), vec![g.dot(val(*a))])?;
            vec![(*a, g.scaled(sv)), (*s, gs)]
        }
        Op::Scale(a, f) => vec![(*a, g.scaled(*f))],
        Op::Offset(a) => vec![(*a, g.clone())],
        Op::Tanh(a) => vec![(*a, g.zip_map(out, |p, y| p * (1.0 - y * y)))],
        Op::Exp(a) => vec![(*a, g.zip_map(out, |p, y| p * y))],
        Op::Square(a) => vec![(*a, g.zip_map(val(*a), |p, x| 2.0 * p * x))],
        Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |p, x| if x > 0.0 { p } else { 0.0 }))],
        Op::Elu(a) => vec![(
            *a,
            g.zip_map(val(*a), |p, x| if x > 0.0 { p } else { p * x.exp() }),
        )],
        Op::Recip(a) => vec![(*a, g.zip_map(out, |p, y| -p * y * y))],
        Op::Clamp(a, lo, hi) => vec![(
            *a,
            g.zip_map(val(*a), |p, x| if x > *lo && x < *hi { p } else { 0.0 }),
        )],
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let x = val(*a);
            vec![(*a, Tensor::full(x.shape(), g.item() / x.len().max(1) as f64))]
        }
        Op::Concat(parts, axis) => {
            let mut res = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for p in parts {
                let pv = val(*p);
                let extent = if *axis == 0 {
                    if pv.rank() <= 1 {
                        pv.len()
                    } else {
                        pv.dims2().0
                    }
                } else {
                    pv.dims2().1
                };
                let piece = slice_value(g, *axis, offset, offset + extent)?;
                res.push((*p, piece.reshaped(pv.shape().to_vec())?));
                offset += extent;
            }
            res
        }
        Op::Slice(a, axis, start, end) => {
            let x = val(*a);
            let mut ga = Tensor::zeros(x.shape());
            match (x.rank(), axis) {
                (1, 0) => ga.data_mut()[*start..*end].copy_from_slice(g.data()),
                (2, 0) => {
                    let cols = x.dims2().1;
                    ga.data_mut()[start * cols..end * cols].copy_from_slice(g.data());
                }
                _ => {
                    let (rows, cols) = x.dims2();
                    let w = end - start;
                    for i in 0..rows {
                        ga.data_mut()[i * cols + start..i * cols + end]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                }
            }
            vec![(*a, ga)]
        }
        Op::Element(a, index) => {
            let mut ga = Tensor::zeros(val(*a).shape());
            ga.data_mut()[*index] = g.item();
            vec![(*a, ga)]
        }
        Op::Transpose(a) => vec![(*a, g.transpose())],
        Op::Reshape(a) => vec![(*a, g.clone().reshaped(val(*a).shape().to_vec())?)],
        Op::Custom(inputs, op) => {
            let vals: Vec<&Tensor> = inputs.iter().map(|i| val(*i)).collect();
            let cots = op.vjp(&vals, out, g)?;
            if cots.len() != inputs.len() {
                return Err(GraphError::Custom {
                    op: op.name(),
                    msg: format!("returned {} cotangents for {} inputs", cots.len(), inputs.len()),
                });
            }
            inputs.iter().copied().zip(cots).collect()
        }
    })
}
