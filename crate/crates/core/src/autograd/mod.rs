//! Reverse-mode automatic differentiation over a static computation graph.
//!
//! A [`Graph`] is built once from leaves (named inputs and parameters) and
//! primitive operations, then evaluated any number of times against a set
//! of [`Bindings`]. Nodes are appended in construction order, which is
//! therefore a valid topological order for both passes:
//!
//! 1. [`Graph::forward`] resolves every leaf by name, checks shapes and
//!    caches each intermediate value.
//! 2. [`Graph::backward`] (scalar output) or [`Graph::backward_with`]
//!    (arbitrary upstream gradient) walks the nodes in reverse and returns
//!    the gradient of every differentiable leaf reachable from the output.
//!
//! ```
//! use splitnet::autograd::Graph;
//! use splitnet::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.input("x", &[1, 1]);
//! let w = g.param("w", &[1, 1]);
//! let y = g.matmul(x, w);
//! g.set_output(y);
//!
//! let feed = vec![
//!     ("x".to_string(), Tensor::from_f64(vec![1, 1], &[2.0]).unwrap()),
//!     ("w".to_string(), Tensor::from_f64(vec![1, 1], &[3.0]).unwrap()),
//! ];
//! assert_eq!(g.forward(&feed).unwrap().item(), 6.0);
//! let grads = g.backward().unwrap();
//! assert_eq!(grads.get("w").unwrap().item(), 2.0);
//! assert_eq!(grads.get("x").unwrap().item(), 3.0);
//! ```

mod gradcheck;
mod kernels;

use std::collections::{BTreeMap, HashMap};

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};

use crate::error::{Error, Result};
use crate::quant::QuantizerSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Leaf shape declaration.
#[derive(Debug, Clone, PartialEq)]
pub enum LeafShape {
    /// Exactly this shape.
    Fixed(Vec<usize>),
    /// Any leading batch size followed by this per-sample shape.
    Batched(Vec<usize>),
}

impl LeafShape {
    fn accepts(&self, shape: &[usize]) -> bool {
        match self {
            LeafShape::Fixed(s) => s.as_slice() == shape,
            LeafShape::Batched(s) => !shape.is_empty() && &shape[1..] == s.as_slice(),
        }
    }
}

/// Primitive operations. Shapes use a leading batch axis where relevant.
#[derive(Debug, Clone)]
pub enum Op<T> {
    Input { name: String, shape: LeafShape, differentiable: bool },
    Param { name: String, shape: Vec<usize> },
    /// `[m,k] x [k,n]`, or `[m,k] x [n,k]^T` when `transpose_rhs`.
    MatMul { transpose_rhs: bool },
    /// `x[..., n] + b[n]`.
    AddBias,
    Add,
    Sub,
    Mul,
    Scale(T),
    Sigmoid,
    Tanh,
    Relu,
    /// Same-padded stride-1 convolution, `[m,H,W,Ci]` with kernel `[kh,kw,Ci,Co]`.
    Conv2d,
    /// 2x2 max pooling with stride 2 over `[m,H,W,C]`.
    MaxPool2,
    /// Keeps the leading axis, merges the rest.
    Flatten,
    Reshape(Vec<usize>),
    /// Concatenation of `[m, a_i]` along axis 1.
    Concat,
    SliceCols { start: usize, len: usize },
    /// Time step `t` of a `[m, T, D]` sequence.
    Step(usize),
    /// Stacks `[m, D]` tensors into `[m, T, D]`.
    Stack,
    /// LSTM cell on gate pre-activations `[m, 4H]` (order i, f, g, o) and an
    /// optional previous cell state `[m, H]`; yields `[m, 2H]` = `h ‖ c`.
    LstmCell,
    Sum,
    SumSquares,
    /// Row-wise softmax.
    Softmax,
    /// Mean categorical cross-entropy of logits `[m,K]` against labels `[m]`.
    SoftmaxCrossEntropy,
    /// Uniform quantizer; with `straight_through` the backward pass treats
    /// it as a clipped identity, otherwise it blocks differentiation.
    Quantize { spec: QuantizerSpec, straight_through: bool },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::MatMul { .. } => "matmul",
            Op::AddBias => "add_bias",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Conv2d => "conv2d",
            Op::MaxPool2 => "max_pool2",
            Op::Flatten => "flatten",
            Op::Reshape(_) => "reshape",
            Op::Concat => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Step(_) => "step",
            Op::Stack => "stack",
            Op::LstmCell => "lstm_cell",
            Op::Sum => "sum",
            Op::SumSquares => "sum_squares",
            Op::Softmax => "softmax",
            Op::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Op::Quantize { .. } => "quantize",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    requires_grad: bool,
}

/// Per-node data saved by the forward pass for use in backward.
#[derive(Debug, Clone, Default)]
enum Saved<T> {
    #[default]
    None,
    Im2col(Vec<T>),
    Argmax(Vec<usize>),
    /// LSTM `[i, f, g, o, tanh(c)]` per batch row and unit.
    Gates(Vec<T>),
}

/// Name lookup for leaf values.
pub trait Bindings<T> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>>;
}

impl<T> Bindings<T> for HashMap<String, Tensor<T>> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

impl<T> Bindings<T> for BTreeMap<String, Tensor<T>> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

impl<T> Bindings<T> for [(String, Tensor<T>)] {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

impl<T> Bindings<T> for Vec<(String, Tensor<T>)> {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.as_slice().lookup(name)
    }
}

impl<T, B: Bindings<T> + ?Sized> Bindings<T> for &B {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        (**self).lookup(name)
    }
}

/// Looks in the first binding set, then the second.
impl<T, A: Bindings<T>, B: Bindings<T>> Bindings<T> for (A, B) {
    fn lookup(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
}

/// Gradients of differentiable leaves, keyed by leaf name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }

    pub fn all_finite(&self) -> bool {
        self.by_name.values().all(Tensor::is_finite)
    }
}

/// Static computation graph with cached forward values.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    values: Vec<Option<Tensor<T>>>,
    saved: Vec<Saved<T>>,
    grads: Vec<Option<Tensor<T>>>,
    output: Option<NodeId>,
    evaluated: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            saved: Vec::new(),
            grads: Vec::new(),
            output: None,
            evaluated: false,
        }
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>) -> NodeId {
        for i in &inputs {
            assert!(i.0 < self.nodes.len(), "node {} does not belong to this graph", i.0);
        }
        let requires_grad = match &op {
            Op::Param { .. } => true,
            Op::Input { differentiable, .. } => *differentiable,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { op, inputs, requires_grad });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input of exactly `shape`.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(
            Op::Input { name: name.into(), shape: LeafShape::Fixed(shape.to_vec()), differentiable: true },
            vec![],
        )
    }

    /// Differentiable input with a free leading batch axis.
    pub fn batch_input(&mut self, name: &str, sample_shape: &[usize]) -> NodeId {
        self.push(
            Op::Input {
                name: name.into(),
                shape: LeafShape::Batched(sample_shape.to_vec()),
                differentiable: true,
            },
            vec![],
        )
    }

    /// Non-differentiable batched input (raw features, labels).
    pub fn data_input(&mut self, name: &str, sample_shape: &[usize]) -> NodeId {
        self.push(
            Op::Input {
                name: name.into(),
                shape: LeafShape::Batched(sample_shape.to_vec()),
                differentiable: false,
            },
            vec![],
        )
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Param { name: name.into(), shape: shape.to_vec() }, vec![])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { transpose_rhs: false }, vec![a, b])
    }

    /// `a · bᵀ`, the layout of a weight matrix stored as `[out, in]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { transpose_rhs: true }, vec![a, b])
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias, vec![x, bias])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        self.push(Op::Scale(factor), vec![x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid, vec![x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh, vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x])
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId) -> NodeId {
        self.push(Op::Conv2d, vec![x, kernel])
    }

    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MaxPool2, vec![x])
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten, vec![x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(shape.to_vec()), vec![x])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        self.push(Op::Concat, parts.to_vec())
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols { start, len }, vec![x])
    }

    pub fn step(&mut self, seq: NodeId, t: usize) -> NodeId {
        self.push(Op::Step(t), vec![seq])
    }

    pub fn stack(&mut self, steps: &[NodeId]) -> NodeId {
        assert!(!steps.is_empty(), "stack of nothing");
        self.push(Op::Stack, steps.to_vec())
    }

    pub fn lstm_cell(&mut self, gates: NodeId, prev_cell: Option<NodeId>) -> NodeId {
        let mut inputs = vec![gates];
        inputs.extend(prev_cell);
        self.push(Op::LstmCell, inputs)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x])
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumSquares, vec![x])
    }

    pub fn softmax(&mut self, logits: NodeId) -> NodeId {
        self.push(Op::Softmax, vec![logits])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy, vec![logits, labels])
    }

    pub fn quantize(&mut self, x: NodeId, spec: QuantizerSpec, straight_through: bool) -> NodeId {
        self.push(Op::Quantize { spec, straight_through }, vec![x])
    }

    pub fn set_output(&mut self, node: NodeId) {
        assert!(node.0 < self.nodes.len());
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, node: NodeId) -> &Op<T> {
        &self.nodes[node.0].op
    }

    pub fn inputs_of(&self, node: NodeId) -> &[NodeId] {
        &self.nodes[node.0].inputs
    }

    /// Declared parameters in construction order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Param { name, shape } => Some((name.as_str(), shape.as_slice())),
            _ => None,
        })
    }

    /// Parameter node handles in construction order.
    pub fn param_nodes(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Param { .. }))
            .map(NodeId)
            .collect()
    }

    /// Names of every leaf (inputs and parameters).
    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Param { name, .. } | Op::Input { name, .. } => Some(name.as_str()),
            _ => None,
        })
    }

    /// Hard quantizers (no surrogate) among the ancestors of the output.
    pub fn hard_quantizers(&self) -> Vec<NodeId> {
        let live = self.ancestors();
        self.nodes
            .iter()
            .enumerate()
            .filter(|(i, n)| live[*i] && matches!(n.op, Op::Quantize { straight_through: false, .. }))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn ancestors(&self) -> Vec<bool> {
        let mut live = vec![false; self.nodes.len()];
        if let Some(out) = self.output {
            live[out.0] = true;
            for i in (0..self.nodes.len()).rev() {
                if live[i] {
                    for inp in &self.nodes[i].inputs {
                        live[inp.0] = true;
                    }
                }
            }
        }
        live
    }

    pub fn value(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.values.get(node.0).and_then(Option::as_ref)
    }

    /// Gradient accumulated at `node` by the last backward pass.
    pub fn grad(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    /// Evaluates every node up to the output and returns the output value.
    pub fn forward<B: Bindings<T> + ?Sized>(&mut self, bindings: &B) -> Result<&Tensor<T>> {
        let out = self.output.ok_or_else(|| Error::Invalid("graph has no output".into()))?;
        self.evaluated = false;
        self.grads.clear();
        self.values.clear();
        self.saved.clear();
        self.values.resize(self.nodes.len(), None);
        self.saved.resize(self.nodes.len(), Saved::None);
        let live = self.ancestors();
        for (i, _) in live.iter().enumerate().filter(|(_, &l)| l) {
            let (value, saved) = self.eval_node(i, bindings)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("node {i} ({})", self.nodes[i].op.name())));
            }
            self.values[i] = Some(value);
            self.saved[i] = saved;
        }
        self.evaluated = true;
        Ok(self.values[out.0].as_ref().expect("output evaluated"))
    }

    fn eval_node<B: Bindings<T> + ?Sized>(&self, i: usize, bindings: &B) -> Result<(Tensor<T>, Saved<T>)> {
        let node = &self.nodes[i];
        let shape_err = |detail: String| Error::NodeShape { node: i, op: node.op.name(), detail };
        match &node.op {
            Op::Input { name, shape, .. } => {
                let t = bindings.lookup(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                if !shape.accepts(t.shape()) {
                    return Err(shape_err(format!(
                        "input `{name}` declared {shape:?}, bound {:?}",
                        t.shape()
                    )));
                }
                Ok((t.clone(), Saved::None))
            }
            Op::Param { name, shape } => {
                let t = bindings.lookup(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(shape_err(format!(
                        "parameter `{name}` declared {shape:?}, bound {:?}",
                        t.shape()
                    )));
                }
                Ok((t.clone(), Saved::None))
            }
            op => {
                let args: Vec<&Tensor<T>> = node
                    .inputs
                    .iter()
                    .map(|id| self.values[id.0].as_ref().expect("inputs precede node"))
                    .collect();
                kernels::forward(op, &args).map_err(shape_err)
            }
        }
    }

    /// Backward pass from a scalar output.
    pub fn backward(&mut self) -> Result<Gradients<T>> {
        let out = self.output.ok_or_else(|| Error::Invalid("graph has no output".into()))?;
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let value = self.values[out.0].as_ref().expect("evaluated");
        if value.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward() needs a scalar output, got shape {:?}; use backward_with",
                value.shape()
            )));
        }
        let seed = Tensor::full(value.shape().to_vec(), T::one());
        self.backward_with(seed)
    }

    /// Vector-Jacobian product: propagates `upstream` (shaped like the output).
    pub fn backward_with(&mut self, upstream: Tensor<T>) -> Result<Gradients<T>> {
        let out = self.output.ok_or_else(|| Error::Invalid("graph has no output".into()))?;
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let out_shape = self.values[out.0].as_ref().expect("evaluated").shape();
        if upstream.shape() != out_shape {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.shape(),
                out_shape
            )));
        }
        let live = self.ancestors();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(upstream);
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !live[i] || !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Quantize { straight_through: false, .. } = node.op {
                return Err(Error::NotDifferentiable(format!(
                    "node {i} is a hard quantizer; enable the straight-through surrogate to train through it"
                )));
            }
            if let Op::Step(t) = node.op {
                // Scatter into the sequence gradient instead of a dense [m,T,D] per step.
                let src = node.inputs[0];
                if self.nodes[src.0].requires_grad {
                    let shape = self.values[src.0].as_ref().expect("evaluated").shape().to_vec();
                    let (steps, d) = (shape[1], shape[2]);
                    let acc = grads[src.0].get_or_insert_with(|| Tensor::zeros(shape));
                    let acc = acc.data_mut();
                    for (b, row) in g.data().chunks_exact(d).enumerate() {
                        let base = (b * steps + t) * d;
                        for (a, v) in acc[base..base + d].iter_mut().zip(row) {
                            *a += *v;
                        }
                    }
                }
                grads[i] = Some(g);
                continue;
            }
            let args: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|id| self.values[id.0].as_ref().expect("evaluated"))
                .collect();
            let wanted: Vec<bool> = node.inputs.iter().map(|id| self.nodes[id.0].requires_grad).collect();
            let out_value = self.values[i].as_ref().expect("evaluated");
            let input_grads = kernels::backward(&node.op, &args, out_value, &self.saved[i], &g, &wanted);
            for (slot, (id, ig)) in node.inputs.iter().zip(input_grads).enumerate() {
                let Some(ig) = ig else { continue };
                debug_assert!(wanted[slot]);
                match &mut grads[id.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += *b;
                        }
                    }
                    empty => *empty = Some(ig),
                }
            }
            grads[i] = Some(g);
        }

        let mut by_name = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !live[i] || !node.requires_grad {
                continue;
            }
            if let Op::Param { name, .. } | Op::Input { name, .. } = &node.op {
                let g = grads[i].clone().unwrap_or_else(|| {
                    Tensor::zeros(self.values[i].as_ref().expect("evaluated").shape().to_vec())
                });
                by_name.insert(name.clone(), g);
            }
        }
        self.grads = grads;
        Ok(Gradients { by_name })
    }
}

#[cfg(test)]
mod tests;
