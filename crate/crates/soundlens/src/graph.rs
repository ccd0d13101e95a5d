//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once from a fixed primitive set, then evaluated many
//! times against different leaf bindings. Shapes are inferred and checked at
//! build time, so a graph that builds cannot fail on shape grounds later.
//! `forward` retains every intermediate value; `backward` walks the node list
//! in reverse and produces one gradient per trainable parameter and per
//! differentiable input leaf.
//!
//! Design constraints worth knowing:
//! - everything is `f64`;
//! - `log` and negative-exponent `pow` clamp their argument at
//!   [`LOG_GUARD`] so sparse maps never produce infinities;
//! - kinked primitives (`relu`, `abs`, `l2_norm` at zero) take subgradient 0
//!   at the kink;
//! - there is no broadcasting beyond [`GraphBuilder::scalar_scale`], which
//!   multiplies a tensor by a rank-0 node.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp floor used by the guarded `log` and negative-exponent `pow`.
pub const LOG_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum NodeKind {
    /// Leaf bound at forward time. `differentiable` controls whether
    /// backward reports a gradient for it.
    Input { name: String, differentiable: bool },
    /// Trainable leaf bound at forward time.
    Param { name: String },
    /// Value baked into the graph.
    Constant { value: Tensor },
    Op(Op),
}

#[derive(Debug, Clone)]
enum Op {
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Pow { x: NodeId, exponent: f64 },
    Abs(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Dense { weight: NodeId, x: NodeId },
    Conv2d {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    AvgPool { x: NodeId, window: usize, stride: usize },
    GlobalAvgPool(NodeId),
    ChannelMean(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Swish(NodeId),
    SoftmaxT { x: NodeId, temperature: f64 },
    Sum(NodeId),
    Mean(NodeId),
    L2Norm(NodeId),
    Reshape { x: NodeId, shape: Vec<usize> },
    ConcatChannels(Vec<NodeId>),
    ScalarScale { x: NodeId, scalar: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Pow { .. } => "pow",
            Op::Abs(..) => "abs",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool { .. } => "avg_pool",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::ChannelMean(..) => "channel_mean",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Swish(..) => "swish",
            Op::SoftmaxT { .. } => "softmax_t",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::L2Norm(..) => "l2_norm",
            Op::Reshape { .. } => "reshape",
            Op::ConcatChannels(..) => "concat_channels",
            Op::ScalarScale { .. } => "scalar_scale",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Pow { x, .. }
            | Op::Abs(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::AvgPool { x, .. }
            | Op::GlobalAvgPool(x)
            | Op::ChannelMean(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Swish(x)
            | Op::SoftmaxT { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::L2Norm(x)
            | Op::Reshape { x, .. } => vec![*x],
            Op::Dense { weight, x } => vec![*weight, *x],
            Op::Conv2d { x, weight, bias, .. } => {
                let mut v = vec![*x, *weight];
                if let Some(b) = bias {
                    v.push(*b);
                }
                v
            }
            Op::ConcatChannels(xs) => xs.clone(),
            Op::ScalarScale { x, scalar } => vec![*x, *scalar],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Incrementally assembles a [`Graph`]. Nodes are appended in construction
/// order, which doubles as the topological order.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    leaf_names: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, kind: NodeKind, shape: Vec<usize>) -> NodeId {
        let needs_grad = match &kind {
            NodeKind::Input { differentiable, .. } => *differentiable,
            NodeKind::Param { .. } => true,
            NodeKind::Constant { .. } => false,
            NodeKind::Op(op) => op
                .operands()
                .iter()
                .any(|id| self.nodes[id.0].needs_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            kind,
            shape,
            needs_grad,
        });
        id
    }

    fn register_leaf(&mut self, name: &str, id: NodeId) -> Result<()> {
        if self.leaf_names.contains_key(name) {
            return Err(Error::Graph(format!("duplicate leaf name {name:?}")));
        }
        self.leaf_names.insert(name.to_string(), id);
        Ok(())
    }

    /// Differentiable data leaf.
    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId> {
        let id = self.push(
            NodeKind::Input {
                name: name.to_string(),
                differentiable: true,
            },
            shape,
        );
        self.register_leaf(name, id)?;
        Ok(id)
    }

    /// Data leaf that backward treats as a constant (masks, targets,
    /// gradient-stopped teacher maps).
    pub fn input_no_grad(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId> {
        let id = self.push(
            NodeKind::Input {
                name: name.to_string(),
                differentiable: false,
            },
            shape,
        );
        self.register_leaf(name, id)?;
        Ok(id)
    }

    /// Trainable leaf.
    pub fn param(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId> {
        let id = self.push(
            NodeKind::Param {
                name: name.to_string(),
            },
            shape,
        );
        self.register_leaf(name, id)?;
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(NodeKind::Constant { value }, shape)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value).expect("finite scalar"))
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                context: what.to_string(),
                expected: self.nodes[a.0].shape.clone(),
                actual: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(NodeKind::Op(Op::Add(a, b)), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(NodeKind::Op(Op::Sub(a, b)), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(NodeKind::Op(Op::Mul(a, b)), shape))
    }

    /// Elementwise `x^exponent`. For negative exponents the base is clamped
    /// at [`LOG_GUARD`], mirroring the guarded log.
    pub fn pow(&mut self, x: NodeId, exponent: f64) -> Result<NodeId> {
        if !exponent.is_finite() {
            return Err(Error::invalid("pow exponent must be finite"));
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(NodeKind::Op(Op::Pow { x, exponent }), shape))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(NodeKind::Op(Op::Abs(x)), shape)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(NodeKind::Op(Op::Exp(x)), shape)
    }

    /// `ln(max(x, LOG_GUARD))`.
    pub fn log(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(NodeKind::Op(Op::Log(x)), shape)
    }

    /// `weight[m,k] . x[k] -> [m]` or `weight[m,k] . x[k,n] -> [m,n]`.
    pub fn dense(&mut self, weight: NodeId, x: NodeId) -> Result<NodeId> {
        let ws = &self.nodes[weight.0].shape;
        let xs = &self.nodes[x.0].shape;
        if ws.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "dense weight".into(),
                expected: vec![0, 0],
                actual: ws.clone(),
            });
        }
        let out = match xs.len() {
            1 if xs[0] == ws[1] => vec![ws[0]],
            2 if xs[0] == ws[1] => vec![ws[0], xs[1]],
            _ => {
                return Err(Error::ShapeMismatch {
                    context: "dense operand".into(),
                    expected: vec![ws[1]],
                    actual: xs.clone(),
                })
            }
        };
        Ok(self.push(NodeKind::Op(Op::Dense { weight, x }), out))
    }

    /// 2-D convolution over `x[C,H,W]` with `weight[F,C,kh,kw]` and optional
    /// `bias[F]`, zero padding, stride 1 or 2.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        if stride != 1 && stride != 2 {
            return Err(Error::invalid(format!("conv2d stride {stride} not in {{1,2}}")));
        }
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[weight.0].shape.clone();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                context: "conv2d operands".into(),
                expected: xs,
                actual: ws,
            });
        }
        let (h, w) = (xs[1], xs[2]);
        let (kh, kw) = (ws[2], ws[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::invalid("conv2d kernel larger than padded input"));
        }
        if let Some(b) = bias {
            let bs = &self.nodes[b.0].shape;
            if bs.as_slice() != [ws[0]] {
                return Err(Error::ShapeMismatch {
                    context: "conv2d bias".into(),
                    expected: vec![ws[0]],
                    actual: bs.clone(),
                });
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(self.push(
            NodeKind::Op(Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                padding,
            }),
            vec![ws[0], oh, ow],
        ))
    }

    pub fn avg_pool(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let xs = &self.nodes[x.0].shape;
        if xs.len() != 3 || window == 0 || stride == 0 || xs[1] < window || xs[2] < window {
            return Err(Error::invalid(format!(
                "avg_pool window {window} stride {stride} on shape {xs:?}"
            )));
        }
        let oh = (xs[1] - window) / stride + 1;
        let ow = (xs[2] - window) / stride + 1;
        let c = xs[0];
        Ok(self.push(NodeKind::Op(Op::AvgPool { x, window, stride }), vec![c, oh, ow]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = &self.nodes[x.0].shape;
        if xs.len() != 3 {
            return Err(Error::invalid(format!("global_avg_pool on shape {xs:?}")));
        }
        let c = xs[0];
        Ok(self.push(NodeKind::Op(Op::GlobalAvgPool(x)), vec![c]))
    }

    /// Mean over the channel axis: `[C,H,W] -> [H,W]`.
    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = &self.nodes[x.0].shape;
        if xs.len() != 3 {
            return Err(Error::invalid(format!("channel_mean on shape {xs:?}")));
        }
        let shape = vec![xs[1], xs[2]];
        Ok(self.push(NodeKind::Op(Op::ChannelMean(x)), shape))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(NodeKind::Op(Op::Relu(x)), shape)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(NodeKind::Op(Op::Sigmoid(x)), shape)
    }

    pub fn swish(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(NodeKind::Op(Op::Swish(x)), shape)
    }

    /// Softmax of `x / temperature` along the last axis.
    pub fn softmax_t(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        if !(temperature > 0.0) {
            return Err(Error::invalid("softmax temperature must be > 0"));
        }
        let xs = &self.nodes[x.0].shape;
        if xs.is_empty() {
            return Err(Error::invalid("softmax_t needs rank >= 1"));
        }
        let shape = xs.clone();
        Ok(self.push(NodeKind::Op(Op::SoftmaxT { x, temperature }), shape))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(NodeKind::Op(Op::Sum(x)), vec![])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(NodeKind::Op(Op::Mean(x)), vec![])
    }

    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        self.push(NodeKind::Op(Op::L2Norm(x)), vec![])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        let have: usize = self.nodes[x.0].shape.iter().product();
        if numel != have {
            return Err(Error::ShapeMismatch {
                context: "reshape".into(),
                expected: self.nodes[x.0].shape.clone(),
                actual: shape,
            });
        }
        Ok(self.push(NodeKind::Op(Op::Reshape { x, shape: shape.clone() }), shape))
    }

    /// Concatenate along axis 0. Trailing extents must agree.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let first = self.nodes[xs[0].0].shape.clone();
        if first.is_empty() {
            return Err(Error::invalid("concat needs rank >= 1"));
        }
        let mut axis0 = 0;
        for &x in xs {
            let s = &self.nodes[x.0].shape;
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::ShapeMismatch {
                    context: "concat_channels".into(),
                    expected: first.clone(),
                    actual: s.clone(),
                });
            }
            axis0 += s[0];
        }
        let mut shape = first;
        shape[0] = axis0;
        Ok(self.push(NodeKind::Op(Op::ConcatChannels(xs.to_vec())), shape))
    }

    /// Multiply every element of `x` by a rank-0 node. The one permitted
    /// broadcast.
    pub fn scalar_scale(&mut self, x: NodeId, scalar: NodeId) -> Result<NodeId> {
        if !self.nodes[scalar.0].shape.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "scalar_scale scalar".into(),
                expected: vec![],
                actual: self.nodes[scalar.0].shape.clone(),
            });
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(NodeKind::Op(Op::ScalarScale { x, scalar }), shape))
    }

    /// Convenience: multiply by a baked-in constant.
    pub fn scale_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let s = self.constant_scalar(c);
        self.scalar_scale(x, s)
    }

    /// Expose a node's value under `name` in every execution.
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    /// Node previously registered with [`mark_output`](Self::mark_output);
    /// lets callers keep composing on top of a prebuilt subgraph.
    pub fn output_node(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| Error::Graph(format!("unknown output `{name}`")))
    }

    /// Finish a forward-only graph.
    pub fn build(self) -> Graph {
        Graph {
            nodes: self.nodes,
            leaf_names: self.leaf_names,
            outputs: self.outputs,
            loss: None,
        }
    }

    /// Finish a trainable graph with `loss` as the designated scalar output.
    pub fn build_with_loss(mut self, loss: NodeId) -> Result<Graph> {
        if !self.nodes[loss.0].shape.is_empty() {
            return Err(Error::Graph(format!(
                "designated loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.outputs.entry("loss".to_string()).or_insert(loss);
        Ok(Graph {
            nodes: self.nodes,
            leaf_names: self.leaf_names,
            outputs: self.outputs,
            loss: Some(loss),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_names: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    loss: Option<NodeId>,
}

/// Leaf bindings for one forward pass.
pub type Bindings = BTreeMap<String, Tensor>;

impl Graph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn loss_node(&self) -> Option<NodeId> {
        self.loss
    }

    pub fn leaf_id(&self, name: &str) -> Result<NodeId> {
        self.leaf_names
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLeaf(name.to_string()))
    }

    /// Names of trainable leaves.
    pub fn param_names(&self) -> Vec<String> {
        self.leaf_names
            .iter()
            .filter(|(_, id)| matches!(self.nodes[id.0].kind, NodeKind::Param { .. }))
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn leaf_shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.nodes[self.leaf_id(name)?.0].shape)
    }

    /// Evaluate every node. Inputs are never mutated; intermediates are
    /// retained for `backward`.
    pub fn forward(&self, bindings: &Bindings) -> Result<Execution<'_>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = match &node.kind {
                NodeKind::Input { name, .. } | NodeKind::Param { name } => {
                    let t = bindings
                        .get(name)
                        .ok_or_else(|| Error::MissingBinding(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            context: format!("binding {name:?}"),
                            expected: node.shape.clone(),
                            actual: t.shape().to_vec(),
                        });
                    }
                    t.clone()
                }
                NodeKind::Constant { value } => value.clone(),
                NodeKind::Op(op) => {
                    let v = eval_op(op, &values);
                    if let Some(bad) = v.data().iter().position(|x| !x.is_finite()) {
                        return Err(Error::NonFinite(format!(
                            "node#{idx}:{} element {bad}",
                            op.name()
                        )));
                    }
                    v
                }
            };
            debug_assert_eq!(value.shape(), node.shape.as_slice());
            values.push(value);
        }
        Ok(Execution { graph: self, values })
    }
}

/// One forward pass: all node values, ready for output lookup or backward.
#[derive(Debug)]
pub struct Execution<'g> {
    graph: &'g Graph,
    values: Vec<Tensor>,
}

impl<'g> Execution<'g> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn output(&self, name: &str) -> Result<&Tensor> {
        let id = self
            .graph
            .outputs
            .get(name)
            .ok_or_else(|| Error::Graph(format!("no output named {name:?}")))?;
        Ok(&self.values[id.0])
    }

    pub fn loss(&self) -> Result<f64> {
        let id = self
            .graph
            .loss
            .ok_or_else(|| Error::Graph("graph has no designated loss output".into()))?;
        self.values[id.0].item()
    }

    /// Reverse sweep from the designated loss. Returns gradients keyed by
    /// leaf name, for every parameter and differentiable input. Repeated
    /// calls on the same execution give identical results.
    pub fn backward(&self) -> Result<Gradients> {
        let loss = self
            .graph
            .loss
            .ok_or_else(|| Error::Graph("backward on a graph with no designated loss".into()))?;

        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.graph.nodes.len()];
        adjoints[loss.0] = Some(Tensor::scalar(1.0)?);

        for idx in (0..self.graph.nodes.len()).rev() {
            let node = &self.graph.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            if let NodeKind::Op(op) = &node.kind {
                let contributions = eval_adjoint(op, &self.values, &self.values[idx], &grad);
                for (operand, contrib) in contributions {
                    if !self.graph.nodes[operand.0].needs_grad {
                        continue;
                    }
                    match &mut adjoints[operand.0] {
                        Some(acc) => accumulate(acc, &contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            } else {
                adjoints[idx] = Some(grad); // leaves keep their adjoint
            }
        }

        let mut by_name = BTreeMap::new();
        for (name, id) in &self.graph.leaf_names {
            let node = &self.graph.nodes[id.0];
            if !node.needs_grad {
                continue;
            }
            let g = adjoints[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(node.shape.clone()));
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients { by_name })
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }
}

fn accumulate(acc: &mut Tensor, contrib: &Tensor) {
    debug_assert_eq!(acc.shape(), contrib.shape());
    for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
        *a += c;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// forward kernels
// ---------------------------------------------------------------------------

fn eval_op(op: &Op, values: &[Tensor]) -> Tensor {
    let v = |id: NodeId| &values[id.0];
    match op {
        Op::Add(a, b) => zip_elementwise(v(*a), v(*b), |x, y| x + y),
        Op::Sub(a, b) => zip_elementwise(v(*a), v(*b), |x, y| x - y),
        Op::Mul(a, b) => zip_elementwise(v(*a), v(*b), |x, y| x * y),
        Op::Pow { x, exponent } => {
            let p = *exponent;
            if p < 0.0 {
                v(*x).map(|e| e.max(LOG_GUARD).powf(p))
            } else {
                v(*x).map(|e| e.powf(p))
            }
        }
        Op::Abs(x) => v(*x).map(f64::abs),
        Op::Exp(x) => v(*x).map(f64::exp),
        Op::Log(x) => v(*x).map(|e| e.max(LOG_GUARD).ln()),
        Op::Dense { weight, x } => dense_forward(v(*weight), v(*x)),
        Op::Conv2d {
            x,
            weight,
            bias,
            stride,
            padding,
        } => conv2d_forward(v(*x), v(*weight), bias.map(|b| &values[b.0]), *stride, *padding),
        Op::AvgPool { x, window, stride } => avg_pool_forward(v(*x), *window, *stride),
        Op::GlobalAvgPool(x) => {
            let t = v(*x);
            let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let hw = (h * w) as f64;
            let data = (0..c)
                .map(|ci| t.data()[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / hw)
                .collect();
            Tensor::from_parts(vec![c], data)
        }
        Op::ChannelMean(x) => {
            let t = v(*x);
            let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let mut data = vec![0.0; h * w];
            for ci in 0..c {
                let base = ci * h * w;
                for (i, d) in data.iter_mut().enumerate() {
                    *d += t.data()[base + i];
                }
            }
            let inv = 1.0 / c as f64;
            for d in &mut data {
                *d *= inv;
            }
            Tensor::from_parts(vec![h, w], data)
        }
        Op::Relu(x) => v(*x).map(|e| e.max(0.0)),
        Op::Sigmoid(x) => v(*x).map(sigmoid),
        Op::Swish(x) => v(*x).map(|e| e * sigmoid(e)),
        Op::SoftmaxT { x, temperature } => softmax_t_forward(v(*x), *temperature),
        Op::Sum(x) => Tensor::from_parts(vec![], vec![v(*x).data().iter().sum()]),
        Op::Mean(x) => {
            let t = v(*x);
            Tensor::from_parts(
                vec![],
                vec![t.data().iter().sum::<f64>() / t.numel() as f64],
            )
        }
        Op::L2Norm(x) => Tensor::from_parts(vec![], vec![v(*x).l2_norm()]),
        Op::Reshape { x, shape } => {
            Tensor::from_parts(shape.clone(), v(*x).data().to_vec())
        }
        Op::ConcatChannels(xs) => {
            let mut shape = values[xs[0].0].shape().to_vec();
            shape[0] = xs.iter().map(|x| values[x.0].shape()[0]).sum();
            let mut data = Vec::with_capacity(shape.iter().product());
            for x in xs {
                data.extend_from_slice(values[x.0].data());
            }
            Tensor::from_parts(shape, data)
        }
        Op::ScalarScale { x, scalar } => {
            let s = values[scalar.0].data()[0];
            v(*x).map(|e| e * s)
        }
    }
}

fn zip_elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn dense_forward(w: &Tensor, x: &Tensor) -> Tensor {
    let (m, k) = (w.shape()[0], w.shape()[1]);
    if x.rank() == 1 {
        let mut out = vec![0.0; m];
        for (i, slot) in out.iter_mut().enumerate() {
            let row = &w.data()[i * k..(i + 1) * k];
            *slot = row.iter().zip(x.data()).map(|(&a, &b)| a * b).sum();
        }
        Tensor::from_parts(vec![m], out)
    } else {
        let n = x.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let wv = w.data()[i * k + p];
                if wv == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += wv * x.data()[p * n + j];
                }
            }
        }
        Tensor::from_parts(vec![m, n], out)
    }
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; f * oh * ow];
    let xd = x.data();
    let wdat = w.data();
    for fi in 0..f {
        let b = bias.map_or(0.0, |t| t.data()[fi]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += xd[(ci * h + iy as usize) * wd + ix as usize]
                                * wdat[((fi * c + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(fi * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::from_parts(vec![f, oh, ow], out)
}

fn avg_pool_forward(x: &Tensor, window: usize, stride: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let inv = 1.0 / (window * window) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..window {
                    for kx in 0..window {
                        acc += x.data()[(ci * h + oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                out[(ci * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::from_parts(vec![c, oh, ow], out)
}

fn softmax_t_forward(x: &Tensor, temperature: f64) -> Tensor {
    let shape = x.shape().to_vec();
    let last = *shape.last().expect("rank >= 1 checked at build");
    let rows = x.numel() / last;
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * last..(r + 1) * last];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (i, &v) in row.iter().enumerate() {
            let e = ((v - m) / temperature).exp();
            out[r * last + i] = e;
            denom += e;
        }
        for v in &mut out[r * last..(r + 1) * last] {
            *v /= denom;
        }
    }
    Tensor::from_parts(shape, out)
}

// ---------------------------------------------------------------------------
// adjoint kernels
// ---------------------------------------------------------------------------

/// Per-operand gradient contributions of `op`, given the retained operand
/// values, the op's own forward value `y`, and the incoming adjoint `g`.
fn eval_adjoint(op: &Op, values: &[Tensor], y: &Tensor, g: &Tensor) -> Vec<(NodeId, Tensor)> {
    let v = |id: NodeId| &values[id.0];
    match op {
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|e| -e))],
        Op::Mul(a, b) => vec![
            (*a, zip_elementwise(g, v(*b), |gi, bi| gi * bi)),
            (*b, zip_elementwise(g, v(*a), |gi, ai| gi * ai)),
        ],
        Op::Pow { x, exponent } => {
            let p = *exponent;
            let grad = if p < 0.0 {
                zip_elementwise(g, v(*x), |gi, xi| {
                    if xi > LOG_GUARD {
                        gi * p * xi.powf(p - 1.0)
                    } else {
                        0.0
                    }
                })
            } else {
                zip_elementwise(g, v(*x), |gi, xi| gi * p * xi.powf(p - 1.0))
            };
            vec![(*x, grad)]
        }
        Op::Abs(x) => vec![(
            *x,
            zip_elementwise(g, v(*x), |gi, xi| gi * sign_sub(xi)),
        )],
        Op::Exp(x) => vec![(*x, zip_elementwise(g, y, |gi, yi| gi * yi))],
        Op::Log(x) => vec![(
            *x,
            zip_elementwise(g, v(*x), |gi, xi| if xi > LOG_GUARD { gi / xi } else { 0.0 }),
        )],
        Op::Dense { weight, x } => dense_adjoint(*weight, *x, v(*weight), v(*x), g),
        Op::Conv2d {
            x,
            weight,
            bias,
            stride,
            padding,
        } => conv2d_adjoint(*x, *weight, *bias, v(*x), v(*weight), g, *stride, *padding),
        Op::AvgPool { x, window, stride } => {
            let t = v(*x);
            let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let (oh, ow) = (g.shape()[1], g.shape()[2]);
            let inv = 1.0 / (window * window) as f64;
            let mut dx = vec![0.0; c * h * w];
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gi = g.data()[(ci * oh + oy) * ow + ox] * inv;
                        for ky in 0..*window {
                            for kx in 0..*window {
                                dx[(ci * h + oy * stride + ky) * w + ox * stride + kx] += gi;
                            }
                        }
                    }
                }
            }
            vec![(*x, Tensor::from_parts(vec![c, h, w], dx))]
        }
        Op::GlobalAvgPool(x) => {
            let t = v(*x);
            let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let inv = 1.0 / (h * w) as f64;
            let mut dx = vec![0.0; c * h * w];
            for ci in 0..c {
                let gi = g.data()[ci] * inv;
                for e in &mut dx[ci * h * w..(ci + 1) * h * w] {
                    *e = gi;
                }
            }
            vec![(*x, Tensor::from_parts(vec![c, h, w], dx))]
        }
        Op::ChannelMean(x) => {
            let t = v(*x);
            let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let inv = 1.0 / c as f64;
            let mut dx = vec![0.0; c * h * w];
            for ci in 0..c {
                for i in 0..h * w {
                    dx[ci * h * w + i] = g.data()[i] * inv;
                }
            }
            vec![(*x, Tensor::from_parts(vec![c, h, w], dx))]
        }
        Op::Relu(x) => vec![(
            *x,
            zip_elementwise(g, v(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
        )],
        Op::Sigmoid(x) => vec![(*x, zip_elementwise(g, y, |gi, yi| gi * yi * (1.0 - yi)))],
        Op::Swish(x) => vec![(
            *x,
            zip_elementwise(g, v(*x), |gi, xi| {
                let s = sigmoid(xi);
                gi * (s + xi * s * (1.0 - s))
            }),
        )],
        Op::SoftmaxT { x, temperature } => {
            let last = *y.shape().last().unwrap();
            let rows = y.numel() / last;
            let mut dx = vec![0.0; y.numel()];
            for r in 0..rows {
                let yr = &y.data()[r * last..(r + 1) * last];
                let gr = &g.data()[r * last..(r + 1) * last];
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for i in 0..last {
                    dx[r * last + i] = yr[i] * (gr[i] - dot) / temperature;
                }
            }
            vec![(*x, Tensor::from_parts(y.shape().to_vec(), dx))]
        }
        Op::Sum(x) => {
            let gs = g.data()[0];
            let shape = v(*x).shape().to_vec();
            let n = v(*x).numel();
            vec![(*x, Tensor::from_parts(shape, vec![gs; n]))]
        }
        Op::Mean(x) => {
            let n = v(*x).numel();
            let gs = g.data()[0] / n as f64;
            let shape = v(*x).shape().to_vec();
            vec![(*x, Tensor::from_parts(shape, vec![gs; n]))]
        }
        Op::L2Norm(x) => {
            let norm = y.data()[0].max(LOG_GUARD);
            let gs = g.data()[0];
            vec![(*x, v(*x).map(|xi| gs * xi / norm))]
        }
        Op::Reshape { x, .. } => {
            let shape = v(*x).shape().to_vec();
            vec![(*x, Tensor::from_parts(shape, g.data().to_vec()))]
        }
        Op::ConcatChannels(xs) => {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(xs.len());
            for &x in xs {
                let shape = values[x.0].shape().to_vec();
                let n: usize = shape.iter().product();
                let slice = g.data()[offset..offset + n].to_vec();
                offset += n;
                grads.push((x, Tensor::from_parts(shape, slice)));
            }
            grads
        }
        Op::ScalarScale { x, scalar } => {
            let s = values[scalar.0].data()[0];
            let ds: f64 = g.data().iter().zip(v(*x).data()).map(|(&gi, &xi)| gi * xi).sum();
            vec![
                (*x, g.map(|gi| gi * s)),
                (*scalar, Tensor::from_parts(vec![], vec![ds])),
            ]
        }
    }
}

/// Subgradient convention: 0 exactly at the kink.
fn sign_sub(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dense_adjoint(
    weight: NodeId,
    x: NodeId,
    w: &Tensor,
    xv: &Tensor,
    g: &Tensor,
) -> Vec<(NodeId, Tensor)> {
    let (m, k) = (w.shape()[0], w.shape()[1]);
    if xv.rank() == 1 {
        // dW[i,p] = g[i] x[p];  dx[p] = sum_i W[i,p] g[i]
        let mut dw = vec![0.0; m * k];
        let mut dx = vec![0.0; k];
        for i in 0..m {
            let gi = g.data()[i];
            for p in 0..k {
                dw[i * k + p] = gi * xv.data()[p];
                dx[p] += w.data()[i * k + p] * gi;
            }
        }
        vec![
            (weight, Tensor::from_parts(vec![m, k], dw)),
            (x, Tensor::from_parts(vec![k], dx)),
        ]
    } else {
        let n = xv.shape()[1];
        let mut dw = vec![0.0; m * k];
        let mut dx = vec![0.0; k * n];
        for i in 0..m {
            for j in 0..n {
                let gij = g.data()[i * n + j];
                if gij == 0.0 {
                    continue;
                }
                for p in 0..k {
                    dw[i * k + p] += gij * xv.data()[p * n + j];
                    dx[p * n + j] += w.data()[i * k + p] * gij;
                }
            }
        }
        vec![
            (weight, Tensor::from_parts(vec![m, k], dw)),
            (x, Tensor::from_parts(vec![k, n], dx)),
        ]
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_adjoint(
    x: NodeId,
    weight: NodeId,
    bias: Option<NodeId>,
    xv: &Tensor,
    wv: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
) -> Vec<(NodeId, Tensor)> {
    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let (f, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let mut dx = vec![0.0; c * h * w];
    let mut dw = vec![0.0; f * c * kh * kw];
    let mut db = vec![0.0; f];
    #[allow(clippy::needless_range_loop)] // fi indexes g, dw and db together
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let gi = g.data()[(fi * oh + oy) * ow + ox];
                if gi == 0.0 {
                    continue;
                }
                db[fi] += gi;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = (ci * h + iy as usize) * w + ix as usize;
                            let wi = ((fi * c + ci) * kh + ky) * kw + kx;
                            dx[xi] += gi * wv.data()[wi];
                            dw[wi] += gi * xv.data()[xi];
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![
        (x, Tensor::from_parts(vec![c, h, w], dx)),
        (weight, Tensor::from_parts(vec![f, c, kh, kw], dw)),
    ];
    if let Some(b) = bias {
        out.push((b, Tensor::from_parts(vec![f], db)));
    }
    out
}
