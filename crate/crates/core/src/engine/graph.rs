//! Define-by-run computation graph.
//!
//! Every primitive is evaluated eagerly when it is recorded, so node values
//! are always available. Node ids are assigned in creation order, which is a
//! topological order of the graph.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels;
use super::tensor::{Real, Tensor};
use super::EngineError;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive tag plus the attributes it was recorded with.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Detach,
    Step,
    Sign,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    MatMul,
    Transpose,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize, in_hw: (usize, usize) },
    Conv2dWeightGrad { stride: usize, pad: usize, kernel_hw: (usize, usize) },
    Relu,
    Abs,
    Square,
    Sqrt,
    Exp,
    Log,
    MaxPool2d { k: usize, stride: usize, index: Rc<[usize]> },
    MaxLast { index: Rc<[usize]> },
    Gather { index: Rc<[usize]> },
    Scatter { index: Rc<[usize]>, in_shape: Vec<usize> },
    AvgPool2d { k: usize },
    Upsample { k: usize },
    GlobalAvgPool,
    SumTo { shape: Vec<usize> },
    BroadcastTo { shape: Vec<usize> },
    Softmax,
    SoftmaxCrossEntropy { labels: Rc<[usize]> },
    Slice { axis: usize, start: usize, end: usize },
    Pad { axis: usize, before: usize, after: usize },
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detach => "detach",
            Op::Step => "step",
            Op::Sign => "sign",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            Op::Relu => "relu",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::MaxLast { .. } => "max_last",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::AvgPool2d { .. } => "avgpool2d",
            Op::Upsample { .. } => "nearest_upsample",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::SumTo { .. } => "sum_to",
            Op::BroadcastTo { .. } => "broadcast_to",
            Op::Softmax => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
        }
    }
}

#[derive(Debug)]
pub struct Node<T> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    detached: bool,
}

impl<T> Node<T> {
    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn is_detached(&self) -> bool {
        self.detached
    }
}

/// Gradients keyed by leaf node, each shaped like its leaf.
#[derive(Debug, Clone)]
pub struct GradMap<T> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Real> GradMap<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn check(&self, id: NodeId) -> Result<(), EngineError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(EngineError::UnknownNode(id.0))
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor<T>, detached: bool) -> Result<NodeId, EngineError> {
        if !value.all_finite() {
            return Err(EngineError::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            op,
            inputs,
            value,
            detached,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Records a leaf (input, parameter or constant).
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<NodeId, EngineError> {
        self.push(Op::Leaf, Vec::new(), value, false)
    }

    /// A leaf that never receives or passes gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId, EngineError> {
        self.push(Op::Leaf, Vec::new(), value, true)
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId, EngineError> {
        self.constant(Tensor::scalar(T::lit(v)))
    }

    /// Records `op` applied to `inputs`, evaluating it immediately.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, EngineError> {
        for &i in inputs {
            self.check(i)?;
        }
        let arity = match &op {
            Op::Leaf => 0,
            Op::Concat { .. } => inputs.len().max(1),
            Op::Add
            | Op::Sub
            | Op::Mul
            | Op::Div
            | Op::MatMul
            | Op::Conv2d { .. }
            | Op::ConvTranspose2d { .. }
            | Op::Conv2dWeightGrad { .. } => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(EngineError::Invalid(format!(
                "{} expects {arity} inputs, got {}",
                op.name(),
                inputs.len()
            )));
        }
        if let Op::Leaf = op {
            return Err(EngineError::Invalid("leaf nodes are created with leaf()/constant()".into()));
        }
        let v = |k: usize| &self.nodes[inputs[k].0].value;
        let (value, op) = match op {
            Op::Leaf => unreachable!(),
            Op::Detach => (v(0).clone(), op),
            Op::Step => (v(0).map(|x| if x > T::zero() { T::one() } else { T::zero() }), op),
            Op::Sign => (
                v(0).map(|x| {
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                }),
                op,
            ),
            Op::Add => (kernels::binary("add", v(0), v(1), |a, b| a + b)?, op),
            Op::Sub => (kernels::binary("sub", v(0), v(1), |a, b| a - b)?, op),
            Op::Mul => (kernels::binary("mul", v(0), v(1), |a, b| a * b)?, op),
            Op::Div => (kernels::binary("div", v(0), v(1), |a, b| a / b)?, op),
            Op::AddScalar(c) => {
                let c = T::lit(c);
                (v(0).map(|x| x + c), op)
            }
            Op::MulScalar(c) => {
                let c = T::lit(c);
                (v(0).map(|x| x * c), op)
            }
            Op::MatMul => (kernels::matmul(v(0), v(1))?, op),
            Op::Transpose => (kernels::transpose(v(0))?, op),
            Op::Conv2d { stride, pad } => (kernels::conv2d(v(0), v(1), stride, pad)?, op),
            Op::ConvTranspose2d { stride, pad, in_hw } => {
                (kernels::conv_transpose2d(v(0), v(1), stride, pad, in_hw)?, op)
            }
            Op::Conv2dWeightGrad { stride, pad, kernel_hw } => {
                (kernels::conv2d_weight_grad(v(0), v(1), stride, pad, kernel_hw)?, op)
            }
            Op::Relu => (v(0).map(|x| if x > T::zero() { x } else { T::zero() }), op),
            Op::Abs => (v(0).map(|x| x.abs()), op),
            Op::Square => (v(0).map(|x| x * x), op),
            Op::Sqrt => {
                if v(0).data().iter().any(|&x| x < T::zero()) {
                    return Err(EngineError::Domain("sqrt"));
                }
                (v(0).map(|x| x.sqrt()), op)
            }
            Op::Exp => (v(0).map(|x| x.exp()), op),
            Op::Log => {
                if v(0).data().iter().any(|&x| x <= T::zero()) {
                    return Err(EngineError::Domain("log"));
                }
                (v(0).map(|x| x.ln()), op)
            }
            Op::MaxPool2d { k, stride, .. } => {
                let (val, idx) = kernels::maxpool2d(v(0), k, stride)?;
                (val, Op::MaxPool2d { k, stride, index: idx.into() })
            }
            Op::MaxLast { .. } => {
                let (val, idx) = kernels::max_last(v(0))?;
                (val, Op::MaxLast { index: idx.into() })
            }
            Op::Gather { ref index } => {
                // output keeps the index list's length as a flat vector
                let val = kernels::gather(v(0), index, &[index.len()])?;
                (val, op)
            }
            Op::Scatter { ref index, ref in_shape } => (kernels::scatter(v(0), index, in_shape)?, op),
            Op::AvgPool2d { k } => (kernels::avgpool2d(v(0), k)?, op),
            Op::Upsample { k } => (kernels::upsample_nearest(v(0), k)?, op),
            Op::GlobalAvgPool => (kernels::global_avg_pool(v(0))?, op),
            Op::SumTo { ref shape } => (kernels::sum_to(v(0), shape)?, op),
            Op::BroadcastTo { ref shape } => (kernels::broadcast_to(v(0), shape)?, op),
            Op::Softmax => (kernels::softmax(v(0))?, op),
            Op::SoftmaxCrossEntropy { ref labels } => (kernels::softmax_cross_entropy(v(0), labels)?, op),
            Op::Slice { axis, start, end } => (kernels::slice_axis(v(0), axis, start, end)?, op),
            Op::Pad { axis, before, after } => (kernels::pad_axis(v(0), axis, before, after)?, op),
            Op::Concat { axis } => {
                let parts: Vec<&Tensor<T>> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                (kernels::concat(&parts, axis)?, op)
            }
            Op::Reshape { ref shape } => (v(0).clone().reshape(shape)?, op),
        };
        let detached = matches!(op, Op::Detach | Op::Step | Op::Sign);
        self.push(op, inputs.to_vec(), value, detached)
    }

    /// Marks, for every node, whether its value depends on one of `leaves`
    /// through a non-detached path.
    fn reach(&self, leaves: &[NodeId], upto: usize) -> Vec<bool> {
        let mut reach = vec![false; upto + 1];
        for l in leaves {
            if l.0 <= upto {
                reach[l.0] = true;
            }
        }
        for i in 0..=upto {
            let node = &self.nodes[i];
            if reach[i] || node.detached {
                continue;
            }
            reach[i] = node.inputs.iter().any(|j| reach[j.0]);
        }
        reach
    }

    fn check_scalar(&self, id: NodeId) -> Result<(), EngineError> {
        self.check(id)?;
        let s = self.shape(id);
        if s.iter().product::<usize>() != 1 {
            return Err(EngineError::NonScalarLoss(s.to_vec()));
        }
        Ok(())
    }

    /// Exact reverse-mode gradients of the scalar `loss` with respect to `leaves`.
    ///
    /// Leaves the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: NodeId, leaves: &[NodeId]) -> Result<GradMap<T>, EngineError> {
        self.check_scalar(loss)?;
        for &l in leaves {
            self.check(l)?;
        }
        let reach = self.reach(leaves, loss.0);
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut wanted: HashMap<NodeId, Tensor<T>> = HashMap::new();
        for i in (0..=loss.0).rev() {
            if !reach[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if leaves.contains(&NodeId(i)) {
                wanted.insert(NodeId(i), g.clone());
            }
            if node.detached || node.inputs.is_empty() {
                continue;
            }
            let contributions = self.vjp_numeric(node, &g)?;
            for (k, contrib) in contributions.into_iter().enumerate() {
                let j = node.inputs[k].0;
                let Some(c) = contrib else { continue };
                if !reach[j] {
                    continue;
                }
                grads[j] = Some(match grads[j].take() {
                    Some(acc) => acc.zip_map(&c, |a, b| a + b),
                    None => c,
                });
            }
        }
        for &l in leaves {
            wanted.entry(l).or_insert_with(|| Tensor::zeros(self.shape(l)));
        }
        Ok(GradMap { grads: wanted })
    }

    fn vjp_numeric(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>, EngineError> {
        let x = |k: usize| &self.nodes[node.inputs[k].0].value;
        let y = &node.value;
        let reduce = |t: Tensor<T>, k: usize| kernels::sum_to(&t, x(k).shape());
        let out = match &node.op {
            Op::Leaf | Op::Detach | Op::Step | Op::Sign => vec![],
            Op::Add => vec![Some(reduce(g.clone(), 0)?), Some(reduce(g.clone(), 1)?)],
            Op::Sub => vec![Some(reduce(g.clone(), 0)?), Some(reduce(g.map(|v| -v), 1)?)],
            Op::Mul => vec![
                Some(reduce(kernels::binary("mul", g, x(1), |a, b| a * b)?, 0)?),
                Some(reduce(kernels::binary("mul", g, x(0), |a, b| a * b)?, 1)?),
            ],
            Op::Div => {
                let ga = kernels::binary("div", g, x(1), |a, b| a / b)?;
                let gb = kernels::binary("div", &kernels::binary("mul", g, y, |a, b| a * b)?, x(1), |a, b| -a / b)?;
                vec![Some(reduce(ga, 0)?), Some(reduce(gb, 1)?)]
            }
            Op::AddScalar(_) => vec![Some(g.clone())],
            Op::MulScalar(c) => {
                let c = T::lit(*c);
                vec![Some(g.map(|v| v * c))]
            }
            Op::MatMul => vec![
                Some(kernels::matmul(g, &kernels::transpose(x(1))?)?),
                Some(kernels::matmul(&kernels::transpose(x(0))?, g)?),
            ],
            Op::Transpose => vec![Some(kernels::transpose(g)?)],
            Op::Conv2d { stride, pad } => {
                let xs = x(0).shape();
                let ws = x(1).shape();
                vec![
                    Some(kernels::conv_transpose2d(g, x(1), *stride, *pad, (xs[2], xs[3]))?),
                    Some(kernels::conv2d_weight_grad(x(0), g, *stride, *pad, (ws[2], ws[3]))?),
                ]
            }
            Op::ConvTranspose2d { stride, pad, .. } => {
                // y = convT(gy, w): d gy = conv(g, w), d w = wgrad(g, gy)
                let ws = x(1).shape();
                vec![
                    Some(kernels::conv2d(g, x(1), *stride, *pad)?),
                    Some(kernels::conv2d_weight_grad(g, x(0), *stride, *pad, (ws[2], ws[3]))?),
                ]
            }
            Op::Conv2dWeightGrad { stride, pad, .. } => {
                // y = wgrad(a, gy): d a = convT(gy, g), d gy = conv(a, g)
                let a = x(0).shape();
                vec![
                    Some(kernels::conv_transpose2d(x(1), g, *stride, *pad, (a[2], a[3]))?),
                    Some(kernels::conv2d(x(0), g, *stride, *pad)?),
                ]
            }
            Op::Relu => vec![Some(g.zip_map(x(0), |gv, xv| if xv > T::zero() { gv } else { T::zero() }))],
            Op::Abs => vec![Some(g.zip_map(x(0), |gv, xv| {
                if xv > T::zero() {
                    gv
                } else if xv < T::zero() {
                    -gv
                } else {
                    T::zero()
                }
            }))],
            Op::Square => vec![Some(g.zip_map(x(0), |gv, xv| gv * (xv + xv)))],
            Op::Sqrt => vec![Some(g.zip_map(y, |gv, yv| gv / (yv + yv)))],
            Op::Exp => vec![Some(g.zip_map(y, |gv, yv| gv * yv))],
            Op::Log => vec![Some(g.zip_map(x(0), |gv, xv| gv / xv))],
            Op::MaxPool2d { index, .. } | Op::MaxLast { index } | Op::Gather { index } => {
                vec![Some(kernels::scatter(g, index, x(0).shape())?)]
            }
            Op::Scatter { index, .. } => vec![Some(kernels::gather(g, index, x(0).shape())?)],
            Op::AvgPool2d { k } => {
                let s = T::one() / T::lit((k * k) as f64);
                vec![Some(kernels::upsample_nearest(g, *k)?.map(|v| v * s))]
            }
            Op::Upsample { k } => {
                let s = T::lit((k * k) as f64);
                vec![Some(kernels::avgpool2d(g, *k)?.map(|v| v * s))]
            }
            Op::GlobalAvgPool => {
                let xs = x(0).shape();
                let s = T::one() / T::lit((xs[2] * xs[3]) as f64);
                let g4 = g.clone().reshape(&[xs[0], xs[1], 1, 1])?;
                vec![Some(kernels::broadcast_to(&g4, xs)?.map(|v| v * s))]
            }
            Op::SumTo { .. } => vec![Some(kernels::broadcast_to(g, x(0).shape())?)],
            Op::BroadcastTo { .. } => vec![Some(kernels::sum_to(g, x(0).shape())?)],
            Op::Softmax => {
                let d = *y.shape().last().unwrap_or(&1);
                let mut out = Tensor::zeros(y.shape());
                for ((o, yr), gr) in out
                    .data_mut()
                    .chunks_mut(d.max(1))
                    .zip(y.data().chunks(d.max(1)))
                    .zip(g.data().chunks(d.max(1)))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..o.len() {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(out)]
            }
            Op::SoftmaxCrossEntropy { labels } => {
                let mut p = kernels::softmax(x(0))?;
                let k = x(0).shape()[1];
                let scale = g.item() / T::lit(labels.len() as f64);
                for (row, &l) in p.data_mut().chunks_mut(k).zip(labels.iter()) {
                    row[l] = row[l] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * scale);
                }
                vec![Some(p)]
            }
            Op::Slice { axis, start, end } => {
                let n = x(0).shape()[*axis];
                vec![Some(kernels::pad_axis(g, *axis, *start, n - end)?)]
            }
            Op::Pad { axis, before, .. } => {
                let n = x(0).shape()[*axis];
                vec![Some(kernels::slice_axis(g, *axis, *before, before + n)?)]
            }
            Op::Concat { axis } => {
                let mut start = 0;
                let mut out = Vec::new();
                for k in 0..node.inputs.len() {
                    let n = x(k).shape()[*axis];
                    out.push(Some(kernels::slice_axis(g, *axis, start, start + n)?));
                    start += n;
                }
                out
            }
            Op::Reshape { .. } => vec![Some(g.clone().reshape(x(0).shape())?)],
        };
        Ok(out)
    }

    /// Gradients of `score` with respect to `leaves`, recorded as new graph
    /// nodes so they can be differentiated again.
    ///
    /// ReLU masks, max-selection indices and signs enter as detached nodes,
    /// so their second-order contribution is zero.
    pub fn grad_as_graph(&mut self, score: NodeId, leaves: &[NodeId]) -> Result<Vec<NodeId>, EngineError> {
        self.check_scalar(score)?;
        for &l in leaves {
            self.check(l)?;
        }
        let reach = self.reach(leaves, score.0);
        let mut grads: Vec<Option<NodeId>> = vec![None; score.0 + 1];
        let seed = self.constant(Tensor::full(self.shape(score), T::one()))?;
        grads[score.0] = Some(seed);
        let mut found: HashMap<NodeId, NodeId> = HashMap::new();
        for i in (0..=score.0).rev() {
            if !reach[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            if leaves.contains(&NodeId(i)) {
                found.insert(NodeId(i), g);
            }
            let (detached, inputs) = {
                let n = &self.nodes[i];
                (n.detached, n.inputs.clone())
            };
            if detached || inputs.is_empty() {
                continue;
            }
            let needed: Vec<bool> = inputs.iter().map(|j| reach[j.0]).collect();
            let contributions = self.vjp_graph(NodeId(i), g, &needed)?;
            for (k, contrib) in contributions.into_iter().enumerate() {
                let j = inputs[k].0;
                let Some(c) = contrib else { continue };
                if !reach[j] {
                    continue;
                }
                grads[j] = Some(match grads[j] {
                    Some(acc) => self.add(acc, c)?,
                    None => c,
                });
            }
        }
        leaves
            .iter()
            .map(|&l| match found.get(&l) {
                Some(&g) => Ok(g),
                None => self.constant(Tensor::zeros(self.shape(l))),
            })
            .collect()
    }

    fn vjp_graph(&mut self, id: NodeId, g: NodeId, needed: &[bool]) -> Result<Vec<Option<NodeId>>, EngineError> {
        let node = &self.nodes[id.0];
        let op = node.op.clone();
        let ins = node.inputs.clone();
        let shape_of = |s: &Self, k: usize| s.shape(ins[k]).to_vec();
        let want = |k: usize| needed.get(k).copied().unwrap_or(false);
        let out = match op {
            Op::Leaf | Op::Detach | Op::Step | Op::Sign => vec![],
            Op::Add => {
                let a = if want(0) { Some(self.sum_to(g, &shape_of(self, 0))?) } else { None };
                let b = if want(1) { Some(self.sum_to(g, &shape_of(self, 1))?) } else { None };
                vec![a, b]
            }
            Op::Sub => {
                let a = if want(0) { Some(self.sum_to(g, &shape_of(self, 0))?) } else { None };
                let b = if want(1) {
                    let n = self.neg(g)?;
                    Some(self.sum_to(n, &shape_of(self, 1))?)
                } else {
                    None
                };
                vec![a, b]
            }
            Op::Mul => {
                let a = if want(0) {
                    let t = self.mul(g, ins[1])?;
                    Some(self.sum_to(t, &shape_of(self, 0))?)
                } else {
                    None
                };
                let b = if want(1) {
                    let t = self.mul(g, ins[0])?;
                    Some(self.sum_to(t, &shape_of(self, 1))?)
                } else {
                    None
                };
                vec![a, b]
            }
            Op::Div => {
                let a = if want(0) {
                    let t = self.div(g, ins[1])?;
                    Some(self.sum_to(t, &shape_of(self, 0))?)
                } else {
                    None
                };
                let b = if want(1) {
                    // d/db (a/b) = -(a/b)/b
                    let gy = self.mul(g, id)?;
                    let t = self.div(gy, ins[1])?;
                    let t = self.neg(t)?;
                    Some(self.sum_to(t, &shape_of(self, 1))?)
                } else {
                    None
                };
                vec![a, b]
            }
            Op::AddScalar(_) => vec![Some(g)],
            Op::MulScalar(c) => vec![Some(self.mul_scalar(g, c)?)],
            Op::MatMul => {
                let a = if want(0) {
                    let bt = self.transpose(ins[1])?;
                    Some(self.matmul(g, bt)?)
                } else {
                    None
                };
                let b = if want(1) {
                    let at = self.transpose(ins[0])?;
                    Some(self.matmul(at, g)?)
                } else {
                    None
                };
                vec![a, b]
            }
            Op::Transpose => vec![Some(self.transpose(g)?)],
            Op::Conv2d { stride, pad } => {
                let xs = shape_of(self, 0);
                let ws = shape_of(self, 1);
                let a = if want(0) {
                    Some(self.apply(Op::ConvTranspose2d { stride, pad, in_hw: (xs[2], xs[3]) }, &[g, ins[1]])?)
                } else {
                    None
                };
                let b = if want(1) {
                    Some(self.apply(Op::Conv2dWeightGrad { stride, pad, kernel_hw: (ws[2], ws[3]) }, &[ins[0], g])?)
                } else {
                    None
                };
                vec![a, b]
            }
            Op::ConvTranspose2d { stride, pad, .. } => {
                let ws = shape_of(self, 1);
                let a = if want(0) { Some(self.apply(Op::Conv2d { stride, pad }, &[g, ins[1]])?) } else { None };
                let b = if want(1) {
                    Some(self.apply(Op::Conv2dWeightGrad { stride, pad, kernel_hw: (ws[2], ws[3]) }, &[g, ins[0]])?)
                } else {
                    None
                };
                vec![a, b]
            }
            Op::Conv2dWeightGrad { stride, pad, .. } => {
                let xs = shape_of(self, 0);
                let a = if want(0) {
                    Some(self.apply(Op::ConvTranspose2d { stride, pad, in_hw: (xs[2], xs[3]) }, &[ins[1], g])?)
                } else {
                    None
                };
                let b = if want(1) { Some(self.apply(Op::Conv2d { stride, pad }, &[ins[0], g])?) } else { None };
                vec![a, b]
            }
            Op::Relu => {
                let mask = self.apply(Op::Step, &[ins[0]])?;
                vec![Some(self.mul(g, mask)?)]
            }
            Op::Abs => {
                let s = self.apply(Op::Sign, &[ins[0]])?;
                vec![Some(self.mul(g, s)?)]
            }
            Op::Square => {
                let two_x = self.mul_scalar(ins[0], 2.0)?;
                vec![Some(self.mul(g, two_x)?)]
            }
            Op::Sqrt => {
                let two_y = self.mul_scalar(id, 2.0)?;
                vec![Some(self.div(g, two_y)?)]
            }
            Op::Exp => vec![Some(self.mul(g, id)?)],
            Op::Log => vec![Some(self.div(g, ins[0])?)],
            Op::MaxPool2d { index, .. } | Op::MaxLast { index } | Op::Gather { index } => {
                let in_shape = shape_of(self, 0);
                let flat = self.reshape(g, &[index.len()])?;
                vec![Some(self.apply(Op::Scatter { index, in_shape }, &[flat])?)]
            }
            Op::Scatter { index, .. } => {
                let gathered = self.apply(Op::Gather { index }, &[g])?;
                let s = shape_of(self, 0);
                vec![Some(self.reshape(gathered, &s)?)]
            }
            Op::AvgPool2d { k } => {
                let u = self.apply(Op::Upsample { k }, &[g])?;
                vec![Some(self.mul_scalar(u, 1.0 / (k * k) as f64)?)]
            }
            Op::Upsample { k } => {
                let p = self.apply(Op::AvgPool2d { k }, &[g])?;
                vec![Some(self.mul_scalar(p, (k * k) as f64)?)]
            }
            Op::GlobalAvgPool => {
                let xs = shape_of(self, 0);
                let g4 = self.reshape(g, &[xs[0], xs[1], 1, 1])?;
                let b = self.broadcast_to(g4, &xs)?;
                vec![Some(self.mul_scalar(b, 1.0 / (xs[2] * xs[3]) as f64)?)]
            }
            Op::SumTo { .. } => {
                let s = shape_of(self, 0);
                vec![Some(self.broadcast_to(g, &s)?)]
            }
            Op::BroadcastTo { .. } => {
                let s = shape_of(self, 0);
                vec![Some(self.sum_to(g, &s)?)]
            }
            Op::Softmax => return Err(EngineError::NoGraphRule("softmax")),
            Op::SoftmaxCrossEntropy { labels } => {
                let logits = ins[0];
                let [n, k] = [self.shape(logits)[0], self.shape(logits)[1]];
                let p = self.apply(Op::Softmax, &[logits])?;
                let mut onehot = Tensor::zeros(&[n, k]);
                for (i, &l) in labels.iter().enumerate() {
                    onehot.data_mut()[i * k + l] = T::one();
                }
                let oh = self.constant(onehot)?;
                let diff = self.sub(p, oh)?;
                let scaled = self.mul(diff, g)?;
                vec![Some(self.mul_scalar(scaled, 1.0 / n as f64)?)]
            }
            Op::Slice { axis, start, end } => {
                let n = shape_of(self, 0)[axis];
                vec![Some(self.apply(Op::Pad { axis, before: start, after: n - end }, &[g])?)]
            }
            Op::Pad { axis, before, .. } => {
                let n = shape_of(self, 0)[axis];
                vec![Some(self.apply(Op::Slice { axis, start: before, end: before + n }, &[g])?)]
            }
            Op::Concat { axis } => {
                let mut start = 0;
                let mut out = Vec::new();
                for k in 0..ins.len() {
                    let n = shape_of(self, k)[axis];
                    out.push(if want(k) {
                        Some(self.apply(Op::Slice { axis, start, end: start + n }, &[g])?)
                    } else {
                        None
                    });
                    start += n;
                }
                out
            }
            Op::Reshape { .. } => {
                let s = shape_of(self, 0);
                vec![Some(self.reshape(g, &s)?)]
            }
        };
        Ok(out)
    }

    // Convenience constructors for the primitive set.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::MulScalar(-1.0), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, EngineError> {
        self.apply(Op::AddScalar(c), &[a])
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, EngineError> {
        self.apply(Op::MulScalar(c), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId, EngineError> {
        self.apply(Op::Conv2d { stride, pad }, &[x, w])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::Relu, &[x])
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::Abs, &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::Square, &[x])
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::Sqrt, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::Exp, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::Log, &[x])
    }

    pub fn detach(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::Detach, &[x])
    }

    pub fn sign(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::Sign, &[x])
    }

    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId, EngineError> {
        self.apply(Op::MaxPool2d { k, stride, index: Rc::from(Vec::new()) }, &[x])
    }

    /// Maximum over the last axis, keeping it as an axis of size 1.
    pub fn max_last(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::MaxLast { index: Rc::from(Vec::new()) }, &[x])
    }

    pub fn avgpool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId, EngineError> {
        self.apply(Op::AvgPool2d { k }, &[x])
    }

    pub fn upsample(&mut self, x: NodeId, k: usize) -> Result<NodeId, EngineError> {
        self.apply(Op::Upsample { k }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::GlobalAvgPool, &[x])
    }

    pub fn sum_to(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, EngineError> {
        self.apply(Op::SumTo { shape: shape.to_vec() }, &[x])
    }

    pub fn broadcast_to(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, EngineError> {
        self.apply(Op::BroadcastTo { shape: shape.to_vec() }, &[x])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        self.sum_to(x, &[])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        let n = self.value(x).len().max(1);
        let s = self.sum(x)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, EngineError> {
        self.apply(Op::SoftmaxCrossEntropy { labels: labels.into() }, &[logits])
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId, EngineError> {
        self.apply(Op::Slice { axis, start, end }, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId, EngineError> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, EngineError> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }
}
