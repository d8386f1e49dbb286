//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Backward rules are expressed with the same differentiable operations as
//! the forward pass. With `create_graph = true` the gradients are themselves
//! graph nodes that depend on the inputs, so they can be differentiated
//! again (this is what second-order meta-learning needs).

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use crate::{kernels, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Pow(usize, f64),
    Relu(usize),
    SumAll(usize),
    Broadcast(usize),
    SumChannel(usize),
    ExpandChannel(usize),
    SumOverChannels(usize),
    ExpandOverChannels(usize),
    Reshape(usize),
    Conv2d { x: usize, w: usize, pad: usize },
    Conv2dWeight { x: usize, g: usize, pad: usize },
    FlipSwap(usize),
    MaxPool(usize, Arc<Vec<u32>>),
    PoolScatter(usize, Arc<Vec<u32>>),
    PoolGather(usize, Arc<Vec<u32>>),
    DepthToSpace(usize),
    SpaceToDepth(usize),
    SliceChannels { x: usize, start: usize },
    EmbedChannels { x: usize, start: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![a, b],
            Conv2d { x, w, .. } => vec![x, w],
            Conv2dWeight { x, g, .. } => vec![x, g],
            Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Pow(a, _) | Relu(a)
            | SumAll(a) | Broadcast(a) | SumChannel(a) | ExpandChannel(a)
            | SumOverChannels(a) | ExpandOverChannels(a) | Reshape(a) | FlipSwap(a)
            | MaxPool(a, _) | PoolScatter(a, _) | PoolGather(a, _) | DepthToSpace(a)
            | SpaceToDepth(a) => vec![a],
            SliceChannels { x, .. } | EmbedChannels { x, .. } => vec![x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Arena holding every value computed during one forward (and backward) pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        self.push(value, op, self.requires(a))
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        let rg = self.requires(a) || self.requires(b);
        self.push(value, op, rg)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned variables stay connected to the
    /// graph and can be differentiated again; otherwise they are constants.
    /// Inputs that `output` does not depend on get a zero gradient.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>], create_graph: bool) -> Vec<Var<'g>> {
        assert!(std::ptr::eq(output.graph, self), "output belongs to another graph");
        assert_eq!(
            self.value(output.id).len(),
            1,
            "grad() needs a scalar output"
        );
        let n = output.id + 1;

        // Nodes from which some `wrt` variable is reachable.
        let mut reaches = vec![false; n];
        for v in wrt {
            if v.id < n {
                reaches[v.id] = true;
            }
        }
        for id in 0..n {
            if !reaches[id] {
                let nodes = self.nodes.borrow();
                if nodes[id].requires_grad {
                    reaches[id] = nodes[id].op.inputs().iter().any(|&i| reaches[i]);
                }
            }
        }

        let mut grads: Vec<Option<Var<'g>>> = vec![None; n];
        let seed_shape = self.value(output.id).shape().to_vec();
        grads[output.id] = Some(self.constant(Tensor::ones(&seed_shape)));

        let fwd = |id: usize| -> Var<'g> {
            if create_graph {
                Var { graph: self, id }
            } else {
                self.constant(self.value(id))
            }
        };

        for id in (0..n).rev() {
            if !reaches[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            let mut contrib: Vec<(usize, Var<'g>)> = Vec::with_capacity(2);
            let want = |i: usize| reaches[i];
            use Op::*;
            match op {
                Leaf => {}
                Add(a, b) => {
                    if want(a) {
                        contrib.push((a, g));
                    }
                    if want(b) {
                        contrib.push((b, g));
                    }
                }
                Sub(a, b) => {
                    if want(a) {
                        contrib.push((a, g));
                    }
                    if want(b) {
                        contrib.push((b, -g));
                    }
                }
                Mul(a, b) => {
                    if want(a) {
                        contrib.push((a, g * fwd(b)));
                    }
                    if want(b) {
                        contrib.push((b, g * fwd(a)));
                    }
                }
                Neg(a) => contrib.push((a, -g)),
                Scale(a, c) => contrib.push((a, g.scale(c))),
                AddScalar(a) => contrib.push((a, g)),
                Exp(a) => contrib.push((a, g * fwd(id))),
                Log(a) => contrib.push((a, g * fwd(a).powf(-1.0))),
                Pow(a, p) => contrib.push((a, g * fwd(a).powf(p - 1.0).scale(p))),
                Relu(a) => {
                    let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    contrib.push((a, g * self.constant(mask)));
                }
                SumAll(a) => {
                    let shape = self.value(a).shape().to_vec();
                    contrib.push((a, g.broadcast(&shape)));
                }
                Broadcast(a) => contrib.push((a, g.sum())),
                SumChannel(a) => {
                    let shape = self.value(a).shape().to_vec();
                    contrib.push((a, g.expand_channel(&shape)));
                }
                ExpandChannel(a) => contrib.push((a, g.sum_channel())),
                SumOverChannels(a) => {
                    let c = self.value(a).shape()[1];
                    contrib.push((a, g.expand_over_channels(c)));
                }
                ExpandOverChannels(a) => contrib.push((a, g.sum_over_channels())),
                Reshape(a) => {
                    let shape = self.value(a).shape().to_vec();
                    contrib.push((a, g.reshape(&shape)));
                }
                Conv2d { x, w, pad } => {
                    let (_, _, kh, kw) = self.value(w).dims4();
                    if want(x) {
                        assert!(pad < kh && pad < kw, "input gradient needs pad < kernel");
                        contrib.push((x, g.conv2d(fwd(w).flip_swap(), kh - 1 - pad)));
                    }
                    if want(w) {
                        contrib.push((w, fwd(x).conv2d_weight(g, kh, kw, pad)));
                    }
                }
                Conv2dWeight { x, g: gg, pad } => {
                    let (_, _, kh, _) = self.value(id).dims4();
                    if want(x) {
                        contrib.push((x, fwd(gg).conv2d(g.flip_swap(), kh - 1 - pad)));
                    }
                    if want(gg) {
                        contrib.push((gg, fwd(x).conv2d(g, pad)));
                    }
                }
                FlipSwap(a) => contrib.push((a, g.flip_swap())),
                MaxPool(a, idx) => {
                    let shape = self.value(a).shape().to_vec();
                    contrib.push((a, g.pool_scatter(idx, &shape)));
                }
                PoolScatter(a, idx) => {
                    let shape = self.value(a).shape().to_vec();
                    contrib.push((a, g.pool_gather(idx, &shape)));
                }
                PoolGather(a, idx) => {
                    let shape = self.value(a).shape().to_vec();
                    contrib.push((a, g.pool_scatter(idx, &shape)));
                }
                DepthToSpace(a) => contrib.push((a, g.space_to_depth())),
                SpaceToDepth(a) => contrib.push((a, g.depth_to_space())),
                SliceChannels { x, start } => {
                    let c = self.value(x).shape()[1];
                    contrib.push((x, g.embed_channels(start, c)));
                }
                EmbedChannels { x, start } => {
                    let c = self.value(x).shape()[1];
                    contrib.push((x, g.slice_channels(start, c)));
                }
            }
            for (input, delta) in contrib {
                grads[input] = Some(match grads[input] {
                    Some(prev) => prev + delta,
                    None => delta,
                });
            }
        }

        wrt.iter()
            .map(|v| match grads.get(v.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(v.shape().as_slice())),
            })
            .collect()
    }

    /// [`Graph::grad`] without graph construction, returning plain tensors.
    pub fn grad_tensors<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>]) -> Vec<Tensor> {
        self.grad(output, wrt, false)
            .into_iter()
            .map(|v| v.value())
            .collect()
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// A constant copy of this value, cut off from the graph.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value())
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "variables from different graphs");
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.graph.unary(self.id, Op::Scale(self.id, c), |t| t.scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.graph.unary(self.id, Op::AddScalar(self.id), |t| t.map(|v| v + c))
    }

    pub fn exp(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn ln(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Log(self.id), |t| t.map(f64::ln))
    }

    pub fn powf(self, p: f64) -> Var<'g> {
        self.graph.unary(self.id, Op::Pow(self.id, p), |t| t.map(|v| v.powf(p)))
    }

    pub fn relu(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Relu(self.id), |t| t.map(|v| v.max(0.0)))
    }

    pub fn sum(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::SumAll(self.id), |t| Tensor::scalar(t.sum()))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.graph.nodes.borrow()[self.id].value.len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Broadcasts a single-element value to `shape`.
    pub fn broadcast(self, shape: &[usize]) -> Var<'g> {
        self.graph.unary(self.id, Op::Broadcast(self.id), |t| {
            Tensor::full(shape, t.item())
        })
    }

    /// `[n, c, h, w]` → `[c]`.
    pub fn sum_channel(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::SumChannel(self.id), kernels::sum_channel)
    }

    /// `[c]` → `shape = [n, c, h, w]`.
    pub fn expand_channel(self, shape: &[usize]) -> Var<'g> {
        self.graph.unary(self.id, Op::ExpandChannel(self.id), |t| {
            kernels::expand_channel(t, shape)
        })
    }

    /// `[n, c, h, w]` → `[n, 1, h, w]`.
    pub fn sum_over_channels(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::SumOverChannels(self.id), kernels::sum_over_channels)
    }

    /// `[n, 1, h, w]` → `[n, c, h, w]`.
    pub fn expand_over_channels(self, c: usize) -> Var<'g> {
        self.graph.unary(self.id, Op::ExpandOverChannels(self.id), |t| {
            kernels::expand_over_channels(t, c)
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Reshape(self.id), |t| t.reshape(shape))
    }

    /// Stride-1 convolution (cross-correlation) with zero padding `pad`.
    pub fn conv2d(self, weight: Var<'g>, pad: usize) -> Var<'g> {
        self.same_graph(&weight);
        self.graph.binary(
            self.id,
            weight.id,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                pad,
            },
            |x, w| kernels::conv2d(x, w, pad),
        )
    }

    /// Weight gradient of a convolution of `self` producing output gradient `grad`.
    pub fn conv2d_weight(self, grad: Var<'g>, kh: usize, kw: usize, pad: usize) -> Var<'g> {
        self.same_graph(&grad);
        self.graph.binary(
            self.id,
            grad.id,
            Op::Conv2dWeight {
                x: self.id,
                g: grad.id,
                pad,
            },
            |x, g| kernels::conv2d_weight(x, g, kh, kw, pad),
        )
    }

    pub fn flip_swap(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::FlipSwap(self.id), kernels::flip_swap)
    }

    /// 2×2 stride-2 max pooling.
    pub fn maxpool2(self) -> Var<'g> {
        let (value, idx) = kernels::maxpool2(&self.graph.nodes.borrow()[self.id].value);
        let rg = self.requires_grad();
        self.graph
            .push(value, Op::MaxPool(self.id, Arc::new(idx)), rg)
    }

    fn pool_scatter(self, idx: Arc<Vec<u32>>, shape: &[usize]) -> Var<'g> {
        let op = Op::PoolScatter(self.id, Arc::clone(&idx));
        self.graph
            .unary(self.id, op, |t| kernels::pool_scatter(t, &idx, shape))
    }

    fn pool_gather(self, idx: Arc<Vec<u32>>, shape: &[usize]) -> Var<'g> {
        let op = Op::PoolGather(self.id, Arc::clone(&idx));
        self.graph
            .unary(self.id, op, |t| kernels::pool_gather(t, &idx, shape))
    }

    pub fn depth_to_space(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::DepthToSpace(self.id), kernels::depth_to_space)
    }

    pub fn space_to_depth(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::SpaceToDepth(self.id), kernels::space_to_depth)
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Var<'g> {
        self.graph.unary(
            self.id,
            Op::SliceChannels { x: self.id, start },
            |t| kernels::slice_channels(t, start, len),
        )
    }

    pub fn embed_channels(self, start: usize, total: usize) -> Var<'g> {
        self.graph.unary(
            self.id,
            Op::EmbedChannels { x: self.id, start },
            |t| kernels::embed_channels(t, start, total),
        )
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(self, other: Var<'g>) -> Var<'g> {
        let ca = self.shape()[1];
        let cb = other.shape()[1];
        self.embed_channels(0, ca + cb) + other.embed_channels(ca, ca + cb)
    }

    /// Numerically stable log-softmax over the channel axis of `[n, c, h, w]`.
    pub fn log_softmax_channels(self) -> Var<'g> {
        let c = self.shape()[1];
        // The shift is a constant: log-sum-exp is invariant to it, so the
        // gradient is exact without differentiating through the max.
        let shift = self
            .graph
            .constant(kernels::max_over_channels(&self.value()))
            .expand_over_channels(c);
        let shifted = self - shift;
        let lse = shifted.exp().sum_over_channels().ln().expand_over_channels(c);
        shifted - lse
    }
}

impl<'g> Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.same_graph(&rhs);
        self.graph
            .binary(self.id, rhs.id, Op::Add(self.id, rhs.id), Tensor::add)
    }
}

impl<'g> Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.same_graph(&rhs);
        self.graph
            .binary(self.id, rhs.id, Op::Sub(self.id, rhs.id), Tensor::sub)
    }
}

impl<'g> Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.same_graph(&rhs);
        self.graph
            .binary(self.id, rhs.id, Op::Mul(self.id, rhs.id), Tensor::mul)
    }
}

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.graph
            .unary(self.id, Op::Neg(self.id), |t| t.scale(-1.0))
    }
}
