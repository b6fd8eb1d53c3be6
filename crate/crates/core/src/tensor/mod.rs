//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every primitive as a node holding the op tag, the input
//! references, and the computed output values; [`Tape::backward`] walks the
//! record once in reverse insertion order (which is a reverse topological
//! order, since inputs always precede their consumers) and accumulates
//! gradients into every node that transitively depends on a parameter.
//!
//! The op set is exactly what the architecture needs: 3-D convolution,
//! linear maps, group normalization, pointwise nonlinearities, 2× resampling,
//! token reshuffling, and the small batched linear-algebra pieces of the
//! recurrent token mixer.
//!
//! Failure conventions:
//! * shape violations are programming errors and panic with a message
//!   starting "contract violation";
//! * non-finite values are runtime numeric errors: every node's output is
//!   scanned as it is recorded, and the first offender is remembered as the
//!   tape's [`Poison`] state for callers to turn into a proper error.

use crate::dtype::Real;

pub(crate) mod backward;
mod gradcheck;
pub(crate) mod kernels;
mod ops;

pub use gradcheck::{check_builder, finite_diff_check, FdReport};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// First non-finite value observed on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Poison {
    pub node: TensorId,
    pub op: &'static str,
}

/// Recorded primitive. Scalar attributes are kept as `f64` so the enum stays
/// independent of the tape's element type.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Neg(TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    Recip(TensorId),
    Exp(TensorId),
    Ln(TensorId),
    Abs(TensorId),
    Sigmoid(TensorId),
    LogSigmoid(TensorId),
    LeakyRelu(TensorId, f64),
    SoftmaxAxis(TensorId, usize),
    Clamp(TensorId, f64, f64),
    MaxPair(TensorId, TensorId),
    MaxConst(TensorId, f64),
    Linear {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    Conv3d {
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        groups: usize,
        eps: f64,
    },
    AddChannelBias(TensorId, TensorId),
    Down2(TensorId),
    Up2(TensorId),
    ConcatC(TensorId, TensorId),
    ChannelMean(TensorId),
    ChannelMax(TensorId),
    MulGateSpatial(TensorId, TensorId),
    MulGateChannel(TensorId, TensorId),
    Tokenize(TensorId),
    Detokenize(TensorId),
    FlipTokens(TensorId),
    Reshape(TensorId),
    AddBcastOuter(TensorId, TensorId),
    SelectToken(TensorId, usize),
    StackTokens(Vec<TensorId>),
    BOuter(TensorId, TensorId),
    BMatVec(TensorId, TensorId),
    BDot(TensorId, TensorId),
    MulBcastB(TensorId, TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    SpatialSum(TensorId),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Recip(..) => "recip",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Abs(..) => "abs",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogSigmoid(..) => "logsigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::SoftmaxAxis(..) => "softmax_axis",
            Op::Clamp(..) => "clamp",
            Op::MaxPair(..) => "max_pair",
            Op::MaxConst(..) => "max_const",
            Op::Linear { .. } => "linear",
            Op::Conv3d { .. } => "conv3d",
            Op::GroupNorm { .. } => "group_norm",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::Down2(..) => "down2",
            Op::Up2(..) => "up2",
            Op::ConcatC(..) => "concat_c",
            Op::ChannelMean(..) => "channel_mean",
            Op::ChannelMax(..) => "channel_max",
            Op::MulGateSpatial(..) => "mul_gate_spatial",
            Op::MulGateChannel(..) => "mul_gate_channel",
            Op::Tokenize(..) => "tokenize",
            Op::Detokenize(..) => "detokenize",
            Op::FlipTokens(..) => "flip_tokens",
            Op::Reshape(..) => "reshape",
            Op::AddBcastOuter(..) => "add_bcast_outer",
            Op::SelectToken(..) => "select_token",
            Op::StackTokens(..) => "stack_tokens",
            Op::BOuter(..) => "bouter",
            Op::BMatVec(..) => "bmatvec",
            Op::BDot(..) => "bdot",
            Op::MulBcastB(..) => "mul_bcast_b",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SpatialSum(..) => "spatial_sum",
        }
    }

    fn inputs(&self) -> Vec<TensorId> {
        match self {
            Op::Leaf => vec![],
            Op::Neg(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Recip(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Abs(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::SoftmaxAxis(a, _)
            | Op::Clamp(a, _, _)
            | Op::MaxConst(a, _)
            | Op::Down2(a)
            | Op::Up2(a)
            | Op::ChannelMean(a)
            | Op::ChannelMax(a)
            | Op::Tokenize(a)
            | Op::Detokenize(a)
            | Op::FlipTokens(a)
            | Op::Reshape(a)
            | Op::SelectToken(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SpatialSum(a) => vec![*a],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MaxPair(a, b)
            | Op::AddChannelBias(a, b)
            | Op::ConcatC(a, b)
            | Op::MulGateSpatial(a, b)
            | Op::MulGateChannel(a, b)
            | Op::AddBcastOuter(a, b)
            | Op::BOuter(a, b)
            | Op::BMatVec(a, b)
            | Op::BDot(a, b)
            | Op::MulBcastB(a, b) => vec![*a, *b],
            Op::Conv3d { x, w, .. } => vec![*x, *w],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::GroupNorm {
                x, gamma, beta, ..
            } => vec![*x, *gamma, *beta],
            Op::StackTokens(ids) => ids.clone(),
        }
    }
}

pub(crate) struct Node<T> {
    pub op: Op,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

/// Growable record of one forward computation plus its gradients.
pub struct Tape<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    poison: Option<Poison>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            poison: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input: participates in the forward pass only.
    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize]) -> TensorId {
        self.push_leaf(data, shape, false)
    }

    /// Trainable input: receives a gradient from [`Tape::backward`].
    pub fn param(&mut self, data: Vec<T>, shape: &[usize]) -> TensorId {
        self.push_leaf(data, shape, true)
    }

    fn push_leaf(&mut self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> TensorId {
        assert!(
            shape.iter().product::<usize>() == data.len(),
            "contract violation: leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(Op::Leaf, shape.to_vec(), data, requires_grad)
    }

    pub(crate) fn push_op(&mut self, op: Op, shape: Vec<usize>, data: Vec<T>) -> TensorId {
        let rg = op
            .inputs()
            .iter()
            .any(|i| self.nodes[i.0].requires_grad);
        self.push(op, shape, data, rg)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = TensorId(self.nodes.len());
        if self.poison.is_none() {
            if let Some(_bad) = data.iter().position(|v| !v.is_finite()) {
                self.poison = Some(Poison {
                    node: id,
                    op: op.name(),
                });
            }
        }
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
            grad: None,
        });
        id
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> T {
        assert!(
            self.nodes[id.0].data.len() == 1,
            "contract violation: scalar_value on tensor of shape {:?}",
            self.nodes[id.0].shape
        );
        self.nodes[id.0].data[0]
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached
    /// this node.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// First non-finite output recorded so far, if any.
    pub fn poison(&self) -> Option<Poison> {
        self.poison
    }

    /// Drop all gradient buffers, keeping the recorded graph.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn ensure_grad(&mut self, id: TensorId) {
        let node = &mut self.nodes[id.0];
        if node.grad.is_none() {
            node.grad = Some(vec![T::zero(); node.data.len()]);
        }
    }

    pub(crate) fn take_grad(&mut self, id: TensorId) -> Vec<T> {
        self.ensure_grad(id);
        self.nodes[id.0].grad.take().expect("grad just ensured")
    }

    pub(crate) fn put_grad(&mut self, id: TensorId, g: Vec<T>) {
        debug_assert_eq!(g.len(), self.nodes[id.0].data.len());
        self.nodes[id.0].grad = Some(g);
    }

    /// Adds `contrib` into the gradient buffer of `id` if that node requires
    /// a gradient; no-op otherwise.
    pub(crate) fn accum_grad(&mut self, id: TensorId, contrib: &[T]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        self.ensure_grad(id);
        let g = self.nodes[id.0].grad.as_mut().expect("grad just ensured");
        debug_assert_eq!(g.len(), contrib.len());
        for (gi, ci) in g.iter_mut().zip(contrib.iter()) {
            *gi += *ci;
        }
    }
}
