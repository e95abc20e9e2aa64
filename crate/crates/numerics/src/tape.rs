use crate::error::{NumericsError, Result};
use crate::{Array, Real};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op is expanded to the left's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    Same,
    Scalar,
    /// rhs repeats over leading blocks: lhs viewed as `[outer, rhs.len()]`.
    Row,
    /// each rhs element repeats over a trailing block: lhs as `[rhs.len(), inner]`.
    Col,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryKind {
    Exp,
    Log,
    Abs,
    Tan,
    Sigmoid,
    Relu,
    Sqrt,
    Pow(f64),
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        bcast: Bcast,
    },
    Affine {
        a: usize,
        mul: f64,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    SoftmaxRows {
        a: usize,
    },
    LogSoftmaxRows {
        a: usize,
    },
    LayerNormRows {
        a: usize,
        inv_std: Vec<T>,
    },
    Sum {
        a: usize,
    },
    SumAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        a: usize,
        outer: usize,
        src_width: usize,
        start: usize,
    },
    GatherRows {
        a: usize,
        idx: Vec<usize>,
    },
    GatherFlat {
        a: usize,
        idx: Vec<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Bilinear {
        feat: usize,
        xs: usize,
        ys: usize,
        stride: f64,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinKind::Add => "add",
                BinKind::Sub => "sub",
                BinKind::Mul => "mul",
                BinKind::Div => "div",
            },
            Op::Affine { .. } => "affine",
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Exp => "exp",
                UnaryKind::Log => "log",
                UnaryKind::Abs => "abs",
                UnaryKind::Tan => "tan",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Relu => "relu",
                UnaryKind::Sqrt => "sqrt",
                UnaryKind::Pow(_) => "pow",
            },
            Op::Clamp { .. } => "clamp",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::SoftmaxRows { .. } => "softmax",
            Op::LogSoftmaxRows { .. } => "log_softmax",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::Sum { .. } => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherFlat { .. } => "gather",
            Op::Conv2d { .. } => "conv2d",
            Op::Bilinear { .. } => "bilinear_sample",
        }
    }
}

/// Static geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) struct Node<T> {
    pub op: Op<T>,
    pub value: Array<T>,
    pub needs_grad: bool,
}

/// Eager expression graph. Nodes are appended in topological order.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by matmul and conv nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn add_macs(&mut self, n: usize) {
        self.macs += n as u64;
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array::scalar(T::lit(v)))
    }

    fn push_leaf(&mut self, value: Array<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, op: Op<T>, value: Array<T>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Forward value of a node (computed when the node was recorded).
    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Alias of [`Tape::value`], kept for callers that think in terms of
    /// evaluating an expression.
    pub fn evaluate(&self, root: Var) -> Array<T> {
        self.value(root).clone()
    }

    /// First node holding a non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        for (index, node) in self.nodes.iter().enumerate() {
            if !node.value.all_finite() {
                return Err(NumericsError::NonFinite {
                    index,
                    op: node.op.name(),
                });
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar root; returns `d root / d p` for each `p`.
    ///
    /// Leaves not listed in `params` are never materialized. Constants get
    /// zero gradients if requested.
    pub fn gradients(&self, root: Var, params: &[Var]) -> Result<Vec<Array<T>>> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(NumericsError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(Array::full(root_val.shape(), T::one()));
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(params
            .iter()
            .map(|p| {
                grads
                    .get_mut(p.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Array::zeros(self.nodes[p.0].value.shape()))
            })
            .collect())
    }

    pub(crate) fn accumulate(&self, grads: &mut [Option<Array<T>>], target: usize, g: Array<T>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}
