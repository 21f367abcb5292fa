use crate::{Error, Result, Tensor};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Index of a node in its [`Graph`]. Ids are only meaningful for the graph
/// that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Primitive op kinds. Each backward rule lives in `exec.rs`; keeping the set
/// small and first-order is what makes the finite-difference audit cheap.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    /// A leaf bound at forward time. `trainable` leaves receive gradients.
    Leaf { trainable: bool },
    /// A leaf with a value baked into the graph at build time.
    Constant(Tensor),
    /// Strictly rank-2 matrix product.
    MatMul { a: NodeId, b: NodeId },
    /// Elementwise sum; the smaller operand may broadcast over the leading
    /// axes of the larger (its shape must be a suffix of the other's).
    Add { a: NodeId, b: NodeId },
    /// Elementwise product of equal shapes.
    Mul { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    Sqrt { x: NodeId },
    /// Softmax over the last axis.
    Softmax { x: NodeId },
    /// Layer normalization over the last axis with learnable scale/shift.
    LayerNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    Concat { axis: usize, parts: Vec<NodeId> },
    /// Mean over one axis; the axis is removed from the shape.
    Mean { x: NodeId, axis: usize },
    Reshape { x: NodeId },
    /// Rank-2 transpose.
    Transpose { x: NodeId },
    /// Contiguous window `[start, start+len)` along one axis.
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Multiplication by a compile-time scalar.
    Scale { x: NodeId, factor: f64 },
    /// `-Σ target · ln(probs)`, reduced over every entry; rank-0 output.
    CrossEntropyOneHot { probs: NodeId, target: NodeId },
}

impl Op {
    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Relu { .. } => "relu",
            Op::Tanh { .. } => "tanh",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Sqrt { .. } => "sqrt",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Slice { .. } => "slice",
            Op::Scale { .. } => "scale",
            Op::CrossEntropyOneHot { .. } => "cross_entropy_one_hot",
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Vec<usize>,
    pub(crate) name: Option<String>,
}

/// An append-only record of primitive ops. Nodes can only reference earlier
/// nodes, so the list is topologically ordered and acyclic by construction.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    params: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Human-readable node label used in error messages.
    pub(crate) fn label(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.name {
            Some(name) => format!("{} ({} '{name}')", id.0, node.op.kind()),
            None => format!("{} ({})", id.0, node.op.kind()),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, name: Option<String>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape, name });
        id
    }

    fn shape_err(&self, kind: &str, detail: String) -> Error {
        Error::Shape {
            node: format!("{} ({kind})", self.nodes.len()),
            detail,
        }
    }

    fn check_shape(&self, kind: &str, shape: &[usize]) -> Result<()> {
        if shape.iter().any(|&e| e == 0) {
            return Err(self.shape_err(kind, format!("zero extent in shape {shape:?}")));
        }
        Ok(())
    }

    /// A leaf bound at forward time that does not receive gradients.
    pub fn input(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        self.check_shape("leaf", shape)?;
        Ok(self.push(
            Op::Leaf { trainable: false },
            shape.to_vec(),
            Some(name.into()),
        ))
    }

    /// A trainable leaf bound at forward time; `backward` reports its gradient.
    pub fn param(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        self.check_shape("leaf", shape)?;
        let id = self.push(
            Op::Leaf { trainable: true },
            shape.to_vec(),
            Some(name.into()),
        );
        self.params.push(id);
        Ok(id)
    }

    /// A leaf whose value is baked into the graph; needs no binding.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape, None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul { a, b }, shape, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        let out = if sa.len() >= sb.len() { sa } else { sb };
        let suffix = if sa.len() >= sb.len() { sb } else { sa };
        if !out.ends_with(suffix) {
            return Err(self.shape_err(
                "add",
                format!("{sb:?} is not a leading-axis broadcast of {sa:?}"),
            ));
        }
        let shape = out.to_vec();
        Ok(self.push(Op::Add { a, b }, shape, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(self.shape_err("mul", format!("shapes differ: {sa:?} vs {sb:?}")));
        }
        let shape = sa.to_vec();
        Ok(self.push(Op::Mul { a, b }, shape, None))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Relu { x }, shape, None)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Tanh { x }, shape, None)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Exp { x }, shape, None)
    }

    /// Natural logarithm. Non-positive inputs surface as the forward pass's
    /// non-finite error; there is no silent clamping.
    pub fn log(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Log { x }, shape, None)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape_of(x).to_vec();
        self.push(Op::Sqrt { x }, shape, None)
    }

    /// Softmax over the last axis; requires rank ≥ 1.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape_of(x);
        if sx.is_empty() {
            return Err(self.shape_err("softmax", "rank-0 input".into()));
        }
        let shape = sx.to_vec();
        Ok(self.push(Op::Softmax { x }, shape, None))
    }

    /// Layer normalization over the last axis. `scale` and `shift` must be
    /// rank-1 with the last axis's extent.
    pub fn layer_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let sx = self.shape_of(x);
        let d = match sx.last() {
            Some(&d) => d,
            None => return Err(self.shape_err("layer_norm", "rank-0 input".into())),
        };
        for (role, id) in [("scale", scale), ("shift", shift)] {
            let s = self.shape_of(id);
            if s != [d] {
                return Err(self.shape_err(
                    "layer_norm",
                    format!("{role} must have shape [{d}], got {s:?}"),
                ));
            }
        }
        let shape = sx.to_vec();
        Ok(self.push(Op::LayerNorm { x, scale, shift }, shape, None))
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| self.shape_err("concat", "no inputs".into()))?;
        let rank = self.shape_of(first).len();
        if axis >= rank {
            return Err(self.shape_err(
                "concat",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        let mut shape = self.shape_of(first).to_vec();
        shape[axis] = 0;
        for &p in parts {
            let sp = self.shape_of(p);
            if sp.len() != rank
                || sp
                    .iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != shape[d])
            {
                return Err(self.shape_err(
                    "concat",
                    format!("shapes disagree off axis {axis}: {shape:?} vs {sp:?}"),
                ));
            }
            shape[axis] += sp[axis];
        }
        Ok(self.push(
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            shape,
            None,
        ))
    }

    /// Mean over `axis`; the axis is removed (a rank-1 input yields rank 0).
    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let sx = self.shape_of(x);
        if axis >= sx.len() {
            return Err(self.shape_err(
                "mean",
                format!("axis {axis} out of range for rank {}", sx.len()),
            ));
        }
        let mut shape = sx.to_vec();
        shape.remove(axis);
        Ok(self.push(Op::Mean { x, axis }, shape, None))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check_shape("reshape", shape)?;
        let numel: usize = shape.iter().product();
        let have: usize = self.shape_of(x).iter().product();
        if numel != have {
            return Err(self.shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape_of(x)),
            ));
        }
        Ok(self.push(Op::Reshape { x }, shape.to_vec(), None))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape_of(x);
        if sx.len() != 2 {
            return Err(self.shape_err("transpose", format!("rank-2 required, got {sx:?}")));
        }
        let shape = vec![sx[1], sx[0]];
        Ok(self.push(Op::Transpose { x }, shape, None))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sx = self.shape_of(x);
        if axis >= sx.len() {
            return Err(self.shape_err(
                "slice",
                format!("axis {axis} out of range for rank {}", sx.len()),
            ));
        }
        if len == 0 || start + len > sx[axis] {
            return Err(self.shape_err(
                "slice",
                format!(
                    "window [{start}, {}) out of range for extent {}",
                    start + len,
                    sx[axis]
                ),
            ));
        }
        let mut shape = sx.to_vec();
        shape[axis] = len;
        Ok(self.push(
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            shape,
            None,
        ))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(self.shape_err("scale", format!("non-finite factor {factor}")));
        }
        let shape = self.shape_of(x).to_vec();
        Ok(self.push(Op::Scale { x, factor }, shape, None))
    }

    /// Cross-entropy against a one-hot (or any non-negative) target,
    /// `-Σ target · ln(probs)` over every entry; the output is a rank-0 scalar.
    pub fn cross_entropy_one_hot(&mut self, probs: NodeId, target: NodeId) -> Result<NodeId> {
        let (sp, st) = (self.shape_of(probs), self.shape_of(target));
        if sp != st || sp.is_empty() {
            return Err(self.shape_err(
                "cross_entropy_one_hot",
                format!("need equal rank ≥ 1 shapes, got {sp:?} vs {st:?}"),
            ));
        }
        Ok(self.push(Op::CrossEntropyOneHot { probs, target }, Vec::new(), None))
    }

    /// Sum over every entry, composed from `mean` + `scale`; rank-0 output.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let numel: usize = self.shape_of(x).iter().product();
        let flat = self.reshape(x, &[numel])?;
        let mean = self.mean(flat, 0)?;
        self.scale(mean, numel as f64)
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn name_of(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].name.as_deref()
    }

    /// Trainable leaves in declaration order.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// The most recently added node — by convention the value being optimized.
    pub fn root(&self) -> NodeId {
        assert!(!self.nodes.is_empty(), "root() on empty graph");
        NodeId(self.nodes.len() - 1)
    }
}
