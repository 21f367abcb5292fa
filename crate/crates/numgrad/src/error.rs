use std::fmt;

/// Errors raised while building or evaluating a graph.
///
/// Shape problems are detected as early as possible: at node-creation time
/// for op/operand mismatches, at forward time for bindings that disagree
/// with a leaf's declared shape.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible with the op's rules.
    Shape { node: String, detail: String },
    /// A leaf had no bound value at forward time.
    UnboundLeaf { node: String },
    /// An op produced NaN or ±Inf from finite inputs.
    NonFinite { node: String },
    /// `backward` was asked to differentiate a non-scalar root.
    NonScalarRoot { node: String, shape: Vec<usize> },
    /// A tensor's shape and value count disagree, or an extent is zero.
    InvalidTensor { detail: String },
    /// `grad_check` was called with a non-positive step.
    InvalidStep { step: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { node, detail } => {
                write!(f, "shape error at node {node}: {detail}")
            }
            Error::UnboundLeaf { node } => {
                write!(f, "leaf {node} has no bound value")
            }
            Error::NonFinite { node } => {
                write!(f, "non-finite value produced at node {node}")
            }
            Error::NonScalarRoot { node, shape } => {
                write!(f, "backward root {node} is not scalar (shape {shape:?})")
            }
            Error::InvalidTensor { detail } => write!(f, "invalid tensor: {detail}"),
            Error::InvalidStep { step } => {
                write!(f, "finite-difference step must be positive, got {step}")
            }
        }
    }
}

impl std::error::Error for Error {}
