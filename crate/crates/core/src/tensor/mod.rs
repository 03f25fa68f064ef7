//! Dense tensors with define-by-run reverse-mode differentiation.

mod graph;
mod param;
mod scalar;
mod value;

pub use graph::{ElementwiseOp, Graph, Var, COSINE_EPS};
pub use param::{Gradients, Param, ParamGrad, ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use value::Tensor;
