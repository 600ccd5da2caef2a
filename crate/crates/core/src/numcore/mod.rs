//! Dense tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport};
pub use graph::{gelu_grad, log_sigmoid, mean_std, sigmoid, Graph, Var, GELU_COEF, GELU_SCALE, LAYER_NORM_EPS};
pub(crate) use tensor::gemm;
pub use tensor::Tensor;
