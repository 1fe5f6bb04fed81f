//! Differentiable tensor primitives: a define-by-run tape, the layers built
//! on it, an adaptive-moment optimizer and a finite-difference checker.

mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod real;
mod tensor;

pub use gradcheck::{
    finite_difference_check, op_suite, relative_gap, GradCheckReport, OpCheck, FD_STEP,
};
pub use graph::{Gradients, Graph, Var, BATCHNORM_MOMENTUM, NORM_EPS};
pub use layers::{BatchNorm1d, Conv2d, Embedding, LayerNorm, Linear, Session};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DEFAULT_LEARNING_RATE};
pub use params::{BufferId, ParamId, ParamStore, Parameter, RunningStats};
pub use real::{DType, Real};
pub use tensor::Tensor;
