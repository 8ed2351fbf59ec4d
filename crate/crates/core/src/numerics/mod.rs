//! Dense f64 tensors, the layer primitives built on them (each with its
//! hand-written adjoint), a deterministic generator, and a central
//! finite-difference checker used as the test oracle for every adjoint.

mod gradcheck;
mod ops;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, numeric_grad, DEFAULT_STEP};
pub use ops::{
    cross_entropy_logits, dropout, dropout_backward, gelu, gelu_backward, gelu_scalar,
    layer_norm, layer_norm_backward, mean_pool_rows, mean_pool_rows_backward, softmax_rows,
    softmax_rows_backward, DropoutMask, LayerNormCache, LayerNormGrads, PoolPlan,
};
pub use rng::Rng;
pub use tensor::Tensor;
