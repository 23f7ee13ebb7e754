//! Small neural-network toolkit: reverse-mode autodiff over matrices, MLPs,
//! and the Adam optimizer.

mod adam;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, cosine_lr, AdamState};
pub use mlp::{mlp_forward, mlp_forward_batch, mlp_forward_tape, MlpSpec};
pub use params::{grad, ParamStore, ParamVars};
pub use tape::{cap_blocks_in_place, rodrigues_matrix, Gradients, Tape, Var};
pub use tensor::{gemm, Tensor};
