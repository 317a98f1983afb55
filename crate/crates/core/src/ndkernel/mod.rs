//! Tensor substrate: dense tensors, a reverse-mode tape, SGD with momentum
//! and the binary checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Dtype;
pub use kernels::matmul_2d;
pub use optim::{clip_global_norm, global_norm, sgd_step, Sgd};
pub use params::{Bound, ParamStore};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
