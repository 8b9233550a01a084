//! Tape-based reverse-mode differentiation with the operators, optimizers
//! and checkpoint format used by super nets and child networks.

pub mod checkpoint;
mod gemm;
pub mod gradcheck;
pub mod nn;
mod ops;
pub mod optim;
pub mod params;
pub mod tape;

pub use nn::{conv_out_dim, BnMode, BnRunning};
pub use ops::softmax_in_place;
pub use optim::{cosine_lr, Optimizer, OptimizerKind};
pub use params::{Binding, ParamId, ParamKind, ParamStore};
pub use tape::{Backward, CustomBackward, Gradients, Tape, Var};
