//! Dense tensors with a tape-based reverse-mode autodiff engine.
//!
//! Everything the codec and restorer networks need lives here: the tape and
//! its differentiable ops, the parameterized layers, Adam, a central
//! finite-difference checker and the `RSMM` checkpoint format.
//!
//! Models are generic over [`Scalar`] so the same code trains at `f32` and
//! is gradient-checked at `f64`.

mod checkpoint;
mod conv;
mod gradcheck;
mod layers;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, DType, Record, RecordData};
pub use gradcheck::{grad_check, grad_check_params, grad_check_params_surrogate, GradCheckReport};
pub use layers::{
    BatchNorm2d, BatchStats, Conv2d, ConvBlock, ConvTranspose2d, LayerKind, LayerParams, Linear, Module, UpBlock,
};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
