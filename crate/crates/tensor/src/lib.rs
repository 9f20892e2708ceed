//! Dense `f64` tensors and a reverse-mode tape sized for batch-size-one
//! convolutional training on a CPU.
//!
//! Image-like tensors are laid out channel-major (`[C, H, W]`, row-major).
//! There is no batch axis. A [`Tape`] records one forward pass; calling
//! [`Tape::backward`] returns gradients for every node that depends on a
//! trainable leaf.

mod bilinear;
mod linalg;
mod params;
mod tape;
mod tensor;

pub use bilinear::{BilinearMap, BilinearTaps};
pub use linalg::{col2im, gemm, im2col};
pub use params::ParamStore;
pub use tape::{Grads, Tape, Var};
pub use tensor::{ShapeError, Tensor};
