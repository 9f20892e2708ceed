//! UV-space makeup transfer: a linear morphable face model, a symmetric UV
//! texture pipeline with a texture-differentiable rasterizer, the transfer
//! generator and discriminators, training objectives, and the trainer.

pub mod error;
pub mod io;
pub mod morphable;
pub mod net;
pub mod objectives;
pub mod trainer;
pub mod uv;

pub use error::{Error, Result};
