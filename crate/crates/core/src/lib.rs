//! A convolutional diffusion backbone (DiCo) built on a small reverse-mode
//! autodiff tensor engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below name the common instantiations.

mod binio;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod kv;
pub mod nn;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use kernels::{Activation, Conv2dSpec, ResampleDirection};
pub use nn::{DiCo, ModelConfig, NetOutput};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type DiCo32 = DiCo<f32>;
pub type DiCo64 = DiCo<f64>;
