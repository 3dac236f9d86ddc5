//! On-the-sphere learned image compression toolkit.
//!
//! The crate covers the full chain: HEALPix grids and their neighbor
//! structure, spherical convolution operators (plain, strided, causally
//! masked, and transposed), a differentiable toy codec with a scale/mean
//! hyperprior and a spatial context model, bit-exact range coding, and the
//! evaluation stack (equirectangular resampling, WS-PSNR, BD-rate).

pub mod autodiff;
pub mod entropy;
pub mod error;
pub mod healpix;
pub mod nn;
pub mod ops;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
