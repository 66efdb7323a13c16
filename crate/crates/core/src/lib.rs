//! Cloud detection with a lightweight multi-level feature connected CNN,
//! and its lowering onto a closed set of whole-image raster operations.

pub mod decimal;
pub mod emit;
pub mod error;
mod gemm;
pub mod isa;
pub mod layers;
pub mod lower;
pub mod metrics;
pub mod model;
pub mod params_io;
pub mod raster;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use gemm::Real;
pub use tensor::{BNParams, ConvWeights, Kernel2D, PReLUParams, Tensor};

