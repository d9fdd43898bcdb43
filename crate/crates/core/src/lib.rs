//! Homogenization toolkit for periodic finite-strain elastoplastic composites.

pub mod error;
pub mod cell;
pub mod energy;
pub mod finsler;
pub mod gamma;
pub mod gluing;
pub mod grid;
pub mod io;
pub mod materials;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision 3x3 matrix.
pub type Mat3 = tensor::Matrix3<f64>;
/// Double-precision element of SL(3).
pub type SL3Element = tensor::SpecialLinear3<f64>;
/// Double-precision element of sl(3).
pub type Sl3Tangent = tensor::TracelessMatrix3<f64>;

/// Single-precision variants.
pub type Mat3F32 = tensor::Matrix3<f32>;
pub type SL3ElementF32 = tensor::SpecialLinear3<f32>;
