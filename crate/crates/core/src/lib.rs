pub mod algebra;
pub mod error;
pub mod experiments;
pub mod functional;
pub mod matrix_model;
pub mod pairing;
pub mod quadrature;
pub mod rough;
pub mod sde;
pub mod tensor;

pub use error::{Error, Result};
