pub mod asymptotics;
pub mod error;
pub mod harness;
pub mod model;
pub mod quadrature;
pub mod spectral;

pub use error::{Error, Result};
