pub mod data;
pub mod error;
pub mod harness;
pub mod matrixfns;
pub mod norms;
pub mod objectives;
pub mod optimizers;
pub mod param;
pub mod quadlab;
pub mod rng;
pub mod spectra;

pub use error::{Error, Result};
