pub mod cli;
pub mod error;
pub mod linalg;
pub mod net;
pub mod quant;
pub mod seed;
pub mod statlab;
pub mod trainer;

pub use error::{Error, Result};
