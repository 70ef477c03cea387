#![recursion_limit = "256"]
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod io;
pub mod models;
pub mod reprogram;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Graph, Tensor, Var};
