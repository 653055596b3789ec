pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod model;
pub mod nn;
pub mod training;
mod fused;
mod conv;

pub use error::{Error, Result};
