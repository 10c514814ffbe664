pub mod align_denoise;
pub mod cif;
pub mod ctc;
pub mod data;
pub mod error;
pub mod eval;
pub mod insertion;
pub mod masked;
pub mod models;
pub mod nn;
pub mod regularized;

pub use error::{Error, Result};
