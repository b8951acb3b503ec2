pub mod ablation;
pub mod clients;
pub mod error;
pub mod fixtures;
pub mod neighbors;
pub mod pipeline;
pub mod reporting;
pub mod seed;
pub mod statistics;
pub mod tokenization;

pub use error::{Error, Result};
