pub mod backbone;
pub mod binarization;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod labelling;
pub mod pipeline;
pub mod rules;
pub mod sparsity;
pub mod training;

pub use error::{Error, Result};
