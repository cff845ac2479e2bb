//! Few-shot action recognition over pre-extracted clip features.

pub mod autodiff;
pub mod checkpoint;
pub mod enrichment;
pub mod episodes;
pub mod error;
pub mod matching;
pub mod model;
pub mod training;

pub use error::{Error, Result};
