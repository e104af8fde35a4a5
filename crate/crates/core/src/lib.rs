pub mod benchmarks;
pub mod clustering;
pub mod data;
pub mod error;
pub mod importance;
pub mod lstm;
pub mod numerics;
pub mod pipeline;
pub mod portfolio;
pub mod snap;
pub mod stats;

pub use error::{Error, Result};
