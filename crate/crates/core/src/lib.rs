pub mod abstractive;
pub mod autodiff;
pub mod bench;
pub mod candidates;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod training;

pub use error::{Error, Result};
