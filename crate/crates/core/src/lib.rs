pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod query;
pub mod report;
pub mod seed;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use experiment::{ALConfig, DatasetSource, ExperimentResult, RoundMetrics};
pub use query::Strategy;
