pub mod autodiff;
pub mod chains;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
