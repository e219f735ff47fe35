pub mod data;
pub mod error;
pub mod harness;
pub mod heads;
pub mod io;
pub mod likelihood;
pub mod metrics;
pub mod mle;
pub mod optim;
pub mod simulate;
pub mod vae;

pub use data::{CountMatrix, CountVector, PopulationEstimate, WeightedRows};
pub use error::{Error, Result};
