pub mod cov;
pub mod error;
pub mod geo;
pub mod mcmc;
pub mod metrics;
pub mod model;
pub mod nngp;
pub mod par;
pub mod predict;
pub mod simulate;
pub mod sparse;

pub use error::{Error, ErrorKind, Result};
