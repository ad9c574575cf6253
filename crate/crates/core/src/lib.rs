//! Monte Carlo evaluation of Picard iterates for the Navier–Stokes equations
//! through heat-kernel convolutions.

pub mod allocation;
pub mod combinatorics;
pub mod config;
pub mod convolution;
pub mod error;
pub mod error_ci;
pub mod heat;
pub mod iteration;
pub mod quadrature;
pub mod riesz;
pub mod sampling;
pub mod stats;
pub mod stream;

pub use error::{Error, Result};
pub use stats::EstimateWithError;
pub use stream::RandomStream;
