pub mod error;
pub mod harmonic_balance;
pub mod model;
pub mod ode;
pub mod run;
pub mod scenario;
pub mod slowflow;
pub mod spectral;
pub mod sweep;
pub mod timedomain;

pub use error::{Error, Result};
