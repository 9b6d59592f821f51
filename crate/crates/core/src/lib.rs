//! Scaling laws, inference cost and training-budget allocation for
//! Mixture-of-Experts language models.

pub mod allocation;
pub mod error;
pub mod fit;
pub mod inference;
pub mod io;
pub mod synth;
pub mod law;

pub use error::{Error, ErrorKind, Result};
pub use law::{ArchitectureConvention, DenseLawParams, ScalingLawParams};
