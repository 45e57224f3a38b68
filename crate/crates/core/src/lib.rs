pub mod denoiser;
pub mod error;
pub mod forward;
pub mod sampler;
pub mod scaling;
pub mod sde;
pub mod trainer;
pub mod vocab;

pub use error::{MdmError, Result};

/// Crate version recorded in experiment artifacts.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
