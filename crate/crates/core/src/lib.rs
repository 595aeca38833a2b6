pub mod denoiser;
pub mod error;
pub mod io;
pub mod latent;
pub mod mask;
pub mod numerics;
pub mod nurse;
pub mod pdi;
pub mod prompt;
pub mod scb;

pub use error::{PdiError, Result};

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
