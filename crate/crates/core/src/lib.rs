//! Finite-truncation KAM machinery for Hamiltonian PDEs with clustered spectra.

pub mod error;
pub mod blocks;
pub mod spectrum;
pub mod hamiltonian;
pub mod flow;
pub mod homological;
pub mod kam;
pub mod kg;
pub mod instances;

pub use error::{KamError, Result};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
