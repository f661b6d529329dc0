//! Hamiltonians on the truncated phase space: Fourier grids, jets and general series.

pub mod fourier;
pub mod jet;
pub mod model;
pub mod series;

pub use fourier::{FourierBall, ThetaGrid};
pub use jet::{jet_norm, Domain, Jet, JetGrid, JetNorm, JetPoint, NormVariant};
pub use model::{assemble_sectors, PerturbationModel, PointDerivs};
pub use series::{series_norm, Caps, FTSeries, Monomial, Truncation};
