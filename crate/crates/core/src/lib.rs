//! Numerical toolkit for the fibered Schrodinger inverse problem on a periodic waveguide
//! `R x omega`: cross-section meshing, quasi-periodic spectral machinery, partial
//! Dirichlet-to-Neumann maps, complex geometric optics solutions, Fourier recovery of
//! potential differences and stability experiments.

pub mod cgo;
pub mod conductivity;
pub mod error;
pub mod fem;
pub mod forward;
pub mod geometry;
pub mod linalg;
pub mod oracle;
pub mod recon;
pub mod spectral;

pub use error::{Error, Result};
pub use geometry::{BoundaryPartition, CrossSectionMesh, CrossSectionSpec, FaceSet, Shape};
pub use linalg::C64;

/// Version of the core crate, recorded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
