//! Numerical construction of radial graphs over unit sphere bundles whose
//! vertical Gaussian curvature matches a prescribed function.

pub mod curvature;
pub mod curvature_ops;
pub mod error;
pub mod geometry;
pub mod io;
pub mod solvers;
pub mod sparse;
pub mod verification;

pub use curvature::{CurvatureSpec, EvalPoint};
pub use error::{Error, Result};
pub use geometry::{build_bundle_grid, BundleGrid, FrameDerivatives, ScalarField};
