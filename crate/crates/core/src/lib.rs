//! Self-supervised volumetric super-resolution for single-photon counting
//! cubes: a Poisson forward simulator, exact symmetry operators, a compact
//! reverse-mode autodiff engine with a 3D up-projection network, unbiased
//! KL-risk and equivariance training objectives, depth metrics, and a
//! reproducible experiment pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons deliberately catch NaN

pub mod autodiff;
pub mod cube;
pub mod error;
pub mod forward;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod operators;
pub mod rng;
pub mod runner;
pub mod trainer;

pub use cube::{CubeDims, DepthImage, DepthUnit, PhotonCountingCube};
pub use error::{Error, Result};
pub use operators::{ScaleFactor, TransformSpec};
pub use rng::Rng;
