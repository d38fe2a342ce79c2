//! Deformable registration of multi-modal 3D volumes that keeps labeled rigid
//! bodies rigid and volume-preserving.
//!
//! The deformation is parameterized by a stationary velocity field and
//! integrated by scaling and squaring. The objective combines a multi-modal
//! similarity term, a diffusion smoothness term and a set of rigidity
//! penalties evaluated on the moving image's body labels.

pub mod config;
pub mod error;
pub mod field;
pub mod io;
mod kv;
pub mod mat3;
pub mod metrics;
pub mod objective;
pub mod optimizer;
mod parallel;
pub mod phantom;
pub mod rigidity;
pub mod similarity;
mod stencil;
pub mod volume;

pub use error::{Error, Result};

/// A 3-vector in voxel coordinates, ordered `[x, y, z]`.
pub type Vec3 = [f64; 3];
