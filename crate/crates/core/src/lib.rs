//! Deformation of surface-aligned Gaussian splat scenes without a proxy mesh.

pub mod adapt;
pub mod arap;
pub mod bbw;
pub mod error;
pub mod eval;
pub mod graph;
pub mod handles;
pub mod laplacian;
pub mod pipeline;
pub mod ply;
pub mod sparse;
pub mod splat;
pub mod synthetic;

pub use error::{Error, Result};
pub use splat::{OccupancyEllipse, SceneScale, Splat, SplatSet, Vec3};
