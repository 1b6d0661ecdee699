//! Geometry-aware language-guided grasping at desk scale.
//!
//! The crate contains a small dense tensor toolkit with a finite-difference
//! gradient checker, depth-guided geometric attention ([`dggm`]), adaptive
//! dense channel integration ([`adci`]), a toy end-to-end grasping model
//! ([`model`]), a synthetic RGB-D scene generator with its binary container
//! ([`data`]), and rotated-rectangle grasp metrics ([`metrics`]). [`timing`]
//! compares plain and geometry-prior attention.

pub mod adci;
pub mod data;
pub mod dggm;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod model;
pub mod par;
pub mod scalar;
pub mod tensor;
pub mod timing;

pub use error::{Error, Result};
pub use par::Exec;
pub use scalar::Scalar;
pub use tensor::Tensor;
