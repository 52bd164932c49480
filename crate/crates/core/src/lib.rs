//! Cross-category semi-supervised 3D object detection on frustum point
//! clouds.
//!
//! A frustum detector is trained with 3D box labels on *strong* classes and
//! only 2D box labels on *weak* classes. Knowledge transfers to the weak
//! classes through a box-to-point-cloud fit network, a relaxed reprojection
//! loss and box priors. Everything runs on deterministic synthetic scenes.

pub mod boxpc;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod synthdata;
pub mod weakloss;

pub use error::{Error, GeometryError, Result};
pub use geometry::{Box2D, Box3D, Camera};
