//! Differentiable triangle rasterization.
//!
//! The forward pass is an ordinary z-buffered rasterizer. Gradients are split
//! in two: the smooth part (interpolation and perspective-correct barycentrics)
//! is the exact adjoint of the forward computation, and the visibility part is
//! estimated from pairs of adjacent pixels whose triangle ids differ, treating
//! every boundary as a unit-length axis-aligned edge between the two pixel
//! centers.

pub mod edgegrad;
pub mod error;
pub mod fd;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod smooth;

pub use error::{Error, Result};
