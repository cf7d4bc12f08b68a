//! Simulation workbench for Jacobian-driven dissection assistance.
//!
//! A volumetric tissue phantom is simulated with a quasi-static constraint
//! solver. Exposure of an operator-designated dissection segment is measured
//! with ring-based feature pairs, an assistance position is chosen from the
//! SVD of an averaged control Jacobian, and a PD visual-servoing loop drives
//! the end effector to open, de-shear and tension the tissue around the
//! segment. Perception is synthetic: ray-cast visibility and noisy partial
//! point clouds feed a Chamfer-style registration term.

pub mod aps;
pub mod exposure;
pub mod geometry;
pub mod harness;
pub mod perception;
pub mod servo;
pub mod xpbd;

pub use nalgebra::Vector3;

/// All positions are in meters.
pub type Vec3 = Vector3<f64>;
