//! Joint estimation of continuous camera motion and a time-dependent neural
//! SDF from a monocular image sequence.
//!
//! A velocity network maps time to instantaneous angular and linear velocity;
//! Euler integration of those velocities yields relative rigid transforms
//! between any two time instants. A neural signed-distance field plus a color
//! network, rendered volumetrically along camera rays, is trained jointly
//! with the velocity network from photometric, eikonal, flow-consistency and
//! SDF-consistency objectives. Synthetic scenes with analytic ground truth,
//! the training loop, and the standard image/depth/trajectory metrics are
//! all part of this crate; the `velosdf` binary exposes the pipeline as a
//! command line tool.

pub mod autodiff;
pub mod camera;
pub mod field;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod synthetic;
pub mod trainer;
