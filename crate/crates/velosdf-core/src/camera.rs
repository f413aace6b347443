//! Pinhole camera model and ray generation.
//!
//! Camera frames are +x right, +y down, +z forward; pixel centers sit at
//! integer coordinates, with `u` indexing columns and `v` indexing rows.
//! Primary rays are expressed in the camera's own frame, so their origin is
//! the zero vector.

use crate::geometry::{normalize, Vec3};

/// Pinhole intrinsics. Focal lengths and principal point are in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// A ray with unit direction. For primary rays the origin is the camera
/// center, i.e. zero in the camera frame.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Intrinsics {
    /// The camera-frame ray through the center of pixel `(row, col)`.
    pub fn pixel_ray(&self, row: usize, col: usize) -> Ray {
        let x = (col as f64 - self.cx) / self.fx;
        let y = (row as f64 - self.cy) / self.fy;
        Ray {
            origin: [0.0; 3],
            direction: normalize([x, y, 1.0]),
        }
    }

    /// Projects a camera-frame point to pixel coordinates `(u, v)` =
    /// `(column, row)`. Returns `None` for points at or behind the camera
    /// plane (`z <= 1e-9`); callers treat those as invalid correspondences.
    pub fn project(&self, p: Vec3) -> Option<[f64; 2]> {
        if p[2] <= 1e-9 {
            return None;
        }
        Some([
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ])
    }

    /// Whether a projected pixel coordinate can be bilinearly sampled, i.e.
    /// all four neighboring pixel centers lie inside the image.
    pub fn in_bilinear_bounds(&self, uv: [f64; 2]) -> bool {
        uv[0] >= 0.0
            && uv[1] >= 0.0
            && uv[0] <= (self.width - 1) as f64
            && uv[1] <= (self.height - 1) as f64
    }
}
