//! Loading generated datasets from disk into memory.
//!
//! Directory layout: `images/%04d.png`, `depth/%04d.pfm` (optional),
//! `gt_traj.txt` (optional), `intrinsics.txt`, `meta.json`. Frames are
//! addressed by index, so loading never depends on directory listing order.

use super::{pfm::read_pfm, read_intrinsics, read_png_rgb, traj::read_trajectory, IoError};
use crate::camera::Intrinsics;
use crate::geometry::Pose;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// `meta.json`: generation parameters every consumer needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub frames: usize,
    pub near: f64,
    pub far: f64,
    pub seed: u64,
    /// Echo of the generator configuration (scene and profile parameters).
    pub generator: BTreeMap<String, String>,
}

/// An in-memory dataset: images in linear `[0, 1]`, normalized timestamps,
/// and the train/test split.
#[derive(Debug)]
pub struct SceneDataset {
    /// Per frame: row-major interleaved RGB, `height * width * 3` values.
    pub images: Vec<Vec<f64>>,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    /// Normalized time of each frame, `t_i = -1 + 2 i / (T - 1)`.
    pub times: Vec<f64>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Ground-truth camera-to-world poses, when the generator wrote them.
    pub gt_traj: Option<Vec<Pose>>,
    /// Ground-truth depth maps (ray distance; 0 marks a miss), when present.
    pub gt_depths: Option<Vec<Vec<f64>>>,
    pub meta: DatasetMeta,
}

impl SceneDataset {
    pub fn frame_count(&self) -> usize {
        self.images.len()
    }

    /// One pixel of one frame as RGB.
    pub fn pixel(&self, frame: usize, row: usize, col: usize) -> [f64; 3] {
        let base = (row * self.width + col) * 3;
        let img = &self.images[frame];
        [img[base], img[base + 1], img[base + 2]]
    }
}

/// The artifact-wide frame-time convention: `T` frames map linearly onto
/// `[-1, 1]`, with a single frame sitting at 0.
pub fn normalized_time(i: usize, frames: usize) -> f64 {
    if frames <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (frames - 1) as f64
    }
}

/// Loads a dataset directory. Frames `i` with `i % test_every == 0` form
/// the held-out test split; the rest train.
pub fn load_dataset(dir: &Path, test_every: usize) -> Result<SceneDataset, IoError> {
    assert!(test_every >= 1, "test_every must be at least 1");
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(IoError::MissingFile(meta_path));
    }
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
        .map_err(|e| IoError::Format(format!("{}: {e}", meta_path.display())))?;
    let intrinsics = read_intrinsics(&dir.join("intrinsics.txt"))?;

    let mut images = Vec::with_capacity(meta.frames);
    for i in 0..meta.frames {
        let path = dir.join("images").join(format!("{i:04}.png"));
        let (pixels, w, h) = read_png_rgb(&path)?;
        if w != intrinsics.width || h != intrinsics.height {
            return Err(IoError::InconsistentSizes(format!(
                "{}: {w}x{h} vs intrinsics {}x{}",
                path.display(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        images.push(pixels);
    }

    let depth_dir = dir.join("depth");
    let gt_depths = if depth_dir.is_dir() {
        let mut maps = Vec::with_capacity(meta.frames);
        for i in 0..meta.frames {
            let path = depth_dir.join(format!("{i:04}.pfm"));
            let (depth, w, h) = read_pfm(&path)?;
            if w != intrinsics.width || h != intrinsics.height {
                return Err(IoError::InconsistentSizes(format!(
                    "{}: {w}x{h} vs intrinsics {}x{}",
                    path.display(),
                    intrinsics.width,
                    intrinsics.height
                )));
            }
            maps.push(depth);
        }
        Some(maps)
    } else {
        None
    };

    let traj_path = dir.join("gt_traj.txt");
    let gt_traj = if traj_path.exists() {
        let traj = read_trajectory(&traj_path)?;
        if traj.len() != meta.frames {
            return Err(IoError::InconsistentSizes(format!(
                "{}: {} poses for {} frames",
                traj_path.display(),
                traj.len(),
                meta.frames
            )));
        }
        Some(traj.into_iter().map(|(_, pose)| pose).collect())
    } else {
        None
    };

    let times: Vec<f64> = (0..meta.frames).map(|i| normalized_time(i, meta.frames)).collect();
    let (mut train_indices, mut test_indices) = (Vec::new(), Vec::new());
    for i in 0..meta.frames {
        if i % test_every == 0 {
            test_indices.push(i);
        } else {
            train_indices.push(i);
        }
    }

    Ok(SceneDataset {
        images,
        width: intrinsics.width,
        height: intrinsics.height,
        intrinsics,
        times,
        train_indices,
        test_indices,
        gt_traj,
        gt_depths,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rule_and_time_convention() {
        assert_eq!(normalized_time(0, 24), -1.0);
        assert_eq!(normalized_time(23, 24), 1.0);
        assert_eq!(normalized_time(1, 3), 0.0);
        assert_eq!(normalized_time(0, 1), 0.0);
    }

    #[test]
    fn missing_directory_reports_missing_meta() {
        let err = load_dataset(Path::new("/nonexistent-dataset"), 8).unwrap_err();
        assert!(matches!(err, IoError::MissingFile(p) if p.ends_with("meta.json")));
    }
}
