//! Quantitative evaluation: image quality, scale-aligned depth error, and
//! trajectory error after similarity alignment.
//!
//! Everything here is a pure function over plain slices so rendered output
//! can be scored against ground truth without touching the network stack.
//! The conventions baked in (and stamped into `metrics.json` through
//! [`PROTOCOL_VERSION`]): PSNR caps at 99 dB, SSIM runs on ITU-R 601 luma
//! with the standard 11x11 / sigma 1.5 Gaussian window averaged over fully
//! interior window positions, depth is pre-scaled by the median ratio
//! before AbRel / SqRel / delta1, and RPE uses consecutive frame pairs
//! (gap 1) with mean aggregation, translation in scene units and rotation
//! in degrees — the common TUM formulation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    mat_mul, norm, rotation_angle, sub, umeyama_align, GeometryError, Pose,
};

/// Version tag for the evaluation conventions listed in the module docs;
/// written to `metrics.json` so downstream comparisons know which RPE /
/// scale-recovery variant produced the numbers.
pub const PROTOCOL_VERSION: &str = "velosdf-eval-1";

/// Errors for malformed metric inputs.
#[derive(Debug, Error)]
pub enum MetricsError {
    /// Paired inputs disagree in size (or an image is empty).
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    /// Image smaller than the 11x11 SSIM window.
    #[error("image {width}x{height} is smaller than the 11x11 SSIM window")]
    TooSmall { width: usize, height: usize },
    /// No valid ground-truth depth pixels survive masking.
    #[error("no valid ground-truth depth pixels")]
    EmptyMask,
    /// Trajectories differ in length, are too short, or timestamps differ.
    #[error("trajectory mismatch: {0}")]
    LengthMismatch(String),
    /// The similarity alignment itself failed (degenerate trajectory).
    #[error("trajectory alignment failed: {0}")]
    Alignment(#[from] GeometryError),
}

/// Depth error after median-ratio scale alignment.
#[derive(Debug, Clone, Copy)]
pub struct DepthMetrics {
    /// Mean absolute relative error `|d_hat - d| / d`.
    pub abrel: f64,
    /// Mean square relative error `(d_hat - d)^2 / d`.
    pub sqrel: f64,
    /// Fraction of pixels with `max(d_hat / d, d / d_hat) < 1.25`.
    pub delta1: f64,
}

/// Trajectory error after similarity alignment.
#[derive(Debug, Clone, Copy)]
pub struct PoseMetrics {
    /// Mean relative translation error over consecutive frames, scene units.
    pub rpe_t: f64,
    /// Mean relative rotation error over consecutive frames, degrees.
    pub rpe_r: f64,
    /// Root-mean-square position error after alignment, scene units.
    pub ate: f64,
}

/// The flat record written to `metrics.json` after an evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub abrel: f64,
    pub sqrel: f64,
    pub delta1: f64,
    pub rpe_t: f64,
    pub rpe_r: f64,
    pub ate: f64,
    pub n_frames: usize,
    #[serde(rename = "protocol-version")]
    pub protocol_version: String,
}

// ---------------------------------------------------------------------------
// Image quality
// ---------------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB between two images with values in
/// `[0, 1]`: `10 * log10(1 / MSE)`, capped at 99 dB when the MSE drops
/// below 1e-10 (identical images would otherwise be infinite).
pub fn psnr(pred: &[f64], gt: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::SizeMismatch(format!(
            "psnr inputs have {} vs {} samples",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(MetricsError::SizeMismatch("psnr inputs are empty".into()));
    }
    let mse = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(if mse < 1e-10 {
        99.0
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// ITU-R 601 luma of an interleaved RGB image.
fn luma(rgb: &[f64]) -> Vec<f64> {
    rgb.chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

/// The normalized 11x11 Gaussian window of sigma 1.5 used by SSIM.
fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let g = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = g;
            total += g;
        }
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Mean structural similarity between two interleaved RGB images, computed
/// on ITU-R 601 luma with the standard constants (11x11 Gaussian window of
/// sigma 1.5, C1 = 0.01^2, C2 = 0.03^2) and averaged over window positions
/// that lie fully inside the image, so no padding policy leaks into the
/// score. Identical images score exactly 1; anticorrelated high-variance
/// patches drive the score negative (the range is `[-1, 1]`).
pub fn ssim(pred: &[f64], gt: &[f64], width: usize, height: usize) -> Result<f64, MetricsError> {
    let expect = width * height * 3;
    if pred.len() != expect || gt.len() != expect {
        return Err(MetricsError::SizeMismatch(format!(
            "ssim expects {} samples for {}x{} RGB, got {} and {}",
            expect,
            width,
            height,
            pred.len(),
            gt.len()
        )));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(MetricsError::TooSmall { width, height });
    }
    let a = luma(pred);
    let b = luma(gt);
    let w = gaussian_window();

    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=height - SSIM_WINDOW {
        for left in 0..=width - SSIM_WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = w[dy * SSIM_WINDOW + dx];
                    let va = a[(top + dy) * width + left + dx];
                    let vb = b[(top + dy) * width + left + dx];
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += (va * va) * wgt;
                    bb += (vb * vb) * wgt;
                    ab += (va * vb) * wgt;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Depth
// ---------------------------------------------------------------------------

/// Median with the even-count convention of the scale-recovery protocol:
/// the mean of the two middle values.
fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Depth error metrics after median-ratio scale recovery.
///
/// Ground-truth pixels that are non-positive or non-finite are ignored, as
/// are pixels where `mask` (when given) is false; at least one pixel must
/// survive. The prediction is scaled by `median(gt) / median(pred)` over
/// the valid pixels before computing AbRel, SqRel and delta1, which makes
/// the metrics invariant to the global scale of the prediction — rendered
/// depths are only defined up to scale when poses are, too.
pub fn depth_metrics(
    pred: &[f64],
    gt: &[f64],
    mask: Option<&[bool]>,
) -> Result<DepthMetrics, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::SizeMismatch(format!(
            "depth maps have {} vs {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(m) = mask {
        if m.len() != gt.len() {
            return Err(MetricsError::SizeMismatch(format!(
                "mask has {} entries for {} pixels",
                m.len(),
                gt.len()
            )));
        }
    }
    let mut pv = Vec::new();
    let mut gv = Vec::new();
    for i in 0..gt.len() {
        let kept = mask.is_none_or(|m| m[i]);
        if kept && gt[i] > 0.0 && gt[i].is_finite() {
            pv.push(pred[i]);
            gv.push(gt[i]);
        }
    }
    if gv.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let scale = median(&gv) / median(&pv);

    let n = gv.len() as f64;
    let mut abrel = 0.0;
    let mut sqrel = 0.0;
    let mut inliers = 0usize;
    for (p, g) in pv.iter().zip(&gv) {
        let d = p * scale;
        abrel += (d - g).abs() / g;
        sqrel += (d - g) * (d - g) / g;
        if (d / g).max(g / d) < 1.25 {
            inliers += 1;
        }
    }
    Ok(DepthMetrics {
        abrel: abrel / n,
        sqrel: sqrel / n,
        delta1: inliers as f64 / n,
    })
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

/// Trajectory error after similarity alignment.
///
/// Predicted positions are aligned onto the ground truth with the
/// least-squares similarity from [`umeyama_align`], and predicted rotations
/// are corrected by the alignment rotation. ATE is the RMSE of the aligned
/// position residuals. RPE compares relative motions over consecutive
/// frame pairs, `E_i = (gt_i^-1 gt_{i+1})^-1 (pred_i^-1 pred_{i+1})` on the
/// aligned prediction, reporting the mean translation magnitude in scene
/// units and the mean rotation angle in degrees.
///
/// Both trajectories must pair matching timestamps, with at least three
/// frames so the alignment is determined.
pub fn pose_metrics(
    pred: &[(f64, Pose)],
    gt: &[(f64, Pose)],
) -> Result<PoseMetrics, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} predicted vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len();
    if n < 3 {
        return Err(MetricsError::LengthMismatch(format!(
            "need at least 3 frames, got {n}"
        )));
    }
    for i in 0..n {
        if (pred[i].0 - gt[i].0).abs() > 1e-9 {
            return Err(MetricsError::LengthMismatch(format!(
                "timestamps differ at frame {i}: {} vs {}",
                pred[i].0, gt[i].0
            )));
        }
    }

    let src: Vec<_> = pred.iter().map(|(_, p)| p.translation).collect();
    let dst: Vec<_> = gt.iter().map(|(_, p)| p.translation).collect();
    let ali = umeyama_align(&src, &dst)?;

    let aligned: Vec<Pose> = pred
        .iter()
        .map(|(_, p)| Pose {
            rotation: mat_mul(&ali.rotation, &p.rotation),
            translation: ali.apply(p.translation),
        })
        .collect();

    let mut sq = 0.0;
    for i in 0..n {
        let d = sub(aligned[i].translation, dst[i]);
        sq += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    }
    let ate = (sq / n as f64).sqrt();

    let mut sum_t = 0.0;
    let mut sum_r = 0.0;
    for i in 0..n - 1 {
        let rel_gt = gt[i].1.inverse().compose(&gt[i + 1].1);
        let rel_pred = aligned[i].inverse().compose(&aligned[i + 1]);
        let e = rel_gt.inverse().compose(&rel_pred);
        sum_t += norm(e.translation);
        sum_r += rotation_angle(&e.rotation).to_degrees();
    }
    let pairs = (n - 1) as f64;
    Ok(PoseMetrics {
        rpe_t: sum_t / pairs,
        rpe_r: sum_r / pairs,
        ate,
    })
}

// Re-exported so callers applying the alignment themselves (e.g. to dump an
// aligned trajectory for plotting) use the exact metric convention.
pub use crate::geometry::Similarity;

/// The similarity that [`pose_metrics`] applies to the prediction, exposed
/// for callers that want to save the aligned trajectory itself.
pub fn align_trajectory(
    pred: &[(f64, Pose)],
    gt: &[(f64, Pose)],
) -> Result<Vec<(f64, Pose)>, MetricsError> {
    if pred.len() != gt.len() || pred.len() < 3 {
        return Err(MetricsError::LengthMismatch(format!(
            "{} predicted vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let src: Vec<_> = pred.iter().map(|(_, p)| p.translation).collect();
    let dst: Vec<_> = gt.iter().map(|(_, p)| p.translation).collect();
    let ali = umeyama_align(&src, &dst)?;
    Ok(pred
        .iter()
        .map(|(t, p)| {
            (
                *t,
                Pose {
                    rotation: mat_mul(&ali.rotation, &p.rotation),
                    translation: ali.apply(p.translation),
                },
            )
        })
        .collect())
}
