//! The five training losses and the scheduled total objective.
//!
//! All losses are built on the tape so one backward pass reaches both the
//! field and the motion parameters. Conventions: color batches are `[3, R]`
//! (channel rows, ray columns), point batches are `[3, n]`, and every loss
//! reduces to a `[1, 1]` scalar.

use crate::autodiff::Value;
use crate::camera::Intrinsics;
use crate::field::{FieldBinding, FieldNetworks, RenderInputs};
use crate::geometry::{Mat3, Pose};
use crate::motion::{scene_flow, IntegrationConfig, MotionBinding, MotionError, MotionNetwork};
use thiserror::Error;

/// Epsilon inside the per-ray color norm, keeping the square root
/// differentiable at a zero residual. Biases the loss by at most `sqrt(eps)`
/// per ray.
pub const RGB_NORM_EPS: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss evaluated on an empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Motion(#[from] MotionError),
}

/// Loss weights and the warm-up schedule of the SDF-consistency term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_eik: f64,
    pub lambda_flow: f64,
    pub lambda_photo: f64,
    /// Target weight of the SDF-consistency term after its ramp.
    pub lambda_sdf: f64,
    /// Epoch count during which the SDF-consistency weight is exactly 0.
    pub sdf_zero_until_epoch: usize,
    /// Epochs over which the weight ramps linearly from 0 to `lambda_sdf`.
    pub sdf_ramp_epochs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_eik: 0.1,
            lambda_flow: 0.1,
            lambda_photo: 1.0,
            lambda_sdf: 0.1,
            sdf_zero_until_epoch: 200,
            sdf_ramp_epochs: 200,
        }
    }
}

impl LossWeights {
    /// Effective SDF-consistency weight: 0 before `sdf_zero_until_epoch`,
    /// linear ramp over `sdf_ramp_epochs`, then constant at `lambda_sdf`.
    pub fn effective_lambda_sdf(&self, epoch: usize) -> f64 {
        if epoch < self.sdf_zero_until_epoch {
            return 0.0;
        }
        if self.sdf_ramp_epochs == 0 {
            return self.lambda_sdf;
        }
        let progress = (epoch - self.sdf_zero_until_epoch) as f64 / self.sdf_ramp_epochs as f64;
        self.lambda_sdf * progress.min(1.0)
    }
}

/// Mean over rays of the (unsquared) Euclidean norm of the color residual.
/// Both arguments are `[3, R]`.
pub fn loss_rgb(rendered: &Value, target: &Value) -> Result<Value, LossError> {
    assert_eq!(rendered.rows(), 3);
    assert_eq!(rendered.shape(), target.shape());
    if rendered.cols() == 0 {
        return Err(LossError::EmptyBatch);
    }
    Ok(rendered.sub(target).norm_cols(RGB_NORM_EPS).mean_all())
}

/// Mean squared deviation of the SDF gradient norm from 1 over the point
/// set. `points` is `[3, n]`, `t` is the matching `[1, n]` time row.
pub fn loss_eikonal(
    field: &FieldNetworks,
    binding: &FieldBinding,
    points: &Value,
    t: &Value,
) -> Result<Value, LossError> {
    if points.cols() == 0 {
        return Err(LossError::EmptyBatch);
    }
    let grad = field.surface_normal(binding, points, t);
    Ok(grad.norm_cols(RGB_NORM_EPS).add_const(-1.0).square().mean_all())
}

/// SDF-flow loss: mean over rays of the alpha-weighted absolute transport
/// residual `|ds/dt + (omega x x + v) . grad s|` at the `top_k` samples of
/// each ray with the largest rendering weight. The weights are detached, so
/// gradients reach the field through the two derivatives and the motion
/// network through `(omega, v)` only.
///
/// Restricting to the `top_k` highest-weight samples (rather than all K)
/// keeps the finite-difference SDF queries affordable; the discarded
/// samples carry near-zero weight and contribute negligibly to the sum.
#[allow(clippy::too_many_arguments)]
pub fn loss_flow(
    field: &FieldNetworks,
    fbinding: &FieldBinding,
    motion: &MotionNetwork,
    mbinding: &MotionBinding,
    inputs: &RenderInputs,
    weights: &Value,
    t: f64,
    t_range: (f64, f64),
    top_k: usize,
) -> Result<Value, LossError> {
    assert!(top_k >= 1);
    let (k_samples, r_count) = (inputs.samples_per_ray, inputs.rays);
    assert_eq!(weights.shape(), (k_samples, r_count));
    if r_count == 0 {
        return Err(LossError::EmptyBatch);
    }
    let tape = weights.tape();

    // Select sample columns per ray by descending weight (host side; the
    // selection itself is not differentiated, matching the detached alpha).
    let w_host = weights.value();
    let take = top_k.min(k_samples);
    let mut sel = Vec::with_capacity(take * r_count);
    for r in 0..r_count {
        let mut order: Vec<usize> = (0..k_samples).collect();
        order.sort_by(|&a, &b| w_host[b * r_count + r].total_cmp(&w_host[a * r_count + r]));
        sel.extend(order.iter().take(take).map(|&k| k * r_count + r));
    }
    let m = sel.len();

    // Sample positions are constants (rays live in the frame's own camera
    // coordinates), so re-materializing them loses no gradient paths.
    let p_host = inputs.points.value();
    let total = k_samples * r_count;
    let mut pts = Vec::with_capacity(3 * m);
    for row in 0..3 {
        pts.extend(sel.iter().map(|&c| p_host[row * total + c]));
    }
    let pts = tape.constant(3, m, pts);

    let dsdt = field.sdf_time_derivative(fbinding, &pts, t, t_range);
    let grad = field.surface_normal(fbinding, &pts, &tape.constant(1, m, vec![t; m]));
    let v6 = motion.velocity_at(mbinding, &tape.constant(1, 1, vec![t]));
    let flow = scene_flow(&v6.slice_rows(0, 3), &v6.slice_rows(3, 3), &pts);
    let residual = dsdt.add(&flow.mul(&grad).sum_rows());

    let alpha = weights
        .reshape(1, total)
        .gather_cols(&sel)
        .stop_gradient();
    Ok(residual.abs().mul(&alpha).sum_all().scale(1.0 / r_count as f64))
}

/// Transforms a point by a relative pose and projects it with a pinhole.
/// Returns the pixel `(u, v)`, the depth in the target frame, and a
/// validity flag that is false behind the camera (`z <= 1e-6`) or when the
/// pixel cannot be bilinearly sampled.
pub fn project_to_frame(x: [f64; 3], pose: &Pose, k: &Intrinsics) -> ([f64; 2], f64, bool) {
    let p = pose.apply(x);
    if p[2] <= 1e-6 {
        return ([0.0, 0.0], p[2], false);
    }
    let uv = [k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy];
    let valid = k.in_bilinear_bounds(uv);
    (uv, p[2], valid)
}

/// One neighbor frame for the photometric loss: the tape-valued transport
/// from the batch frame into the neighbor's camera frame, plus the neighbor
/// image (row-major interleaved RGB in `[0, 1]`).
pub struct PhotoNeighbor<'a> {
    pub rotation: Value,
    pub translation: Value,
    pub image: &'a [f64],
}

fn host_pose(rotation: &Value, translation: &Value) -> Pose {
    let r = rotation.value();
    let t = translation.value();
    let rotation: Mat3 = [
        [r[0], r[1], r[2]],
        [r[3], r[4], r[5]],
        [r[6], r[7], r[8]],
    ];
    Pose { rotation, translation: [t[0], t[1], t[2]] }
}

/// Photometric consistency: mean l1 difference between each ray's source
/// color and the neighbor image bilinearly sampled at the reprojected
/// surface point. Invalid projections are excluded from the mean; if every
/// projection is invalid the loss is 0 with a valid count of 0.
///
/// `surface` is `[3, R]` (expected surface points in the batch frame),
/// `source_colors` is the matching `[3, R]` constant. Gradients flow into
/// the surface points and the transports through the bilinear weights.
pub fn loss_photo(
    surface: &Value,
    source_colors: &Value,
    neighbors: &[PhotoNeighbor],
    k: &Intrinsics,
) -> Result<(Value, usize), LossError> {
    assert_eq!(surface.rows(), 3);
    assert_eq!(source_colors.shape(), surface.shape());
    assert!(k.width >= 2 && k.height >= 2, "bilinear sampling needs a 2x2 image");
    let r_count = surface.cols();
    if r_count == 0 || neighbors.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let tape = surface.tape();
    let sv = surface.value();

    let mut total: Option<Value> = None;
    let mut valid_total = 0usize;
    for nb in neighbors {
        assert_eq!(nb.image.len(), k.width * k.height * 3);
        // Validity and corner indices are host-side decisions; the sampled
        // value stays differentiable through the fractional coordinates.
        let pose = host_pose(&nb.rotation, &nb.translation);
        let mut valid = Vec::new();
        let mut corners = Vec::new();
        for r in 0..r_count {
            let x = [sv[r], sv[r_count + r], sv[2 * r_count + r]];
            let (uv, _, ok) = project_to_frame(x, &pose, k);
            if ok {
                valid.push(r);
                corners.push((
                    (uv[0].floor() as usize).min(k.width - 2),
                    (uv[1].floor() as usize).min(k.height - 2),
                ));
            }
        }
        if valid.is_empty() {
            continue;
        }
        let m = valid.len();

        let xt = nb.rotation.matmul(surface).add(&nb.translation).gather_cols(&valid);
        let z = xt.slice_rows(2, 1);
        let u = xt.slice_rows(0, 1).div(&z).scale(k.fx).add_const(k.cx);
        let v = xt.slice_rows(1, 1).div(&z).scale(k.fy).add_const(k.cy);
        let fu = u.sub(&tape.constant(1, m, corners.iter().map(|&(i, _)| i as f64).collect()));
        let fv = v.sub(&tape.constant(1, m, corners.iter().map(|&(_, j)| j as f64).collect()));

        let corner_color = |di: usize, dj: usize| -> Value {
            let mut data = vec![0.0; 3 * m];
            for (idx, &(i0, j0)) in corners.iter().enumerate() {
                let base = ((j0 + dj) * k.width + (i0 + di)) * 3;
                for c in 0..3 {
                    data[c * m + idx] = nb.image[base + c];
                }
            }
            tape.constant(3, m, data)
        };
        let one_minus = |f: &Value| f.neg().add_const(1.0);
        let sampled = corner_color(0, 0)
            .mul(&one_minus(&fu).mul(&one_minus(&fv)))
            .add(&corner_color(1, 0).mul(&fu.mul(&one_minus(&fv))))
            .add(&corner_color(0, 1).mul(&one_minus(&fu).mul(&fv)))
            .add(&corner_color(1, 1).mul(&fu.mul(&fv)));

        let term = sampled.sub(&source_colors.gather_cols(&valid)).abs().sum_all();
        total = Some(match total {
            Some(acc) => acc.add(&term),
            None => term,
        });
        valid_total += m;
    }
    match total {
        Some(acc) => Ok((acc.scale(1.0 / valid_total as f64), valid_total)),
        None => Ok((tape.constant(1, 1, vec![0.0]), 0)),
    }
}

/// SDF consistency against the world frame: mean absolute difference
/// between `s(x, t)` and the SDF at the motion-transported point in the
/// world frame, `s(B_{t -> t_w} x, t_w)`. Gradients reach the field through
/// both queries and the motion network through the transport.
#[allow(clippy::too_many_arguments)]
pub fn loss_sdf_consistency(
    field: &FieldNetworks,
    fbinding: &FieldBinding,
    motion: &MotionNetwork,
    mbinding: &MotionBinding,
    points: &Value,
    t: f64,
    t_w: f64,
    integration: &IntegrationConfig,
) -> Result<Value, LossError> {
    assert_eq!(points.rows(), 3);
    let n = points.cols();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let tape = points.tape();
    let s_t = field.query_sdf(fbinding, points, &tape.constant(1, n, vec![t; n]));
    let (rot, trans) = motion.pose_between(mbinding, t, t_w, integration)?;
    let transported = rot.matmul(points).add(&trans);
    let s_w = field.query_sdf(fbinding, &transported, &tape.constant(1, n, vec![t_w; n]));
    Ok(s_t.sub(&s_w).abs().mean_all())
}

/// The per-batch loss components. Stage-2 batches leave the dropped terms
/// as `None`.
pub struct LossComponents {
    pub rgb: Value,
    pub eik: Value,
    pub flow: Option<Value>,
    pub photo: Option<Value>,
    pub sdf: Option<Value>,
}

/// Weighted total. Stage 1 combines all five terms with the scheduled
/// lambda_sdf; stage 2 keeps only the color and Eikonal terms. Terms whose
/// effective weight is 0 are skipped rather than multiplied by 0, so their
/// graphs cost nothing in the backward pass.
pub fn total_loss(parts: &LossComponents, weights: &LossWeights, epoch: usize, stage: u32) -> Value {
    assert!(stage == 1 || stage == 2, "stage must be 1 or 2");
    let mut total = parts.rgb.add(&parts.eik.scale(weights.lambda_eik));
    if stage == 1 {
        let mut add_term = |value: &Option<Value>, weight: f64, name: &str| {
            if weight > 0.0 {
                let v = value.as_ref().unwrap_or_else(|| panic!("stage 1 needs the {name} loss"));
                total = total.add(&v.scale(weight));
            }
        };
        add_term(&parts.flow, weights.lambda_flow, "flow");
        add_term(&parts.photo, weights.lambda_photo, "photo");
        add_term(&parts.sdf, weights.effective_lambda_sdf(epoch), "sdf");
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{AdamConfig, ParameterStore, Tape};
    use crate::field::FieldConfig;
    use crate::geometry::{add, cross, dot, mat_mul, mat_vec, norm, rotvec_to_matrix, scale, skew, sub, Vec3};
    use crate::motion::{MotionConfig, MotionNetwork};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn small_field() -> FieldNetworks {
        FieldNetworks::new(FieldConfig {
            sdf_hidden: 48,
            sdf_layers: 3,
            sdf_skip_at: 1,
            color_hidden: 16,
            color_layers: 2,
            pe_x: 3,
            pe_d: 1,
            pe_t: 2,
            coord_scale: 2.0,
            bound: 4.0,
            fd_eps: 1e-4,
            init_center: [0.0; 3],
            init_radius: 0.5,
        })
    }

    fn small_motion() -> MotionNetwork {
        MotionNetwork::new(MotionConfig {
            hidden: 16,
            layers: 2,
            pe_t: 2,
        })
    }

    /// Fits the SDF head to an analytic target by plain Adam regression.
    fn fit_field(
        field: &FieldNetworks,
        store: &mut ParameterStore,
        steps: usize,
        batch: usize,
        seed: u64,
        sample: impl Fn(&mut ChaCha20Rng) -> (Vec3, f64),
        target: impl Fn(Vec3, f64) -> f64,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for step in 0..steps {
            // Crude two-phase schedule: a lower rate for the final third
            // sharpens the fit enough for finite-difference derivatives.
            let adam = AdamConfig {
                lr: if step < steps * 2 / 3 { 1e-3 } else { 2e-4 },
                ..AdamConfig::default()
            };
            let mut xs = vec![0.0; 3 * batch];
            let mut ts = vec![0.0; batch];
            let mut ys = vec![0.0; batch];
            for j in 0..batch {
                let (x, t) = sample(&mut rng);
                xs[j] = x[0];
                xs[batch + j] = x[1];
                xs[2 * batch + j] = x[2];
                ts[j] = t;
                ys[j] = target(x, t);
            }
            let tape = Tape::new();
            let binding = field.bind(&tape, store);
            let s = field.query_sdf(
                &binding,
                &tape.constant(3, batch, xs),
                &tape.constant(1, batch, ts),
            );
            let loss = s.sub(&tape.constant(1, batch, ys)).square().mean_all();
            let grads = tape.backward(&loss).unwrap().by_name(&tape);
            store.adam_step(&grads, &adam).unwrap();
        }
    }

    fn registered(field: &FieldNetworks, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        field.register(&mut store, &mut rng);
        store
    }

    /// Zeroes every first-layer (and skip-layer) weight column that reads
    /// the time encoding, making the SDF exactly time-constant.
    fn zero_time_columns(field: &FieldNetworks, store: &mut ParameterStore) {
        let cfg = field.config();
        let x_rows = 3 * (1 + 2 * cfg.pe_x);
        let t_rows = 1 + 2 * cfg.pe_t;
        let input_dim = x_rows + t_rows;
        for (layer, col_offset) in [(0, 0), (cfg.sdf_skip_at, cfg.sdf_hidden)] {
            let name = format!("sdf.w{layer}");
            let (rows, cols) = store.shape(&name).unwrap();
            let mut data = store.data(&name).unwrap().to_vec();
            for r in 0..rows {
                for c in (col_offset + x_rows)..(col_offset + input_dim) {
                    data[r * cols + c] = 0.0;
                }
            }
            store.set_data(&name, data);
        }
    }

    #[test]
    fn rgb_loss_matches_hand_computed_norms() {
        let tape = Tape::new();
        let a = tape.constant(3, 2, vec![0.2, 0.8, 0.4, 0.1, 0.6, 0.9]);
        assert!(loss_rgb(&a, &a).unwrap().scalar_value() < 1e-6);

        // Single ray with residual (0.3, 0, 0.4): the 3-4-5 norm.
        let rendered = tape.constant(3, 1, vec![0.5, 0.2, 0.9]);
        let target = tape.constant(3, 1, vec![0.2, 0.2, 0.5]);
        let l = loss_rgb(&rendered, &target).unwrap().scalar_value();
        assert!((l - 0.5).abs() < 1e-9);

        // Permutation invariance over rays.
        let x = tape.constant(3, 3, vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.7, 0.8, 0.4, 0.6]);
        let y = tape.constant(3, 3, vec![0.0, 0.6, 0.8, 0.1, 0.1, 0.9, 0.9, 0.2, 0.4]);
        let xp = x.gather_cols(&[2, 0, 1]);
        let yp = y.gather_cols(&[2, 0, 1]);
        let l0 = loss_rgb(&x, &y).unwrap().scalar_value();
        let l1 = loss_rgb(&xp, &yp).unwrap().scalar_value();
        assert!((l0 - l1).abs() < 1e-12);

        let empty = tape.constant(3, 0, vec![]);
        assert!(matches!(loss_rgb(&empty, &empty), Err(LossError::EmptyBatch)));
    }

    /// Overwrites the SDF head so it computes exactly `s(x) = slope * x_y`,
    /// using the identity `softplus(a) - softplus(-a) = a` twice to thread
    /// the linear signal through the softplus layers. Assumes the
    /// `small_field` architecture (3 hidden layers, skip at 1).
    fn install_plane(field: &FieldNetworks, store: &mut ParameterStore, slope: f64) {
        let cfg = field.config();
        let zero = |store: &mut ParameterStore, name: &str| {
            let (r, c) = store.shape(name).unwrap();
            store.set_data(name, vec![0.0; r * c]);
        };
        for l in 0..=cfg.sdf_layers {
            zero(store, &format!("sdf.w{l}"));
            zero(store, &format!("sdf.b{l}"));
        }
        // Layer 1 reads the skip-appended raw input: rows 0/1 see +-x_y
        // (the scaled coordinate sits at skip column hidden + 1).
        let (r1, c1) = store.shape("sdf.w1").unwrap();
        let mut w1 = vec![0.0; r1 * c1];
        w1[cfg.sdf_hidden + 1] = 1.0;
        w1[c1 + cfg.sdf_hidden + 1] = -1.0;
        store.set_data("sdf.w1", w1);
        // Layer 2 reconstitutes +-x_y from the softplus pair.
        let (r2, c2) = store.shape("sdf.w2").unwrap();
        let mut w2 = vec![0.0; r2 * c2];
        w2[0] = 1.0;
        w2[1] = -1.0;
        w2[c2] = -1.0;
        w2[c2 + 1] = 1.0;
        store.set_data("sdf.w2", w2);
        // Output undoes the coordinate scaling and applies the slope.
        let (_, c3) = store.shape("sdf.w3").unwrap();
        let mut w3 = vec![0.0; c3];
        w3[0] = slope * cfg.coord_scale;
        w3[1] = -slope * cfg.coord_scale;
        store.set_data("sdf.w3", w3);
    }

    #[test]
    fn eikonal_loss_distinguishes_unit_and_doubled_gradients() {
        // Oracle: for s(x) = x_y the gradient norm is exactly 1, and for
        // s(x) = 2 x_y it is exactly 2, so the loss must be ~0 and ~1.
        let field = small_field();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut xs = vec![0.0; 3 * 64];
        for v in xs.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }

        let mut store = registered(&field, 21);
        install_plane(&field, &mut store, 1.0);
        let tape = Tape::new();
        let binding = field.bind(&tape, &store);
        let pts = tape.constant(3, 64, xs.clone());
        let ts = tape.constant(1, 64, vec![0.0; 64]);
        // Sanity: the installed network reproduces the plane exactly.
        let s = field.query_sdf(&binding, &pts, &ts).value();
        for j in 0..64 {
            assert!((s[j] - xs[64 + j]).abs() < 1e-12);
        }
        let plane = loss_eikonal(&field, &binding, &pts, &ts).unwrap().scalar_value();
        assert!(plane < 1e-6, "plane eikonal loss {plane}");

        let mut store2 = registered(&field, 22);
        install_plane(&field, &mut store2, 2.0);
        let tape2 = Tape::new();
        let binding2 = field.bind(&tape2, &store2);
        let pts2 = tape2.constant(3, 64, xs);
        let ts2 = tape2.constant(1, 64, vec![0.0; 64]);
        let doubled = loss_eikonal(&field, &binding2, &pts2, &ts2).unwrap().scalar_value();
        assert!((doubled - 1.0).abs() < 1e-6, "doubled-gradient eikonal loss {doubled}");
        assert!(doubled >= 0.0 && plane >= 0.0);
    }

    #[test]
    fn flow_loss_vanishes_for_static_field_and_zero_motion() {
        let field = small_field();
        let mut store = registered(&field, 31);
        zero_time_columns(&field, &mut store);
        let motion = small_motion();
        {
            let mut rng = ChaCha20Rng::seed_from_u64(32);
            motion.register(&mut store, &mut rng); // zero-initialized output
        }
        let tape = Tape::new();
        let fbinding = field.bind(&tape, &store);
        let mbinding = motion.bind(&tape, &store);

        let (k_samples, rays) = (5, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let points: Vec<f64> = (0..3 * k_samples * rays).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let inputs = RenderInputs {
            points: tape.constant(3, k_samples * rays, points),
            dirs: tape.constant(3, k_samples * rays, vec![0.0; 3 * k_samples * rays]),
            dists: tape.constant(1, k_samples * rays, vec![0.1; k_samples * rays]),
            t: tape.constant(1, k_samples * rays, vec![0.2; k_samples * rays]),
            samples_per_ray: k_samples,
            rays,
        };
        let weights = tape.constant(k_samples, rays, (0..k_samples * rays).map(|i| i as f64 * 0.01).collect());
        let loss = loss_flow(
            &field, &fbinding, &motion, &mbinding, &inputs, &weights, 0.2, (-1.0, 1.0), 3,
        )
        .unwrap();
        assert_eq!(loss.scalar_value(), 0.0);

        // All-zero weights kill the loss even for a time-varying field.
        let store2 = registered(&field, 41);
        let tape2 = Tape::new();
        let fb2 = field.bind(&tape2, &store2);
        let mut store2m = store2;
        {
            let mut rng = ChaCha20Rng::seed_from_u64(42);
            motion.register(&mut store2m, &mut rng);
        }
        let tape3 = Tape::new();
        let fb3 = field.bind(&tape3, &store2m);
        let mb3 = motion.bind(&tape3, &store2m);
        let _ = fb2;
        let inputs3 = RenderInputs {
            points: tape3.constant(3, k_samples * rays, inputs.points.value()),
            dirs: tape3.constant(3, k_samples * rays, vec![0.0; 3 * k_samples * rays]),
            dists: tape3.constant(1, k_samples * rays, vec![0.1; k_samples * rays]),
            t: tape3.constant(1, k_samples * rays, vec![0.2; k_samples * rays]),
            samples_per_ray: k_samples,
            rays,
        };
        let zero_w = tape3.constant(k_samples, rays, vec![0.0; k_samples * rays]);
        let loss3 = loss_flow(
            &field, &fb3, &motion, &mb3, &inputs3, &zero_w, 0.2, (-1.0, 1.0), 3,
        )
        .unwrap();
        assert_eq!(loss3.scalar_value(), 0.0);
    }

    /// Host-side left Jacobian of SO(3), the oracle for the rigid center
    /// trajectory c(tau) = exp(tau omega) c0 + V(tau omega) tau v.
    fn left_jacobian(phi: Vec3) -> Mat3 {
        let theta2 = dot(phi, phi);
        let k = skew(phi);
        let k2 = mat_mul(&k, &k);
        let (a, b) = if theta2 < 1e-16 {
            (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
        } else {
            let theta = theta2.sqrt();
            ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
        };
        let mut v = crate::geometry::identity();
        for i in 0..3 {
            for j in 0..3 {
                v[i][j] += a * k[i][j] + b * k2[i][j];
            }
        }
        v
    }

    #[test]
    fn rigid_motion_construction_validates_flow_and_sdf_losses() {
        // Scene: a sphere of radius 0.6 whose center is carried by the
        // constant rigid scene velocity (omega0, v0), so the true SDF is
        // s(x, t) = |x - c(t)| - r with c' = omega0 x c + v0.
        let omega0 = [0.0, 0.0, 0.4];
        let v0 = [0.1, 0.0, -0.15];
        let c_start = [0.0, 0.0, 2.0];
        let radius = 0.6;
        let center = |t: f64| -> Vec3 {
            let tau = t + 1.0;
            let r = rotvec_to_matrix(scale(omega0, tau));
            let vj = left_jacobian(scale(omega0, tau));
            add(mat_vec(&r, c_start), mat_vec(&vj, scale(v0, tau)))
        };
        // Oracle self-check 1: the center obeys its ODE.
        for t in [-0.8, 0.0, 0.7] {
            let h = 1e-6;
            let fd = scale(sub(center(t + h), center(t - h)), 0.5 / h);
            let ode = add(cross(omega0, center(t)), v0);
            assert!(norm(sub(fd, ode)) < 1e-8);
        }
        let true_sdf = |x: Vec3, t: f64| norm(sub(x, center(t))) - radius;
        // Oracle self-check 2: the true field satisfies the transport
        // identity ds/dt + (omega x x + v) . n = 0 exactly.
        for (x, t) in [([0.4, 0.2, 1.5], -0.3), ([-0.2, 0.5, 2.4], 0.6)] {
            let h = 1e-6;
            let dsdt = (true_sdf(x, t + h) - true_sdf(x, t - h)) / (2.0 * h);
            let n = normalize_vec(sub(x, center(t)));
            let residual = dsdt + dot(add(cross(omega0, x), v0), n);
            assert!(residual.abs() < 1e-8, "oracle residual {residual}");
        }

        let field = small_field();
        let mut store = registered(&field, 51);
        let sample = |rng: &mut ChaCha20Rng| {
            let t = rng.gen_range(-1.0..1.0);
            let c = center(t);
            // Mix near-surface shells with broader box samples.
            let x = if rng.gen_bool(0.7) {
                let dir = normalize_vec([
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]);
                add(c, scale(dir, radius + rng.gen_range(-0.25..0.25)))
            } else {
                add(c, [
                    rng.gen_range(-1.2..1.2),
                    rng.gen_range(-1.2..1.2),
                    rng.gen_range(-1.2..1.2),
                ])
            };
            (x, t)
        };
        fit_field(&field, &mut store, 4500, 256, 52, sample, true_sdf);

        let motion = small_motion();
        {
            let mut rng = ChaCha20Rng::seed_from_u64(53);
            motion.register(&mut store, &mut rng);
        }
        motion.force_constant_velocity(&mut store, omega0, v0);

        // Surface samples at t = 0.6, one per "ray" with unit alpha, so the
        // flow loss reduces to the mean absolute transport residual.
        let t_eval = 0.6;
        let mut rng = ChaCha20Rng::seed_from_u64(54);
        let m = 48;
        let mut pts = vec![0.0; 3 * m];
        for j in 0..m {
            let dir = normalize_vec([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            let x = add(center(t_eval), scale(dir, radius));
            pts[j] = x[0];
            pts[m + j] = x[1];
            pts[2 * m + j] = x[2];
        }
        let tape = Tape::new();
        let fbinding = field.bind(&tape, &store);
        let mbinding = motion.bind(&tape, &store);
        let inputs = RenderInputs {
            points: tape.constant(3, m, pts.clone()),
            dirs: tape.constant(3, m, vec![0.0; 3 * m]),
            dists: tape.constant(1, m, vec![0.1; m]),
            t: tape.constant(1, m, vec![t_eval; m]),
            samples_per_ray: 1,
            rays: m,
        };
        let ones = tape.constant(1, m, vec![1.0; m]);
        let flow = loss_flow(
            &field, &fbinding, &motion, &mbinding, &inputs, &ones, t_eval, (-1.0, 1.0), 1,
        )
        .unwrap()
        .scalar_value();
        assert!(flow < 1e-2, "flow residual {flow}");

        // The same construction bounds the SDF-consistency loss: transport
        // to the world frame t_w = 0 through the (true) motion leaves the
        // SDF unchanged.
        let integration = IntegrationConfig::new(80, 2.0 / 23.0);
        let points = tape.constant(3, m, pts);
        let sdf = loss_sdf_consistency(
            &field, &fbinding, &motion, &mbinding, &points, t_eval, 0.0, &integration,
        )
        .unwrap()
        .scalar_value();
        assert!(sdf < 1e-2, "sdf consistency {sdf}");
    }

    fn normalize_vec(v: Vec3) -> Vec3 {
        crate::geometry::normalize(v)
    }

    #[test]
    fn flow_gradient_wrt_motion_parameters_matches_finite_differences() {
        let field = small_field();
        let mut store = registered(&field, 61);
        let motion = small_motion();
        {
            let mut rng = ChaCha20Rng::seed_from_u64(62);
            motion.register(&mut store, &mut rng);
        }
        // Give the motion net a nonzero output layer so velocities and
        // their gradients are nontrivial.
        let (rows, cols) = store.shape("motion.w2").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(63);
        store.set_data(
            "motion.w2",
            (0..rows * cols).map(|_| rng.gen_range(-0.3..0.3)).collect(),
        );

        let (k_samples, rays) = (4, 3);
        let points: Vec<f64> = (0..3 * k_samples * rays).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let weights: Vec<f64> = (0..k_samples * rays).map(|_| rng.gen_range(0.0..0.5)).collect();
        let eval = |store: &ParameterStore| -> (f64, std::collections::BTreeMap<String, Vec<f64>>) {
            let tape = Tape::new();
            let fbinding = field.bind(&tape, store);
            let mbinding = motion.bind(&tape, store);
            let inputs = RenderInputs {
                points: tape.constant(3, k_samples * rays, points.clone()),
                dirs: tape.constant(3, k_samples * rays, vec![0.0; 3 * k_samples * rays]),
                dists: tape.constant(1, k_samples * rays, vec![0.1; k_samples * rays]),
                t: tape.constant(1, k_samples * rays, vec![0.3; k_samples * rays]),
                samples_per_ray: k_samples,
                rays,
            };
            let w = tape.constant(k_samples, rays, weights.clone());
            let loss = loss_flow(
                &field, &fbinding, &motion, &mbinding, &inputs, &w, 0.3, (-1.0, 1.0), 2,
            )
            .unwrap();
            let grads = tape.backward(&loss).unwrap().by_name(&tape);
            (loss.scalar_value(), grads)
        };
        let (base, grads) = eval(&store);
        assert!(base >= 0.0);

        for (name, idx) in [("motion.b0", 1), ("motion.w1", 7), ("motion.w2", 4), ("motion.b2", 3)] {
            let orig = store.data(name).unwrap().to_vec();
            let eps = 1e-5 * orig[idx].abs().max(1.0);
            let mut hi = orig.clone();
            hi[idx] += eps;
            store.set_data(name, hi);
            let (lp, _) = eval(&store);
            let mut lo = orig.clone();
            lo[idx] -= eps;
            store.set_data(name, lo);
            let (lm, _) = eval(&store);
            store.set_data(name, orig);
            let fd = (lp - lm) / (2.0 * eps);
            let got = grads[name][idx];
            let denom = fd.abs().max(got.abs()).max(1e-8);
            assert!(
                ((fd - got) / denom).abs() < 1e-4,
                "{name}[{idx}]: fd {fd} vs grad {got}"
            );
        }
    }

    #[test]
    fn project_to_frame_matches_pinhole_examples() {
        let k = Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 101,
            height: 101,
        };
        let (uv, depth, valid) = project_to_frame([0.0, 0.0, 1.0], &Pose::identity(), &k);
        assert_eq!(uv, [50.0, 50.0]);
        assert_eq!(depth, 1.0);
        assert!(valid);

        let (_, _, valid) = project_to_frame([0.0, 0.0, -1.0], &Pose::identity(), &k);
        assert!(!valid);

        let shift = Pose {
            rotation: crate::geometry::identity(),
            translation: [0.0, 0.0, -0.5],
        };
        let (uv, depth, valid) = project_to_frame([0.0, 0.0, 1.0], &shift, &k);
        assert_eq!(uv, [50.0, 50.0]);
        assert_eq!(depth, 0.5);
        assert!(valid);
    }

    #[test]
    fn photo_loss_self_consistency_and_degenerate_cases() {
        let k = Intrinsics {
            fx: 10.0,
            fy: 10.0,
            cx: 3.5,
            cy: 3.5,
            width: 8,
            height: 8,
        };
        // A smoothly varying image.
        let mut image = vec![0.0; 8 * 8 * 3];
        for row in 0..8 {
            for col in 0..8 {
                let base = (row * 8 + col) * 3;
                image[base] = row as f64 / 8.0;
                image[base + 1] = col as f64 / 8.0;
                image[base + 2] = (row + col) as f64 / 16.0;
            }
        }

        // Surface points on exact pixel-center rays, identity transport:
        // sampling lands back on the source pixel.
        let pixels = [(1usize, 2usize), (4, 4), (6, 3), (2, 7)];
        let m = pixels.len();
        let mut surf = vec![0.0; 3 * m];
        let mut src = vec![0.0; 3 * m];
        for (j, &(row, col)) in pixels.iter().enumerate() {
            let dir = k.pixel_ray(row, col).direction;
            let depth = 1.0 + 0.3 * j as f64;
            for a in 0..3 {
                surf[a * m + j] = dir[a] * depth;
            }
            let base = (row * 8 + col) * 3;
            for c in 0..3 {
                src[c * m + j] = image[base + c];
            }
        }
        let tape = Tape::new();
        let surface = tape.constant(3, m, surf);
        let source = tape.constant(3, m, src);
        let identity = PhotoNeighbor {
            rotation: tape.constant(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            translation: tape.constant(3, 1, vec![0.0; 3]),
            image: &image,
        };
        let (loss, count) = loss_photo(&surface, &source, &[identity], &k).unwrap();
        assert_eq!(count, m);
        assert!(loss.scalar_value() < 1e-9, "self-consistency {}", loss.scalar_value());

        // Constant-color images are matched under any transport.
        let flat = vec![0.37; 8 * 8 * 3];
        let rot = rotvec_to_matrix([0.0, 0.2, 0.0]);
        let moved = PhotoNeighbor {
            rotation: tape.constant(3, 3, rot.iter().flatten().copied().collect()),
            translation: tape.constant(3, 1, vec![0.05, 0.0, 0.1]),
            image: &flat,
        };
        let flat_src = tape.constant(3, m, vec![0.37; 3 * m]);
        let (loss, count) = loss_photo(&surface, &flat_src, &[moved], &k).unwrap();
        assert!(count > 0);
        assert!(loss.scalar_value() < 1e-12);

        // Every projection behind the camera: loss 0, count 0.
        let behind = tape.constant(3, m, {
            let mut v = surface.value();
            for z in v[2 * m..].iter_mut() {
                *z = -*z;
            }
            v
        });
        let nb = PhotoNeighbor {
            rotation: tape.constant(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            translation: tape.constant(3, 1, vec![0.0; 3]),
            image: &image,
        };
        let (loss, count) = loss_photo(&behind, &source, &[nb], &k).unwrap();
        assert_eq!(count, 0);
        assert_eq!(loss.scalar_value(), 0.0);

        // Empty ray set is an error.
        let empty = tape.constant(3, 0, vec![]);
        let nb = PhotoNeighbor {
            rotation: tape.constant(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            translation: tape.constant(3, 1, vec![0.0; 3]),
            image: &image,
        };
        assert!(matches!(
            loss_photo(&empty, &empty, &[nb], &k),
            Err(LossError::EmptyBatch)
        ));
    }

    #[test]
    fn photo_loss_is_small_under_ground_truth_correspondence() {
        // Ground-truth surface points of one synthetic frame, reprojected
        // into the next frame with the ground-truth relative pose, must
        // find nearly the same shaded color there.
        let scene = crate::synthetic::orbiter_scene();
        let profile = crate::synthetic::orbiter_profile();
        let cfg = crate::synthetic::orbiter_config();
        let k = cfg.intrinsics;
        let p5 = profile.ground_truth_pose(5, cfg.frames);
        let p6 = profile.ground_truth_pose(6, cfg.frames);
        let (img5, depth5) = crate::synthetic::render_frame(&scene, &k, &p5, cfg.far);
        let (img6, _) = crate::synthetic::render_frame(&scene, &k, &p6, cfg.far);

        // Keep surface-interior pixels: bilinear sampling across a depth
        // discontinuity (silhouettes, ground contact) mixes foreground and
        // background colors and is not a correspondence error.
        let interior = |row: usize, col: usize| -> Option<f64> {
            let d = depth5[row * k.width + col];
            if d == 0.0 {
                return None;
            }
            for (dr, dc) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                let r = (row as i64 + dr) as usize;
                let c = (col as i64 + dc) as usize;
                let dn = depth5[r * k.width + c];
                if dn == 0.0 || (dn - d).abs() > 0.05 {
                    return None;
                }
            }
            Some(d)
        };
        let mut surf = Vec::new();
        let mut src = Vec::new();
        let mut count = 0;
        for row in (2..k.height - 2).step_by(3) {
            for col in (2..k.width - 2).step_by(3) {
                let Some(d) = interior(row, col) else { continue };
                let dir = k.pixel_ray(row, col).direction;
                surf.push((dir, d));
                let base = (row * k.width + col) * 3;
                src.push([img5[base], img5[base + 1], img5[base + 2]]);
                count += 1;
            }
        }
        assert!(count > 20);
        let mut surface = vec![0.0; 3 * count];
        let mut source = vec![0.0; 3 * count];
        for (j, ((dir, d), c)) in surf.iter().zip(&src).enumerate() {
            for a in 0..3 {
                surface[a * count + j] = dir[a] * d;
                source[a * count + j] = c[a];
            }
        }
        // Transport from frame 5 coordinates into frame 6 coordinates.
        let rel = p6.inverse().compose(&p5);
        let tape = Tape::new();
        let neighbor = PhotoNeighbor {
            rotation: tape.constant(3, 3, rel.rotation.iter().flatten().copied().collect()),
            translation: tape.constant(3, 1, rel.translation.to_vec()),
            image: &img6,
        };
        let surface = tape.constant(3, count, surface);
        let source = tape.constant(3, count, source);
        let (loss, valid) = loss_photo(&surface, &source, &[neighbor], &k).unwrap();
        assert!(valid > count / 2, "only {valid} of {count} valid");
        let l = loss.scalar_value();
        assert!(l < 0.02, "ground-truth photometric residual {l}");
    }

    #[test]
    fn sdf_consistency_identities() {
        let field = small_field();
        let mut store = registered(&field, 71);
        let motion = small_motion();
        {
            let mut rng = ChaCha20Rng::seed_from_u64(72);
            motion.register(&mut store, &mut rng);
        }
        let integration = IntegrationConfig::new(10, 0.2);
        let tape = Tape::new();
        let fbinding = field.bind(&tape, &store);
        let mbinding = motion.bind(&tape, &store);
        let points = tape.constant(3, 5, (0..15).map(|i| 0.1 * i as f64 - 0.7).collect());

        // t = t_w: identity transport, exact zero.
        let same = loss_sdf_consistency(
            &field, &fbinding, &motion, &mbinding, &points, 0.4, 0.4, &integration,
        )
        .unwrap();
        assert_eq!(same.scalar_value(), 0.0);

        // Zero motion + time-constant field: exact zero across frames.
        let mut store2 = registered(&field, 73);
        zero_time_columns(&field, &mut store2);
        {
            let mut rng = ChaCha20Rng::seed_from_u64(74);
            motion.register(&mut store2, &mut rng);
        }
        let tape2 = Tape::new();
        let fb2 = field.bind(&tape2, &store2);
        let mb2 = motion.bind(&tape2, &store2);
        let points2 = tape2.constant(3, 5, points.value());
        let across = loss_sdf_consistency(
            &field, &fb2, &motion, &mb2, &points2, -0.6, 0.2, &integration,
        )
        .unwrap();
        assert_eq!(across.scalar_value(), 0.0);
    }

    #[test]
    fn lambda_schedule_and_total_loss_follow_the_stages() {
        let w = LossWeights::default();
        assert_eq!(w.effective_lambda_sdf(0), 0.0);
        assert_eq!(w.effective_lambda_sdf(199), 0.0);
        assert_eq!(w.effective_lambda_sdf(200), 0.0);
        assert!((w.effective_lambda_sdf(300) - 0.05).abs() < 1e-15);
        assert_eq!(w.effective_lambda_sdf(400), 0.1);
        assert_eq!(w.effective_lambda_sdf(4000), 0.1);
        let mut prev = -1.0;
        for epoch in 0..600 {
            let cur = w.effective_lambda_sdf(epoch);
            assert!(cur >= prev);
            prev = cur;
        }

        let tape = Tape::new();
        let zero = tape.constant(1, 1, vec![0.0]);
        let parts = LossComponents {
            rgb: zero.clone(),
            eik: zero.clone(),
            flow: Some(zero.clone()),
            photo: Some(zero.clone()),
            sdf: Some(zero.clone()),
        };
        assert_eq!(total_loss(&parts, &w, 300, 1).scalar_value(), 0.0);

        let parts = LossComponents {
            rgb: tape.constant(1, 1, vec![0.5]),
            eik: tape.constant(1, 1, vec![0.2]),
            flow: Some(tape.constant(1, 1, vec![100.0])),
            photo: Some(tape.constant(1, 1, vec![100.0])),
            sdf: Some(tape.constant(1, 1, vec![100.0])),
        };
        // Stage 2 keeps only rgb + lambda_eik * eik.
        let stage2 = total_loss(&parts, &w, 5000, 2).scalar_value();
        assert!((stage2 - 0.52).abs() < 1e-12);
        // Stage 1 at epoch 0: flow and photo contribute, sdf does not.
        let stage1 = total_loss(&parts, &w, 0, 1).scalar_value();
        assert!((stage1 - (0.52 + 0.1 * 100.0 + 1.0 * 100.0)).abs() < 1e-9);
    }
}
