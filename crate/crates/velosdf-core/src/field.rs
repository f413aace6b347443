//! Time-dependent neural signed-distance and color field, plus the
//! SDF-to-density conversion and batched volume rendering used throughout
//! training and evaluation.
//!
//! Conventions:
//! - the SDF takes raw (unscaled) spatial coordinates and a time coordinate
//!   in `[-1, 1]`; internally positions are divided by `coord_scale` before
//!   positional encoding, so the learned distances stay metric in the input
//!   frame (the eikonal term sees the composed function);
//! - sample batches are laid out sample-major: a `[., K * R]` tensor stores
//!   the k-th sample of ray r in column `k * R + r`, which makes the
//!   `[1, K * R] -> [K, R]` reshape a pure reinterpretation.

use crate::autodiff::{ParameterStore, Tape, Value};
use crate::camera::Ray;
use crate::nn::{encoded_dim, positional_encoding, Mlp, MlpBinding};
use rand::Rng;
use std::sync::atomic::{AtomicU64, Ordering};

/// Lower floor applied to the denominator of the density conversion.
const PHI_FLOOR: f64 = 1e-7;

/// Architecture and encoding choices for the field networks.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub sdf_hidden: usize,
    pub sdf_layers: usize,
    /// Hidden layer index that re-receives the encoded input.
    pub sdf_skip_at: usize,
    pub color_hidden: usize,
    pub color_layers: usize,
    /// Positional-encoding octaves for position, view direction, and time.
    pub pe_x: usize,
    pub pe_d: usize,
    pub pe_t: usize,
    /// Positions are divided by this before encoding.
    pub coord_scale: f64,
    /// Scaled coordinates are clamped to `[-bound, bound]` per axis.
    pub bound: f64,
    /// Step used for finite-difference spatial and temporal derivatives.
    pub fd_eps: f64,
    /// Sphere the SDF is regressed to before training starts.
    pub init_center: [f64; 3],
    pub init_radius: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            sdf_hidden: 128,
            sdf_layers: 4,
            sdf_skip_at: 2,
            color_hidden: 64,
            color_layers: 3,
            pe_x: 6,
            pe_d: 4,
            pe_t: 4,
            coord_scale: 3.0,
            bound: 4.0,
            fd_eps: 1e-4,
            init_center: [0.0, 0.0, 0.0],
            init_radius: 0.5,
        }
    }
}

/// The two field networks plus the learnable density sharpness. Parameters
/// are registered in a [`ParameterStore`] under the prefixes `sdf.`,
/// `color.`, and the scalar `gamma_log`.
pub struct FieldNetworks {
    cfg: FieldConfig,
    sdf: Mlp,
    color: Mlp,
    clamped: AtomicU64,
}

/// Per-tape bindings for every field parameter.
pub struct FieldBinding {
    sdf: MlpBinding,
    color: MlpBinding,
    gamma_log: Value,
}

impl FieldBinding {
    /// Density sharpness `gamma = exp(gamma_log)` as a `[1, 1]` value.
    pub fn gamma(&self) -> Value {
        self.gamma_log.exp()
    }
}

impl FieldNetworks {
    pub fn new(cfg: FieldConfig) -> Self {
        let sdf_in = encoded_dim(3, cfg.pe_x) + encoded_dim(1, cfg.pe_t);
        let color_in =
            encoded_dim(3, cfg.pe_x) + encoded_dim(3, cfg.pe_d) + encoded_dim(1, cfg.pe_t);
        let sdf = Mlp::new(
            "sdf",
            sdf_in,
            cfg.sdf_hidden,
            cfg.sdf_layers,
            1,
            Some(cfg.sdf_skip_at),
        );
        let color = Mlp::new("color", color_in, cfg.color_hidden, cfg.color_layers, 3, None);
        FieldNetworks {
            cfg,
            sdf,
            color,
            clamped: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &FieldConfig {
        &self.cfg
    }

    /// Registers all field parameters (random MLP weights, `gamma_log`
    /// starting at `ln 10`).
    pub fn register(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        self.sdf.register(store, rng, false);
        self.color.register(store, rng, false);
        store.insert("gamma_log", 1, 1, vec![10f64.ln()]);
    }

    pub fn bind(&self, tape: &Tape, store: &ParameterStore) -> FieldBinding {
        FieldBinding {
            sdf: self.sdf.bind(tape, store),
            color: self.color.bind(tape, store),
            gamma_log: store.bind(tape, "gamma_log"),
        }
    }

    /// Number of query coordinates clamped to the bounding box so far.
    pub fn clamped_queries(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    pub fn reset_clamped_queries(&self) {
        self.clamped.store(0, Ordering::Relaxed);
    }

    /// Scales positions into encoding space and clamps them to the box,
    /// counting how many coordinates were out of bounds.
    fn encode_position(&self, x: &Value) -> Value {
        assert_eq!(x.rows(), 3, "positions must be [3, n]");
        let b = self.cfg.bound;
        let scaled = x.scale(1.0 / self.cfg.coord_scale);
        let clamped = scaled.clamp_min(-b).neg().clamp_min(-b).neg();
        let before = scaled.value();
        let after = clamped.value();
        let hits = before
            .iter()
            .zip(&after)
            .filter(|(u, v)| u != v)
            .count() as u64;
        if hits > 0 {
            self.clamped.fetch_add(hits, Ordering::Relaxed);
        }
        positional_encoding(&clamped, self.cfg.pe_x)
    }

    /// Signed distance at positions `x` (`[3, n]`, input frame) and times
    /// `t` (`[1, n]`). Returns `[1, n]`.
    pub fn query_sdf(&self, binding: &FieldBinding, x: &Value, t: &Value) -> Value {
        assert_eq!(t.rows(), 1, "times must be [1, n]");
        assert_eq!(x.cols(), t.cols(), "position/time batch mismatch");
        let enc = Value::concat_rows(&[
            &self.encode_position(x),
            &positional_encoding(t, self.cfg.pe_t),
        ]);
        self.sdf.forward(&binding.sdf, &enc)
    }

    /// Emitted color at positions `x`, unit view directions `d`, and times
    /// `t`. Returns `[3, n]` in `[0, 1]`.
    pub fn query_color(&self, binding: &FieldBinding, x: &Value, d: &Value, t: &Value) -> Value {
        assert_eq!(d.rows(), 3, "directions must be [3, n]");
        let enc = Value::concat_rows(&[
            &self.encode_position(x),
            &positional_encoding(d, self.cfg.pe_d),
            &positional_encoding(t, self.cfg.pe_t),
        ]);
        self.color.forward(&binding.color, &enc).sigmoid()
    }

    /// Spatial SDF gradient by central differences at fixed locations.
    /// `points` values are read once and shifted as constants, so the
    /// derivative reaches network parameters but not `points` itself.
    /// Returns `[3, n]`.
    pub fn surface_normal(&self, binding: &FieldBinding, points: &Value, t: &Value) -> Value {
        let tape = points.tape();
        let (rows, n) = points.shape();
        assert_eq!(rows, 3, "points must be [3, n]");
        let base = points.value();
        let eps = self.cfg.fd_eps;
        let mut axes = Vec::with_capacity(3);
        for axis in 0..3 {
            let mut plus = base.clone();
            let mut minus = base.clone();
            for j in 0..n {
                plus[axis * n + j] += eps;
                minus[axis * n + j] -= eps;
            }
            let s_plus = self.query_sdf(binding, &tape.constant(3, n, plus), t);
            let s_minus = self.query_sdf(binding, &tape.constant(3, n, minus), t);
            axes.push(s_plus.sub(&s_minus).scale(1.0 / (2.0 * eps)));
        }
        Value::concat_rows(&[&axes[0], &axes[1], &axes[2]])
    }

    /// Temporal SDF derivative by central differences, falling back to a
    /// one-sided difference where `t ± eps` would leave `t_range`. Returns
    /// `[1, n]`.
    pub fn sdf_time_derivative(
        &self,
        binding: &FieldBinding,
        points: &Value,
        t: f64,
        t_range: (f64, f64),
    ) -> Value {
        assert!(t_range.0 < t_range.1, "degenerate time range");
        let tape = points.tape();
        let n = points.cols();
        let eps = self.cfg.fd_eps;
        let t_hi = (t + eps).min(t_range.1);
        let t_lo = (t - eps).max(t_range.0);
        let s_hi = self.query_sdf(binding, points, &tape.constant(1, n, vec![t_hi; n]));
        let s_lo = self.query_sdf(binding, points, &tape.constant(1, n, vec![t_lo; n]));
        s_hi.sub(&s_lo).scale(1.0 / (t_hi - t_lo))
    }

    /// Regresses the SDF head to the sphere `|x - init_center| - init_radius`
    /// over random points and times, giving training a well-behaved starting
    /// surface. Only `sdf.*` parameters are updated. Returns the final MSE.
    pub fn geometric_init(
        &self,
        store: &mut ParameterStore,
        rng: &mut impl Rng,
        steps: usize,
        batch: usize,
    ) -> f64 {
        let c = self.cfg.init_center;
        let half = 2.5 * self.cfg.init_radius.max(1.0);
        let adam = crate::autodiff::AdamConfig::default();
        let mut last = f64::NAN;
        for _ in 0..steps {
            let mut xs = vec![0.0; 3 * batch];
            let mut target = vec![0.0; batch];
            for j in 0..batch {
                let p = [
                    c[0] + half * (2.0 * rng.gen::<f64>() - 1.0),
                    c[1] + half * (2.0 * rng.gen::<f64>() - 1.0),
                    c[2] + half * (2.0 * rng.gen::<f64>() - 1.0),
                ];
                for axis in 0..3 {
                    xs[axis * batch + j] = p[axis];
                }
                let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2))
                    .sqrt();
                target[j] = d - self.cfg.init_radius;
            }
            let ts: Vec<f64> = (0..batch).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
            let tape = Tape::new();
            let binding = self.bind(&tape, store);
            let s = self.query_sdf(
                &binding,
                &tape.constant(3, batch, xs),
                &tape.constant(1, batch, ts),
            );
            let loss = s.sub(&tape.constant(1, batch, target)).square().mean_all();
            last = loss.scalar_value();
            let grads = tape.backward(&loss).expect("scalar loss");
            let mut by_name = grads.by_name(&tape);
            by_name.retain(|name, _| name.starts_with("sdf."));
            store.adam_step(&by_name, &adam).expect("matching shapes");
        }
        last
    }

    /// Volume-renders a batch of rays from pre-built sample inputs.
    pub fn render(
        &self,
        binding: &FieldBinding,
        inputs: &RenderInputs,
        background: [f64; 3],
    ) -> RenderBatch {
        let k = inputs.samples_per_ray;
        let r = inputs.rays;
        assert_eq!(inputs.points.shape(), (3, k * r), "points shape");
        assert_eq!(inputs.dirs.shape(), (3, k * r), "dirs shape");
        assert_eq!(inputs.dists.shape(), (1, k * r), "dists shape");
        assert_eq!(inputs.t.shape(), (1, k * r), "t shape");
        let tape = inputs.points.tape();

        let sdf = self.query_sdf(binding, &inputs.points, &inputs.t);
        let sigma = sdf_to_density(&sdf.reshape(k, r), &binding.gamma());
        let trans = sigma.neg().add_const(1.0).cumprod_exclusive_rows();
        let weights = trans.mul(&sigma);
        let w_flat = weights.reshape(1, k * r);

        let raw_color = self.query_color(binding, &inputs.points, &inputs.dirs, &inputs.t);
        let foreground = raw_color.mul(&w_flat).fold_sum_cols(k);
        let opacity = w_flat.fold_sum_cols(k);
        let bg = tape.constant(3, 1, background.to_vec());
        let color = foreground.add(&bg.mul(&opacity.neg().add_const(1.0)));
        let depth = inputs.dists.mul(&w_flat).fold_sum_cols(k);
        let surface = inputs.points.mul(&w_flat).fold_sum_cols(k);

        RenderBatch {
            color,
            depth,
            surface,
            opacity,
            weights,
            sdf,
            sigma,
        }
    }
}

/// Converts SDF samples `[K, R]` (K ordered samples per ray, sample-major
/// columns) to discrete densities: with `Phi = sigmoid(gamma s)`,
/// `sigma_i = max((Phi_i - Phi_{i+1}) / max(Phi_i, 1e-7), 0)` for
/// `i < K - 1`, and the final sample gets density zero.
pub fn sdf_to_density(sdf: &Value, gamma: &Value) -> Value {
    let (k, r) = sdf.shape();
    assert!(k >= 2, "need at least two samples per ray");
    let phi_head = sdf.slice_rows(0, k - 1).mul(gamma).sigmoid();
    let phi_next = sdf.slice_rows(1, k - 1).mul(gamma).sigmoid();
    let sigma = phi_head
        .sub(&phi_next)
        .div(&phi_head.clamp_min(PHI_FLOOR))
        .relu();
    let zero = sdf.tape().constant(1, r, vec![0.0; r]);
    Value::concat_rows(&[&sigma, &zero])
}

/// Per-ray sample distances, sample-major (`index k * rays + r`). Each ray
/// gets `k` bins spanning `[near, far]`; samples sit at bin midpoints, or
/// uniformly jittered inside their bin when `stratified` is set.
pub fn sample_ray_depths(
    near: f64,
    far: f64,
    k: usize,
    rays: usize,
    stratified: bool,
    rng: &mut impl Rng,
) -> Vec<f64> {
    assert!(far > near && k > 0);
    let bin = (far - near) / k as f64;
    let mut out = vec![0.0; k * rays];
    for kk in 0..k {
        for rr in 0..rays {
            let u = if stratified { rng.gen::<f64>() } else { 0.5 };
            out[kk * rays + rr] = near + (kk as f64 + u) * bin;
        }
    }
    out
}

/// Sample batch handed to [`FieldNetworks::render`]. All tensors are
/// sample-major over `samples_per_ray * rays` columns.
pub struct RenderInputs {
    pub points: Value,
    pub dirs: Value,
    pub dists: Value,
    pub t: Value,
    pub samples_per_ray: usize,
    pub rays: usize,
}

/// Outputs of volume rendering, all still on the tape.
pub struct RenderBatch {
    /// Composited pixel colors `[3, R]` (background already blended in).
    pub color: Value,
    /// Expected ray distance `[1, R]` (no background contribution).
    pub depth: Value,
    /// Expected surface point `[3, R]`.
    pub surface: Value,
    /// Accumulated weight `[1, R]`.
    pub opacity: Value,
    /// Per-sample rendering weights `[K, R]`.
    pub weights: Value,
    /// Raw SDF samples `[1, K * R]`.
    pub sdf: Value,
    /// Per-sample densities `[K, R]`.
    pub sigma: Value,
}

/// Builds constant render inputs for rays expressed in the field's input
/// frame. `dists` must be sample-major of length `k * rays.len()`.
pub fn ray_sample_inputs(tape: &Tape, rays: &[Ray], dists: &[f64], k: usize, t: f64) -> RenderInputs {
    let r = rays.len();
    assert_eq!(dists.len(), k * r, "distance count");
    let n = k * r;
    let mut points = vec![0.0; 3 * n];
    let mut dirs = vec![0.0; 3 * n];
    for kk in 0..k {
        for (rr, ray) in rays.iter().enumerate() {
            let col = kk * r + rr;
            let h = dists[col];
            for axis in 0..3 {
                points[axis * n + col] = ray.origin[axis] + h * ray.direction[axis];
                dirs[axis * n + col] = ray.direction[axis];
            }
        }
    }
    RenderInputs {
        points: tape.constant(3, n, points),
        dirs: tape.constant(3, n, dirs),
        dists: tape.constant(1, n, dists.to_vec()),
        t: tape.constant(1, n, vec![t; n]),
        samples_per_ray: k,
        rays: r,
    }
}
