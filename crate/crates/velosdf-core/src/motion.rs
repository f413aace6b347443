//! The motion network and velocity integration.
//!
//! A small MLP maps normalized time `t in [-1, 1]` to an instantaneous
//! rigid velocity `(omega, v)`: the angular and linear velocity of the
//! *scene* expressed in the camera frame at time `t` (for a camera moving
//! through a static scene this is the negated camera body rate). The induced
//! point motion is `x_dot = omega x x + v`, and integrating it with explicit
//! Euler steps yields the coordinate transport `B_{t1 -> t2}` that rewrites
//! camera-frame coordinates at `t1` into camera-frame coordinates at `t2`.
//!
//! Each Euler sub-step applies `M_u = [psi(omega dt), v dt; 0, 1]` with the
//! velocity sampled at the sub-step's left endpoint, accumulating new steps
//! on the left (`M <- M_u M`, increasing `u`). Composed transports therefore
//! factor exactly when their sub-step grids align:
//! `B_{t1 -> t3} = B_{t2 -> t3} B_{t1 -> t2}` whenever `t2` lies on the grid.

use crate::autodiff::{ParameterStore, Tape, Value};
use crate::geometry::{Mat3, Pose, Vec3};
use crate::nn::{positional_encoding, Mlp, MlpBinding};
use rand::Rng;

/// Slack accepted on the normalized-time bounds, absorbing round-off from
/// frame-index arithmetic.
const TIME_SLACK: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum MotionError {
    #[error("time {t} outside the normalized range [-1, 1]")]
    TimeOutOfRange { t: f64 },
}

fn check_time(t: f64) -> Result<(), MotionError> {
    if t.is_finite() && t.abs() <= 1.0 + TIME_SLACK {
        Ok(())
    } else {
        Err(MotionError::TimeOutOfRange { t })
    }
}

/// How finely velocity integrals are discretized.
#[derive(Debug, Clone, Copy)]
pub struct IntegrationConfig {
    /// Euler sub-steps per frame gap (`U`).
    pub substeps_per_frame: usize,
    /// Normalized time between consecutive frames.
    pub frame_dt: f64,
}

impl IntegrationConfig {
    pub fn new(substeps_per_frame: usize, frame_dt: f64) -> Self {
        assert!(substeps_per_frame >= 1, "need at least one sub-step");
        assert!(frame_dt > 0.0, "frame spacing must be positive");
        IntegrationConfig {
            substeps_per_frame,
            frame_dt,
        }
    }

    /// Sub-step count for an interval: `U` per frame gap, rounded up so the
    /// per-step resolution never degrades, and exact multiples of the frame
    /// spacing get exactly `U * gaps` steps.
    pub fn substeps(&self, t1: f64, t2: f64) -> usize {
        let gaps = (t2 - t1).abs() / self.frame_dt;
        ((gaps * self.substeps_per_frame as f64) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Architecture of the velocity MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionConfig {
    pub hidden: usize,
    pub layers: usize,
    /// Positional-encoding octaves applied to `t`.
    pub pe_t: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            hidden: 128,
            layers: 4,
            pe_t: 6,
        }
    }
}

/// The velocity network. Parameters live in a [`ParameterStore`] under the
/// `motion.` prefix; the final layer is zero-initialized so a fresh network
/// predicts zero velocity everywhere (identity motion).
pub struct MotionNetwork {
    cfg: MotionConfig,
    mlp: Mlp,
}

/// Per-tape bindings for the motion parameters.
pub struct MotionBinding {
    mlp: MlpBinding,
    tape: Tape,
}

impl MotionNetwork {
    pub fn new(cfg: MotionConfig) -> Self {
        let input = crate::nn::encoded_dim(1, cfg.pe_t);
        let mlp = Mlp::new("motion", input, cfg.hidden, cfg.layers, 6, None);
        MotionNetwork { cfg, mlp }
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        self.mlp.register(store, rng, true);
    }

    pub fn bind(&self, tape: &Tape, store: &ParameterStore) -> MotionBinding {
        MotionBinding {
            mlp: self.mlp.bind(tape, store),
            tape: tape.clone(),
        }
    }

    /// Overwrites the output layer so the network predicts `(omega, vel)`
    /// at every time. Useful for synthetic experiments and tests.
    pub fn force_constant_velocity(
        &self,
        store: &mut ParameterStore,
        omega: Vec3,
        vel: Vec3,
    ) {
        let l = self.cfg.layers;
        let w_name = format!("motion.w{l}");
        let (rows, cols) = store.shape(&w_name).expect("registered motion network");
        store.set_data(&w_name, vec![0.0; rows * cols]);
        store.set_data(
            &format!("motion.b{l}"),
            vec![omega[0], omega[1], omega[2], vel[0], vel[1], vel[2]],
        );
    }

    /// Velocity at a batch of times `t` (`[1, n]`): returns `[6, n]` with
    /// rows `0..3` holding `omega` and rows `3..6` holding `v`. Times are
    /// assumed pre-validated (training code queries frame times only).
    pub fn velocity_at(&self, binding: &MotionBinding, t: &Value) -> Value {
        debug_assert!(t.value().iter().all(|v| v.abs() <= 1.0 + TIME_SLACK));
        let enc = positional_encoding(t, self.cfg.pe_t);
        self.mlp.forward(&binding.mlp, &enc)
    }

    /// Host-side velocity lookup at one time.
    pub fn predict_velocity(
        &self,
        store: &ParameterStore,
        t: f64,
    ) -> Result<(Vec3, Vec3), MotionError> {
        check_time(t)?;
        let tape = Tape::new();
        let binding = self.bind(&tape, store);
        let out = self
            .velocity_at(&binding, &tape.constant(1, 1, vec![t]))
            .value();
        Ok(([out[0], out[1], out[2]], [out[3], out[4], out[5]]))
    }

    /// Euler-integrates the transport `B_{t -> t+l}` (`l > 0`) with
    /// `cfg.substeps(t, t+l)` sub-steps, on the tape. Returns the rotation
    /// `[3, 3]` and translation `[3, 1]`.
    pub fn integrate_relative(
        &self,
        binding: &MotionBinding,
        t: f64,
        l: f64,
        cfg: &IntegrationConfig,
    ) -> Result<(Value, Value), MotionError> {
        assert!(l > 0.0, "interval length must be positive");
        check_time(t)?;
        check_time(t + l)?;
        let n = cfg.substeps(t, t + l);
        let dt = l / n as f64;
        let times: Vec<f64> = (0..n).map(|u| t + u as f64 * dt).collect();
        let vels = self.velocity_at(binding, &binding.tape.constant(1, n, times));
        let omega_all = vels.slice_rows(0, 3);
        let v_all = vels.slice_rows(3, 3);

        let mut rot = binding.tape.constant(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        let mut trans = binding.tape.constant(3, 1, vec![0.0; 3]);
        for u in 0..n {
            let w_u = omega_all.gather_cols(&[u]);
            let v_u = v_all.gather_cols(&[u]);
            let step = rodrigues(&w_u.scale(dt));
            rot = step.matmul(&rot);
            trans = step.matmul(&trans).add(&v_u.scale(dt));
        }
        Ok((rot, trans))
    }

    /// Coordinate transport between two frame times, on the tape:
    /// `B_{t1 -> t2}` for `t1 <= t2`, and the exact inverse of
    /// `B_{t2 -> t1}` for `t1 > t2`; the identity for `t1 == t2`.
    pub fn pose_between(
        &self,
        binding: &MotionBinding,
        t1: f64,
        t2: f64,
        cfg: &IntegrationConfig,
    ) -> Result<(Value, Value), MotionError> {
        check_time(t1)?;
        check_time(t2)?;
        if t1 == t2 {
            let rot = binding.tape.constant(
                3,
                3,
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            );
            let trans = binding.tape.constant(3, 1, vec![0.0; 3]);
            return Ok((rot, trans));
        }
        if t1 < t2 {
            self.integrate_relative(binding, t1, t2 - t1, cfg)
        } else {
            let (rot, trans) = self.integrate_relative(binding, t2, t1 - t2, cfg)?;
            let rot_inv = rot.transpose();
            let trans_inv = rot_inv.matmul(&trans).neg();
            Ok((rot_inv, trans_inv))
        }
    }

    /// Host-side transport as a [`Pose`].
    pub fn pose_between_host(
        &self,
        store: &ParameterStore,
        t1: f64,
        t2: f64,
        cfg: &IntegrationConfig,
    ) -> Result<Pose, MotionError> {
        let tape = Tape::new();
        let binding = self.bind(&tape, store);
        let (rot, trans) = self.pose_between(&binding, t1, t2, cfg)?;
        let r = rot.value();
        let t = trans.value();
        let mut rotation: Mat3 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = r[i * 3 + j];
            }
        }
        Ok(Pose {
            rotation,
            translation: [t[0], t[1], t[2]],
        })
    }
}

/// On-tape Rodrigues formula for a rotation vector `r` (`[3, 1]`):
/// `R = I + A [r]_x + B [r]_x^2` with `A = sin(theta)/theta` and
/// `B = (1 - cos(theta))/theta^2`. Written branch-free in `theta^2` (both
/// coefficients are smooth functions of it), with a tiny additive guard so
/// `theta = 0` evaluates exactly to the identity.
pub fn rodrigues(r: &Value) -> Value {
    assert_eq!(r.shape(), (3, 1), "rotation vector must be [3, 1]");
    let theta2 = r.square().sum_all().add_const(1e-24);
    let theta = theta2.sqrt();
    let a = theta.sin().div(&theta);
    let b = theta.cos().neg().add_const(1.0).div(&theta2);
    let k = skew_on_tape(r);
    let k2 = k.matmul(&k);
    let eye = r.tape().constant(
        3,
        3,
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    );
    eye.add(&k.mul(&a)).add(&k2.mul(&b))
}

/// Skew-symmetric matrix `[r]_x` assembled on the tape from a `[3, 1]`
/// vector.
fn skew_on_tape(r: &Value) -> Value {
    let zero = r.tape().constant(1, 1, vec![0.0]);
    let rx = r.slice_rows(0, 1);
    let ry = r.slice_rows(1, 1);
    let rz = r.slice_rows(2, 1);
    let row0 = Value::concat_rows(&[&zero, &rz.neg(), &ry]).reshape(1, 3);
    let row1 = Value::concat_rows(&[&rz, &zero, &rx.neg()]).reshape(1, 3);
    let row2 = Value::concat_rows(&[&ry.neg(), &rx, &zero]).reshape(1, 3);
    Value::concat_rows(&[&row0, &row1, &row2])
}

/// Scene flow `omega x x + v` for points `x` (`[3, n]`) under the rigid
/// scene velocity `omega, vel` (`[3, 1]` each), on the tape. This is the
/// apparent camera-frame velocity of a point carried by the scene — the
/// `dx/dt` that pairs with `ds/dt` in the SDF transport identity.
pub fn scene_flow(omega: &Value, vel: &Value, x: &Value) -> Value {
    assert_eq!(omega.shape(), (3, 1));
    assert_eq!(vel.shape(), (3, 1));
    assert_eq!(x.rows(), 3);
    let wx = omega.slice_rows(0, 1);
    let wy = omega.slice_rows(1, 1);
    let wz = omega.slice_rows(2, 1);
    let x0 = x.slice_rows(0, 1);
    let x1 = x.slice_rows(1, 1);
    let x2 = x.slice_rows(2, 1);
    let c0 = wy.mul(&x2).sub(&wz.mul(&x1)).add(&vel.slice_rows(0, 1));
    let c1 = wz.mul(&x0).sub(&wx.mul(&x2)).add(&vel.slice_rows(1, 1));
    let c2 = wx.mul(&x1).sub(&wy.mul(&x0)).add(&vel.slice_rows(2, 1));
    Value::concat_rows(&[&c0, &c1, &c2])
}
