//! C ABI for the velosdf library.
//!
//! The surface is deliberately small: load a trained checkpoint into an
//! opaque handle, then query signed distances, relative camera poses, and
//! rendered views out of it. Every entry point returns a [`VelosdfStatus`];
//! on any failure a thread-local message is set and can be read back with
//! [`velosdf_last_error`]. Panics are caught at the boundary and reported
//! as [`VelosdfStatus::Panic`] instead of unwinding into C.
//!
//! Conventions shared by all functions:
//! - points are interleaved `x y z` triples, poses are row-major `3x4`
//!   `[R | t]` blocks, images are row-major interleaved RGB in `[0, 1]`;
//! - times live on the normalized axis of the training sequence, `[-1, 1]`;
//! - output buffers are caller-allocated; sizes are documented per call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use velosdf::autodiff::Tape;
use velosdf::camera::Intrinsics;
use velosdf::field::FieldNetworks;
use velosdf::geometry::Pose;
use velosdf::io::{load_checkpoint, ConfigReader};
use velosdf::motion::MotionNetwork;
use velosdf::trainer::{render_views, validate_checkpoint, TrainConfig};

/// Result of every API call. Anything other than `Ok` leaves a description
/// in `velosdf_last_error()`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VelosdfStatus {
    /// The call succeeded.
    Ok = 0,
    /// A pointer was null or a scalar argument out of range.
    InvalidArgument = 1,
    /// The checkpoint could not be read or parsed.
    Io = 2,
    /// The library rejected the inputs (bad config, mismatched shapes, ...).
    Runtime = 3,
    /// A panic was caught at the FFI boundary.
    Panic = 4,
}

/// Pinhole camera description for rendering.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VelosdfCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// A loaded checkpoint: the networks, their parameters, and the training
/// configuration echoed into the checkpoint. Opaque to C.
pub struct VelosdfModel {
    field: FieldNetworks,
    motion: MotionNetwork,
    store: velosdf::autodiff::ParameterStore,
    config: TrainConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = sanitized);
}

/// Runs a closure with panics converted to `VelosdfStatus::Panic`.
fn guarded(f: impl FnOnce() -> VelosdfStatus) -> VelosdfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic across the FFI boundary".into());
            set_error(&format!("panic: {msg}"));
            VelosdfStatus::Panic
        }
    }
}

fn invalid(msg: &str) -> VelosdfStatus {
    set_error(msg);
    VelosdfStatus::InvalidArgument
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn velosdf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Description of the most recent failure on the calling thread, as a
/// NUL-terminated string. The pointer stays valid until the next failing
/// velosdf call on the same thread; the empty string means "no error yet".
#[no_mangle]
pub extern "C" fn velosdf_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a checkpoint written by `velosdf train` and hands back an opaque
/// model. On success `*out` owns the model and must be released with
/// [`velosdf_model_free`]; on failure `*out` is left untouched.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out` to a writable
/// `VelosdfModel*` slot; both must stay valid for the duration of the call.
#[no_mangle]
pub unsafe extern "C" fn velosdf_model_load(
    path: *const c_char,
    out: *mut *mut VelosdfModel,
) -> VelosdfStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            return invalid("velosdf_model_load: null pointer argument");
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(s) => s,
            Err(_) => return invalid("velosdf_model_load: path is not valid UTF-8"),
        };
        let checkpoint = match load_checkpoint(Path::new(path)) {
            Ok(c) => c,
            Err(e) => {
                set_error(&format!("loading {path}: {e}"));
                return VelosdfStatus::Io;
            }
        };
        // The checkpoint carries the full effective config; rebuilding the
        // TrainConfig from it recovers near/far, sample counts, and the
        // network shapes without any extra files.
        let mut reader = ConfigReader::new(checkpoint.config.clone());
        let config = match TrainConfig::from_reader(&mut reader, 0.5, 8.0)
            .and_then(|cfg| reader.finish().map(|_| cfg).map_err(Into::into))
        {
            Ok(cfg) => cfg,
            Err(e) => {
                set_error(&format!("checkpoint config: {e}"));
                return VelosdfStatus::Runtime;
            }
        };
        let field = FieldNetworks::new(config.field.clone());
        let motion = MotionNetwork::new(config.motion.clone());
        if let Err(e) = validate_checkpoint(&field, &motion, &checkpoint.store) {
            set_error(&format!("checkpoint validation: {e}"));
            return VelosdfStatus::Runtime;
        }
        let model = Box::new(VelosdfModel {
            field,
            motion,
            store: checkpoint.store,
            config,
        });
        *out = Box::into_raw(model);
        VelosdfStatus::Ok
    })
}

/// Releases a model returned by [`velosdf_model_load`]. A null pointer is
/// a no-op.
///
/// # Safety
/// `model` must be a pointer previously returned by `velosdf_model_load`
/// and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn velosdf_model_free(model: *mut VelosdfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Evaluates the signed distance field at `count` points and time `t`.
/// `points_xyz` holds `3 * count` doubles, `out_sdf` receives `count`.
///
/// # Safety
/// `model` must be a live model handle; `points_xyz` must be readable for
/// `3 * count` doubles and `out_sdf` writable for `count`.
#[no_mangle]
pub unsafe extern "C" fn velosdf_model_query_sdf(
    model: *const VelosdfModel,
    points_xyz: *const f64,
    count: usize,
    t: f64,
    out_sdf: *mut f64,
) -> VelosdfStatus {
    guarded(|| {
        if model.is_null() || points_xyz.is_null() || out_sdf.is_null() {
            return invalid("velosdf_model_query_sdf: null pointer argument");
        }
        if count == 0 {
            return invalid("velosdf_model_query_sdf: count must be positive");
        }
        if !t.is_finite() {
            return invalid("velosdf_model_query_sdf: t must be finite");
        }
        let m = &*model;
        let interleaved = std::slice::from_raw_parts(points_xyz, 3 * count);
        // Interleaved C layout to the library's channel-major [3, n].
        let mut data = vec![0.0; 3 * count];
        for j in 0..count {
            for a in 0..3 {
                data[a * count + j] = interleaved[3 * j + a];
            }
        }
        let tape = Tape::new();
        let binding = m.field.bind(&tape, &m.store);
        let x = tape.constant(3, count, data);
        let times = tape.constant(1, count, vec![t; count]);
        let sdf = m.field.query_sdf(&binding, &x, &times).value();
        std::slice::from_raw_parts_mut(out_sdf, count).copy_from_slice(&sdf);
        VelosdfStatus::Ok
    })
}

/// Writes the relative camera transport `B_{t1 -> t2}` predicted by the
/// motion network as a row-major `3x4` `[R | t]` block (12 doubles).
/// `frame_dt` is the native frame spacing of the training sequence on the
/// normalized time axis (for `T` frames, `2 / (T - 1)`); it sets the Euler
/// sub-step granularity.
///
/// # Safety
/// `model` must be a live model handle and `out_pose` writable for 12
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn velosdf_model_pose_between(
    model: *const VelosdfModel,
    t1: f64,
    t2: f64,
    frame_dt: f64,
    out_pose: *mut f64,
) -> VelosdfStatus {
    guarded(|| {
        if model.is_null() || out_pose.is_null() {
            return invalid("velosdf_model_pose_between: null pointer argument");
        }
        if !(frame_dt.is_finite() && frame_dt > 0.0) {
            return invalid("velosdf_model_pose_between: frame_dt must be positive");
        }
        let m = &*model;
        let icfg = m.config.integration(frame_dt);
        let pose = match m.motion.pose_between_host(&m.store, t1, t2, &icfg) {
            Ok(p) => p,
            Err(e) => {
                set_error(&format!("pose_between({t1}, {t2}): {e}"));
                return VelosdfStatus::Runtime;
            }
        };
        let out = std::slice::from_raw_parts_mut(out_pose, 12);
        for i in 0..3 {
            out[4 * i..4 * i + 3].copy_from_slice(&pose.rotation[i]);
            out[4 * i + 3] = pose.translation[i];
        }
        VelosdfStatus::Ok
    })
}

/// Renders the field at time `t` from a camera pose given as a row-major
/// `3x4` `[R | t]` block (camera-to-query-frame). `out_rgb` receives
/// `width * height * 3` doubles, `out_depth` (optional, may be null)
/// `width * height` expected ray distances.
///
/// # Safety
/// `model` must be a live model handle; `pose_3x4` must be readable for 12
/// doubles; `out_rgb` (and `out_depth` when non-null) must be writable for
/// the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn velosdf_model_render(
    model: *const VelosdfModel,
    pose_3x4: *const f64,
    camera: VelosdfCamera,
    t: f64,
    out_rgb: *mut f64,
    out_depth: *mut f64,
) -> VelosdfStatus {
    guarded(|| {
        if model.is_null() || pose_3x4.is_null() || out_rgb.is_null() {
            return invalid("velosdf_model_render: null pointer argument");
        }
        if camera.width == 0 || camera.height == 0 {
            return invalid("velosdf_model_render: image size must be positive");
        }
        if !(camera.fx.is_finite() && camera.fy.is_finite() && camera.fx != 0.0 && camera.fy != 0.0)
        {
            return invalid("velosdf_model_render: focal lengths must be finite and non-zero");
        }
        let m = &*model;
        let raw = std::slice::from_raw_parts(pose_3x4, 12);
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            rotation[i].copy_from_slice(&raw[4 * i..4 * i + 3]);
        }
        let pose = Pose {
            rotation,
            translation: [raw[3], raw[7], raw[11]],
        };
        let intr = Intrinsics {
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            width: camera.width,
            height: camera.height,
        };
        let view = &render_views(&m.field, &m.store, &[pose], &intr, &m.config, t)[0];
        let pixels = camera.width * camera.height;
        std::slice::from_raw_parts_mut(out_rgb, pixels * 3).copy_from_slice(&view.image);
        if !out_depth.is_null() {
            std::slice::from_raw_parts_mut(out_depth, pixels).copy_from_slice(&view.depth);
        }
        VelosdfStatus::Ok
    })
}
