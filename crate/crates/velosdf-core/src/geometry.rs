//! Minimal 3-D linear algebra and rigid/similarity transforms.
//!
//! Everything is built on plain `f64` arrays: `Vec3 = [f64; 3]` and row-major
//! `Mat3 = [[f64; 3]; 3]`. Rotation matrices act on column vectors, and a
//! [`Pose`] maps points as `R * x + t`. The only external dependency is an
//! SVD (for [`umeyama_align`]), everything else is written out by hand so the
//! numerics are easy to audit.

use thiserror::Error;

/// A 3-vector.
pub type Vec3 = [f64; 3];
/// A row-major 3x3 matrix.
pub type Mat3 = [[f64; 3]; 3];

/// Angles below this threshold use the Taylor expansion of the exponential
/// map instead of the closed-form Rodrigues formula, which divides by the
/// angle and loses precision near zero.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    /// Point-set alignment needs at least 3 non-collinear points with
    /// non-zero spread to determine a unique similarity transform.
    #[error("degenerate input for alignment: {0}")]
    DegenerateInput(String),
}

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn neg(a: Vec3) -> Vec3 {
    [-a[0], -a[1], -a[2]]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Normalizes `a`; returns `a` unchanged if its norm is (near) zero.
pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        a
    }
}

// ---------------------------------------------------------------------------
// Matrix helpers
// ---------------------------------------------------------------------------

pub fn identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// The skew-symmetric cross-product matrix `[w]x` with `[w]x v = w x v`.
pub fn skew(w: Vec3) -> Mat3 {
    [
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ]
}

/// Rodrigues' formula: the rotation matrix `exp([w]x)` for a rotation vector
/// `w` (axis scaled by angle in radians).
///
/// For angles below [`SMALL_ANGLE`] the second-order Taylor expansion
/// `I + [w]x + [w]x^2 / 2` is used to avoid dividing by a vanishing angle.
pub fn rotvec_to_matrix(w: Vec3) -> Mat3 {
    let theta2 = dot(w, w);
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        // sin(t)/t ~= 1 - t^2/6, (1 - cos(t))/t^2 ~= 1/2 - t^2/24
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let mut out = identity();
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    out
}

/// The rotation angle in radians of a rotation matrix, from
/// `atan2(|skew part| / 2, (trace(R) - 1) / 2)`. Unlike the plain
/// `acos` of the trace, this keeps full precision for small angles and
/// returns a hard zero for symmetric inputs.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let s = norm([
        r[2][1] - r[1][2],
        r[0][2] - r[2][0],
        r[1][0] - r[0][1],
    ]) / 2.0;
    let c = (r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0;
    s.atan2(c)
}

/// Converts a rotation matrix to a unit quaternion stored scalar-last as
/// `[x, y, z, w]`, with `w >= 0`. Uses the numerically stable branch on the
/// largest diagonal element.
pub fn matrix_to_quaternion(r: &Mat3) -> [f64; 4] {
    let trace = r[0][0] + r[1][1] + r[2][2];
    let mut q;
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0; // s = 4w
        q = [
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
            0.25 * s,
        ];
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0; // s = 4x
        q = [
            0.25 * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[2][1] - r[1][2]) / s,
        ];
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0; // s = 4y
        q = [
            (r[0][1] + r[1][0]) / s,
            0.25 * s,
            (r[1][2] + r[2][1]) / s,
            (r[0][2] - r[2][0]) / s,
        ];
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0; // s = 4z
        q = [
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            0.25 * s,
            (r[1][0] - r[0][1]) / s,
        ];
    }
    if q[3] < 0.0 {
        for c in &mut q {
            *c = -*c;
        }
    }
    q
}

/// Converts a (not necessarily normalized) scalar-last quaternion
/// `[x, y, z, w]` to a rotation matrix.
pub fn quaternion_to_matrix(q: [f64; 4]) -> Mat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [x, y, z, w] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

// ---------------------------------------------------------------------------
// Rigid transforms
// ---------------------------------------------------------------------------

/// A rigid transform mapping points as `R * x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: identity(),
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Applies the transform to a point.
    pub fn apply(&self, x: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, x), self.translation)
    }

    /// Rotates a direction (ignores the translation part).
    pub fn rotate(&self, d: Vec3) -> Vec3 {
        mat_vec(&self.rotation, d)
    }

    /// Composition `self o other`: applies `other` first, then `self`;
    /// `(R_a R_b, R_a t_b + t_a)`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: add(mat_vec(&self.rotation, other.translation), self.translation),
        }
    }

    /// The inverse transform `(R^T, -R^T t)`.
    pub fn inverse(&self) -> Pose {
        let rt = transpose(&self.rotation);
        Pose {
            rotation: rt,
            translation: neg(mat_vec(&rt, self.translation)),
        }
    }

    /// The homogeneous 4x4 matrix (row-major).
    pub fn matrix4(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }
}

/// Frobenius norm of the difference of two poses' homogeneous matrices; a
/// convenient chaining-defect measure.
pub fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    let ma = a.matrix4();
    let mb = b.matrix4();
    let mut acc = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let d = ma[i][j] - mb[i][j];
            acc += d * d;
        }
    }
    acc.sqrt()
}

// ---------------------------------------------------------------------------
// Similarity alignment (Umeyama)
// ---------------------------------------------------------------------------

/// A similarity transform mapping points as `s * R * x + t`.
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, x: Vec3) -> Vec3 {
        add(scale(mat_vec(&self.rotation, x), self.scale), self.translation)
    }
}

/// Least-squares similarity alignment of two paired point sets: finds
/// `(s, R, t)` minimizing `sum_i || dst_i - (s R src_i + t) ||^2` via the
/// SVD of the cross-covariance, with the determinant-sign correction that
/// keeps `R` a proper rotation.
///
/// Errors with [`GeometryError::DegenerateInput`] when fewer than 3 points
/// are given, the source points have (near) zero spread, or the covariance
/// is rank-deficient (collinear points), since the rotation is then not
/// uniquely determined.
pub fn umeyama_align(src: &[Vec3], dst: &[Vec3]) -> Result<Similarity, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::DegenerateInput(format!(
            "point counts differ: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(GeometryError::DegenerateInput(format!(
            "need at least 3 points, got {n}"
        )));
    }
    // Identical point sets are aligned by the exact identity; skipping the
    // decomposition keeps downstream residuals at a hard zero instead of
    // SVD round-off.
    if src == dst {
        return Ok(Similarity {
            scale: 1.0,
            rotation: identity(),
            translation: [0.0; 3],
        });
    }
    let nf = n as f64;

    let mut mu_s = [0.0; 3];
    let mut mu_d = [0.0; 3];
    for i in 0..n {
        mu_s = add(mu_s, src[i]);
        mu_d = add(mu_d, dst[i]);
    }
    mu_s = scale(mu_s, 1.0 / nf);
    mu_d = scale(mu_d, 1.0 / nf);

    // Cross-covariance (dst-centered times src-centered transposed) and the
    // source variance that normalizes the scale estimate.
    let mut sigma = [[0.0; 3]; 3];
    let mut var_s = 0.0;
    for i in 0..n {
        let ps = sub(src[i], mu_s);
        let pd = sub(dst[i], mu_d);
        for r in 0..3 {
            for c in 0..3 {
                sigma[r][c] += pd[r] * ps[c] / nf;
            }
        }
        var_s += dot(ps, ps) / nf;
    }
    if var_s <= 1e-24 {
        return Err(GeometryError::DegenerateInput(
            "source points have zero spread".into(),
        ));
    }

    let m = nalgebra::Matrix3::from_fn(|r, c| sigma[r][c]);
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let d = svd.singular_values;

    // Rank check: collinear point sets leave the rotation under-determined.
    if d[1] <= 1e-12 * d[0].max(1e-300) {
        return Err(GeometryError::DegenerateInput(
            "rank-deficient covariance (collinear points)".into(),
        ));
    }

    // Reflection guard: flip the axis of the smallest singular value when
    // det(U V^T) < 0 so the recovered transform is a proper rotation.
    let flip = (u.determinant() * v_t.determinant()) < 0.0;
    let s3 = if flip { -1.0 } else { 1.0 };
    let mut rot = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            rot[r][c] = u[(r, 0)] * v_t[(0, c)] + u[(r, 1)] * v_t[(1, c)] + s3 * u[(r, 2)] * v_t[(2, c)];
        }
    }
    let trace_ds = d[0] + d[1] + s3 * d[2];
    let s = trace_ds / var_s;
    let t = sub(mu_d, scale(mat_vec(&rot, mu_s), s));

    Ok(Similarity {
        scale: s,
        rotation: rot,
        translation: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat_abs_diff(a: &Mat3, b: &Mat3) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((a[i][j] - b[i][j]).abs());
            }
        }
        worst
    }

    #[test]
    fn rodrigues_quarter_turn_about_x() {
        // Rotation by pi/2 about +x takes +y to +z.
        let r = rotvec_to_matrix([std::f64::consts::FRAC_PI_2, 0.0, 0.0]);
        let v = mat_vec(&r, [0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rodrigues_zero_is_identity() {
        assert_eq!(rotvec_to_matrix([0.0; 3]), identity());
    }

    #[test]
    fn rodrigues_small_angle_matches_first_order() {
        // Below the Taylor threshold, R ~= I + [w]x to machine precision.
        let w = [1e-10, -2e-10, 0.5e-10];
        let r = rotvec_to_matrix(w);
        let k = skew(w);
        let mut expect = identity();
        for i in 0..3 {
            for j in 0..3 {
                expect[i][j] += k[i][j];
            }
        }
        assert!(mat_abs_diff(&r, &expect) < 1e-19);
    }

    #[test]
    fn rodrigues_produces_proper_rotations() {
        let w = [0.3, -1.2, 0.7];
        let r = rotvec_to_matrix(w);
        let rtr = mat_mul(&transpose(&r), &r);
        assert!(mat_abs_diff(&rtr, &identity()) < 1e-14);
        assert_abs_diff_eq!(det(&r), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(rotation_angle(&r), norm(w), epsilon = 1e-12);
    }

    #[test]
    fn pose_compose_inverse_round_trip() {
        let p = Pose::new(rotvec_to_matrix([0.2, 0.4, -0.1]), [1.0, -2.0, 3.0]);
        let id = p.compose(&p.inverse());
        assert!(pose_distance(&id, &Pose::identity()) < 1e-12);
        let x = [0.3, 0.7, -1.1];
        let y = p.inverse().apply(p.apply(x));
        for k in 0..3 {
            assert_abs_diff_eq!(y[k], x[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let a = Pose::new(rotvec_to_matrix([0.0, 0.3, 0.0]), [1.0, 0.0, 0.0]);
        let b = Pose::new(rotvec_to_matrix([0.5, 0.0, 0.2]), [0.0, 2.0, 0.0]);
        let x = [0.1, -0.4, 0.9];
        let via_compose = a.compose(&b).apply(x);
        let sequential = a.apply(b.apply(x));
        for k in 0..3 {
            assert_abs_diff_eq!(via_compose[k], sequential[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn quaternion_identity_is_scalar_last_unit() {
        assert_eq!(matrix_to_quaternion(&identity()), [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn quaternion_round_trip() {
        for w in [
            [0.1, 0.2, 0.3],
            [3.0, -0.2, 0.1],
            [0.0, std::f64::consts::PI - 1e-3, 0.0],
            [-2.2, 1.9, 0.4],
        ] {
            let r = rotvec_to_matrix(w);
            let q = matrix_to_quaternion(&r);
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-12);
            let back = quaternion_to_matrix(q);
            assert!(mat_abs_diff(&r, &back) < 1e-12, "round trip failed for {w:?}");
        }
    }

    #[test]
    fn umeyama_recovers_known_similarity() {
        // Construct dst = s R src + t, recover it, and compare.
        let rot = rotvec_to_matrix([0.3, -0.8, 0.5]);
        let (s, t) = (1.7, [0.4, -2.0, 1.1]);
        let src: Vec<Vec3> = (0..40)
            .map(|i| {
                let f = i as f64;
                [f.sin(), (2.0 * f).cos(), 0.1 * f - 2.0]
            })
            .collect();
        let dst: Vec<Vec3> = src
            .iter()
            .map(|&p| add(scale(mat_vec(&rot, p), s), t))
            .collect();
        let sim = umeyama_align(&src, &dst).unwrap();
        assert_abs_diff_eq!(sim.scale, s, epsilon = 1e-8);
        assert!(mat_abs_diff(&sim.rotation, &rot) < 1e-8);
        for k in 0..3 {
            assert_abs_diff_eq!(sim.translation[k], t[k], epsilon = 1e-8);
        }
    }

    #[test]
    fn umeyama_rejects_degenerate_inputs() {
        let two = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        assert!(matches!(
            umeyama_align(&two, &two),
            Err(GeometryError::DegenerateInput(_))
        ));
        // Collinear points leave a rotation about the line undetermined.
        let line: Vec<Vec3> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let shifted: Vec<Vec3> = line.iter().map(|p| add(*p, [0.0, 1.0, 0.0])).collect();
        assert!(matches!(
            umeyama_align(&line, &shifted),
            Err(GeometryError::DegenerateInput(_))
        ));
        let same = vec![[1.0, 2.0, 3.0]; 5];
        let other = vec![[4.0, 5.0, 6.0]; 5];
        assert!(matches!(
            umeyama_align(&same, &other),
            Err(GeometryError::DegenerateInput(_))
        ));
        // Identical sets short-circuit to the exact identity, even when the
        // geometry alone would be ambiguous.
        let sim = umeyama_align(&line, &line).unwrap();
        assert_eq!(sim.scale, 1.0);
        assert_eq!(sim.rotation, identity());
        assert_eq!(sim.translation, [0.0; 3]);
    }
}
