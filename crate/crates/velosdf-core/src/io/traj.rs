//! Trajectory files: one pose per line, TUM-style
//! `timestamp tx ty tz qx qy qz qw` (quaternion scalar-last, camera-to-world).
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write-read-write cycle is byte-stable.

use super::{write_atomic, IoError};
use crate::geometry::{matrix_to_quaternion, quaternion_to_matrix, Pose};
use std::path::Path;

/// Timestamped camera-to-world poses.
pub type Trajectory = Vec<(f64, Pose)>;

pub fn trajectory_to_string(traj: &[(f64, Pose)]) -> String {
    let mut out = String::new();
    for (t, pose) in traj {
        let q = matrix_to_quaternion(&pose.rotation);
        let p = pose.translation;
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            t, p[0], p[1], p[2], q[0], q[1], q[2], q[3]
        ));
    }
    out
}

pub fn write_trajectory(path: &Path, traj: &[(f64, Pose)]) -> Result<(), IoError> {
    write_atomic(path, trajectory_to_string(traj).as_bytes())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    parse_trajectory(&text, path)
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Trajectory, IoError> {
    let mut traj = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(IoError::parse(
                path,
                lineno,
                format!("expected 8 fields, got {}", fields.len()),
            ));
        }
        let mut nums = [0.0f64; 8];
        for (i, f) in fields.iter().enumerate() {
            nums[i] = f
                .parse()
                .map_err(|_| IoError::parse(path, lineno, format!("bad number {f:?}")))?;
        }
        let q = [nums[4], nums[5], nums[6], nums[7]];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(IoError::parse(
                path,
                lineno,
                format!("quaternion norm {norm} is not 1"),
            ));
        }
        traj.push((
            nums[0],
            Pose {
                rotation: quaternion_to_matrix(q),
                translation: [nums[1], nums[2], nums[3]],
            },
        ));
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_distance, rotvec_to_matrix};

    #[test]
    fn identity_pose_writes_canonical_line() {
        let line = trajectory_to_string(&[(0.0, Pose::identity())]);
        assert_eq!(line, "0 0 0 0 0 0 0 1\n");
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let traj: Trajectory = (0..10)
            .map(|i| {
                let t = i as f64 / 9.0;
                (
                    t,
                    Pose {
                        rotation: rotvec_to_matrix([0.3 * t, -0.8 * t, 0.2 + t]),
                        translation: [t, 2.0 * t - 1.0, -t * t],
                    },
                )
            })
            .collect();
        write_trajectory(&path, &traj).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back.len(), traj.len());
        for ((t0, p0), (t1, p1)) in traj.iter().zip(&back) {
            assert_eq!(t0, t1);
            assert!(pose_distance(p0, p1) < 1e-12);
        }
        // Rewriting the parsed poses stays within the same tolerance of the
        // original file (matrix <-> quaternion conversion costs a few ulp).
        let again = parse_trajectory(&trajectory_to_string(&back), &path).unwrap();
        for ((t0, p0), (t1, p1)) in back.iter().zip(&again) {
            assert_eq!(t0, t1);
            assert!(pose_distance(p0, p1) < 1e-12);
        }
    }

    #[test]
    fn hand_written_z_rotation_parses_to_the_expected_matrix() {
        // 90 degrees about z, scalar-last quaternion.
        let text = "0 0 0 0 0 0 0.7071068 0.7071068\n";
        let traj = parse_trajectory(text, Path::new("inline")).unwrap();
        let want = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (traj[0].1.rotation[i][j] - want[i][j]).abs() < 1e-6,
                    "entry ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "0 0 0 0 0 0 0 1\n0 1 2 3\n";
        let err = parse_trajectory(text, Path::new("traj.txt")).unwrap_err();
        assert!(err.to_string().contains("traj.txt:2"));
        let text = "0 0 0 0 0 0 0 nope\n";
        let err = parse_trajectory(text, Path::new("traj.txt")).unwrap_err();
        assert!(err.to_string().contains("traj.txt:1"));
    }
}
