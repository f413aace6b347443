//! File formats and configuration: PFM depth maps, PNG images, trajectory
//! files, flat key-value configs, checkpoints, and dataset loading.
//!
//! All writers go through [`write_atomic`] (temp file + rename), so a run
//! directory never holds a half-written file.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod pfm;
pub mod traj;

use crate::camera::Intrinsics;
use std::io::Cursor;
use std::path::{Path, PathBuf};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{parse_config_file, parse_config_text, ConfigReader};
pub use dataset::{load_dataset, SceneDataset};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("corrupt image {path}: {source}")]
    CorruptImage {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("inconsistent sizes: {0}")]
    InconsistentSizes(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("unknown config key(s): {0}")]
    UnknownKeys(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IoError {
    pub(crate) fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        IoError::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }
}

/// Writes a file atomically: the bytes land in `<path>.tmp` first and are
/// renamed over the target, so readers never observe partial content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes a value as pretty JSON and writes it atomically.
pub fn write_json_atomic<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| IoError::Format(format!("json encoding: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Writes an RGB image (row-major, interleaved, values in `[0, 1]`) as an
/// 8-bit PNG.
pub fn write_png_rgb(path: &Path, pixels: &[f64], width: usize, height: usize) -> Result<(), IoError> {
    assert_eq!(pixels.len(), width * height * 3, "pixel count");
    let buf: Vec<u8> = pixels
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, buf)
        .expect("buffer matches dimensions");
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| IoError::Format(format!("png encoding: {e}")))?;
    write_atomic(path, &bytes)
}

/// Reads an 8-bit RGB PNG into row-major interleaved `[0, 1]` floats.
pub fn read_png_rgb(path: &Path) -> Result<(Vec<f64>, usize, usize), IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|source| IoError::CorruptImage {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok((pixels, w, h))
}

/// Writes a depth map (row-major, scene units) as a 16-bit grayscale PNG in
/// millimeters, for quick visual inspection. Values clamp to the u16 range.
pub fn write_png_depth16(
    path: &Path,
    depth: &[f64],
    width: usize,
    height: usize,
) -> Result<(), IoError> {
    assert_eq!(depth.len(), width * height, "depth count");
    let buf: Vec<u16> = depth
        .iter()
        .map(|&d| (d * 1000.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        width as u32,
        height as u32,
        buf,
    )
    .expect("buffer matches dimensions");
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| IoError::Format(format!("png encoding: {e}")))?;
    write_atomic(path, &bytes)
}

/// Writes `fx fy cx cy width height` on one line.
pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<(), IoError> {
    let line = format!(
        "{} {} {} {} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    );
    write_atomic(path, line.as_bytes())
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(IoError::parse(
            path,
            1,
            format!("expected 6 fields (fx fy cx cy width height), got {}", fields.len()),
        ));
    }
    let num = |i: usize| -> Result<f64, IoError> {
        fields[i]
            .parse::<f64>()
            .map_err(|_| IoError::parse(path, 1, format!("bad number {:?}", fields[i])))
    };
    Ok(Intrinsics {
        fx: num(0)?,
        fy: num(1)?,
        cx: num(2)?,
        cy: num(3)?,
        width: num(4)? as usize,
        height: num(5)? as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_rgb_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        // Values already on the 8-bit grid survive the round trip exactly.
        let pixels: Vec<f64> = (0..2 * 3 * 3).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
        write_png_rgb(&path, &pixels, 3, 2).unwrap();
        let (back, w, h) = read_png_rgb(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, pixels);
    }

    #[test]
    fn intrinsics_round_trip_and_field_count_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intrinsics.txt");
        let k = Intrinsics {
            fx: 48.0,
            fy: 48.5,
            cx: 24.0,
            cy: 23.5,
            width: 48,
            height: 48,
        };
        write_intrinsics(&path, &k).unwrap();
        let back = read_intrinsics(&path).unwrap();
        assert_eq!(back.fx, k.fx);
        assert_eq!(back.fy, k.fy);
        assert_eq!(back.cx, k.cx);
        assert_eq!(back.cy, k.cy);
        assert_eq!(back.width, k.width);
        assert_eq!(back.height, k.height);

        std::fs::write(&path, "1 2 3 4 5").unwrap();
        let err = read_intrinsics(&path).unwrap_err();
        assert!(err.to_string().contains("intrinsics.txt"));
        assert!(err.to_string().contains("5"));
    }

    #[test]
    fn missing_file_is_reported_as_such() {
        let err = read_png_rgb(Path::new("/nonexistent/img.png")).unwrap_err();
        assert!(matches!(err, IoError::MissingFile(_)));
    }
}
