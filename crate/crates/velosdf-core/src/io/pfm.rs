//! Grayscale PFM depth maps: `Pf` header, little-endian f32 samples, rows
//! stored bottom-up (the format's convention), exposed to callers top-down.

use super::{write_atomic, IoError};
use std::path::Path;

/// Writes a row-major (top-down) depth map as little-endian grayscale PFM.
pub fn write_pfm(path: &Path, data: &[f64], width: usize, height: usize) -> Result<(), IoError> {
    assert_eq!(data.len(), width * height, "sample count");
    let mut bytes = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    bytes.reserve(width * height * 4);
    for row in (0..height).rev() {
        for col in 0..width {
            let v = data[row * width + col] as f32;
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

/// Reads a grayscale little-endian PFM back into top-down row-major order.
pub fn read_pfm(path: &Path) -> Result<(Vec<f64>, usize, usize), IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;

    // Header: three whitespace-terminated tokens (magic, "w h", scale).
    let mut pos = 0;
    let mut token = |line: usize| -> Result<String, IoError> {
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == start || pos >= bytes.len() {
            return Err(IoError::parse(path, line, "truncated header"));
        }
        let s = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        pos += 1; // consume the single whitespace terminator
        Ok(s)
    };

    let magic = token(1)?;
    if magic != "Pf" {
        return Err(IoError::parse(
            path,
            1,
            format!("expected grayscale PFM magic \"Pf\", got {magic:?}"),
        ));
    }
    let width: usize = token(2)?
        .parse()
        .map_err(|_| IoError::parse(path, 2, "bad width"))?;
    let height: usize = token(2)?
        .parse()
        .map_err(|_| IoError::parse(path, 2, "bad height"))?;
    let scale: f64 = token(3)?
        .parse()
        .map_err(|_| IoError::parse(path, 3, "bad scale"))?;
    if scale >= 0.0 {
        return Err(IoError::parse(path, 3, "big-endian PFM not supported"));
    }

    let expected = width * height * 4;
    if bytes.len() - pos != expected {
        return Err(IoError::Format(format!(
            "{}: payload is {} bytes, expected {expected}",
            path.display(),
            bytes.len() - pos
        )));
    }
    let mut data = vec![0.0; width * height];
    for row in 0..height {
        // PFM stores the bottom row first.
        let out_row = height - 1 - row;
        for col in 0..width {
            let off = pos + (row * width + col) * 4;
            let v = f32::from_le_bytes([
                bytes[off],
                bytes[off + 1],
                bytes[off + 2],
                bytes[off + 3],
            ]);
            data[out_row * width + col] = v as f64;
        }
    }
    Ok((data, width, height))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values_and_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let (w, h) = (4, 3);
        let data: Vec<f64> = (0..w * h).map(|i| (i as f64 * 0.37 + 0.5) as f32 as f64).collect();
        write_pfm(&path, &data, w, h).unwrap();
        let (back, bw, bh) = read_pfm(&path).unwrap();
        assert_eq!((bw, bh), (w, h));
        assert_eq!(back, data);

        // The first stored sample is the bottom-left pixel.
        let bytes = std::fs::read(&path).unwrap();
        let header_len = format!("Pf\n{w} {h}\n-1.0\n").len();
        let first = f32::from_le_bytes([
            bytes[header_len],
            bytes[header_len + 1],
            bytes[header_len + 2],
            bytes[header_len + 3],
        ]);
        assert_eq!(first as f64, data[(h - 1) * w]);
    }

    #[test]
    fn rejects_color_and_big_endian_variants() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pfm");
        std::fs::write(&path, b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(read_pfm(&path).is_err());
        std::fs::write(&path, b"Pf\n1 1\n1.0\n\0\0\0\0").unwrap();
        assert!(read_pfm(&path).is_err());
    }
}
