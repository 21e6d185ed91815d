//! Flat binary grid files: three little-endian `i32` values (width, height,
//! channels) followed by row-major little-endian `f32` values.

use std::path::Path;

use crate::error::{Error, Result};

const HEADER_LEN: usize = 12;

pub fn encode(width: usize, height: usize, channels: usize, data: &[f64]) -> Vec<u8> {
    debug_assert_eq!(data.len(), width * height * channels);
    let mut buf = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    for dim in [width, height, channels] {
        buf.extend_from_slice(&(dim as i32).to_le_bytes());
    }
    for &x in data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    buf
}

/// Returns `(width, height, channels, data)`.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bad = |message: String| Error::Format {
        what: "grid file",
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let raw = i32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
        *d = usize::try_from(raw).map_err(|_| bad(format!("negative dimension {raw}")))?;
    }
    let [w, h, c] = dims;
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(bad(format!(
            "expected {expected} payload bytes for {w}x{h}x{c}, found {}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    Ok((w, h, c, data))
}

pub fn read(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    std::fs::write(path, encode(width, height, channels, data)).map_err(|e| Error::io(path, e))
}
