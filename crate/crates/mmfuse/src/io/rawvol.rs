//! Documented raw container for HU volumes and binary masks.
//!
//! Volume layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic  b"MMFVOL1\0"
//! offset 8   u32    depth   (axial axis, first array dimension)
//! offset 12  u32    height
//! offset 16  u32    width
//! offset 20  f32[]  depth*height*width voxels, z-major (z, y, x)
//! ```
//!
//! Masks use magic `b"MMFMSK1\0"` and one `u8` per voxel, values 0 or 1.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::Array3;

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 8] = b"MMFVOL1\0";
pub const MASK_MAGIC: &[u8; 8] = b"MMFMSK1\0";

/// Hard cap on voxel count so corrupt headers cannot drive allocations.
const MAX_VOXELS: u64 = 1 << 30;

fn parse_dims(bytes: &[u8], magic: &[u8; 8], what: &str) -> Result<(usize, usize, usize)> {
    if bytes.len() < 20 {
        return Err(Error::data(format!("{what}: truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != magic {
        return Err(Error::data(format!("{what}: bad magic")));
    }
    let depth = LittleEndian::read_u32(&bytes[8..12]) as u64;
    let height = LittleEndian::read_u32(&bytes[12..16]) as u64;
    let width = LittleEndian::read_u32(&bytes[16..20]) as u64;
    if depth == 0 || height == 0 || width == 0 {
        return Err(Error::data(format!("{what}: zero dimension {depth}x{height}x{width}")));
    }
    let voxels = depth
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .filter(|&v| v <= MAX_VOXELS)
        .ok_or_else(|| Error::data(format!("{what}: implausible dimensions {depth}x{height}x{width}")))?;
    let _ = voxels;
    Ok((depth as usize, height as usize, width as usize))
}

/// Parse a raw volume from bytes. Voxels must be finite.
pub fn parse_volume(bytes: &[u8]) -> Result<Array3<f32>> {
    let (d, h, w) = parse_dims(bytes, VOLUME_MAGIC, "raw volume")?;
    let n = d * h * w;
    let body = &bytes[20..];
    if body.len() != n * 4 {
        return Err(Error::data(format!(
            "raw volume: expected {} voxel bytes, found {}",
            n * 4,
            body.len()
        )));
    }
    let mut voxels = vec![0f32; n];
    LittleEndian::read_f32_into(body, &mut voxels);
    if voxels.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("raw volume: non-finite voxel value".to_string()));
    }
    Array3::from_shape_vec((d, h, w), voxels).map_err(|e| Error::data(format!("raw volume: {e}")))
}

pub fn serialize_volume(volume: &Array3<f32>) -> Vec<u8> {
    let (d, h, w) = volume.dim();
    let mut out = Vec::with_capacity(20 + d * h * w * 4);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in volume.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse a raw binary mask; voxel values must be 0 or 1.
pub fn parse_mask(bytes: &[u8]) -> Result<Array3<u8>> {
    let (d, h, w) = parse_dims(bytes, MASK_MAGIC, "raw mask")?;
    let n = d * h * w;
    let body = &bytes[20..];
    if body.len() != n {
        return Err(Error::data(format!("raw mask: expected {n} voxel bytes, found {}", body.len())));
    }
    if body.iter().any(|&v| v > 1) {
        return Err(Error::data("raw mask: voxel value outside {0,1}".to_string()));
    }
    Array3::from_shape_vec((d, h, w), body.to_vec()).map_err(|e| Error::data(format!("raw mask: {e}")))
}

pub fn serialize_mask(mask: &Array3<u8>) -> Vec<u8> {
    let (d, h, w) = mask.dim();
    let mut out = Vec::with_capacity(20 + d * h * w);
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend(mask.iter().copied());
    out
}

pub fn write_volume(path: &Path, volume: &Array3<f32>) -> Result<()> {
    std::fs::write(path, serialize_volume(volume)).map_err(|e| Error::io(path, e))
}

pub fn write_mask(path: &Path, mask: &Array3<u8>) -> Result<()> {
    std::fs::write(path, serialize_mask(mask)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip() {
        let volume = Array3::from_shape_fn((2, 3, 4), |(z, y, x)| (z * 12 + y * 4 + x) as f32 - 6.0);
        let bytes = serialize_volume(&volume);
        assert_eq!(parse_volume(&bytes).unwrap(), volume);
    }

    #[test]
    fn mask_round_trip_and_value_check() {
        let mask = Array3::from_shape_fn((2, 2, 2), |(z, _, x)| u8::from(z == x));
        let bytes = serialize_mask(&mask);
        assert_eq!(parse_mask(&bytes).unwrap(), mask);
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() = 2;
        assert!(parse_mask(&bad).is_err());
    }

    #[test]
    fn rejects_corrupt_headers() {
        assert!(parse_volume(b"short").is_err());
        assert!(parse_volume(b"WRONGMAG\x01\0\0\0\x01\0\0\0\x01\0\0\0").is_err());
        // Oversized dims must fail before any allocation.
        let mut huge = Vec::from(&VOLUME_MAGIC[..]);
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(parse_volume(&huge).is_err());
        // Truncated body.
        let volume = Array3::<f32>::zeros((1, 2, 2));
        let mut bytes = serialize_volume(&volume);
        bytes.pop();
        assert!(parse_volume(&bytes).is_err());
    }

    #[test]
    fn rejects_non_finite_voxels() {
        let mut volume = Array3::<f32>::zeros((1, 1, 2));
        volume[(0, 0, 1)] = f32::NAN;
        assert!(parse_volume(&serialize_volume(&volume)).is_err());
    }
}
