//! Minimal NIfTI-1 reader and writer.
//!
//! Covers the slice of the format this project needs: single-file `.nii`
//! (magic `n+1`), 3D images (trailing dimensions of 1 are accepted),
//! datatypes u8 / i16 / i32 / f32 / f64, both endiannesses, and
//! `scl_slope`/`scl_inter` rescaling. Gzip-compressed input is detected by
//! content, not extension. Volumes come out as `(depth, height, width)`
//! with the file's fastest-varying axis as width.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use ndarray::Array3;

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const MIN_DATA_OFFSET: usize = 352;
const MAX_VOXELS: u64 = 1 << 30;
const MAX_GZ_BYTES: u64 = 1 << 30;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Decompress if the buffer is gzip, otherwise pass through.
pub fn maybe_gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(bytes)
            .take(MAX_GZ_BYTES)
            .read_to_end(&mut out)
            .map_err(|e| Error::data(format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes.to_vec())
    }
}

struct RawHeader<'a> {
    bytes: &'a [u8],
    swapped: bool,
}

impl<'a> RawHeader<'a> {
    fn i16_at(&self, offset: usize) -> i16 {
        let b = &self.bytes[offset..offset + 2];
        if self.swapped { BigEndian::read_i16(b) } else { LittleEndian::read_i16(b) }
    }

    fn f32_at(&self, offset: usize) -> f32 {
        let b = &self.bytes[offset..offset + 4];
        if self.swapped { BigEndian::read_f32(b) } else { LittleEndian::read_f32(b) }
    }
}

/// Parse a (possibly gzipped) NIfTI-1 volume into HU-valued voxels.
pub fn parse_volume(raw: &[u8]) -> Result<Array3<f32>> {
    let bytes = maybe_gunzip(raw)?;
    if bytes.len() < MIN_DATA_OFFSET {
        return Err(Error::data(format!("nifti: file too short ({} bytes)", bytes.len())));
    }
    // Endianness is discovered from sizeof_hdr, which must decode to 348.
    let swapped = match LittleEndian::read_i32(&bytes[0..4]) {
        348 => false,
        _ if BigEndian::read_i32(&bytes[0..4]) == 348 => true,
        other => {
            return Err(Error::data(format!("nifti: sizeof_hdr {other}, expected 348")));
        }
    };
    let header = RawHeader { bytes: &bytes[..HEADER_SIZE], swapped };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::data("nifti: not a single-file n+1 image".to_string()));
    }

    let ndim = header.i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::data(format!("nifti: dim[0] = {ndim} out of range")));
    }
    let mut dims = [1i64; 7];
    for (i, dim) in dims.iter_mut().enumerate().take(ndim as usize) {
        *dim = i64::from(header.i16_at(42 + 2 * i));
        if *dim < 1 {
            return Err(Error::data(format!("nifti: dim[{}] = {dim:?}", i + 1)));
        }
    }
    if ndim < 3 || dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::data(format!(
            "nifti: expected a 3D image, got dims {:?}",
            &dims[..ndim as usize]
        )));
    }
    let (nx, ny, nz) = (dims[0] as u64, dims[1] as u64, dims[2] as u64);
    let voxels = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .filter(|&v| v <= MAX_VOXELS)
        .ok_or_else(|| Error::data(format!("nifti: implausible dims {nx}x{ny}x{nz}")))?
        as usize;

    let datatype = header.i16_at(70);
    let bytes_per = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::data(format!("nifti: unsupported datatype {other}"))),
    };
    let vox_offset = header.f32_at(108);
    if !vox_offset.is_finite() || vox_offset < 0.0 || vox_offset > bytes.len() as f32 {
        return Err(Error::data(format!("nifti: bad vox_offset {vox_offset}")));
    }
    let offset = (vox_offset as usize).max(MIN_DATA_OFFSET);
    let need = voxels
        .checked_mul(bytes_per)
        .ok_or_else(|| Error::data("nifti: data size overflow".to_string()))?;
    let data = bytes
        .get(offset..)
        .filter(|d| d.len() >= need)
        .ok_or_else(|| Error::data(format!("nifti: data truncated, need {need} bytes")))?;

    let slope = header.f32_at(112);
    let inter = header.f32_at(116);
    // NIfTI convention: slope 0 means "no rescale stored".
    let (slope, inter) = if slope == 0.0 { (1.0, 0.0) } else { (slope, inter) };

    let read_one = |i: usize| -> f32 {
        let at = i * bytes_per;
        let b = &data[at..at + bytes_per];
        match datatype {
            DT_UINT8 => f32::from(b[0]),
            DT_INT16 => {
                f32::from(if swapped { BigEndian::read_i16(b) } else { LittleEndian::read_i16(b) })
            }
            DT_INT32 => {
                (if swapped { BigEndian::read_i32(b) } else { LittleEndian::read_i32(b) }) as f32
            }
            DT_FLOAT32 => {
                if swapped { BigEndian::read_f32(b) } else { LittleEndian::read_f32(b) }
            }
            DT_FLOAT64 => {
                (if swapped { BigEndian::read_f64(b) } else { LittleEndian::read_f64(b) }) as f32
            }
            _ => unreachable!(),
        }
    };

    // File order is x fastest; our volume is (z, y, x).
    let mut out = Array3::<f32>::zeros((nz as usize, ny as usize, nx as usize));
    for z in 0..nz as usize {
        for y in 0..ny as usize {
            for x in 0..nx as usize {
                let v = read_one((z * ny as usize + y) * nx as usize + x) * slope + inter;
                if !v.is_finite() {
                    return Err(Error::data(format!("nifti: non-finite voxel at ({z},{y},{x})")));
                }
                out[(z, y, x)] = v;
            }
        }
    }
    Ok(out)
}

/// Parse a NIfTI mask; all voxels must be exactly 0 or 1.
pub fn parse_mask(raw: &[u8]) -> Result<Array3<u8>> {
    let volume = parse_volume(raw)?;
    let mut mask = Array3::<u8>::zeros(volume.dim());
    for (m, &v) in mask.iter_mut().zip(volume.iter()) {
        *m = match v {
            0.0 => 0,
            1.0 => 1,
            other => {
                return Err(Error::data(format!("nifti mask: voxel value {other} outside {{0,1}}")));
            }
        };
    }
    Ok(mask)
}

/// Serialize a `(depth, height, width)` volume as little-endian float32 n+1.
pub fn serialize_volume_f32(volume: &Array3<f32>) -> Vec<u8> {
    let (nz, ny, nx) = volume.dim();
    let mut header = vec![0u8; MIN_DATA_OFFSET];
    LittleEndian::write_i32(&mut header[0..4], 348);
    let dims: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut header[40 + 2 * i..42 + 2 * i], *d);
    }
    LittleEndian::write_i16(&mut header[70..72], DT_FLOAT32);
    LittleEndian::write_i16(&mut header[72..74], 32); // bitpix
    // pixdim: qfac plus unit voxel spacing.
    for i in 0..4 {
        LittleEndian::write_f32(&mut header[76 + 4 * i..80 + 4 * i], 1.0);
    }
    LittleEndian::write_f32(&mut header[108..112], MIN_DATA_OFFSET as f32);
    LittleEndian::write_f32(&mut header[112..116], 1.0); // scl_slope
    header[344..348].copy_from_slice(b"n+1\0");

    let mut out = header;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out.extend_from_slice(&volume[(z, y, x)].to_le_bytes());
            }
        }
    }
    out
}

pub fn write_volume_f32(path: &Path, volume: &Array3<f32>) -> Result<()> {
    std::fs::write(path, serialize_volume_f32(volume)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip() {
        let volume = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| {
            (z as f32) * 100.0 - (y as f32) * 7.0 + x as f32
        });
        let bytes = serialize_volume_f32(&volume);
        assert_eq!(parse_volume(&bytes).unwrap(), volume);
    }

    #[test]
    fn gzipped_round_trip() {
        use std::io::Write;
        let volume = Array3::from_elem((2, 2, 2), -150.0f32);
        let raw = serialize_volume_f32(&volume);
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&raw).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(parse_volume(&gz).unwrap(), volume);
    }

    #[test]
    fn int16_with_scaling() {
        // Hand-build an i16 image with slope 2, inter -100.
        let volume = Array3::from_elem((1, 1, 2), 0.0f32);
        let mut bytes = serialize_volume_f32(&volume);
        LittleEndian::write_i16(&mut bytes[70..72], DT_INT16);
        LittleEndian::write_i16(&mut bytes[72..74], 16);
        LittleEndian::write_f32(&mut bytes[112..116], 2.0);
        LittleEndian::write_f32(&mut bytes[116..120], -100.0);
        bytes.truncate(MIN_DATA_OFFSET);
        bytes.extend_from_slice(&25i16.to_le_bytes());
        bytes.extend_from_slice(&(-25i16).to_le_bytes());
        let parsed = parse_volume(&bytes).unwrap();
        assert_eq!(parsed[(0, 0, 0)], -50.0);
        assert_eq!(parsed[(0, 0, 1)], -150.0);
    }

    #[test]
    fn big_endian_is_detected() {
        // Swap every header field we read plus the payload.
        let mut bytes = vec![0u8; MIN_DATA_OFFSET + 4];
        BigEndian::write_i32(&mut bytes[0..4], 348);
        let dims: [i16; 8] = [3, 1, 1, 1, 1, 1, 1, 1];
        for (i, d) in dims.iter().enumerate() {
            BigEndian::write_i16(&mut bytes[40 + 2 * i..42 + 2 * i], *d);
        }
        BigEndian::write_i16(&mut bytes[70..72], DT_FLOAT32);
        BigEndian::write_f32(&mut bytes[108..112], MIN_DATA_OFFSET as f32);
        BigEndian::write_f32(&mut bytes[112..116], 1.0);
        bytes[344..348].copy_from_slice(b"n+1\0");
        BigEndian::write_f32(&mut bytes[MIN_DATA_OFFSET..], 42.0);
        let parsed = parse_volume(&bytes).unwrap();
        assert_eq!(parsed[(0, 0, 0)], 42.0);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(parse_volume(b"").is_err());
        assert!(parse_volume(&vec![0u8; 400]).is_err());
        let volume = Array3::<f32>::zeros((1, 1, 1));
        let mut pair = serialize_volume_f32(&volume);
        pair[344..348].copy_from_slice(b"ni1\0");
        assert!(parse_volume(&pair).is_err());
        let mut truncated = serialize_volume_f32(&Array3::<f32>::zeros((2, 2, 2)));
        truncated.truncate(truncated.len() - 1);
        assert!(parse_volume(&truncated).is_err());
    }

    #[test]
    fn mask_values_are_checked() {
        let mut mask = Array3::<f32>::zeros((1, 2, 2));
        mask[(0, 0, 1)] = 1.0;
        let parsed = parse_mask(&serialize_volume_f32(&mask)).unwrap();
        assert_eq!(parsed[(0, 0, 1)], 1);
        mask[(0, 1, 0)] = 0.5;
        assert!(parse_mask(&serialize_volume_f32(&mask)).is_err());
    }
}
