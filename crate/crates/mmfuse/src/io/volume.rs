//! Format dispatch for volumes and masks: raw container or NIfTI-1,
//! decided by content.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::io::{nifti, rawvol};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Read an HU volume from `.rvol`, `.nii`, or `.nii.gz`.
pub fn read_volume(path: &Path) -> Result<Array3<f32>> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(rawvol::VOLUME_MAGIC) {
        rawvol::parse_volume(&bytes)
    } else {
        nifti::parse_volume(&bytes)
    }
    .map_err(|e| Error::format(path, e.to_string()))
}

/// Read a binary mask from `.rmask`, `.nii`, or `.nii.gz`.
pub fn read_mask(path: &Path) -> Result<Array3<u8>> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(rawvol::MASK_MAGIC) {
        rawvol::parse_mask(&bytes)
    } else {
        nifti::parse_mask(&bytes)
    }
    .map_err(|e| Error::format(path, e.to_string()))
}
