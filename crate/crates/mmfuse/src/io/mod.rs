//! On-disk formats: raw volumes and masks, a minimal NIfTI-1 subset,
//! and the checkpoint archive.
//!
//! Every parser here accepts untrusted bytes: sizes are checked before
//! allocation and all multi-byte fields are read explicitly little- or
//! big-endian, never through struct transmutes.

pub mod checkpoint;
pub mod nifti;
pub mod rawvol;
pub mod volume;
