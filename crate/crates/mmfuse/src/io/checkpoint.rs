//! Single-file checkpoint archive: JSON header plus named parameter blobs.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic      b"MMCKPT1\0"
//! u32        header length
//! bytes      header JSON: {variant, task, epoch, seed, train_config_hash}
//! u32        parameter count
//! repeated:  u32 name length, name (utf-8),
//!            u32 ndim, u32 dims[ndim],
//!            f32[] values (row-major)
//! ```
//!
//! Parameters are stored sorted by name, so identical parameter maps
//! serialize to identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MMCKPT1\0";

const MAX_NAME_LEN: u32 = 4096;
const MAX_NDIM: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub variant: String,
    pub task: String,
    pub epoch: usize,
    pub seed: u64,
    pub train_config_hash: String,
}

pub fn serialize(header: &CheckpointHeader, params: &BTreeMap<String, ArrayD<f32>>) -> Vec<u8> {
    let header_json = serde_json::to_vec(header).expect("checkpoint header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::data(format!("checkpoint: truncated at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }
}

pub fn parse(bytes: &[u8]) -> Result<(CheckpointHeader, BTreeMap<String, ArrayD<f32>>)> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::data("checkpoint: bad magic".to_string()));
    }
    let header_len = cur.u32()?;
    if header_len > 1 << 20 {
        return Err(Error::data("checkpoint: oversized header".to_string()));
    }
    let header: CheckpointHeader = serde_json::from_slice(cur.take(header_len as usize)?)
        .map_err(|e| Error::data(format!("checkpoint header json: {e}")))?;

    let count = cur.u32()?;
    let mut params = BTreeMap::new();
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let name_len = cur.u32()?;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(Error::data(format!("checkpoint: parameter name length {name_len}")));
        }
        let name = std::str::from_utf8(cur.take(name_len as usize)?)
            .map_err(|_| Error::data("checkpoint: parameter name is not utf-8".to_string()))?
            .to_string();
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(Error::data(format!("checkpoint: parameter `{name}` out of order")));
            }
        }
        let ndim = cur.u32()?;
        if ndim > MAX_NDIM {
            return Err(Error::data(format!("checkpoint: {ndim} dimensions on `{name}`")));
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        let mut elements: u64 = 1;
        for _ in 0..ndim {
            let d = cur.u32()?;
            elements = elements
                .checked_mul(u64::from(d))
                .filter(|&e| e <= MAX_ELEMENTS)
                .ok_or_else(|| Error::data(format!("checkpoint: implausible shape on `{name}`")))?;
            dims.push(d as usize);
        }
        let raw = cur.take(elements as usize * 4)?;
        let mut values = vec![0f32; elements as usize];
        LittleEndian::read_f32_into(raw, &mut values);
        let array = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| Error::data(format!("checkpoint: `{name}`: {e}")))?;
        prev_name = Some(name.clone());
        params.insert(name, array);
    }
    if cur.at != bytes.len() {
        return Err(Error::data(format!("checkpoint: {} trailing bytes", bytes.len() - cur.at)));
    }
    Ok((header, params))
}

pub fn save(
    path: &Path,
    header: &CheckpointHeader,
    params: &BTreeMap<String, ArrayD<f32>>,
) -> Result<()> {
    std::fs::write(path, serialize(header, params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, BTreeMap<String, ArrayD<f32>>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
