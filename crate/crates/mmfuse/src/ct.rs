//! CT preprocessing: Hounsfield windowing, per-slice liver masking,
//! low-content slice filtering, and persistence of slice bags.
//!
//! The axial axis is the first array dimension of a volume. Windowing runs
//! before masking, so zeros introduced by the mask are unambiguous; slices
//! are filtered at native resolution and resized afterwards.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::volume;

/// Default Hounsfield window.
pub const WINDOW_LO: f32 = -200.0;
pub const WINDOW_HI: f32 = 250.0;
/// Slices whose 8-bit-scale mean falls below this are discarded.
pub const SLICE_MEAN_THRESHOLD: f32 = 5.0;
/// Model input edge length shared with the pathology pipeline.
pub const INPUT_SIZE: usize = 224;

/// One 3D CT volume in Hounsfield units, shape `(depth, height, width)`.
#[derive(Debug, Clone)]
pub struct CtVolume {
    pub voxels: Array3<f32>,
}

impl CtVolume {
    pub fn new(voxels: Array3<f32>) -> Result<CtVolume> {
        if voxels.dim().0 < 1 {
            return Err(Error::data("volume depth must be at least 1".to_string()));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("volume contains non-finite HU values".to_string()));
        }
        Ok(CtVolume { voxels })
    }

    pub fn load(path: &Path) -> Result<CtVolume> {
        CtVolume::new(volume::read_volume(path)?)
    }

    pub fn depth(&self) -> usize {
        self.voxels.dim().0
    }
}

/// Clamp-and-rescale HU values into `[0,1]` over `[lo, hi]`.
pub fn hu_window(volume: &CtVolume, lo: f32, hi: f32) -> Result<Array3<f32>> {
    if lo >= hi {
        return Err(Error::config(format!("window lo {lo} must be below hi {hi}")));
    }
    Ok(volume.voxels.mapv(|v| window_value(v, lo, hi)))
}

#[inline]
pub fn window_value(v: f32, lo: f32, hi: f32) -> f32 {
    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Split a windowed volume into axial slices, order preserved.
pub fn extract_slices(windowed: &Array3<f32>) -> Vec<Array2<f32>> {
    windowed.outer_iter().map(|s| s.to_owned()).collect()
}

/// Elementwise product of a slice with a binary mask.
pub fn apply_mask(slice: &Array2<f32>, mask: &Array2<u8>) -> Result<Array2<f32>> {
    if slice.dim() != mask.dim() {
        return Err(Error::data(format!(
            "mask shape {:?} does not match slice shape {:?}",
            mask.dim(),
            slice.dim()
        )));
    }
    Ok(Array2::from_shape_fn(slice.dim(), |ix| slice[ix] * f32::from(mask[ix])))
}

/// Dice overlap of two binary masks; 1.0 when both are empty.
pub fn dice(a: &Array2<u8>, b: &Array2<u8>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::data(format!(
            "dice: shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    let mut inter = 0u64;
    let mut total = 0u64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x > 1 || y > 1 {
            return Err(Error::data("dice: mask values must be 0 or 1".to_string()));
        }
        inter += u64::from(x & y);
        total += u64::from(x) + u64::from(y);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Mask providers
// ---------------------------------------------------------------------------

/// Supplies a binary liver mask per axial slice.
pub trait MaskProvider {
    fn mask(&self, slice_index: usize, windowed_slice: &Array2<f32>) -> Result<Array2<u8>>;
}

/// Precomputed per-volume mask loaded from disk.
pub struct FileMaskProvider {
    mask: Array3<u8>,
}

impl FileMaskProvider {
    pub fn load(path: &Path, expected_shape: (usize, usize, usize)) -> Result<FileMaskProvider> {
        let mask = volume::read_mask(path)?;
        if mask.dim() != expected_shape {
            return Err(Error::data(format!(
                "mask shape {:?} does not match volume shape {expected_shape:?}",
                mask.dim()
            )));
        }
        Ok(FileMaskProvider { mask })
    }

    pub fn from_array(mask: Array3<u8>) -> FileMaskProvider {
        FileMaskProvider { mask }
    }
}

impl MaskProvider for FileMaskProvider {
    fn mask(&self, slice_index: usize, windowed_slice: &Array2<f32>) -> Result<Array2<u8>> {
        if slice_index >= self.mask.dim().0 {
            return Err(Error::data(format!("mask has no slice {slice_index}")));
        }
        let mask = self.mask.index_axis(ndarray::Axis(0), slice_index).to_owned();
        if mask.dim() != windowed_slice.dim() {
            return Err(Error::data("mask slice shape mismatch".to_string()));
        }
        Ok(mask)
    }
}

/// Fallback for phantoms: threshold at 0.05 normalized intensity, then keep
/// the largest 4-connected component. Real data should supply mask files.
pub struct ThresholdMaskProvider {
    pub threshold: f32,
}

impl Default for ThresholdMaskProvider {
    fn default() -> Self {
        ThresholdMaskProvider { threshold: 0.05 }
    }
}

impl MaskProvider for ThresholdMaskProvider {
    fn mask(&self, _slice_index: usize, windowed_slice: &Array2<f32>) -> Result<Array2<u8>> {
        let fg = windowed_slice.mapv(|v| u8::from(v >= self.threshold));
        Ok(largest_component(&fg))
    }
}

/// Largest 4-connected component of a binary image; empty input stays empty.
/// Ties go to the component encountered first in row-major order.
pub fn largest_component(fg: &Array2<u8>) -> Array2<u8> {
    let (h, w) = fg.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes: Vec<u32> = vec![0]; // label 0 is background
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if fg[(sy, sx)] == 0 || labels[(sy, sx)] != 0 {
                continue;
            }
            let label = sizes.len() as u32;
            sizes.push(0);
            stack.push((sy, sx));
            labels[(sy, sx)] = label;
            while let Some((y, x)) = stack.pop() {
                sizes[label as usize] += 1;
                let mut visit = |ny: usize, nx: usize| {
                    if fg[(ny, nx)] != 0 && labels[(ny, nx)] == 0 {
                        labels[(ny, nx)] = label;
                        stack.push((ny, nx));
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < h {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < w {
                    visit(y, x + 1);
                }
            }
        }
    }
    let best = sizes
        .iter()
        .enumerate()
        .skip(1)
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(label, _)| label as u32);
    match best {
        Some(label) => labels.mapv(|l| u8::from(l == label)),
        None => Array2::zeros((h, w)),
    }
}

// ---------------------------------------------------------------------------
// Slice filtering and bags
// ---------------------------------------------------------------------------

/// Per-patient bag of kept CT slices, values in `[0,1]`, resized to the
/// shared model input size. `index` keeps each slice's original axial index.
#[derive(Debug, Clone)]
pub struct SliceBag {
    pub patient_id: String,
    /// `(original axial index, slice)` pairs in axial order.
    pub slices: Vec<(usize, Array2<f32>)>,
    pub kept_count: usize,
    pub discarded_count: usize,
}

/// Mean on the conventional 8-bit display scale.
pub fn mean_8bit(slice: &Array2<f32>) -> f32 {
    let n = slice.len() as f64;
    let sum: f64 = slice.iter().map(|&v| f64::from(v)).sum();
    (sum / n * 255.0) as f32
}

/// Keep slices whose 8-bit-scale mean is at least `threshold`; a mean below
/// the threshold means the slice holds little or no liver and is discarded.
/// The keep decision depends only on the slice itself.
pub fn filter_slices(
    patient_id: &str,
    masked: Vec<(usize, Array2<f32>)>,
    threshold: f32,
    out_size: usize,
) -> SliceBag {
    let total = masked.len();
    let mut kept = Vec::new();
    for (index, slice) in masked {
        if mean_8bit(&slice) >= threshold {
            kept.push((index, resize_bilinear(&slice, out_size, out_size)));
        }
    }
    let kept_count = kept.len();
    SliceBag {
        patient_id: patient_id.to_string(),
        slices: kept,
        kept_count,
        discarded_count: total - kept_count,
    }
}

/// Full per-patient CT pipeline: window, mask, filter, resize.
pub fn preprocess_volume(
    patient_id: &str,
    volume: &CtVolume,
    masks: &dyn MaskProvider,
    params: &CtParams,
) -> Result<SliceBag> {
    let windowed = hu_window(volume, params.window_lo, params.window_hi)?;
    let slices = extract_slices(&windowed);
    let mut masked = Vec::with_capacity(slices.len());
    for (index, slice) in slices.iter().enumerate() {
        let mask = masks.mask(index, slice)?;
        masked.push((index, apply_mask(slice, &mask)?));
    }
    Ok(filter_slices(patient_id, masked, params.mean_threshold, params.out_size))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtParams {
    pub window_lo: f32,
    pub window_hi: f32,
    pub mean_threshold: f32,
    pub out_size: usize,
}

impl Default for CtParams {
    fn default() -> Self {
        CtParams {
            window_lo: WINDOW_LO,
            window_hi: WINDOW_HI,
            mean_threshold: SLICE_MEAN_THRESHOLD,
            out_size: INPUT_SIZE,
        }
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let fy = ((i as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let fx = ((j as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f32;
        let dx = fx - x0 as f32;
        let top = src[(y0, x0)] * (1.0 - dx) + src[(y0, x1)] * dx;
        let bottom = src[(y1, x0)] * (1.0 - dx) + src[(y1, x1)] * dx;
        top * (1.0 - dy) + bottom * dy
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Sidecar written next to a persisted slice bag.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CtSidecar {
    pub patient_id: String,
    pub kept: usize,
    pub discarded: usize,
    pub threshold: f32,
    pub window: [f32; 2],
}

/// Write the bag as 8-bit PNG slices plus a JSON sidecar; returns the sidecar.
pub fn save_bag(bag: &SliceBag, dir: &Path, params: &CtParams) -> Result<CtSidecar> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (index, slice) in &bag.slices {
        let (h, w) = slice.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for ((y, x), &v) in slice.indexed_iter() {
            img.put_pixel(x as u32, y as u32, image::Luma([quantize(v)]));
        }
        let path = dir.join(format!("slice_{index:04}.png"));
        img.save(&path).map_err(|e| Error::data(format!("writing {}: {e}", path.display())))?;
    }
    let sidecar = CtSidecar {
        patient_id: bag.patient_id.clone(),
        kept: bag.kept_count,
        discarded: bag.discarded_count,
        threshold: params.mean_threshold,
        window: [params.window_lo, params.window_hi],
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    let path = dir.join("sidecar.json");
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(sidecar)
}

/// Load a persisted bag; slice order follows the original axial indices.
pub fn load_bag(dir: &Path) -> Result<SliceBag> {
    let sidecar_path = dir.join("sidecar.json");
    let sidecar: CtSidecar = serde_json::from_slice(
        &std::fs::read(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?,
    )
    .map_err(|e| Error::format(&sidecar_path, e.to_string()))?;
    let mut entries: Vec<(usize, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(index) = name.strip_prefix("slice_").and_then(|s| s.strip_suffix(".png")) {
            let index: usize = index
                .parse()
                .map_err(|_| Error::format(entry.path(), "bad slice index".to_string()))?;
            entries.push((index, entry.path()));
        }
    }
    entries.sort();
    if entries.len() != sidecar.kept {
        return Err(Error::data(format!(
            "bag {}: sidecar says {} slices, found {}",
            sidecar.patient_id,
            sidecar.kept,
            entries.len()
        )));
    }
    let mut slices = Vec::with_capacity(entries.len());
    for (index, path) in entries {
        let img = image::open(&path)
            .map_err(|e| Error::format(&path, e.to_string()))?
            .into_luma8();
        let (w, h) = img.dimensions();
        let slice = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            f32::from(img.get_pixel(x as u32, y as u32).0[0]) / 255.0
        });
        slices.push((index, slice));
    }
    Ok(SliceBag {
        patient_id: sidecar.patient_id,
        slices,
        kept_count: sidecar.kept,
        discarded_count: sidecar.discarded,
    })
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
