//! Pathology preprocessing: non-overlapping tiling of a slide raster at 5x
//! magnification into 224x224 patches, background filtering, persistence.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Patch edge length; matches the CT input size.
pub const TILE_SIZE: usize = 224;
/// Patches whose joint RGB mean exceeds this are background.
pub const BACKGROUND_MEAN_THRESHOLD: f64 = 220.0;
pub const MAGNIFICATION: &str = "5x";

/// A whole-slide raster exported at 5x: 8-bit RGB, shape `(height, width, 3)`.
#[derive(Debug, Clone)]
pub struct SlideRaster {
    pub pixels: Array3<u8>,
}

impl SlideRaster {
    pub fn new(pixels: Array3<u8>) -> Result<SlideRaster> {
        if pixels.dim().2 != 3 {
            return Err(Error::data(format!("slide must be RGB, got {} channels", pixels.dim().2)));
        }
        Ok(SlideRaster { pixels })
    }

    /// Load from PNG or TIFF.
    pub fn load(path: &Path) -> Result<SlideRaster> {
        let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.into_rgb8();
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32).0[c]
        });
        SlideRaster::new(pixels)
    }

    pub fn dimensions(&self) -> (usize, usize) {
        let (h, w, _) = self.pixels.dim();
        (h, w)
    }
}

/// One tile plus its grid origin.
#[derive(Debug, Clone)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    /// `(size, size, 3)` RGB.
    pub pixels: Array3<u8>,
}

/// Per-patient bag of kept patches.
#[derive(Debug, Clone)]
pub struct PatchBag {
    pub patient_id: String,
    pub patches: Vec<Patch>,
    pub kept_count: usize,
    pub discarded_count: usize,
}

/// Cut the raster into non-overlapping `size` x `size` tiles, row-major by
/// tile origin; right/bottom remainders are dropped. A raster smaller than
/// one tile yields an empty list.
pub fn tile(raster: &SlideRaster, size: usize) -> Vec<Patch> {
    let (h, w) = raster.dimensions();
    let rows = h / size;
    let cols = w / size;
    let mut patches = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let pixels = raster
                .pixels
                .slice(ndarray::s![row * size..(row + 1) * size, col * size..(col + 1) * size, ..])
                .to_owned();
            patches.push(Patch { row, col, pixels });
        }
    }
    patches
}

/// Joint mean over all pixels and channels.
pub fn patch_mean(patch: &Array3<u8>) -> f64 {
    let sum: u64 = patch.iter().map(|&v| u64::from(v)).sum();
    sum as f64 / patch.len() as f64
}

/// Discard a patch iff its mean is strictly greater than `threshold`
/// (a mean of exactly `threshold` is kept).
pub fn filter_background(patient_id: &str, patches: Vec<Patch>, threshold: f64) -> PatchBag {
    let total = patches.len();
    let kept: Vec<Patch> =
        patches.into_iter().filter(|p| patch_mean(&p.pixels) <= threshold).collect();
    let kept_count = kept.len();
    PatchBag {
        patient_id: patient_id.to_string(),
        patches: kept,
        kept_count,
        discarded_count: total - kept_count,
    }
}

/// Full per-patient pathology pipeline.
pub fn preprocess_slide(patient_id: &str, raster: &SlideRaster, params: &PathoParams) -> PatchBag {
    filter_background(patient_id, tile(raster, params.tile_size), params.background_threshold)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathoParams {
    pub tile_size: usize,
    pub background_threshold: f64,
}

impl Default for PathoParams {
    fn default() -> Self {
        PathoParams { tile_size: TILE_SIZE, background_threshold: BACKGROUND_MEAN_THRESHOLD }
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PathoSidecar {
    pub patient_id: String,
    pub kept: usize,
    pub discarded: usize,
    pub tile: usize,
    pub threshold: f64,
    pub magnification: String,
}

pub fn save_bag(bag: &PatchBag, dir: &Path, params: &PathoParams) -> Result<PathoSidecar> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for patch in &bag.patches {
        let size = patch.pixels.dim().0;
        let mut img = image::RgbImage::new(size as u32, size as u32);
        for y in 0..size {
            for x in 0..size {
                let px = [
                    patch.pixels[(y, x, 0)],
                    patch.pixels[(y, x, 1)],
                    patch.pixels[(y, x, 2)],
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let path = dir.join(format!("{}_{}_{}.png", bag.patient_id, patch.row, patch.col));
        img.save(&path).map_err(|e| Error::data(format!("writing {}: {e}", path.display())))?;
    }
    let sidecar = PathoSidecar {
        patient_id: bag.patient_id.clone(),
        kept: bag.kept_count,
        discarded: bag.discarded_count,
        tile: params.tile_size,
        threshold: params.background_threshold,
        magnification: MAGNIFICATION.to_string(),
    };
    let path = dir.join("sidecar.json");
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(sidecar)
}

pub fn load_bag(dir: &Path) -> Result<PatchBag> {
    let sidecar_path = dir.join("sidecar.json");
    let sidecar: PathoSidecar = serde_json::from_slice(
        &std::fs::read(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?,
    )
    .map_err(|e| Error::format(&sidecar_path, e.to_string()))?;
    let prefix = format!("{}_", sidecar.patient_id);
    let mut entries: Vec<(usize, usize, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(rest) = name.strip_prefix(&prefix).and_then(|s| s.strip_suffix(".png")) {
            let mut parts = rest.rsplitn(2, '_');
            let col = parts.next().and_then(|s| s.parse::<usize>().ok());
            let row = parts.next().and_then(|s| s.parse::<usize>().ok());
            if let (Some(row), Some(col)) = (row, col) {
                entries.push((row, col, entry.path()));
            }
        }
    }
    entries.sort();
    if entries.len() != sidecar.kept {
        return Err(Error::data(format!(
            "bag {}: sidecar says {} patches, found {}",
            sidecar.patient_id,
            sidecar.kept,
            entries.len()
        )));
    }
    let mut patches = Vec::with_capacity(entries.len());
    for (row, col, path) in entries {
        let img = image::open(&path).map_err(|e| Error::format(&path, e.to_string()))?.into_rgb8();
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32).0[c]
        });
        patches.push(Patch { row, col, pixels });
    }
    Ok(PatchBag {
        patient_id: sidecar.patient_id,
        patches,
        kept_count: sidecar.kept,
        discarded_count: sidecar.discarded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster_of(h: usize, w: usize, value: u8) -> SlideRaster {
        SlideRaster::new(Array3::from_elem((h, w, 3), value)).unwrap()
    }

    #[test]
    fn tiling_counts() {
        assert_eq!(tile(&raster_of(448, 448, 10), TILE_SIZE).len(), 4);
        assert_eq!(tile(&raster_of(450, 450, 10), TILE_SIZE).len(), 4);
        assert_eq!(tile(&raster_of(224, 224, 10), TILE_SIZE).len(), 1);
        assert_eq!(tile(&raster_of(223, 448, 10), TILE_SIZE).len(), 0);
    }

    #[test]
    fn identity_tile_equals_input() {
        let raster = SlideRaster::new(Array3::from_shape_fn((224, 224, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c * 11) % 251) as u8
        }))
        .unwrap();
        let patches = tile(&raster, TILE_SIZE);
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].pixels, raster.pixels);
        assert_eq!((patches[0].row, patches[0].col), (0, 0));
    }

    #[test]
    fn tiles_cover_cropped_region_exactly() {
        let raster = SlideRaster::new(Array3::from_shape_fn((13, 9, 3), |(y, x, _)| {
            (y * 16 + x) as u8
        }))
        .unwrap();
        let size = 4;
        let patches = tile(&raster, size);
        assert_eq!(patches.len(), 3 * 2);
        // Row-major order by origin, no overlaps, exact coverage of 12x8.
        let mut covered = ndarray::Array2::<u8>::zeros((13, 9));
        for (k, p) in patches.iter().enumerate() {
            assert_eq!((p.row, p.col), (k / 2, k % 2));
            for dy in 0..size {
                for dx in 0..size {
                    let (y, x) = (p.row * size + dy, p.col * size + dx);
                    assert_eq!(covered[(y, x)], 0);
                    covered[(y, x)] = 1;
                    assert_eq!(p.pixels[(dy, dx, 0)], raster.pixels[(y, x, 0)]);
                }
            }
        }
        assert_eq!(covered.iter().map(|&v| u32::from(v)).sum::<u32>(), 12 * 8);
    }

    #[test]
    fn background_threshold_is_strict() {
        let white = Patch { row: 0, col: 0, pixels: Array3::from_elem((8, 8, 3), 255) };
        let black = Patch { row: 0, col: 1, pixels: Array3::from_elem((8, 8, 3), 0) };
        let at_threshold = Patch { row: 1, col: 0, pixels: Array3::from_elem((8, 8, 3), 220) };
        let bag = filter_background("p", vec![white, black, at_threshold], 220.0);
        assert_eq!(bag.kept_count, 2);
        assert_eq!(bag.discarded_count, 1);
        let kept: Vec<(usize, usize)> = bag.patches.iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(kept, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn background_filter_is_permutation_equivariant() {
        let patches: Vec<Patch> = (0..6)
            .map(|i| Patch {
                row: i / 3,
                col: i % 3,
                pixels: Array3::from_elem((4, 4, 3), (i * 50) as u8),
            })
            .collect();
        let mut reversed: Vec<Patch> = patches.clone();
        reversed.reverse();
        let a: Vec<(usize, usize)> = filter_background("p", patches, 220.0)
            .patches
            .iter()
            .map(|p| (p.row, p.col))
            .collect();
        let mut b: Vec<(usize, usize)> = filter_background("p", reversed, 220.0)
            .patches
            .iter()
            .map(|p| (p.row, p.col))
            .collect();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn bag_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let raster = SlideRaster::new(Array3::from_shape_fn((8, 12, 3), |(y, x, c)| {
            ((y * 31 + x * 7 + c * 13) % 200) as u8
        }))
        .unwrap();
        let params = PathoParams { tile_size: 4, background_threshold: 220.0 };
        let bag = preprocess_slide("p03", &raster, &params);
        assert_eq!(bag.kept_count, 6);
        let sidecar = save_bag(&bag, dir.path(), &params).unwrap();
        assert_eq!(sidecar.magnification, "5x");
        let loaded = load_bag(dir.path()).unwrap();
        assert_eq!(loaded.kept_count, bag.kept_count);
        for (a, b) in bag.patches.iter().zip(loaded.patches.iter()) {
            assert_eq!((a.row, a.col), (b.row, b.col));
            assert_eq!(a.pixels, b.pixels);
        }
    }
}
