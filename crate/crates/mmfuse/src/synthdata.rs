//! Deterministic phantom cohorts with plantable per-modality class signal.
//!
//! CT volumes hold an ellipsoidal soft-tissue "liver" (about 45 HU) over an
//! air background; each task plants spherical lesions whose HU offset lives
//! in its own band, and the lesion count scales with the combined class and
//! the planted signal strength. Slides are tissue-toned noise fields where
//! each task plants circular motifs of a task-specific color at a
//! class-scaled density; one corner tile is whitened so background
//! filtering always has work to do.
//!
//! At strength 0 every generation parameter is independent of the class, so
//! a modality can be turned into pure noise for ablation experiments. The
//! planted lesion count multiplier for class `c` of `K` at strength `s` is
//! `1 + 0.85 * s * (2c/(K-1) - 1)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ct;
use crate::data_model::{
    format_raw, LabelScheme, Modality, StudyRecord, Task, ALL_TASKS,
};
use crate::error::{Error, Result};
use crate::evaluation::binary_auc;
use crate::io::rawvol;
use crate::seed;

/// Class-to-count multiplier swing at full strength.
pub const LEVEL_SWING: f64 = 0.85;

const LIVER_HU: f32 = 45.0;
const AIR_HU: f32 = -1000.0;
/// Per-task lesion HU offsets relative to the liver base; the windowed
/// bands stay disjoint under jitter and voxel noise.
const CT_BAND_OFFSETS: [f32; 4] = [50.0, -50.0, 95.0, -95.0];
/// Per-task motif colors on the slide; pairwise max-channel distance of at
/// least 50 against each other and the tissue base.
const SLIDE_MOTIF_COLORS: [[u8; 3]; 4] = [
    [170, 40, 110], // fibrosis: collagen streak tone
    [245, 245, 245], // steatosis: vacuole white
    [60, 60, 160],  // lobular: inflammatory dot blue
    [120, 210, 225], // ballooning: pale cyan blob
];
const SLIDE_MOTIF_RADII: [usize; 4] = [3, 4, 2, 4];
const SLIDE_BASE: [u8; 3] = [205, 168, 188];

fn task_index(task: Task) -> usize {
    ALL_TASKS.iter().position(|&t| t == task).unwrap()
}

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// CT volume shape `(depth, height, width)`.
    pub vol_shape: (usize, usize, usize),
    /// Slide raster `(height, width)`.
    pub slide_shape: (usize, usize),
    /// Lesion spheres painted per task per volume at level 1.
    pub ct_base_lesions: usize,
    /// Motif stamps painted per task per slide at level 1.
    pub slide_base_motifs: usize,
}

impl Default for Geometry {
    /// Desk-scale defaults: a full 3-fold experiment runs on CPU in minutes.
    fn default() -> Self {
        Geometry {
            vol_shape: (32, 128, 128),
            slide_shape: (1120, 1120),
            ct_base_lesions: 60,
            slide_base_motifs: 550,
        }
    }
}

/// Signal strength in `[0,1]` per (modality, task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strengths {
    pub ct: BTreeMap<Task, f64>,
    pub patho: BTreeMap<Task, f64>,
}

impl Strengths {
    pub fn uniform(ct: f64, patho: f64) -> Strengths {
        Strengths {
            ct: ALL_TASKS.iter().map(|&t| (t, ct)).collect(),
            patho: ALL_TASKS.iter().map(|&t| (t, patho)).collect(),
        }
    }

    pub fn get(&self, modality: Modality, task: Task) -> f64 {
        let map = match modality {
            Modality::Ct => &self.ct,
            Modality::Patho => &self.patho,
        };
        map.get(&task).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub seed: u64,
    /// Combined-class counts per task; must sum to `n_patients`.
    pub class_counts: BTreeMap<Task, Vec<usize>>,
    pub strengths: Strengths,
    pub geometry: Geometry,
}

impl SynthSpec {
    pub fn new(n_patients: usize, seed: u64, strengths: Strengths) -> SynthSpec {
        SynthSpec {
            n_patients,
            seed,
            class_counts: default_class_counts(n_patients),
            strengths,
            geometry: Geometry::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::config("n_patients must be positive".to_string()));
        }
        for task in ALL_TASKS {
            let counts = self
                .class_counts
                .get(&task)
                .ok_or_else(|| Error::config(format!("missing class counts for {task}")))?;
            let scheme = LabelScheme::for_task(task);
            if counts.len() != scheme.num_classes {
                return Err(Error::config(format!(
                    "{task}: {} class counts for {} classes",
                    counts.len(),
                    scheme.num_classes
                )));
            }
            let total: usize = counts.iter().sum();
            if total != self.n_patients {
                return Err(Error::config(format!(
                    "{task}: class counts sum to {total}, expected {}",
                    self.n_patients
                )));
            }
            for modality in [Modality::Ct, Modality::Patho] {
                let s = self.strengths.get(modality, task);
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::config(format!(
                        "strength {s} for ({}, {task}) outside [0,1]",
                        modality.name()
                    )));
                }
            }
        }
        let (d, h, w) = self.geometry.vol_shape;
        if d < 4 || h < 16 || w < 16 {
            return Err(Error::config(format!("volume shape {d}x{h}x{w} too small")));
        }
        Ok(())
    }
}

/// Per-task class counts scaled from the 30-subject combined distribution
/// (fibrosis 7/10/13, steatosis 11/19, lobular 9/10/11, ballooning 8/11/11)
/// by largest-remainder rounding.
pub fn default_class_counts(n_patients: usize) -> BTreeMap<Task, Vec<usize>> {
    let reference: BTreeMap<Task, Vec<usize>> = [
        (Task::Fibrosis, vec![7, 10, 13]),
        (Task::Steatosis, vec![11, 19]),
        (Task::Lobular, vec![9, 10, 11]),
        (Task::Ballooning, vec![8, 11, 11]),
    ]
    .into();
    if n_patients == 30 {
        return reference;
    }
    reference
        .into_iter()
        .map(|(task, ref_counts)| {
            let total: usize = ref_counts.iter().sum();
            let exact: Vec<f64> = ref_counts
                .iter()
                .map(|&c| c as f64 * n_patients as f64 / total as f64)
                .collect();
            let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
            let mut remainder = n_patients - counts.iter().sum::<usize>();
            let mut order: Vec<usize> = (0..counts.len()).collect();
            order.sort_by(|&a, &b| {
                (exact[b] - exact[b].floor())
                    .partial_cmp(&(exact[a] - exact[a].floor()))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            for &i in order.iter().cycle().take(counts.len() * 2) {
                if remainder == 0 {
                    break;
                }
                counts[i] += 1;
                remainder -= 1;
            }
            (task, counts)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientGroundTruth {
    pub patient_id: String,
    pub classes: BTreeMap<Task, usize>,
    pub raw: BTreeMap<Task, f64>,
    /// Planted lesion-count multiplier per modality and task.
    pub levels: BTreeMap<String, BTreeMap<Task, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub strengths: Strengths,
    pub patients: Vec<PatientGroundTruth>,
}

/// Generated cohort: manifest records plus ground truth, all on disk.
#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub records: Vec<StudyRecord>,
    pub ground_truth: GroundTruth,
    pub manifest_path: PathBuf,
}

/// Planted count multiplier for class `c` of `num_classes` at strength `s`.
pub fn planted_level(class: usize, num_classes: usize, strength: f64) -> f64 {
    if num_classes <= 1 {
        return 1.0;
    }
    let position = 2.0 * class as f64 / (num_classes as f64 - 1.0) - 1.0;
    1.0 + LEVEL_SWING * strength * position
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Generate a cohort under `out_dir`: volumes, masks, slides, manifest,
/// and `ground_truth.json`. Regenerating with the same spec is
/// byte-identical.
pub fn generate_cohort(spec: &SynthSpec, out_dir: &Path) -> Result<SynthCohort> {
    spec.validate()?;
    for sub in ["volumes", "masks", "slides"] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir, e))?;
    }

    // Independent per-task label assignment.
    let mut classes_by_task: BTreeMap<Task, Vec<usize>> = BTreeMap::new();
    for task in ALL_TASKS {
        let counts = &spec.class_counts[&task];
        let mut labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(class, &n)| std::iter::repeat(class).take(n))
            .collect();
        let mut rng = seed::rng_for(spec.seed, &["synth", "labels", task.name()]);
        labels.shuffle(&mut rng);
        classes_by_task.insert(task, labels);
    }

    let mut records = Vec::with_capacity(spec.n_patients);
    let mut patients_gt = Vec::with_capacity(spec.n_patients);
    for i in 0..spec.n_patients {
        let patient_id = format!("p{i:03}");
        let classes: BTreeMap<Task, usize> =
            ALL_TASKS.iter().map(|&t| (t, classes_by_task[&t][i])).collect();
        let raw = raw_scores_for(&classes, spec.seed, i);

        let mut levels: BTreeMap<String, BTreeMap<Task, f64>> = BTreeMap::new();
        for modality in [Modality::Ct, Modality::Patho] {
            let per_task: BTreeMap<Task, f64> = ALL_TASKS
                .iter()
                .map(|&task| {
                    let scheme = LabelScheme::for_task(task);
                    (
                        task,
                        planted_level(
                            classes[&task],
                            scheme.num_classes,
                            spec.strengths.get(modality, task),
                        ),
                    )
                })
                .collect();
            levels.insert(modality.name().to_string(), per_task);
        }

        let volume = generate_volume(spec, i, &levels["ct"]);
        let mask = ellipsoid_mask(spec, i);
        let slide = generate_slide(spec, i, &levels["patho"]);

        let ct_rel = format!("volumes/{patient_id}.rvol");
        let mask_rel = format!("masks/{patient_id}.rmask");
        let slide_rel = format!("slides/{patient_id}.png");
        rawvol::write_volume(&out_dir.join(&ct_rel), &volume)?;
        rawvol::write_mask(&out_dir.join(&mask_rel), &mask)?;
        save_slide(&out_dir.join(&slide_rel), &slide)?;

        records.push(StudyRecord {
            patient_id: patient_id.clone(),
            ct_ref: PathBuf::from(&ct_rel),
            wsi_ref: PathBuf::from(&slide_rel),
            fibrosis_raw: raw[&Task::Fibrosis],
            steatosis_raw: raw[&Task::Steatosis] as u8,
            lobular_raw: raw[&Task::Lobular] as u8,
            ballooning_raw: raw[&Task::Ballooning] as u8,
        });
        patients_gt.push(PatientGroundTruth { patient_id, classes, raw, levels });
    }

    let manifest_path = out_dir.join("manifest.csv");
    crate::data_model::write_manifest(&manifest_path, &records)?;
    let ground_truth =
        GroundTruth { seed: spec.seed, strengths: spec.strengths.clone(), patients: patients_gt };
    let gt_json = serde_json::to_string_pretty(&ground_truth).expect("ground truth serializes");
    let gt_path = out_dir.join("ground_truth.json");
    std::fs::write(&gt_path, gt_json).map_err(|e| Error::io(gt_path, e))?;

    Ok(SynthCohort { records, ground_truth, manifest_path })
}

/// Raw scores consistent with the combined classes; fibrosis class 2 draws
/// from {3, 3.5, 4} so the non-integer label path is exercised.
fn raw_scores_for(
    classes: &BTreeMap<Task, usize>,
    master_seed: u64,
    patient: usize,
) -> BTreeMap<Task, f64> {
    let mut rng = seed::rng_for(master_seed, &["synth", "raw", &patient.to_string()]);
    let mut out = BTreeMap::new();
    for task in ALL_TASKS {
        let class = classes[&task];
        let options: &[f64] = match (task, class) {
            (Task::Fibrosis, 0) => &[0.0],
            (Task::Fibrosis, 1) => &[1.0, 2.0],
            (Task::Fibrosis, _) => &[3.0, 3.5, 4.0],
            (Task::Steatosis, 0) => &[0.0, 1.0],
            (Task::Steatosis, _) => &[2.0, 3.0],
            (Task::Lobular, 0) => &[0.0],
            (Task::Lobular, 1) => &[1.0],
            (Task::Lobular, _) => &[2.0, 3.0],
            (Task::Ballooning, c) => {
                out.insert(task, c as f64);
                continue;
            }
        };
        out.insert(task, options[rng.gen_range(0..options.len())]);
    }
    out
}

struct Ellipsoid {
    center: (f32, f32, f32),
    semi: (f32, f32, f32),
}

fn liver_ellipsoid(spec: &SynthSpec, patient: usize) -> Ellipsoid {
    let (d, h, w) = spec.geometry.vol_shape;
    let mut rng = seed::rng_for(spec.seed, &["synth", "ellipsoid", &patient.to_string()]);
    let jitter = |rng: &mut ChaCha8Rng, scale: f32| rng.gen_range(-scale..scale);
    Ellipsoid {
        center: (
            d as f32 / 2.0 + jitter(&mut rng, 1.0),
            h as f32 / 2.0 + jitter(&mut rng, 3.0),
            w as f32 / 2.0 + jitter(&mut rng, 3.0),
        ),
        semi: (
            d as f32 * 0.38 * (1.0 + jitter(&mut rng, 0.06)),
            h as f32 * 0.33 * (1.0 + jitter(&mut rng, 0.06)),
            w as f32 * 0.40 * (1.0 + jitter(&mut rng, 0.06)),
        ),
    }
}

fn ellipsoid_contains(e: &Ellipsoid, z: f32, y: f32, x: f32) -> bool {
    let dz = (z - e.center.0) / e.semi.0;
    let dy = (y - e.center.1) / e.semi.1;
    let dx = (x - e.center.2) / e.semi.2;
    dz * dz + dy * dy + dx * dx <= 1.0
}

/// Ground-truth binary liver mask for the mask provider.
pub fn ellipsoid_mask(spec: &SynthSpec, patient: usize) -> Array3<u8> {
    let (d, h, w) = spec.geometry.vol_shape;
    let e = liver_ellipsoid(spec, patient);
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        u8::from(ellipsoid_contains(&e, z as f32, y as f32, x as f32))
    })
}

fn generate_volume(spec: &SynthSpec, patient: usize, levels: &BTreeMap<Task, f64>) -> Array3<f32> {
    let (d, h, w) = spec.geometry.vol_shape;
    let e = liver_ellipsoid(spec, patient);
    let pid = patient.to_string();

    let mut rng = seed::rng_for(spec.seed, &["synth", "volume", &pid]);
    let liver_base = LIVER_HU + rng.gen_range(-3.0..3.0);
    let mut volume = Array3::<f32>::zeros((d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let noise = rng.gen_range(-8.0..8.0);
                volume[(z, y, x)] = if ellipsoid_contains(&e, z as f32, y as f32, x as f32) {
                    liver_base + noise
                } else {
                    AIR_HU + noise
                };
            }
        }
    }

    // Spherical lesions, one HU band per task, count scaled by the class.
    for (ti, task) in ALL_TASKS.iter().enumerate() {
        let count =
            (spec.geometry.ct_base_lesions as f64 * levels[task]).round().max(0.0) as usize;
        let mut rng = seed::rng_for(spec.seed, &["synth", "lesions", &pid, task.name()]);
        let hu = liver_base + CT_BAND_OFFSETS[ti];
        for _ in 0..count {
            // Uniform direction inside the ellipsoid with a margin so the
            // whole sphere stays in the liver.
            let (uz, uy, ux) = loop {
                let uz: f32 = rng.gen_range(-1.0..1.0);
                let uy: f32 = rng.gen_range(-1.0..1.0);
                let ux: f32 = rng.gen_range(-1.0..1.0);
                if uz * uz + uy * uy + ux * ux <= 0.8 {
                    break (uz, uy, ux);
                }
            };
            let cz = e.center.0 + uz * e.semi.0;
            let cy = e.center.1 + uy * e.semi.1;
            let cx = e.center.2 + ux * e.semi.2;
            let r = 2.0f32;
            let zr = (cz - r).floor().max(0.0) as usize..=((cz + r).ceil() as usize).min(d - 1);
            for z in zr {
                let yr =
                    (cy - r).floor().max(0.0) as usize..=((cy + r).ceil() as usize).min(h - 1);
                for y in yr {
                    let xr =
                        (cx - r).floor().max(0.0) as usize..=((cx + r).ceil() as usize).min(w - 1);
                    for x in xr {
                        let dz = z as f32 - cz;
                        let dy = y as f32 - cy;
                        let dx = x as f32 - cx;
                        if dz * dz + dy * dy + dx * dx <= r * r
                            && ellipsoid_contains(&e, z as f32, y as f32, x as f32)
                        {
                            volume[(z, y, x)] = hu + rng.gen_range(-6.0..6.0);
                        }
                    }
                }
            }
        }
    }
    volume
}

fn generate_slide(spec: &SynthSpec, patient: usize, levels: &BTreeMap<Task, f64>) -> Array3<u8> {
    let (h, w) = spec.geometry.slide_shape;
    let pid = patient.to_string();
    let mut rng = seed::rng_for(spec.seed, &["synth", "slide", &pid]);
    // Per-patient tissue tone jitter, class-independent.
    let tone: Vec<i16> = (0..3).map(|_| rng.gen_range(-6..=6)).collect();
    let mut slide = Array3::<u8>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = i16::from(SLIDE_BASE[c]) + tone[c] + rng.gen_range(-10..=10);
                slide[(y, x, c)] = v.clamp(0, 255) as u8;
            }
        }
    }

    for (ti, task) in ALL_TASKS.iter().enumerate() {
        let count =
            (spec.geometry.slide_base_motifs as f64 * levels[task]).round().max(0.0) as usize;
        let mut rng = seed::rng_for(spec.seed, &["synth", "motifs", &pid, task.name()]);
        let color = SLIDE_MOTIF_COLORS[ti];
        let r = SLIDE_MOTIF_RADII[ti];
        for _ in 0..count {
            let cy = rng.gen_range(r..h - r);
            let cx = rng.gen_range(r..w - r);
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    let dy = y as isize - cy as isize;
                    let dx = x as isize - cx as isize;
                    if dy * dy + dx * dx <= (r * r) as isize {
                        for c in 0..3 {
                            let v = i16::from(color[c]) + rng.gen_range(-6..=6);
                            slide[(y, x, c)] = v.clamp(0, 255) as u8;
                        }
                    }
                }
            }
        }
    }

    // Whiten the top-left tile so background filtering always triggers.
    let tile = crate::patho::TILE_SIZE.min(h).min(w);
    for y in 0..tile {
        for x in 0..tile {
            for c in 0..3 {
                slide[(y, x, c)] = 250;
            }
        }
    }
    slide
}

fn save_slide(path: &Path, slide: &Array3<u8>) -> Result<()> {
    let (h, w, _) = slide.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([slide[(y, x, 0)], slide[(y, x, 1)], slide[(y, x, 2)]]),
            );
        }
    }
    img.save(path).map_err(|e| Error::data(format!("writing {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Signal probe
// ---------------------------------------------------------------------------

/// Windowed band center for a task, given the patient-independent liver
/// base (jitter widens the acceptance window instead).
fn ct_band_center(task: Task) -> f32 {
    ct::window_value(LIVER_HU + CT_BAND_OFFSETS[task_index(task)], ct::WINDOW_LO, ct::WINDOW_HI)
}

/// Per-patient closed-form statistic: fraction of liver voxels inside the
/// task's windowed HU band.
pub fn ct_band_fraction(volume: &Array3<f32>, mask: &Array3<u8>, task: Task) -> f64 {
    let center = ct_band_center(task);
    let tol = 0.04f32;
    let mut hits = 0u64;
    let mut total = 0u64;
    for (&v, &m) in volume.iter().zip(mask.iter()) {
        if m == 1 {
            total += 1;
            let wv = ct::window_value(v, ct::WINDOW_LO, ct::WINDOW_HI);
            if (wv - center).abs() <= tol {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return 0.0;
    }
    hits as f64 / total as f64
}

/// Per-patient closed-form statistic: fraction of slide pixels within
/// max-channel distance 15 of the task's motif color.
pub fn slide_motif_fraction(slide: &Array3<u8>, task: Task) -> f64 {
    let color = SLIDE_MOTIF_COLORS[task_index(task)];
    let (h, w, _) = slide.dim();
    let mut hits = 0u64;
    for y in 0..h {
        for x in 0..w {
            let matches = (0..3)
                .all(|c| (i16::from(slide[(y, x, c)]) - i16::from(color[c])).abs() <= 15);
            if matches {
                hits += 1;
            }
        }
    }
    hits as f64 / (h * w) as f64
}

/// One-vs-rest AUC of a scalar statistic, scored by distance to sorted
/// group centroids (group sizes from the known class counts, no per-patient
/// labels consulted).
pub fn probe_auc_from_stats(stats: &[f64], classes: &[usize], counts: &[usize]) -> Option<f64> {
    assert_eq!(stats.len(), classes.len());
    let n = stats.len();
    // Sort patients by statistic (stable on index for determinism).
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| stats[a].partial_cmp(&stats[b]).unwrap().then(a.cmp(&b)));
    // Centroid of the k-th sorted group; the planted level rises with the
    // class, so group k should collect class-k patients.
    let mut centroids = Vec::with_capacity(counts.len());
    let mut at = 0;
    for &size in counts {
        if size == 0 {
            centroids.push(f64::NAN);
            continue;
        }
        let group = &order[at..(at + size).min(n)];
        centroids.push(group.iter().map(|&i| stats[i]).sum::<f64>() / group.len() as f64);
        at += size;
    }

    let mut defined = Vec::new();
    for (k, &centroid) in centroids.iter().enumerate() {
        if centroid.is_nan() {
            continue;
        }
        let scores: Vec<f64> = stats.iter().map(|&s| -(s - centroid).abs()).collect();
        let labels: Vec<bool> = classes.iter().map(|&c| c == k).collect();
        if let Some(auc) = binary_auc(&scores, &labels) {
            defined.push(auc);
        }
    }
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Probe AUC over a generated cohort directory, without any learned model.
pub fn signal_probe(cohort_dir: &Path, modality: Modality, task: Task) -> Result<f64> {
    let gt = load_ground_truth(cohort_dir)?;
    let records = crate::data_model::read_manifest(&cohort_dir.join("manifest.csv"))?;
    let mut stats = Vec::with_capacity(records.len());
    let mut classes = Vec::with_capacity(records.len());
    for (record, patient) in records.iter().zip(&gt.patients) {
        let stat = match modality {
            Modality::Ct => {
                let volume = crate::io::volume::read_volume(&cohort_dir.join(&record.ct_ref))?;
                let mask_path = cohort_dir.join(format!("masks/{}.rmask", record.patient_id));
                let mask = crate::io::volume::read_mask(&mask_path)?;
                ct_band_fraction(&volume, &mask, task)
            }
            Modality::Patho => {
                let raster = crate::patho::SlideRaster::load(&cohort_dir.join(&record.wsi_ref))?;
                slide_motif_fraction(&raster.pixels, task)
            }
        };
        stats.push(stat);
        classes.push(patient.classes[&task]);
    }
    let scheme = LabelScheme::for_task(task);
    let mut counts = vec![0usize; scheme.num_classes];
    for &c in &classes {
        counts[c] += 1;
    }
    probe_auc_from_stats(&stats, &classes, &counts)
        .ok_or_else(|| Error::data(format!("probe undefined for {task} (single class)")))
}

pub fn load_ground_truth(cohort_dir: &Path) -> Result<GroundTruth> {
    let path = cohort_dir.join("ground_truth.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))
}

impl GroundTruth {
    /// Probe on the planted levels themselves (the perfect feature).
    pub fn probe_on_levels(&self, modality: Modality, task: Task) -> Option<f64> {
        let stats: Vec<f64> =
            self.patients.iter().map(|p| p.levels[modality.name()][&task]).collect();
        let classes: Vec<usize> = self.patients.iter().map(|p| p.classes[&task]).collect();
        let num_classes = LabelScheme::for_task(task).num_classes;
        let mut counts = vec![0usize; num_classes];
        for &c in &classes {
            counts[c] += 1;
        }
        probe_auc_from_stats(&stats, &classes, &counts)
    }
}

/// True combined-class histogram of generated records for one task.
pub fn manifest_class_histogram(records: &[StudyRecord], task: Task) -> Result<Vec<usize>> {
    crate::data_model::combined_distribution(records, task)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(seed: u64, ct_strength: f64, patho_strength: f64) -> SynthSpec {
        let mut spec =
            SynthSpec::new(9, seed, Strengths::uniform(ct_strength, patho_strength));
        spec.geometry = Geometry {
            vol_shape: (12, 48, 48),
            slide_shape: (224, 448),
            ct_base_lesions: 25,
            slide_base_motifs: 80,
        };
        spec
    }

    #[test]
    fn default_counts_reproduce_the_reference_distribution() {
        let counts = default_class_counts(30);
        assert_eq!(counts[&Task::Fibrosis], vec![7, 10, 13]);
        assert_eq!(counts[&Task::Steatosis], vec![11, 19]);
        assert_eq!(counts[&Task::Lobular], vec![9, 10, 11]);
        assert_eq!(counts[&Task::Ballooning], vec![8, 11, 11]);
        for n in [9usize, 12, 31] {
            for (_, c) in default_class_counts(n) {
                assert_eq!(c.iter().sum::<usize>(), n);
            }
        }
    }

    #[test]
    fn infeasible_distribution_is_rejected() {
        let mut spec = tiny_spec(1, 0.5, 0.5);
        spec.class_counts.insert(Task::Fibrosis, vec![9, 9, 9]);
        assert!(spec.validate().is_err());
        let mut spec = tiny_spec(1, 0.5, 0.5);
        spec.strengths.ct.insert(Task::Fibrosis, 1.5);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn planted_levels_are_monotone_and_flat_at_zero_strength() {
        for k in [2usize, 3] {
            let mut prev = 0.0;
            for c in 0..k {
                let level = planted_level(c, k, 0.7);
                assert!(level > prev);
                prev = level;
                assert_eq!(planted_level(c, k, 0.0), 1.0);
            }
        }
    }

    #[test]
    fn manifest_histogram_matches_spec_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(11, 0.8, 0.8);
        let cohort = generate_cohort(&spec, dir.path()).unwrap();
        for task in ALL_TASKS {
            let hist = manifest_class_histogram(&cohort.records, task).unwrap();
            assert_eq!(&hist, &spec.class_counts[&task], "{task}");
        }
        // Fibrosis raw scores include the intermediate stage somewhere in a
        // cohort with enough class-2 patients.
        let spec30 = SynthSpec::new(30, 5, Strengths::uniform(0.5, 0.5));
        let text = {
            let dir = tempfile::tempdir().unwrap();
            let mut small = spec30.clone();
            small.geometry = tiny_spec(0, 0.0, 0.0).geometry;
            generate_cohort(&small, dir.path()).unwrap();
            std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap()
        };
        assert!(text.contains("3.5"), "3.5 must appear in a 30-patient cohort");
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = tiny_spec(21, 0.6, 0.6);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate_cohort(&spec, dir_a.path()).unwrap();
        generate_cohort(&spec, dir_b.path()).unwrap();
        let mut checked = 0;
        for entry in walk(dir_a.path()) {
            let rel = entry.strip_prefix(dir_a.path()).unwrap();
            let a = std::fs::read(&entry).unwrap();
            let b = std::fs::read(dir_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel:?} differs between regenerations");
            checked += 1;
        }
        assert!(checked >= 9 * 3 + 2);

        // A different seed changes the bytes.
        let dir_c = tempfile::tempdir().unwrap();
        generate_cohort(&tiny_spec(22, 0.6, 0.6), dir_c.path()).unwrap();
        let a = std::fs::read(dir_a.path().join("volumes/p000.rvol")).unwrap();
        let c = std::fs::read(dir_c.path().join("volumes/p000.rvol")).unwrap();
        assert_ne!(a, c);
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            let mut entries: Vec<_> =
                std::fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
            entries.sort();
            for e in entries {
                if e.is_dir() {
                    stack.push(e);
                } else {
                    out.push(e);
                }
            }
        }
        out
    }

    #[test]
    fn probe_on_ground_truth_levels_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(31, 1.0, 1.0);
        let cohort = generate_cohort(&spec, dir.path()).unwrap();
        for task in ALL_TASKS {
            for modality in [Modality::Ct, Modality::Patho] {
                let auc = cohort.ground_truth.probe_on_levels(modality, task).unwrap();
                assert_eq!(auc, 1.0, "{task} {}", modality.name());
            }
        }
    }

    #[test]
    fn probe_detects_full_strength_signal() {
        let dir = tempfile::tempdir().unwrap();
        generate_cohort(&tiny_spec(41, 1.0, 1.0), dir.path()).unwrap();
        for task in ALL_TASKS {
            let ct_auc = signal_probe(dir.path(), Modality::Ct, task).unwrap();
            assert!(ct_auc >= 0.95, "{task} ct probe {ct_auc}");
            let patho_auc = signal_probe(dir.path(), Modality::Patho, task).unwrap();
            assert!(patho_auc >= 0.95, "{task} patho probe {patho_auc}");
        }
    }

    #[test]
    fn probe_is_near_chance_at_zero_strength() {
        // Empirical null over a handful of seeds: stays within a broad
        // chance band and never approaches the planted-signal regime.
        let mut values = Vec::new();
        for s in 0..20 {
            let dir = tempfile::tempdir().unwrap();
            generate_cohort(&tiny_spec(100 + s, 0.0, 0.0), dir.path()).unwrap();
            values.push(signal_probe(dir.path(), Modality::Ct, Task::Fibrosis).unwrap());
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!(
            (0.3..=0.7).contains(&mean),
            "null probe mean {mean} outside chance band: {values:?}"
        );
    }

    #[test]
    fn probe_auc_is_monotone_in_strength() {
        for s in 0..5 {
            let mut prev = f64::NEG_INFINITY;
            for strength in [0.0, 0.5, 1.0] {
                let dir = tempfile::tempdir().unwrap();
                generate_cohort(&tiny_spec(200 + s, strength, strength), dir.path()).unwrap();
                let auc = signal_probe(dir.path(), Modality::Patho, Task::Steatosis).unwrap();
                assert!(
                    auc >= prev - 0.02,
                    "seed {s}: probe not monotone ({prev} -> {auc} at {strength})"
                );
                prev = auc;
            }
        }
    }

    #[test]
    fn generated_cohort_survives_both_pipelines() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(51, 0.7, 0.7);
        let cohort = generate_cohort(&spec, dir.path()).unwrap();
        for record in &cohort.records {
            let volume = ct::CtVolume::load(&dir.path().join(&record.ct_ref)).unwrap();
            let mask_path = dir.path().join(format!("masks/{}.rmask", record.patient_id));
            let masks =
                ct::FileMaskProvider::load(&mask_path, volume.voxels.dim()).unwrap();
            let params = ct::CtParams { out_size: 64, ..ct::CtParams::default() };
            let bag = ct::preprocess_volume(&record.patient_id, &volume, &masks, &params).unwrap();
            assert!(bag.kept_count >= 1, "{}: no kept slices", record.patient_id);
            assert!(bag.discarded_count > 0, "{}: filter never fired", record.patient_id);

            let raster =
                crate::patho::SlideRaster::load(&dir.path().join(&record.wsi_ref)).unwrap();
            let patho_bag = crate::patho::preprocess_slide(
                &record.patient_id,
                &raster,
                &crate::patho::PathoParams::default(),
            );
            assert!(patho_bag.kept_count >= 1, "{}: no kept patches", record.patient_id);
            assert!(patho_bag.discarded_count >= 1, "{}: white tile survived", record.patient_id);
        }
    }
}
