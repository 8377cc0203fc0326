//! Cohort schema: study records, raw-to-combined label mapping, fold splits.
//!
//! Raw clinical scores live in small per-task domains (fibrosis additionally
//! admits the intermediate stage 3.5, which is kept as an exact value and
//! never rounded). Training and evaluation operate on combined class
//! indices produced by [`map_raw_to_class`].

use std::collections::BTreeSet;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Imaging modality of an instance bag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ct,
    Patho,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Ct => "ct",
            Modality::Patho => "patho",
        }
    }
}

/// The four prediction tasks. Each one trains its own model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Fibrosis,
    Steatosis,
    Lobular,
    Ballooning,
}

pub const ALL_TASKS: [Task; 4] = [Task::Fibrosis, Task::Steatosis, Task::Lobular, Task::Ballooning];

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Fibrosis => "fibrosis",
            Task::Steatosis => "steatosis",
            Task::Lobular => "lobular",
            Task::Ballooning => "ballooning",
        }
    }

    /// Column header used in evaluation reports.
    pub fn report_label(self) -> &'static str {
        match self {
            Task::Fibrosis => "Fibrosis",
            Task::Steatosis => "NAS steatosis",
            Task::Lobular => "NAS lobular",
            Task::Ballooning => "NAS ballooning",
        }
    }

    pub fn from_name(name: &str) -> Result<Task> {
        match name {
            "fibrosis" => Ok(Task::Fibrosis),
            "steatosis" => Ok(Task::Steatosis),
            "lobular" => Ok(Task::Lobular),
            "ballooning" => Ok(Task::Ballooning),
            other => Err(Error::config(format!("unknown task `{other}`"))),
        }
    }

    /// Admissible raw scores for this task.
    pub fn raw_domain(self) -> &'static [f64] {
        match self {
            Task::Fibrosis => &[0.0, 1.0, 2.0, 3.0, 3.5, 4.0],
            Task::Steatosis | Task::Lobular => &[0.0, 1.0, 2.0, 3.0],
            Task::Ballooning => &[0.0, 1.0, 2.0],
        }
    }
}

/// One patient: identifiers, modality references, raw clinical scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub patient_id: String,
    pub ct_ref: PathBuf,
    pub wsi_ref: PathBuf,
    /// Fibrosis stage in {0, 1, 2, 3, 3.5, 4}; 3.5 is stored exactly.
    pub fibrosis_raw: f64,
    pub steatosis_raw: u8,
    pub lobular_raw: u8,
    pub ballooning_raw: u8,
}

impl StudyRecord {
    /// Raw score for `task` as an exact f64.
    pub fn raw(&self, task: Task) -> f64 {
        match task {
            Task::Fibrosis => self.fibrosis_raw,
            Task::Steatosis => f64::from(self.steatosis_raw),
            Task::Lobular => f64::from(self.lobular_raw),
            Task::Ballooning => f64::from(self.ballooning_raw),
        }
    }

    /// Combined class index for `task`.
    pub fn class(&self, task: Task) -> Result<usize> {
        map_raw_to_class(task, self.raw(task))
    }

    pub fn validate(&self) -> Result<()> {
        for task in ALL_TASKS {
            map_raw_to_class(task, self.raw(task))?;
        }
        Ok(())
    }
}

/// Per-task mapping from raw score to combined class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelScheme {
    pub task: Task,
    pub num_classes: usize,
}

impl LabelScheme {
    pub fn for_task(task: Task) -> LabelScheme {
        let num_classes = match task {
            Task::Fibrosis | Task::Lobular | Task::Ballooning => 3,
            Task::Steatosis => 2,
        };
        LabelScheme { task, num_classes }
    }

    pub fn map(&self, raw: f64) -> Result<usize> {
        map_raw_to_class(self.task, raw)
    }
}

/// Map a raw score to its combined class index.
///
/// Fibrosis {0}->0, {1,2}->1, {3,3.5,4}->2; steatosis {0,1}->0, {2,3}->1;
/// lobular {0}->0, {1}->1, {2,3}->2; ballooning is the identity.
pub fn map_raw_to_class(task: Task, raw: f64) -> Result<usize> {
    let reject = || {
        Error::data(format!(
            "raw score {} is outside the {} domain {:?}",
            format_raw(raw),
            task.name(),
            task.raw_domain().iter().map(|v| format_raw(*v)).collect::<Vec<_>>()
        ))
    };
    if !task.raw_domain().contains(&raw) {
        return Err(reject());
    }
    let class = match task {
        Task::Fibrosis => {
            if raw == 0.0 {
                0
            } else if raw <= 2.0 {
                1
            } else {
                2
            }
        }
        Task::Steatosis => {
            if raw <= 1.0 {
                0
            } else {
                1
            }
        }
        Task::Lobular => {
            if raw == 0.0 {
                0
            } else if raw == 1.0 {
                1
            } else {
                2
            }
        }
        Task::Ballooning => raw as usize,
    };
    Ok(class)
}

/// Combined-class counts over a cohort.
pub fn combined_distribution(records: &[StudyRecord], task: Task) -> Result<Vec<usize>> {
    let scheme = LabelScheme::for_task(task);
    let mut counts = vec![0usize; scheme.num_classes];
    for rec in records {
        let class = rec.class(task).map_err(|e| {
            Error::data(format!("patient {}: {e}", rec.patient_id))
        })?;
        counts[class] += 1;
    }
    Ok(counts)
}

/// Formats a raw score the way the manifest stores it (`3.5`, otherwise integer).
pub fn format_raw(raw: f64) -> String {
    if raw.fract() == 0.0 {
        format!("{}", raw as i64)
    } else {
        format!("{raw}")
    }
}

// ---------------------------------------------------------------------------
// Fold splits
// ---------------------------------------------------------------------------

pub const NUM_FOLDS: usize = 3;

/// Three disjoint patient-id folds covering the cohort.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    /// Patients outside `fold_index` (the training side of one CV round).
    pub fn training_ids(&self, fold_index: usize) -> Vec<String> {
        let mut ids = Vec::new();
        for (k, fold) in self.folds.iter().enumerate() {
            if k != fold_index {
                ids.extend(fold.iter().cloned());
            }
        }
        ids
    }

    pub fn test_ids(&self, fold_index: usize) -> &[String] {
        &self.folds[fold_index]
    }

    /// Checks disjointness, coverage of `ids`, and near-equal sizes.
    pub fn validate(&self, ids: &[String]) -> Result<()> {
        if self.folds.len() != NUM_FOLDS {
            return Err(Error::data(format!("expected {NUM_FOLDS} folds, found {}", self.folds.len())));
        }
        let mut seen = BTreeSet::new();
        for fold in &self.folds {
            for id in fold {
                if !seen.insert(id.clone()) {
                    return Err(Error::data(format!("patient {id} appears in more than one fold")));
                }
            }
        }
        let expected: BTreeSet<_> = ids.iter().cloned().collect();
        if seen != expected {
            return Err(Error::data("fold union does not equal the cohort".to_string()));
        }
        let sizes: Vec<usize> = self.folds.iter().map(Vec::len).collect();
        let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        if max - min > 1 {
            return Err(Error::data(format!("fold sizes {sizes:?} differ by more than 1")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fold split serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<FoldSplit> {
        let split: FoldSplit = serde_json::from_slice(bytes)
            .map_err(|e| Error::data(format!("fold split json: {e}")))?;
        if split.folds.len() != NUM_FOLDS {
            return Err(Error::data(format!("expected {NUM_FOLDS} folds, found {}", split.folds.len())));
        }
        Ok(split)
    }
}

/// Uniform random partition of the cohort into three folds.
///
/// Ids are sorted, shuffled with the derived fold-split stream, and dealt
/// round-robin, so the result is independent of input order and the fold
/// sizes differ by at most one. No class stratification.
pub fn make_folds(patient_ids: &[String], master_seed: u64) -> Result<FoldSplit> {
    if patient_ids.len() < NUM_FOLDS {
        return Err(Error::data(format!(
            "need at least {NUM_FOLDS} patients to split, got {}",
            patient_ids.len()
        )));
    }
    let unique: BTreeSet<_> = patient_ids.iter().collect();
    if unique.len() != patient_ids.len() {
        return Err(Error::data("duplicate patient ids in cohort".to_string()));
    }
    let mut ids: Vec<String> = patient_ids.to_vec();
    ids.sort();
    let mut rng = seed::rng_for(master_seed, &["fold_split"]);
    ids.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); NUM_FOLDS];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % NUM_FOLDS].push(id);
    }
    let split = FoldSplit { seed: master_seed, folds };
    split.validate(patient_ids)?;
    Ok(split)
}

// ---------------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------------

pub const MANIFEST_HEADER: [&str; 7] =
    ["patient_id", "ct_path", "wsi_path", "fibrosis", "steatosis", "lobular", "ballooning"];

/// Parse the cohort manifest CSV (UTF-8, pinned header).
pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<StudyRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("manifest header: {e}")))?
        .clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != MANIFEST_HEADER {
        return Err(Error::data(format!(
            "manifest header mismatch: expected {MANIFEST_HEADER:?}, got {got:?}"
        )));
    }
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::data(format!("manifest row {}: {e}", line + 2)))?;
        if row.len() != MANIFEST_HEADER.len() {
            return Err(Error::data(format!(
                "manifest row {}: expected {} fields, got {}",
                line + 2,
                MANIFEST_HEADER.len(),
                row.len()
            )));
        }
        let patient_id = row[0].to_string();
        if patient_id.is_empty() {
            return Err(Error::data(format!("manifest row {}: empty patient_id", line + 2)));
        }
        if !seen.insert(patient_id.clone()) {
            return Err(Error::data(format!("duplicate patient_id {patient_id}")));
        }
        let rec = StudyRecord {
            patient_id: patient_id.clone(),
            ct_ref: PathBuf::from(&row[1]),
            wsi_ref: PathBuf::from(&row[2]),
            fibrosis_raw: parse_raw_score(Task::Fibrosis, &row[3], &patient_id)?,
            steatosis_raw: parse_raw_score(Task::Steatosis, &row[4], &patient_id)? as u8,
            lobular_raw: parse_raw_score(Task::Lobular, &row[5], &patient_id)? as u8,
            ballooning_raw: parse_raw_score(Task::Ballooning, &row[6], &patient_id)? as u8,
        };
        records.push(rec);
    }
    Ok(records)
}

fn parse_raw_score(task: Task, text: &str, patient_id: &str) -> Result<f64> {
    let value: f64 = text.trim().parse().map_err(|_| {
        Error::data(format!("patient {patient_id}: {} score `{text}` is not a number", task.name()))
    })?;
    if !task.raw_domain().contains(&value) {
        return Err(Error::data(format!(
            "patient {patient_id}: {} score {} outside domain",
            task.name(),
            format_raw(value)
        )));
    }
    Ok(value)
}

pub fn read_manifest(path: &Path) -> Result<Vec<StudyRecord>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_manifest(&bytes)
}

pub fn write_manifest(path: &Path, records: &[StudyRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&MANIFEST_HEADER.join(","));
    out.push('\n');
    for rec in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            rec.patient_id,
            rec.ct_ref.display(),
            rec.wsi_ref.display(),
            format_raw(rec.fibrosis_raw),
            rec.steatosis_raw,
            rec.lobular_raw,
            rec.ballooning_raw
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
