//! Multimodal multi-instance learning for liver fibrosis staging and NAS
//! component scoring from per-patient bags of CT slices and pathology
//! patches.
//!
//! The crate covers the full experiment loop: cohort schema and label
//! combination, CT and slide preprocessing into instance bags, the baseline
//! bag classifier plus four CT+pathology fusion architectures (mid/late
//! fusion, single/multi loss), per-fold training with frozen-backbone
//! fine-tuning, one-vs-rest AUC evaluation with patient-level bootstrap
//! confidence intervals, and a deterministic synthetic phantom cohort
//! generator so the whole pipeline is testable at desk scale.

// pub mod config;
pub mod ct;
pub mod data_model;
pub mod error;
pub mod evaluation;
// pub mod events;
pub mod io;
pub mod models;
pub mod nn;
pub mod patho;
// pub mod pipeline;
pub mod seed;
pub mod synthdata;
// pub mod training;

pub use error::{Error, Result};
