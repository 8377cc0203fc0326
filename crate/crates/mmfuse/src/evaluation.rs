//! One-vs-rest AUC, patient-level bootstrap confidence intervals, and
//! cross-fold aggregation into Table-style reports.

use serde::{Deserialize, Serialize};

use crate::data_model::Task;
use crate::error::{Error, Result};
use crate::models::VariantKind;
use crate::seed;

// ---------------------------------------------------------------------------
// Predictions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub true_class: usize,
    /// Softmax of the joint logits.
    pub probs: Vec<f64>,
}

/// Per-fold test predictions: one entry per test patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub num_classes: usize,
    pub entries: Vec<PatientPrediction>,
}

impl PredictionSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for entry in &self.entries {
            if !seen.insert(&entry.patient_id) {
                return Err(Error::data(format!("duplicate prediction for {}", entry.patient_id)));
            }
            if entry.true_class >= self.num_classes {
                return Err(Error::data(format!(
                    "{}: class {} out of range",
                    entry.patient_id, entry.true_class
                )));
            }
            if entry.probs.len() != self.num_classes {
                return Err(Error::data(format!(
                    "{}: {} probabilities for {} classes",
                    entry.patient_id,
                    entry.probs.len(),
                    self.num_classes
                )));
            }
            let sum: f64 = entry.probs.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || entry.probs.iter().any(|p| !p.is_finite()) {
                return Err(Error::data(format!(
                    "{}: probabilities sum to {sum}, expected 1",
                    entry.patient_id
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// AUC
// ---------------------------------------------------------------------------

/// Mann-Whitney AUC via average ranks: `P(s+ > s-) + P(s+ = s-)/2`.
/// `None` when either class is absent.
pub fn binary_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks over tie groups (ranks are 1-based).
    let mut rank_sum_pos = 0.0;
    let mut at = 0;
    while at < order.len() {
        let mut end = at + 1;
        while end < order.len() && scores[order[end]] == scores[order[at]] {
            end += 1;
        }
        let avg_rank = (at + 1 + end) as f64 / 2.0;
        for &idx in &order[at..end] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        at = end;
    }
    let n_pos_f = n_pos as f64;
    Some((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAuc {
    pub class: usize,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvrAuc {
    pub per_class: Vec<ClassAuc>,
    /// Mean over classes with a defined AUC; `None` when none is defined.
    pub mean: Option<f64>,
    /// Classes skipped because one side of the one-vs-rest split was empty.
    pub skipped_classes: Vec<usize>,
}

/// One-vs-rest mean AUC.
///
/// Two-class tasks use a single AUC on the class-1 probability; three-class
/// tasks average the per-class AUCs of class-k probability against
/// `label == k`, skipping classes absent from the fold.
pub fn ovr_mean_auc(preds: &PredictionSet) -> OvrAuc {
    let classes: Vec<usize> =
        if preds.num_classes == 2 { vec![1] } else { (0..preds.num_classes).collect() };
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    let mut defined = Vec::new();
    for k in classes {
        let scores: Vec<f64> = preds.entries.iter().map(|e| e.probs[k]).collect();
        let labels: Vec<bool> = preds.entries.iter().map(|e| e.true_class == k).collect();
        let auc = binary_auc(&scores, &labels);
        match auc {
            Some(v) => defined.push(v),
            None => skipped.push(k),
        }
        per_class.push(ClassAuc { class: k, auc });
    }
    let mean = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    OvrAuc { per_class, mean, skipped_classes: skipped }
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lower: f64,
    pub upper: f64,
    /// Replicates that stayed degenerate after the retry budget.
    pub skipped_replicates: usize,
}

/// Percentile bootstrap over patients.
///
/// Replicate `r` uses the RNG stream `derive(seed, ["replicate", r])` and
/// draws `n` patient indices with replacement via `gen_range(0..n)`. A
/// replicate whose one-vs-rest AUC is undefined is redrawn from the same
/// stream up to 10 times, then skipped (the count is reported). The
/// interval takes linear-interpolation percentiles at `alpha/2` and
/// `1 - alpha/2`, widened if needed to contain the full-sample point
/// estimate.
pub fn bootstrap_ci(
    preds: &PredictionSet,
    iters: usize,
    alpha: f64,
    seed: u64,
) -> Option<BootstrapCi> {
    let n = preds.entries.len();
    if n < 2 {
        return None;
    }
    let point = ovr_mean_auc(preds).mean?;
    let mut replicate_values = Vec::with_capacity(iters);
    let mut skipped = 0usize;
    for r in 0..iters {
        let mut rng = seed::rng_for(seed, &["replicate", &r.to_string()]);
        let mut value = None;
        for _attempt in 0..10 {
            use rand::Rng;
            let entries: Vec<PatientPrediction> =
                (0..n).map(|_| preds.entries[rng.gen_range(0..n)].clone()).collect();
            let resampled = PredictionSet { num_classes: preds.num_classes, entries };
            if let Some(v) = ovr_mean_auc(&resampled).mean {
                value = Some(v);
                break;
            }
        }
        match value {
            Some(v) => replicate_values.push(v),
            None => skipped += 1,
        }
    }
    if replicate_values.is_empty() {
        return None;
    }
    replicate_values.sort_by(|a, b| a.partial_cmp(b).expect("finite auc"));
    let lower = percentile(&replicate_values, alpha / 2.0).min(point);
    let upper = percentile(&replicate_values, 1.0 - alpha / 2.0).max(point);
    Some(BootstrapCi { lower, upper, skipped_replicates: skipped })
}

/// Linear-interpolation percentile of a sorted slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

// ---------------------------------------------------------------------------
// Fold aggregation and reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEval {
    pub fold: usize,
    pub n_patients: usize,
    pub mean_auc: Option<f64>,
    pub per_class: Vec<ClassAuc>,
    pub skipped_classes: Vec<usize>,
    pub ci: Option<BootstrapCi>,
}

/// One (variant, task) cell: per-fold results plus cross-fold aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub task: Task,
    pub variant: VariantKind,
    pub folds: Vec<FoldEval>,
    pub mean: Option<f64>,
    /// Population standard deviation over fold means.
    pub std: Option<f64>,
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub cells: Vec<CellReport>,
}

/// Cross-fold mean and population standard deviation; `partial` when fewer
/// than three folds produced a defined AUC.
pub fn aggregate_folds(task: Task, variant: VariantKind, folds: Vec<FoldEval>) -> CellReport {
    let values: Vec<f64> = folds.iter().filter_map(|f| f.mean_auc).collect();
    let partial = values.len() < crate::data_model::NUM_FOLDS;
    let (mean, std) = if values.is_empty() {
        (None, None)
    } else {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        (Some(mean), Some(var.sqrt()))
    };
    CellReport { task, variant, folds, mean, std, partial }
}

impl EvalReport {
    pub fn cell(&self, task: Task, variant: VariantKind) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.task == task && c.variant == variant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<EvalReport> {
        serde_json::from_slice(bytes).map_err(|e| Error::data(format!("report json: {e}")))
    }

    /// Markdown table: variants as rows, tasks as columns, cells
    /// `mean±std` in percent, mirroring the usual AUC summary layout.
    pub fn to_markdown(&self) -> String {
        use crate::data_model::ALL_TASKS;
        use crate::models::ALL_VARIANTS;
        let mut out = String::from("| Method |");
        for task in ALL_TASKS {
            out.push_str(&format!(" {} |", task.report_label()));
        }
        out.push('\n');
        out.push_str("|---|");
        out.push_str(&"---|".repeat(ALL_TASKS.len()));
        out.push('\n');
        for variant in ALL_VARIANTS {
            let row: Vec<&CellReport> =
                self.cells.iter().filter(|c| c.variant == variant).collect();
            if row.is_empty() {
                continue;
            }
            out.push_str(&format!("| {} |", variant.report_label()));
            for task in ALL_TASKS {
                let cell = row.iter().find(|c| c.task == task);
                let text = match cell {
                    Some(c) => match (c.mean, c.std) {
                        (Some(mean), Some(std)) => {
                            let mark = if c.partial { " (partial)" } else { "" };
                            format!("{:.2}±{:.2}{mark}", mean * 100.0, std * 100.0)
                        }
                        _ => "n/a".to_string(),
                    },
                    None => String::new(),
                };
                out.push_str(&format!(" {text} |"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Independent oracle: exhaustive O(n^2) pair counting with half credit
    /// for ties.
    pub(crate) fn auc_pair_counting(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter_map(|(&s, &l)| l.then_some(s))
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter_map(|(&s, &l)| (!l).then_some(s))
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut credit = 0.0;
        for &p in &pos {
            for &q in &neg {
                if p > q {
                    credit += 1.0;
                } else if p == q {
                    credit += 0.5;
                }
            }
        }
        Some(credit / (pos.len() * neg.len()) as f64)
    }

    fn preds(labels: &[usize], probs: &[Vec<f64>]) -> PredictionSet {
        PredictionSet {
            num_classes: probs[0].len(),
            entries: labels
                .iter()
                .zip(probs)
                .enumerate()
                .map(|(i, (&true_class, p))| PatientPrediction {
                    patient_id: format!("p{i:02}"),
                    true_class,
                    probs: p.clone(),
                })
                .collect(),
        }
    }

    #[test]
    fn spec_example_three_of_four_pairs() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        assert_eq!(binary_auc(&scores, &labels).unwrap(), 0.75);
        assert_eq!(auc_pair_counting(&scores, &labels).unwrap(), 0.75);
    }

    #[test]
    fn perfect_separation_and_all_ties() {
        let labels = [false, false, true, true];
        assert_eq!(binary_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(binary_auc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5);
        assert!(binary_auc(&[0.5, 0.6], &[true, true]).is_none());
    }

    #[test]
    fn rank_route_matches_pair_counting_oracle_with_ties() {
        let mut rng = crate::seed::rng(2024);
        for case in 0..200 {
            let n = rng.gen_range(2..=50);
            // Quantized scores force plenty of ties.
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.gen_range(0..8) as f64) / 7.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            // Guarantee both classes.
            labels[0] = true;
            if n > 1 {
                labels[1] = false;
            }
            let fast = binary_auc(&scores, &labels).unwrap();
            let slow = auc_pair_counting(&scores, &labels).unwrap();
            assert!((fast - slow).abs() < 1e-9, "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let mut rng = crate::seed::rng(7);
        let n = 30;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let base = binary_auc(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        assert_eq!(binary_auc(&exp, &labels).unwrap(), base);
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 11.0).collect();
        assert_eq!(binary_auc(&affine, &labels).unwrap(), base);
    }

    #[test]
    fn complement_symmetry() {
        let mut rng = crate::seed::rng(8);
        let n = 25;
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let a = binary_auc(&scores, &labels).unwrap();
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let b = binary_auc(&scores, &flipped).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ovr_perfect_and_uniform() {
        // One-hot predictions of the true label: every class AUC is 1.
        let labels = [0usize, 1, 2, 0, 1, 2];
        let one_hot: Vec<Vec<f64>> = labels
            .iter()
            .map(|&c| {
                let mut p = vec![0.0; 3];
                p[c] = 1.0;
                p
            })
            .collect();
        let result = ovr_mean_auc(&preds(&labels, &one_hot));
        assert_eq!(result.mean, Some(1.0));
        assert!(result.per_class.iter().all(|c| c.auc == Some(1.0)));

        // Uniform probabilities: all ties, AUC one half everywhere.
        let uniform: Vec<Vec<f64>> = labels.iter().map(|_| vec![1.0 / 3.0; 3]).collect();
        let result = ovr_mean_auc(&preds(&labels, &uniform));
        assert_eq!(result.mean, Some(0.5));
    }

    #[test]
    fn two_class_uses_class_one_probability() {
        let labels = [0usize, 1, 0, 1];
        let probs = vec![
            vec![0.9, 0.1],
            vec![0.2, 0.8],
            vec![0.7, 0.3],
            vec![0.4, 0.6],
        ];
        let result = ovr_mean_auc(&preds(&labels, &probs));
        assert_eq!(result.per_class.len(), 1);
        assert_eq!(result.per_class[0].class, 1);
        assert_eq!(result.mean, Some(1.0));
    }

    #[test]
    fn absent_class_is_skipped_and_flagged() {
        let labels = [0usize, 0, 2, 2];
        let probs: Vec<Vec<f64>> = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.2, 0.7],
            vec![0.2, 0.2, 0.6],
        ];
        let result = ovr_mean_auc(&preds(&labels, &probs));
        assert_eq!(result.skipped_classes, vec![1]);
        assert_eq!(result.per_class[1].auc, None);
        assert_eq!(result.mean, Some(1.0));
    }

    #[test]
    fn bootstrap_is_deterministic_and_perfect_classifier_pins_interval() {
        let labels = [0usize, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let probs: Vec<Vec<f64>> = labels
            .iter()
            .map(|&c| if c == 1 { vec![0.1, 0.9] } else { vec![0.9, 0.1] })
            .collect();
        let set = preds(&labels, &probs);
        let a = bootstrap_ci(&set, 1000, 0.05, 99).unwrap();
        let b = bootstrap_ci(&set, 1000, 0.05, 99).unwrap();
        assert_eq!(a, b, "same seed must give bitwise identical CI");
        assert_eq!((a.lower, a.upper), (1.0, 1.0));
        assert_ne!(bootstrap_ci(&set, 1000, 0.05, 100), None);
    }

    #[test]
    fn bootstrap_replicates_replay_by_hand_with_three_iterations() {
        // Independent replay of the documented resampling procedure using
        // the pair-counting oracle for the replicate AUCs.
        let labels = [0usize, 1, 0, 1, 0, 1, 1, 0, 0, 1];
        let mut rng = crate::seed::rng(55);
        let probs: Vec<Vec<f64>> = labels
            .iter()
            .map(|&c| {
                let p1: f64 = if c == 1 { rng.gen_range(0.4..0.9) } else { rng.gen_range(0.1..0.6) };
                vec![1.0 - p1, p1]
            })
            .collect();
        let set = preds(&labels, &probs);
        let seed = 4321;
        let iters = 3;

        let mut expected = Vec::new();
        for r in 0..iters {
            let mut rng = crate::seed::rng_for(seed, &["replicate", &r.to_string()]);
            let auc = loop {
                let idx: Vec<usize> = (0..set.entries.len())
                    .map(|_| rng.gen_range(0..set.entries.len()))
                    .collect();
                let scores: Vec<f64> = idx.iter().map(|&i| set.entries[i].probs[1]).collect();
                let lab: Vec<bool> = idx.iter().map(|&i| set.entries[i].true_class == 1).collect();
                if let Some(v) = auc_pair_counting(&scores, &lab) {
                    break v;
                }
            };
            expected.push(auc);
        }
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let point = ovr_mean_auc(&set).mean.unwrap();
        let want_lower = percentile(&expected, 0.025).min(point);
        let want_upper = percentile(&expected, 0.975).max(point);

        let got = bootstrap_ci(&set, iters, 0.05, seed).unwrap();
        assert_eq!(got.lower, want_lower);
        assert_eq!(got.upper, want_upper);
        assert_eq!(got.skipped_replicates, 0);
    }

    #[test]
    fn bootstrap_undefined_for_single_class_or_tiny_sets() {
        let labels = [1usize, 1, 1];
        let probs: Vec<Vec<f64>> = labels.iter().map(|_| vec![0.3, 0.7]).collect();
        assert_eq!(bootstrap_ci(&preds(&labels, &probs), 100, 0.05, 1), None);
        let one = preds(&[0], &[vec![0.6, 0.4]]);
        assert_eq!(bootstrap_ci(&one, 100, 0.05, 1), None);
    }

    #[test]
    fn fold_aggregation_mean_and_population_std() {
        let folds: Vec<FoldEval> = [0.8, 0.9, 1.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| FoldEval {
                fold: i,
                n_patients: 10,
                mean_auc: Some(v),
                per_class: vec![],
                skipped_classes: vec![],
                ci: None,
            })
            .collect();
        let cell = aggregate_folds(Task::Fibrosis, VariantKind::CtOnly, folds);
        assert!((cell.mean.unwrap() - 0.9).abs() < 1e-12);
        assert!((cell.std.unwrap() - 0.081649658092772603).abs() < 1e-9);
        assert!(!cell.partial);
    }

    #[test]
    fn identical_folds_have_zero_std_and_missing_fold_marks_partial() {
        let fold = |i: usize, v: Option<f64>| FoldEval {
            fold: i,
            n_patients: 10,
            mean_auc: v,
            per_class: vec![],
            skipped_classes: vec![],
            ci: None,
        };
        let cell = aggregate_folds(
            Task::Lobular,
            VariantKind::MidSingle,
            vec![fold(0, Some(0.7)), fold(1, Some(0.7)), fold(2, Some(0.7))],
        );
        assert!(cell.std.unwrap() < 1e-12);
        let cell = aggregate_folds(
            Task::Lobular,
            VariantKind::MidSingle,
            vec![fold(0, Some(0.7)), fold(1, None), fold(2, Some(0.9))],
        );
        assert!(cell.partial);
        assert!((cell.mean.unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn report_json_round_trip_and_markdown_shape() {
        let folds: Vec<FoldEval> = (0..3)
            .map(|i| FoldEval {
                fold: i,
                n_patients: 10,
                mean_auc: Some(0.8 + 0.05 * i as f64),
                per_class: vec![ClassAuc { class: 1, auc: Some(0.8) }],
                skipped_classes: vec![],
                ci: Some(BootstrapCi { lower: 0.7, upper: 0.95, skipped_replicates: 0 }),
            })
            .collect();
        let report = EvalReport {
            cells: vec![aggregate_folds(Task::Steatosis, VariantKind::MidSingle, folds)],
        };
        let json = report.to_json();
        let back = EvalReport::from_json(json.as_bytes()).unwrap();
        assert_eq!(back, report);

        let md = report.to_markdown();
        assert!(md.starts_with("| Method |"));
        assert!(md.contains("Mid-single"));
        assert!(md.contains('±'));

        // Empty report renders the header only.
        let empty = EvalReport::default().to_markdown();
        assert_eq!(empty.lines().count(), 2);
    }
}
