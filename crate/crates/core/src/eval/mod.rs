//! Worst-group accuracy, minority precision/recall, reports and boundary plots.

mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{GicError, Result};
use crate::nn::{argmax_rows, MlpModel};

pub use plot::{plot_boundary_2d, trace_boundary, BoundaryModel, Segment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub per_group: BTreeMap<usize, f64>,
    /// Sample-weighted (overall) accuracy.
    pub average: f64,
    /// Minimum over non-empty groups.
    pub worst: f64,
    /// Group ids with no samples; excluded from `worst`.
    pub empty_groups: Vec<usize>,
}

pub fn worst_group_accuracy(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    num_groups: usize,
) -> Result<GroupAccuracy> {
    if predictions.len() != labels.len() || labels.len() != groups.len() {
        return Err(GicError::Shape("predictions, labels and groups differ in length".into()));
    }
    if predictions.is_empty() {
        return Err(GicError::Input("cannot evaluate an empty dataset".into()));
    }
    let mut correct = vec![0usize; num_groups];
    let mut total = vec![0usize; num_groups];
    for ((&p, &y), &g) in predictions.iter().zip(labels).zip(groups) {
        if g >= num_groups {
            return Err(GicError::Input(format!("group {g} outside [0, {num_groups})")));
        }
        total[g] += 1;
        correct[g] += usize::from(p == y);
    }
    let mut per_group = BTreeMap::new();
    let mut empty_groups = Vec::new();
    for g in 0..num_groups {
        if total[g] == 0 {
            empty_groups.push(g);
        } else {
            per_group.insert(g, correct[g] as f64 / total[g] as f64);
        }
    }
    if !empty_groups.is_empty() {
        log::warn!("groups {empty_groups:?} have no samples and are excluded from the worst-group minimum");
    }
    let worst = per_group.values().copied().fold(f64::INFINITY, f64::min);
    let average = correct.iter().sum::<usize>() as f64 / predictions.len() as f64;
    Ok(GroupAccuracy {
        per_group,
        average,
        worst,
        empty_groups,
    })
}

/// Evaluates a classifier against the dataset's oracle groups.
pub fn evaluate_model(model: &MlpModel, data: &LabeledDataset) -> Result<GroupAccuracy> {
    let preds = argmax_rows(&model.forward(data.features())?);
    worst_group_accuracy(&preds, data.require_labels()?, &data.require_group_ids()?, data.num_groups())
}

/// The `floor(G / 2)` smallest groups by count (ties to the lower id), sorted by id.
pub fn default_minority_groups(oracle_groups: &[usize], num_groups: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_groups];
    for &g in oracle_groups {
        if g < num_groups {
            counts[g] += 1;
        }
    }
    let mut order: Vec<usize> = (0..num_groups).collect();
    order.sort_by_key(|&g| (counts[g], g));
    let mut m: Vec<usize> = order.into_iter().take(num_groups / 2).collect();
    m.sort_unstable();
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub minority: Vec<usize>,
    /// No sample was assigned to a minority group; precision is reported as 0.
    pub precision_undefined: bool,
}

/// Micro-averaged precision and recall of the inferred minority groups.
pub fn minority_precision_recall(
    inferred: &[usize],
    oracle: &[usize],
    num_groups: usize,
    minority: Option<&[usize]>,
) -> Result<PrecisionRecall> {
    if inferred.len() != oracle.len() {
        return Err(GicError::Shape(format!("{} inferred vs {} oracle groups", inferred.len(), oracle.len())));
    }
    let minority = minority.map_or_else(|| default_minority_groups(oracle, num_groups), <[usize]>::to_vec);
    let is_min = |g: usize| minority.contains(&g);
    let (mut assigned, mut assigned_ok, mut truth, mut truth_ok) = (0usize, 0usize, 0usize, 0usize);
    for (&gh, &g) in inferred.iter().zip(oracle) {
        if is_min(gh) {
            assigned += 1;
            assigned_ok += usize::from(gh == g);
        }
        if is_min(g) {
            truth += 1;
            truth_ok += usize::from(gh == g);
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(PrecisionRecall {
        precision: ratio(assigned_ok, assigned),
        recall: ratio(truth_ok, truth),
        minority,
        precision_undefined: assigned == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_group_accuracy: BTreeMap<String, f64>,
    pub average_accuracy: f64,
    pub worst_group_accuracy: f64,
    pub minority_precision: Option<f64>,
    pub minority_recall: Option<f64>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn new(acc: &GroupAccuracy, pr: Option<&PrecisionRecall>, config: serde_json::Value, seed: u64) -> Self {
        let mut warnings = Vec::new();
        if !acc.empty_groups.is_empty() {
            warnings.push(format!("empty oracle groups excluded: {:?}", acc.empty_groups));
        }
        if pr.is_some_and(|p| p.precision_undefined) {
            warnings.push("no sample assigned to a minority group; precision reported as 0".into());
        }
        EvalReport {
            per_group_accuracy: acc.per_group.iter().map(|(g, a)| (g.to_string(), *a)).collect(),
            average_accuracy: acc.average,
            worst_group_accuracy: acc.worst,
            minority_precision: pr.map(|p| p.precision),
            minority_recall: pr.map(|p| p.recall),
            config,
            seed,
            warnings,
        }
    }

    /// Pretty JSON with keys sorted at every level.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)?)
    }

    pub fn emit(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerated_groups() {
        let acc = worst_group_accuracy(&[1, 1, 0, 1], &[1, 0, 0, 1], &[0, 0, 0, 1], 2).unwrap();
        assert!((acc.per_group[&0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(acc.per_group[&1], 1.0);
        assert!((acc.worst - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(acc.average, 0.75);
    }

    #[test]
    fn empty_group_is_listed_and_excluded() {
        let acc = worst_group_accuracy(&[0, 1], &[0, 0], &[0, 2], 3).unwrap();
        assert_eq!(acc.empty_groups, vec![1]);
        assert_eq!(acc.worst, 0.0);
    }

    #[test]
    fn eight_samples_with_two_swaps() {
        // oracle sizes: g0=3, g1=1, g2=1, g3=3 -> minority {1, 2}
        let oracle = [0, 0, 0, 1, 2, 3, 3, 3];
        // swaps: row 3 (g1 -> g0) and row 5 (g3 -> g2)
        let inferred = [0, 0, 0, 0, 2, 2, 3, 3];
        let pr = minority_precision_recall(&inferred, &oracle, 4, None).unwrap();
        assert_eq!(pr.minority, vec![1, 2]);
        // assigned to minority: rows 4, 5 -> 1 correct; true minority rows 3, 4 -> 1 correct
        assert_eq!((pr.precision, pr.recall), (0.5, 0.5));
    }

    #[test]
    fn never_predicting_minority_flags_precision() {
        let pr = minority_precision_recall(&[0, 0, 0], &[0, 0, 1], 2, None).unwrap();
        assert_eq!(pr.recall, 0.0);
        assert!(pr.precision_undefined);
    }

    #[test]
    fn report_round_trips_with_sorted_keys() {
        let acc = worst_group_accuracy(&[0, 1], &[0, 1], &[0, 1], 2).unwrap();
        let r = EvalReport::new(&acc, None, serde_json::json!({"b": 1, "a": 2}), 7);
        let text = r.to_json().unwrap();
        assert!(text.find("\"average_accuracy\"").unwrap() < text.find("\"worst_group_accuracy\"").unwrap());
        assert!(text.find("\"a\"").unwrap() < text.find("\"b\"").unwrap());
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }
}
