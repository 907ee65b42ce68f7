//! Comparison data built from the training set: error-balanced sampling,
//! boosting with a GIC head, and readjustment of small inferred groups.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::erm::error_set;
use crate::error::{GicError, Result};
use crate::gic::{infer_spurious, train_gic, GicArtifacts, GicConfig};
use crate::invariant::GroupAssignment;
use crate::nn::MlpModel;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonSource {
    Provided,
    SampledFromTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonPlan {
    pub source: ComparisonSource,
    /// Fraction `r` of the training set drawn from each partition.
    pub ratio: f64,
    pub labeled: bool,
    /// Extra rounds whose error partition comes from a GIC head (0, 1 or 2).
    pub boosting_rounds: usize,
    pub seed: u64,
}

impl Default for ComparisonPlan {
    fn default() -> Self {
        ComparisonPlan {
            source: ComparisonSource::Provided,
            ratio: 0.01,
            labeled: true,
            boosting_rounds: 0,
            seed: 0,
        }
    }
}

impl ComparisonPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 0.5) {
            return Err(GicError::Config(format!("sampling ratio must lie in (0, 0.5], got {}", self.ratio)));
        }
        if self.boosting_rounds > 2 {
            return Err(GicError::Config(format!("boosting_rounds must be 0, 1 or 2, got {}", self.boosting_rounds)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonSplit {
    pub comparison: LabeledDataset,
    pub remaining: LabeledDataset,
    /// Rows of the original training set, error picks first.
    pub comparison_indices: Vec<usize>,
    pub remaining_indices: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Draws `floor(r * n)` rows from each side of an error partition.
pub fn sample_from_partition(
    train: &LabeledDataset,
    errors: &[usize],
    non_errors: &[usize],
    ratio: f64,
    seed: u64,
) -> Result<ComparisonSplit> {
    if !(ratio > 0.0) {
        return Err(GicError::Config(format!("sampling ratio must be positive, got {ratio}")));
    }
    if errors.is_empty() {
        return Err(GicError::Construction(
            "the error set is empty (the model fits every training row); provide a comparison set instead".into(),
        ));
    }
    let mut warnings = Vec::new();
    let wanted = (ratio * train.len() as f64).floor() as usize;
    let per_side = wanted.min(errors.len()).min(non_errors.len());
    if per_side < wanted {
        let msg = format!(
            "requested {wanted} rows per partition but error/non-error sets hold {}/{}; drawing {per_side} from each",
            errors.len(),
            non_errors.len()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut r = rng::stream(seed, "comparison/sample");
    let draw = |pool: &[usize], r: &mut rng::Rng| {
        let mut picked: Vec<usize> = sample(r, pool.len(), per_side).into_iter().map(|i| pool[i]).collect();
        picked.sort_unstable();
        picked
    };
    let mut comparison_indices = draw(errors, &mut r);
    comparison_indices.extend(draw(non_errors, &mut r));
    let mut taken = vec![false; train.len()];
    for &i in &comparison_indices {
        taken[i] = true;
    }
    let remaining_indices: Vec<usize> = (0..train.len()).filter(|&i| !taken[i]).collect();
    Ok(ComparisonSplit {
        comparison: train.subset(&comparison_indices)?.renamed("comparison"),
        remaining: train.subset(&remaining_indices)?.renamed("train"),
        comparison_indices,
        remaining_indices,
        warnings,
    })
}

/// Equal-count sampling from the ERM error and non-error sets.
pub fn build_comparison_from_train(
    train: &LabeledDataset,
    erm_model: &MlpModel,
    ratio: f64,
    seed: u64,
) -> Result<ComparisonSplit> {
    let (err, ok) = error_set(erm_model, train)?;
    sample_from_partition(train, &err, &ok, ratio, seed)
}

/// Rows whose hard spurious prediction differs from the most common
/// prediction within their class (ties to the lower attribute id).
pub fn boost_error_partition(train: &LabeledDataset, gic: &GicArtifacts) -> Result<(Vec<usize>, Vec<usize>)> {
    let labels = train.require_labels()?;
    let (hard, probs) = infer_spurious(gic, train)?;
    let a = probs.ncols();
    let mut counts = vec![vec![0usize; a]; train.num_classes()];
    for (&y, &s) in labels.iter().zip(&hard) {
        counts[y][s] += 1;
    }
    let majority: Vec<usize> = counts
        .iter()
        .map(|c| (0..a).fold(0, |best, s| if c[s] > c[best] { s } else { best }))
        .collect();
    Ok((0..train.len()).partition(|&i| hard[i] != majority[labels[i]]))
}

pub fn boost_comparison(train: &LabeledDataset, gic: &GicArtifacts, ratio: f64, seed: u64) -> Result<ComparisonSplit> {
    let (err, ok) = boost_error_partition(train, gic)?;
    sample_from_partition(train, &err, &ok, ratio, seed)
}

/// Round one samples from the ERM error partition (computed on `train_raw`);
/// each boosting round trains GIC on the current (remaining, comparison) pair
/// of `train_repr` and resamples it from the GIC-based partition. Splits are
/// rows of `train_repr`; the two datasets must be row-aligned.
pub fn build_comparison_rounds(
    train_raw: &LabeledDataset,
    train_repr: &LabeledDataset,
    erm_model: &MlpModel,
    plan: &ComparisonPlan,
    gic_cfg: &GicConfig,
) -> Result<Vec<ComparisonSplit>> {
    plan.validate()?;
    if train_raw.len() != train_repr.len() {
        return Err(GicError::Shape(format!(
            "raw and representation datasets have {} and {} rows",
            train_raw.len(),
            train_repr.len()
        )));
    }
    let (err, ok) = error_set(erm_model, train_raw)?;
    let mut rounds = vec![sample_from_partition(train_repr, &err, &ok, plan.ratio, plan.seed)?];
    for round in 1..=plan.boosting_rounds {
        let prev = rounds.last().unwrap();
        let comparison = if plan.labeled { prev.comparison.clone() } else { prev.comparison.without_labels() };
        let gic = train_gic(&prev.remaining, &comparison, gic_cfg)?;
        let seed = rng::derive_seed(plan.seed, &format!("boost/{round}"));
        rounds.push(boost_comparison(train_repr, &gic, plan.ratio, seed)?);
    }
    Ok(rounds)
}

/// Upsamples the two smallest non-empty inferred groups (with replacement)
/// to the size of the second-largest one. Original rows keep their order and
/// the extra copies are appended.
pub fn readjust_comparison(comparison: &LabeledDataset, groups: &GroupAssignment, seed: u64) -> Result<LabeledDataset> {
    readjust_indices(groups, seed).and_then(|idx| comparison.subset(&idx))
}

pub fn readjust_indices(groups: &GroupAssignment, seed: u64) -> Result<Vec<usize>> {
    let members = groups.members();
    let mut nonempty: Vec<usize> = (0..members.len()).filter(|&g| !members[g].is_empty()).collect();
    if nonempty.len() < 3 {
        return Err(GicError::Readjustment(format!(
            "need at least 3 non-empty inferred groups, found {}",
            nonempty.len()
        )));
    }
    nonempty.sort_by_key(|&g| (members[g].len(), g));
    let target = members[nonempty[nonempty.len() - 2]].len();
    let mut r = rng::stream(seed, "comparison/readjust");
    let mut idx: Vec<usize> = (0..groups.len()).collect();
    for &g in &nonempty[..2] {
        let pool = &members[g];
        for _ in pool.len()..target {
            idx.push(pool[r.random_range(0..pool.len())]);
        }
    }
    Ok(idx)
}
