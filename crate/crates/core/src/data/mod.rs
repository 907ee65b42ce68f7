//! Datasets, file formats and the synthetic generators.

mod io;
mod synth;

use ndarray::{Array2, Axis};

use crate::error::{GicError, Result};

pub use io::{load_dataset, save_dataset, DataFormat};
pub use synth::{
    gen_synth_spurious, gen_toy2d, largest_remainder_counts, SynthSplit, SynthSplits, SynthSpuriousSpec, Toy2dGroup,
    Toy2dSpec,
};

/// A feature matrix with optional class labels and oracle spurious labels.
///
/// Group ids are never stored; they are always recomputed as `y * A + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    features: Array2<f64>,
    labels: Option<Vec<usize>>,
    spurious: Option<Vec<usize>>,
    num_classes: usize,
    num_spurious: usize,
}

fn cardinality(values: Option<&[usize]>) -> usize {
    values.and_then(|v| v.iter().max()).map_or(2, |&m| (m + 1).max(2))
}

impl LabeledDataset {
    /// Class and spurious cardinalities are inferred (at least 2 each).
    pub fn new(
        name: impl Into<String>,
        features: Array2<f64>,
        labels: Option<Vec<usize>>,
        spurious: Option<Vec<usize>>,
    ) -> Result<Self> {
        let c = cardinality(labels.as_deref());
        let a = cardinality(spurious.as_deref());
        Self::with_cardinalities(name, features, labels, spurious, c, a)
    }

    pub fn with_cardinalities(
        name: impl Into<String>,
        features: Array2<f64>,
        labels: Option<Vec<usize>>,
        spurious: Option<Vec<usize>>,
        num_classes: usize,
        num_spurious: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        for (col, values) in [("labels", &labels), ("spurious", &spurious)] {
            if let Some(v) = values {
                if v.len() != n {
                    return Err(GicError::Shape(format!("{col} has {} entries for {n} rows", v.len())));
                }
            }
        }
        if num_classes < 2 || num_spurious < 2 {
            return Err(GicError::Spec(format!(
                "need at least 2 classes and 2 spurious values, got C={num_classes}, A={num_spurious}"
            )));
        }
        if let Some(&y) = labels.as_deref().and_then(|v| v.iter().find(|&&y| y >= num_classes)) {
            return Err(GicError::Input(format!("label {y} outside [0, {num_classes})")));
        }
        if let Some(&a) = spurious.as_deref().and_then(|v| v.iter().find(|&&a| a >= num_spurious)) {
            return Err(GicError::Input(format!("spurious label {a} outside [0, {num_spurious})")));
        }
        Ok(LabeledDataset {
            name: name.into(),
            features,
            labels,
            spurious,
            num_classes,
            num_spurious,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn spurious(&self) -> Option<&[usize]> {
        self.spurious.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_spurious(&self) -> usize {
        self.num_spurious
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes * self.num_spurious
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels().ok_or_else(|| GicError::Input(format!("dataset `{}` carries no class labels", self.name)))
    }

    pub fn require_spurious(&self) -> Result<&[usize]> {
        self.spurious()
            .ok_or_else(|| GicError::Input(format!("dataset `{}` carries no oracle spurious labels", self.name)))
    }

    /// Oracle group ids `g = y * A + a`, when both columns are present.
    pub fn group_ids(&self) -> Option<Vec<usize>> {
        let (y, a) = (self.labels()?, self.spurious()?);
        Some(y.iter().zip(a).map(|(&y, &a)| y * self.num_spurious + a).collect())
    }

    pub fn require_group_ids(&self) -> Result<Vec<usize>> {
        self.group_ids()
            .ok_or_else(|| GicError::Input(format!("dataset `{}` carries no oracle groups", self.name)))
    }

    /// Row counts per oracle group (length `C * A`).
    pub fn group_counts(&self) -> Option<Vec<usize>> {
        let mut counts = vec![0; self.num_groups()];
        for g in self.group_ids()? {
            counts[g] += 1;
        }
        Some(counts)
    }

    /// Copies rows in the given order; duplicates are allowed.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(GicError::Index {
                index: bad,
                len: self.len(),
            });
        }
        let pick = |v: &Option<Vec<usize>>| v.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect());
        Ok(LabeledDataset {
            name: self.name.clone(),
            features: self.features.select(Axis(0), indices),
            labels: pick(&self.labels),
            spurious: pick(&self.spurious),
            num_classes: self.num_classes,
            num_spurious: self.num_spurious,
        })
    }

    /// Same metadata, new feature matrix (one row per sample).
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.len() {
            return Err(GicError::Shape(format!(
                "replacement features have {} rows, dataset has {}",
                features.nrows(),
                self.len()
            )));
        }
        Ok(LabeledDataset {
            features,
            ..self.clone()
        })
    }

    /// Drops class labels (used for unlabeled comparison data).
    pub fn without_labels(&self) -> Self {
        LabeledDataset {
            labels: None,
            ..self.clone()
        }
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Row-wise concatenation; metadata columns must be present in both or neither.
    pub fn concat(&self, other: &LabeledDataset) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(GicError::Shape(format!("feature dims {} vs {}", self.dim(), other.dim())));
        }
        let join = |a: &Option<Vec<usize>>, b: &Option<Vec<usize>>, what: &str| match (a, b) {
            (Some(a), Some(b)) => Ok(Some(a.iter().chain(b).copied().collect())),
            (None, None) => Ok(None),
            _ => Err(GicError::Input(format!("{what} present in only one dataset"))),
        };
        let features = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .map_err(|e| GicError::Shape(e.to_string()))?;
        Self::with_cardinalities(
            self.name.clone(),
            features,
            join(&self.labels, &other.labels, "labels")?,
            join(&self.spurious, &other.spurious, "spurious labels")?,
            self.num_classes.max(other.num_classes),
            self.num_spurious.max(other.num_spurious),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> LabeledDataset {
        LabeledDataset::new("tiny", array![[1.0, 2.0], [3.0, 4.0]], Some(vec![0, 1]), Some(vec![1, 0])).unwrap()
    }

    #[test]
    fn full_index_range_is_identity() {
        let d = tiny();
        assert_eq!(d.subset(&[0, 1]).unwrap(), d);
    }

    #[test]
    fn empty_indices_give_empty_dataset() {
        let s = tiny().subset(&[]).unwrap();
        assert_eq!(s.len(), 0);
        assert_eq!(s.dim(), 2);
        assert_eq!(s.labels(), Some(&[][..]));
    }

    #[test]
    fn duplicate_indices_upsample() {
        let s = tiny().subset(&[0, 0, 1]).unwrap();
        assert_eq!(s.features(), &array![[1.0, 2.0], [1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(s.labels().unwrap(), &[0, 0, 1]);
        assert_eq!(s.spurious().unwrap(), &[1, 1, 0]);
    }

    #[test]
    fn out_of_range_index_is_an_error() {
        assert!(matches!(tiny().subset(&[2]), Err(GicError::Index { index: 2, len: 2 })));
    }

    #[test]
    fn group_ids_follow_labels() {
        let d = tiny();
        assert_eq!(d.group_ids().unwrap(), vec![1, 2]);
        assert_eq!(d.group_counts().unwrap(), vec![0, 1, 1, 0]);
    }

    #[test]
    fn mismatched_columns_are_rejected() {
        assert!(LabeledDataset::new("x", Array2::zeros((2, 1)), Some(vec![0]), None).is_err());
    }
}
