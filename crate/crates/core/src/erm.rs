//! Stage 1: ERM training, representation extraction and error sets.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{GicError, Result};
use crate::nn::{argmax_rows, fit_classifier, EpochStat, FitConfig, MlpModel};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ErmArtifacts {
    pub model: MlpModel,
    /// Layer whose output is the representation (the penultimate layer);
    /// `None` for a linear model, which has no hidden representation.
    pub feature_layer_index: Option<usize>,
    pub train_curve: Vec<EpochStat>,
}

impl ErmArtifacts {
    pub fn from_model(model: MlpModel) -> Self {
        let feature_layer_index = model.num_layers().checked_sub(2);
        ErmArtifacts {
            model,
            feature_layer_index,
            train_curve: Vec::new(),
        }
    }
}

/// Trains a softmax classifier with hidden relu layers on `arch`
/// (`arch[0]` = input dim, last = class count).
pub fn train_erm(data: &LabeledDataset, arch: &[usize], cfg: &FitConfig, seed: u64) -> Result<ErmArtifacts> {
    let labels = data.require_labels()?;
    if arch.first() != Some(&data.dim()) {
        return Err(GicError::Shape(format!("architecture {arch:?} does not start at input dim {}", data.dim())));
    }
    if arch.last().is_some_and(|&c| c < data.num_classes()) {
        return Err(GicError::Shape(format!("architecture {arch:?} has fewer outputs than classes")));
    }
    let mut model = MlpModel::classifier(arch, &mut rng::stream(seed, "erm/init"))?;
    let mut batches = rng::stream(seed, "erm/batches");
    let train_curve = fit_classifier(&mut model, data.features(), labels, cfg, &mut batches, |_, _| Ok(()))?;
    let mut art = ErmArtifacts::from_model(model);
    art.train_curve = train_curve;
    Ok(art)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extractor {
    Identity,
    Penultimate,
}

/// Replaces the features with the representation; metadata is carried through.
pub fn extract_features(art: &ErmArtifacts, data: &LabeledDataset, mode: Extractor) -> Result<LabeledDataset> {
    if data.dim() != art.model.input_dim() {
        return Err(GicError::Shape(format!(
            "dataset has dim {}, model expects {}",
            data.dim(),
            art.model.input_dim()
        )));
    }
    match mode {
        Extractor::Identity => Ok(data.clone()),
        Extractor::Penultimate => {
            let idx = art
                .feature_layer_index
                .ok_or_else(|| GicError::Shape("a linear model has no penultimate representation".into()))?;
            data.with_features(art.model.layer_activations(data.features(), idx + 1)?)
        }
    }
}

/// Partition of row indices into (misclassified, correctly classified).
pub fn error_set(model: &MlpModel, data: &LabeledDataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let labels = data.require_labels()?;
    let pred = argmax_rows(&model.forward(data.features())?);
    Ok((0..data.len()).partition(|&i| pred[i] != labels[i]))
}

/// Per-column affine standardization fitted on one dataset and reused on others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics; constant columns get unit scale.
    pub fn fit(x: &Array2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(GicError::Input("cannot standardize an empty matrix".into()));
        }
        let mean = x.mean_axis(Axis(0)).unwrap();
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Ok(Standardizer {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(GicError::Shape(format!("standardizer fitted on {} columns, got {}", self.mean.len(), x.ncols())));
        }
        let (m, s) = (Array1::from(self.mean.clone()), Array1::from(self.std.clone()));
        Ok((x - &m) / &s)
    }

    pub fn apply_dataset(&self, data: &LabeledDataset) -> Result<LabeledDataset> {
        data.with_features(self.apply(data.features())?)
    }

    /// Rewrites the first layer of a model trained on standardized inputs so it
    /// accepts raw inputs: `W' = W / std`, `b' = b - W' mean`.
    pub fn fold_into(&self, model: &MlpModel) -> Result<MlpModel> {
        if model.input_dim() != self.mean.len() {
            return Err(GicError::Shape(format!(
                "standardizer has {} columns, model expects {}",
                self.mean.len(),
                model.input_dim()
            )));
        }
        let mut out = model.clone();
        let (m, s) = (Array1::from(self.mean.clone()), Array1::from(self.std.clone()));
        let w = &out.weights()[0] / &s;
        let shift = w.dot(&m);
        out.biases_mut()[0] -= &shift;
        out.weights_mut()[0] = w;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, SgdParams};
    use ndarray::array;

    #[test]
    fn constant_class_zero_errs_on_the_ones() {
        let m = MlpModel::from_parts(vec![array![[0.0], [0.0]]], vec![array![1.0, 0.0]], vec![Activation::Softmax])
            .unwrap();
        let d = LabeledDataset::new("d", Array2::zeros((5, 1)), Some(vec![0, 1, 0, 1, 0]), None).unwrap();
        let (err, ok) = error_set(&m, &d).unwrap();
        assert_eq!(err, vec![1, 3]);
        assert_eq!(ok, vec![0, 2, 4]);
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let d = LabeledDataset::new("d", array![[0.0, 1.0], [1.0, 0.0]], Some(vec![0, 1]), None).unwrap();
        let cfg = FitConfig {
            epochs: 0,
            batch_size: Some(1),
            sgd: SgdParams::new(0.1, 0.9, 0.0),
        };
        let art = train_erm(&d, &[2, 3, 2], &cfg, 5).unwrap();
        let init = MlpModel::classifier(&[2, 3, 2], &mut rng::stream(5, "erm/init")).unwrap();
        assert_eq!(art.model, init);
        assert!(art.train_curve.is_empty());
    }

    #[test]
    fn standardized_columns_have_zero_mean_unit_variance() {
        let x = array![[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]];
        let s = Standardizer::fit(&x).unwrap();
        let z = s.apply(&x).unwrap();
        assert!(z.column(0).sum().abs() < 1e-12);
        assert!((z.column(0).mapv(|v| v * v).sum() / 3.0 - 1.0).abs() < 1e-12);
        assert_eq!(z.column(1).to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn folded_model_on_raw_inputs_matches_model_on_standardized_inputs() {
        let x = array![[1.0, 5.0], [3.0, 7.0], [5.0, 2.0]];
        let s = Standardizer::fit(&x).unwrap();
        let m = MlpModel::classifier(&[2, 3, 2], &mut rng::stream(1, "t")).unwrap();
        let folded = s.fold_into(&m).unwrap();
        let a = m.forward(&s.apply(&x).unwrap()).unwrap();
        let b = folded.forward(&x).unwrap();
        assert!((a - b).iter().all(|d| d.abs() < 1e-12));
    }
}
