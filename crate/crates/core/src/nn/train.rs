//! Minibatch training loop for softmax classifiers.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, sgd_step, MlpModel, SgdParams, SgdState};
use crate::error::{GicError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub sgd: SgdParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Index batches for one epoch: shuffled once with `rng`, last partial batch kept.
/// Full-batch mode keeps the natural order and does not touch the RNG.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: Option<usize>, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    match batch_size {
        None => vec![idx],
        Some(b) => {
            idx.shuffle(rng);
            idx.chunks(b.max(1)).map(|c| c.to_vec()).collect()
        }
    }
}

/// Trains `model` with mean cross-entropy. `on_epoch` sees the model after
/// every epoch (1-based) and may abort training by returning an error.
pub fn fit_classifier<R, F>(
    model: &mut MlpModel,
    x: &Array2<f64>,
    y: &[usize],
    cfg: &FitConfig,
    rng: &mut R,
    mut on_epoch: F,
) -> Result<Vec<EpochStat>>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &MlpModel) -> Result<()>,
{
    if x.nrows() != y.len() {
        return Err(GicError::Shape(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    let mut state = SgdState::new(model, cfg.sgd)?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for batch in epoch_batches(x.nrows(), cfg.batch_size, rng) {
            if batch.is_empty() {
                continue;
            }
            let xb = x.select(Axis(0), &batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let cache = model.forward_cached(&xb)?;
            let loss = cross_entropy(cache.output(), &yb)?;
            if !loss.loss.is_finite() {
                return Err(GicError::Training {
                    epoch,
                    message: "non-finite loss".into(),
                });
            }
            total_loss += loss.loss * batch.len() as f64;
            correct += argmax_rows(cache.output()).iter().zip(&yb).filter(|(p, t)| p == t).count();
            let grads = model.backward_from_logits(&cache, &loss.grad_logits)?;
            sgd_step(model, &grads, &mut state).map_err(|e| GicError::Training {
                epoch,
                message: e.to_string(),
            })?;
        }
        let n = x.nrows().max(1) as f64;
        curve.push(EpochStat {
            epoch,
            loss: total_loss / n,
            accuracy: correct as f64 / n,
        });
        on_epoch(epoch, model)?;
    }
    Ok(curve)
}
