//! Cross-entropy losses (nats) with gradients wrt logits.

use ndarray::{Array2, Axis};

use super::PROB_FLOOR;
use crate::error::{GicError, Result};

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_logits: Array2<f64>,
    /// Number of probabilities that fell below [`PROB_FLOOR`] and were clamped.
    pub clamped: usize,
}

fn check_probs(probs: &Array2<f64>) -> Result<()> {
    for (i, row) in probs.rows().into_iter().enumerate() {
        let s = row.sum();
        if !s.is_finite() || (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(GicError::Input(format!("row {i} is not a probability distribution (sum {s})")));
        }
    }
    Ok(())
}

fn floored_ln(p: f64, clamped: &mut usize) -> f64 {
    if p < PROB_FLOOR {
        *clamped += 1;
        PROB_FLOOR.ln()
    } else {
        p.ln()
    }
}

/// Mean negative log-likelihood. The gradient wrt logits is `(probs - onehot) / n`.
pub fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> Result<LossOutput> {
    let n = probs.nrows();
    let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    weighted_cross_entropy(probs, labels, &vec![inv_n; n])
}

/// `sum_i w_i * (-ln p_i[y_i])` with gradient `w_i * (p_i - onehot(y_i))`.
pub fn weighted_cross_entropy(probs: &Array2<f64>, labels: &[usize], weights: &[f64]) -> Result<LossOutput> {
    let (n, c) = probs.dim();
    if labels.len() != n || weights.len() != n {
        return Err(GicError::Shape(format!(
            "{} probability rows, {} labels, {} weights",
            n,
            labels.len(),
            weights.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(GicError::Input(format!("label {bad} outside [0, {c})")));
    }
    check_probs(probs)?;
    let mut clamped = 0;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        loss -= w * floored_ln(probs[[i, y]], &mut clamped);
        grad[[i, y]] -= 1.0;
        grad.row_mut(i).mapv_inplace(|v| v * w);
    }
    Ok(LossOutput {
        loss,
        grad_logits: grad,
        clamped,
    })
}

/// Cross-entropy against soft targets (rows of `targets` are distributions),
/// averaged over rows. Gradient wrt logits is `(probs - targets) / n`.
pub fn soft_cross_entropy(probs: &Array2<f64>, targets: &Array2<f64>) -> Result<LossOutput> {
    if probs.dim() != targets.dim() {
        return Err(GicError::Shape(format!("probs {:?} vs targets {:?}", probs.dim(), targets.dim())));
    }
    check_probs(probs)?;
    check_probs(targets)?;
    let n = probs.nrows();
    let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut clamped = 0;
    let mut loss = 0.0;
    for (p_row, t_row) in probs.rows().into_iter().zip(targets.rows()) {
        for (&p, &t) in p_row.iter().zip(t_row.iter()) {
            if t != 0.0 {
                loss -= inv_n * t * floored_ln(p, &mut clamped);
            }
        }
    }
    let mut grad = probs - targets;
    grad.mapv_inplace(|v| v * inv_n);
    Ok(LossOutput {
        loss,
        grad_logits: grad,
        clamped,
    })
}

/// Jacobian-vector product of the row-wise softmax: `p * (g - <g, p>)`.
pub fn softmax_backward(probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Array2<f64> {
    let dot = (probs * grad_probs).sum_axis(Axis(1));
    let mut out = grad_probs.clone();
    for (mut row, d) in out.rows_mut().into_iter().zip(dot.iter()) {
        row.mapv_inplace(|g| g - d);
    }
    out * probs
}
