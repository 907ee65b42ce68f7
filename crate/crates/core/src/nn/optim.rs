//! SGD with momentum and L2 weight decay.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Gradients, MlpModel};
use crate::error::{GicError, Result};

/// Serializable optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdParams {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdParams {
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(GicError::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(GicError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(GicError::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub params: SgdParams,
    velocity_w: Vec<Array2<f64>>,
    velocity_b: Vec<Array1<f64>>,
}

impl SgdState {
    /// Zero velocity shaped like `model`'s parameters.
    pub fn new(model: &MlpModel, params: SgdParams) -> Result<Self> {
        params.validate()?;
        Ok(SgdState {
            params,
            velocity_w: model.weights().iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            velocity_b: model.biases().iter().map(|b| Array1::zeros(b.len())).collect(),
        })
    }

    pub fn velocity(&self) -> (&[Array2<f64>], &[Array1<f64>]) {
        (&self.velocity_w, &self.velocity_b)
    }
}

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step(model: &mut MlpModel, grads: &Gradients, state: &mut SgdState) -> Result<()> {
    if grads.weights.len() != model.num_layers()
        || state.velocity_w.len() != model.num_layers()
        || grads
            .weights
            .iter()
            .zip(model.weights())
            .any(|(g, w)| g.dim() != w.dim())
        || grads.biases.iter().zip(model.biases()).any(|(g, b)| g.len() != b.len())
        || state.velocity_w.iter().zip(model.weights()).any(|(v, w)| v.dim() != w.dim())
    {
        return Err(GicError::Shape("gradient/velocity shapes do not match the model".into()));
    }
    for (layer, (gw, gb)) in grads.weights.iter().zip(&grads.biases).enumerate() {
        if gw.iter().chain(gb.iter()).any(|v| !v.is_finite()) {
            return Err(GicError::Optimizer {
                layer,
                message: "non-finite gradient".into(),
            });
        }
    }
    let SgdParams {
        lr,
        momentum,
        weight_decay,
    } = state.params;
    for layer in 0..model.num_layers() {
        {
            let w = &mut model.weights_mut()[layer];
            let v = &mut state.velocity_w[layer];
            ndarray::Zip::from(v).and(&*w).and(&grads.weights[layer]).for_each(|v, &p, &g| {
                *v = momentum * *v + g + weight_decay * p;
            });
            ndarray::Zip::from(w).and(&state.velocity_w[layer]).for_each(|p, &v| *p -= lr * v);
        }
        {
            let b = &mut model.biases_mut()[layer];
            let v = &mut state.velocity_b[layer];
            ndarray::Zip::from(v).and(&*b).and(&grads.biases[layer]).for_each(|v, &p, &g| {
                *v = momentum * *v + g + weight_decay * p;
            });
            ndarray::Zip::from(b).and(&state.velocity_b[layer]).for_each(|p, &v| *p -= lr * v);
        }
        let finite = model.weights()[layer].iter().all(|v| v.is_finite())
            && model.biases()[layer].iter().all(|v| v.is_finite());
        if !finite {
            return Err(GicError::Optimizer {
                layer,
                message: "parameters became non-finite".into(),
            });
        }
    }
    Ok(())
}
