//! Minimal dense network engine with hand-derived gradients.
//!
//! Everything downstream (ERM extractor, GIC head, MINE statistics networks,
//! robust models) trains through [`MlpModel`]. Weights are stored row-major
//! with shape `(out_dim, in_dim)`; batches are `(n, dim)` matrices.

pub(crate) mod checkpoint;
pub mod loss;
pub mod optim;
pub mod train;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GicError, Result};

pub use loss::{cross_entropy, soft_cross_entropy, softmax_backward, weighted_cross_entropy, LossOutput};
pub use optim::{sgd_step, SgdParams, SgdState};
pub use train::{argmax_rows, fit_classifier, EpochStat, FitConfig};

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    Identity,
}

impl Activation {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Softmax => 2,
            Activation::Identity => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Sigmoid),
            2 => Some(Activation::Softmax),
            3 => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => pre.mapv(|v| v.max(0.0)),
            Activation::Sigmoid => pre.mapv(sigmoid),
            Activation::Identity => pre.clone(),
            Activation::Softmax => softmax_rows(pre),
        }
    }

    /// Maps a gradient wrt this layer's output to a gradient wrt its pre-activation.
    fn backward(self, pre: &Array2<f64>, post: &Array2<f64>, grad_post: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => grad_post.clone(),
            Activation::Relu => {
                let mut g = grad_post.clone();
                g.zip_mut_with(pre, |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                g
            }
            Activation::Sigmoid => {
                let mut g = grad_post.clone();
                g.zip_mut_with(post, |g, &s| *g *= s * (1.0 - s));
                g
            }
            Activation::Softmax => softmax_backward(post, grad_post),
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    activations: Vec<Activation>,
}

/// Per-layer activations recorded by [`MlpModel::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_dims: Vec<usize>,
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().unwrap_or(&self.input)
    }

    /// Activations entering layer `index` (0 = the raw input).
    pub fn layer_input(&self, index: usize) -> &Array2<f64> {
        if index == 0 {
            &self.input
        } else {
            &self.post[index - 1]
        }
    }

    pub fn rows(&self) -> usize {
        self.input.nrows()
    }
}

/// Parameter gradients plus the gradient wrt the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel, rows: usize) -> Self {
        Gradients {
            weights: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: model.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            input: Array2::zeros((rows, model.input_dim())),
        }
    }

    /// Adds parameter gradients of `other`; input gradients are left untouched.
    pub fn add_params(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * factor);
        }
        self.input.mapv_inplace(|v| v * factor);
    }

    /// Parameter gradients in [`MlpModel::params_flat`] order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

impl MlpModel {
    /// Builds a model with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(layer_dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        validate_dims(layer_dims, activations)?;
        let mut weights = Vec::with_capacity(activations.len());
        let mut biases = Vec::with_capacity(activations.len());
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_out, fan_in), || (2.0 * rng.random::<f64>() - 1.0) * limit);
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activations: activations.to_vec(),
        })
    }

    /// Relu hidden layers and a softmax head.
    pub fn classifier<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(GicError::Config("a classifier needs at least two layer dims".into()));
        }
        let mut acts = vec![Activation::Relu; layer_dims.len() - 2];
        acts.push(Activation::Softmax);
        Self::new(layer_dims, &acts, rng)
    }

    pub fn from_parts(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        activations: Vec<Activation>,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() || weights.len() != activations.len() {
            return Err(GicError::Shape("weights, biases and activations must have equal nonzero length".into()));
        }
        let mut dims = vec![weights[0].ncols()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *dims.last().unwrap() || b.len() != w.nrows() {
                return Err(GicError::Shape(format!("layer {i} shapes do not chain")));
            }
            dims.push(w.nrows());
        }
        validate_dims(&dims, &activations)?;
        Ok(MlpModel {
            layer_dims: dims,
            weights,
            biases,
            activations,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, batch: &Array2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(GicError::Shape(format!(
                "batch has {} columns, model expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        if let Some(pos) = batch.iter().position(|v| !v.is_finite()) {
            return Err(GicError::Input(format!(
                "non-finite value at row {}, column {}",
                pos / batch.ncols().max(1),
                pos % batch.ncols().max(1)
            )));
        }
        Ok(())
    }

    fn affine(&self, layer: usize, input: &Array2<f64>) -> Array2<f64> {
        let mut pre = input.dot(&self.weights[layer].t());
        pre += &self.biases[layer];
        pre
    }

    pub fn forward(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(batch)?;
        let mut act = batch.clone();
        for (layer, activation) in self.activations.iter().enumerate() {
            act = activation.apply(&self.affine(layer, &act));
        }
        Ok(act)
    }

    /// Pre-activation outputs of the last layer.
    pub fn logits(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        let cache = self.forward_cached(batch)?;
        Ok(cache.pre.last().unwrap().clone())
    }

    /// Activations entering layer `index`; `index = num_layers() - 1` is the
    /// input to the final head.
    pub fn layer_activations(&self, batch: &Array2<f64>, index: usize) -> Result<Array2<f64>> {
        if index >= self.num_layers() {
            return Err(GicError::Shape(format!("layer index {index} out of range")));
        }
        self.check_input(batch)?;
        let mut act = batch.clone();
        for layer in 0..index {
            act = self.activations[layer].apply(&self.affine(layer, &act));
        }
        Ok(act)
    }

    pub fn forward_cached(&self, batch: &Array2<f64>) -> Result<ForwardCache> {
        self.check_input(batch)?;
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.num_layers());
        for (layer, activation) in self.activations.iter().enumerate() {
            let z = self.affine(layer, post.last().unwrap_or(batch));
            post.push(activation.apply(&z));
            pre.push(z);
        }
        Ok(ForwardCache {
            layer_dims: self.layer_dims.clone(),
            input: batch.clone(),
            pre,
            post,
        })
    }

    fn check_cache(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<()> {
        if cache.layer_dims != self.layer_dims || cache.pre.len() != self.num_layers() {
            return Err(GicError::State("no forward cache recorded for this model".into()));
        }
        if upstream.dim() != (cache.rows(), self.output_dim()) {
            return Err(GicError::Shape(format!(
                "upstream gradient {:?} does not match output ({}, {})",
                upstream.dim(),
                cache.rows(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Backpropagates a gradient taken wrt the final activations.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<Gradients> {
        self.check_cache(cache, upstream)?;
        let last = self.num_layers() - 1;
        let delta = self.activations[last].backward(&cache.pre[last], &cache.post[last], upstream);
        Ok(self.backprop_from(cache, delta))
    }

    /// Backpropagates a gradient taken wrt the final pre-activations (logits).
    pub fn backward_from_logits(&self, cache: &ForwardCache, grad_logits: &Array2<f64>) -> Result<Gradients> {
        self.check_cache(cache, grad_logits)?;
        Ok(self.backprop_from(cache, grad_logits.clone()))
    }

    fn backprop_from(&self, cache: &ForwardCache, mut delta: Array2<f64>) -> Gradients {
        let n = self.num_layers();
        let mut grad_w = vec![Array2::zeros((0, 0)); n];
        let mut grad_b = vec![Array1::zeros(0); n];
        for layer in (0..n).rev() {
            let input = cache.layer_input(layer);
            grad_w[layer] = delta.t().dot(input);
            grad_b[layer] = delta.sum_axis(Axis(0));
            let grad_input = delta.dot(&self.weights[layer]);
            delta = if layer > 0 {
                self.activations[layer - 1].backward(&cache.pre[layer - 1], &cache.post[layer - 1], &grad_input)
            } else {
                grad_input
            };
        }
        Gradients {
            weights: grad_w,
            biases: grad_b,
            input: delta,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(GicError::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|v| *v = *it.next().unwrap());
            b.iter_mut().for_each(|v| *v = *it.next().unwrap());
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn validate_dims(layer_dims: &[usize], activations: &[Activation]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(GicError::Config("a model needs at least an input and an output dim".into()));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(GicError::Config(format!("layer dims must be positive: {layer_dims:?}")));
    }
    if activations.len() + 1 != layer_dims.len() {
        return Err(GicError::Config(format!(
            "{} activations for {} layers",
            activations.len(),
            layer_dims.len() - 1
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn identity_layer_passes_input_through() {
        let m = MlpModel::from_parts(vec![Array2::eye(2)], vec![Array1::zeros(2)], vec![Activation::Identity]).unwrap();
        let out = m.forward(&array![[2.0, -3.0]]).unwrap();
        assert_eq!(out, array![[2.0, -3.0]]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let m = MlpModel::from_parts(vec![Array2::zeros((2, 3))], vec![Array1::zeros(2)], vec![Activation::Softmax])
            .unwrap();
        let out = m.forward(&array![[0.3, 1.0, -2.0]]).unwrap();
        assert_eq!(out, array![[0.5, 0.5]]);
    }

    #[test]
    fn two_layer_relu_matches_hand_propagation() {
        // h = relu(W1 x + b1), y = W2 h + b2
        let w1 = array![[1.0, -1.0], [0.5, 2.0], [-1.0, 0.0]];
        let b1 = array![0.0, -1.0, 0.5];
        let w2 = array![[1.0, 1.0, 1.0], [2.0, -1.0, 0.5]];
        let b2 = array![0.1, 0.0];
        let m = MlpModel::from_parts(
            vec![w1, w2],
            vec![b1, b2],
            vec![Activation::Relu, Activation::Identity],
        )
        .unwrap();
        // x = (1, 2): pre1 = (-1, 3.5, -0.5) -> h = (0, 3.5, 0)
        // y = (3.5 + 0.1, -3.5)
        let out = m.forward(&array![[1.0, 2.0]]).unwrap();
        assert!((out[[0, 0]] - 3.6).abs() < 1e-15);
        assert!((out[[0, 1]] + 3.5).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_bad_shapes_and_values() {
        let mut r = rng::stream(0, "t");
        let m = MlpModel::classifier(&[3, 2], &mut r).unwrap();
        assert!(matches!(m.forward(&Array2::zeros((1, 2))), Err(GicError::Shape(_))));
        assert!(matches!(m.forward(&array![[0.0, f64::NAN, 1.0]]), Err(GicError::Input(_))));
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut r = rng::stream(3, "t");
        let m = MlpModel::classifier(&[4, 8, 5], &mut r).unwrap();
        let x = Array2::from_shape_fn((50, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let out = m.forward(&x).unwrap();
        for row in out.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng::stream(1, "t");
        let m = MlpModel::classifier(&[3, 4, 2], &mut r).unwrap();
        let x = array![[0.1, -0.2, 0.3], [1.0, 2.0, -1.0]];
        let cache = m.forward_cached(&x).unwrap();
        let g = m.backward(&cache, &Array2::zeros((2, 2))).unwrap();
        assert!(g.params_flat().iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logistic_gradient_is_residual_times_input() {
        // One sigmoid unit with BCE loss: dL/dw = (p - y) x.
        let w = array![[0.3, -0.7]];
        let b = array![0.2];
        let m = MlpModel::from_parts(vec![w], vec![b], vec![Activation::Sigmoid]).unwrap();
        let x = array![[1.5, 0.5]];
        let y = 1.0;
        let cache = m.forward_cached(&x).unwrap();
        let p = cache.output()[[0, 0]];
        // dBCE/dp = -(y/p) + (1-y)/(1-p)
        let upstream = array![[-(y / p) + (1.0 - y) / (1.0 - p)]];
        let g = m.backward(&cache, &upstream).unwrap();
        assert!((g.weights[0][[0, 0]] - (p - y) * 1.5).abs() < 1e-12);
        assert!((g.weights[0][[0, 1]] - (p - y) * 0.5).abs() < 1e-12);
        assert!((g.biases[0][0] - (p - y)).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let mut r = rng::stream(2, "t");
        let a = MlpModel::classifier(&[3, 2], &mut r).unwrap();
        let b = MlpModel::classifier(&[3, 4, 2], &mut r).unwrap();
        let cache = a.forward_cached(&Array2::zeros((1, 3))).unwrap();
        assert!(matches!(b.backward(&cache, &Array2::zeros((1, 2))), Err(GicError::State(_))));
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut r = rng::stream(9, "t");
        let m = MlpModel::classifier(&[10, 30, 2], &mut r).unwrap();
        let lim0 = (6.0f64 / 40.0).sqrt();
        assert!(m.weights()[0].iter().all(|v| v.abs() <= lim0));
        assert!(m.biases().iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }
}
