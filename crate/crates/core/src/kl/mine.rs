//! Donsker-Varadhan (MINE) KL estimation with a small statistics network.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GicError, Result};
use crate::nn::{sgd_step, Activation, Gradients, MlpModel, SgdParams, SgdState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineConfig {
    pub hidden: Vec<usize>,
    pub sgd: SgdParams,
    /// Statistics are clamped to `[-output_clip, output_clip]` before exponentiation.
    pub output_clip: f64,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            hidden: vec![64, 64],
            sgd: SgdParams::new(0.05, 0.9, 0.0),
            output_clip: 50.0,
        }
    }
}

/// Value of the bound and its gradients.
#[derive(Debug, Clone)]
pub struct DvOutput {
    pub value: f64,
    /// d value / d samples_p.
    pub grad_p: Array2<f64>,
    /// d value / d samples_q.
    pub grad_q: Array2<f64>,
    /// d value / d statistics-network parameters.
    pub params: Gradients,
}

#[derive(Debug, Clone)]
pub struct MineEstimator {
    pub stat_net: MlpModel,
    pub optimizer: SgdState,
    pub output_clip: f64,
    pub last_estimate: f64,
}

impl MineEstimator {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: &MineConfig, rng: &mut R) -> Result<Self> {
        if !(cfg.output_clip > 0.0) {
            return Err(GicError::Config(format!("output_clip must be positive, got {}", cfg.output_clip)));
        }
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden);
        dims.push(1);
        let mut acts = vec![Activation::Relu; cfg.hidden.len()];
        acts.push(Activation::Identity);
        let stat_net = MlpModel::new(&dims, &acts, rng)?;
        let optimizer = SgdState::new(&stat_net, cfg.sgd)?;
        Ok(MineEstimator {
            stat_net,
            optimizer,
            output_clip: cfg.output_clip,
            last_estimate: 0.0,
        })
    }

    /// `mean_P T - ln mean_Q exp(T)` with gradients wrt both sample sets and the network.
    pub fn dv_bound(&self, p: &Array2<f64>, q: &Array2<f64>) -> Result<DvOutput> {
        if p.ncols() != q.ncols() || p.nrows() == 0 || q.nrows() == 0 {
            return Err(GicError::Shape(format!(
                "need non-empty sample sets with equal columns, got {:?} and {:?}",
                p.dim(),
                q.dim()
            )));
        }
        let clip = self.output_clip;
        let cache_p = self.stat_net.forward_cached(p)?;
        let cache_q = self.stat_net.forward_cached(q)?;
        let tp = cache_p.output().column(0).to_owned();
        let tq = cache_q.output().column(0).to_owned();
        let (np, nq) = (tp.len() as f64, tq.len() as f64);

        let mean_p = tp.iter().map(|t| t.clamp(-clip, clip)).sum::<f64>() / np;
        let tq_c: Vec<f64> = tq.iter().map(|t| t.clamp(-clip, clip)).collect();
        let max_q = tq_c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = tq_c.iter().map(|t| (t - max_q).exp()).collect();
        let sum_e: f64 = exps.iter().sum();
        let value = mean_p - (max_q + (sum_e / nq).ln());
        if !value.is_finite() {
            return Err(GicError::Numeric(format!("Donsker-Varadhan bound is {value}")));
        }

        let inside = |t: f64| if t.abs() <= clip { 1.0 } else { 0.0 };
        let up_p = Array2::from_shape_fn((tp.len(), 1), |(i, _)| inside(tp[i]) / np);
        let up_q = Array2::from_shape_fn((tq.len(), 1), |(j, _)| -inside(tq[j]) * exps[j] / sum_e);
        let gp = self.stat_net.backward(&cache_p, &up_p)?;
        let gq = self.stat_net.backward(&cache_q, &up_q)?;
        let mut params = gp.clone();
        params.add_params(&gq);
        Ok(DvOutput {
            value,
            grad_p: gp.input,
            grad_q: gq.input,
            params,
        })
    }

    /// One gradient-ascent step on the bound; returns the bound before the step.
    pub fn ascent_step(&mut self, p: &Array2<f64>, q: &Array2<f64>) -> Result<f64> {
        let out = self.dv_bound(p, q)?;
        let mut descent = out.params;
        descent.scale(-1.0);
        sgd_step(&mut self.stat_net, &descent, &mut self.optimizer)?;
        Ok(out.value)
    }
}

/// Runs `steps` full-batch ascent steps, then evaluates the bound (with input
/// gradients) at the updated network.
pub fn mine_estimate(est: &mut MineEstimator, p: &Array2<f64>, q: &Array2<f64>, steps: usize) -> Result<DvOutput> {
    for _ in 0..steps {
        est.ascent_step(p, q)?;
    }
    let out = est.dv_bound(p, q)?;
    est.last_estimate = out.value;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermMode {
    /// Condition on the class label (comparison data labeled).
    Labeled,
    /// Condition on the representation (comparison data unlabeled).
    Unlabeled,
}

/// Inputs to the spurious term; `y_c` is required in labeled mode only.
#[derive(Debug, Clone, Copy)]
pub struct TermInputs<'a> {
    pub num_classes: usize,
    pub y_tr: &'a [usize],
    pub probs_tr: &'a Array2<f64>,
    pub z_tr: &'a Array2<f64>,
    pub y_c: Option<&'a [usize]>,
    pub probs_c: &'a Array2<f64>,
    pub z_c: &'a Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct SpuriousTerm {
    /// `kl_joint - kl_marginal`.
    pub value: f64,
    pub kl_joint: f64,
    pub kl_marginal: f64,
    pub grad_probs_tr: Array2<f64>,
    pub grad_probs_c: Array2<f64>,
}

pub fn onehot(labels: &[usize], classes: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(GicError::Input(format!("label {y} outside [0, {classes})")));
        }
        out[[i, y]] = 1.0;
    }
    Ok(out)
}

/// Joint-minus-marginal DV estimate of the conditional KL of the conditioning
/// variable given the predicted spurious attribute, train vs comparison.
/// Each estimator first takes `steps` ascent steps.
pub fn spurious_term(
    mode: TermMode,
    inputs: &TermInputs<'_>,
    est_joint: &mut MineEstimator,
    est_marginal: &mut MineEstimator,
    steps: usize,
) -> Result<SpuriousTerm> {
    let (ctx_tr, ctx_c) = match mode {
        TermMode::Labeled => {
            let y_c = inputs
                .y_c
                .ok_or_else(|| GicError::Config("labeled mode needs comparison labels".into()))?;
            (onehot(inputs.y_tr, inputs.num_classes)?, onehot(y_c, inputs.num_classes)?)
        }
        TermMode::Unlabeled => (inputs.z_tr.clone(), inputs.z_c.clone()),
    };
    let (ptr, pc) = (inputs.probs_tr, inputs.probs_c);
    if ctx_tr.nrows() != ptr.nrows() || ctx_c.nrows() != pc.nrows() || ptr.ncols() != pc.ncols() {
        return Err(GicError::Shape("conditioning rows and probability rows disagree".into()));
    }
    let k = ctx_tr.ncols();
    let joint_tr = concatenate(Axis(1), &[ctx_tr.view(), ptr.view()]).map_err(|e| GicError::Shape(e.to_string()))?;
    let joint_c = concatenate(Axis(1), &[ctx_c.view(), pc.view()]).map_err(|e| GicError::Shape(e.to_string()))?;
    let j = mine_estimate(est_joint, &joint_tr, &joint_c, steps)?;
    let m = mine_estimate(est_marginal, ptr, pc, steps)?;
    Ok(SpuriousTerm {
        value: j.value - m.value,
        kl_joint: j.value,
        kl_marginal: m.value,
        grad_probs_tr: &j.grad_p.slice(s![.., k..]) - &m.grad_p,
        grad_probs_c: &j.grad_q.slice(s![.., k..]) - &m.grad_q,
    })
}
