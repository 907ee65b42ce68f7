//! Group balancing, GroupDRO, selective mixup and the early-stopping driver.

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::GroupAssignment;
use crate::data::LabeledDataset;
use crate::erm::Standardizer;
use crate::error::{GicError, Result};
use crate::eval::evaluate_model;
use crate::nn::{
    argmax_rows, fit_classifier, sgd_step, soft_cross_entropy, train::epoch_batches, weighted_cross_entropy, EpochStat,
    FitConfig, MlpModel, SgdParams, SgdState,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobustMethod {
    Subsample,
    Upsample,
    GroupDro,
    Mixup,
}

impl std::str::FromStr for RobustMethod {
    type Err = GicError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "subsample" => Ok(RobustMethod::Subsample),
            "upsample" => Ok(RobustMethod::Upsample),
            "groupdro" => Ok(RobustMethod::GroupDro),
            "mixup" => Ok(RobustMethod::Mixup),
            other => Err(GicError::Config(format!("unknown robust method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustTrainConfig {
    pub method: RobustMethod,
    pub epochs: usize,
    /// `None` trains full-batch. GroupDRO always trains full-batch.
    pub batch_size: Option<usize>,
    pub sgd: SgdParams,
    /// Hidden widths of the robust classifier; empty means linear.
    pub hidden: Vec<usize>,
    pub groupdro_eta: f64,
    /// Keep the GroupDRO weights at their uniform start.
    pub groupdro_fixed_q: bool,
    pub mixup_alpha: f64,
    /// Probability of the intra-label strategy (otherwise intra-domain).
    pub mixup_strategy_prob: f64,
    /// Use this mixing weight instead of drawing from `Beta(alpha, alpha)`.
    pub mixup_fixed_lambda: Option<f64>,
    pub early_stop: bool,
    /// Train on inputs standardized with training-set statistics; the returned
    /// model has the standardization folded into its first layer.
    pub standardize_inputs: bool,
    pub seed: u64,
}

impl Default for RobustTrainConfig {
    fn default() -> Self {
        RobustTrainConfig {
            method: RobustMethod::Subsample,
            epochs: 100,
            batch_size: Some(32),
            sgd: SgdParams::new(0.01, 0.9, 1e-4),
            hidden: Vec::new(),
            groupdro_eta: 0.01,
            groupdro_fixed_q: false,
            mixup_alpha: 2.0,
            mixup_strategy_prob: 0.5,
            mixup_fixed_lambda: None,
            early_stop: false,
            standardize_inputs: true,
            seed: 0,
        }
    }
}

impl RobustTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.batch_size == Some(0) {
            return Err(GicError::Config("batch size must be positive".into()));
        }
        match self.method {
            RobustMethod::GroupDro if !(self.groupdro_eta > 0.0) => {
                Err(GicError::Config(format!("groupdro_eta must be positive, got {}", self.groupdro_eta)))
            }
            RobustMethod::Mixup if !(self.mixup_alpha > 0.0) => {
                Err(GicError::Config(format!("mixup_alpha must be positive, got {}", self.mixup_alpha)))
            }
            RobustMethod::Mixup if !(0.0..=1.0).contains(&self.mixup_strategy_prob) => Err(GicError::Config(
                format!("mixup_strategy_prob must lie in [0, 1], got {}", self.mixup_strategy_prob),
            )),
            RobustMethod::Mixup if self.mixup_fixed_lambda.is_some_and(|l| !(0.0..=1.0).contains(&l)) => {
                Err(GicError::Config("fixed mixup lambda must lie in [0, 1]".into()))
            }
            _ => Ok(()),
        }
    }

    /// `input_dim -> hidden... -> classes`.
    pub fn arch(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            sgd: self.sgd,
        }
    }
}

fn check_groups(data: &LabeledDataset, groups: &GroupAssignment) -> Result<Vec<Vec<usize>>> {
    if groups.len() != data.len() {
        return Err(GicError::Shape(format!("{} group ids for {} rows", groups.len(), data.len())));
    }
    let members = groups.members();
    let empty: Vec<usize> = (0..members.len()).filter(|&g| members[g].is_empty()).collect();
    if !empty.is_empty() {
        return Err(GicError::Balancing(empty));
    }
    Ok(members)
}

/// Row indices keeping `min` rows of every group, drawn without replacement; ascending order.
pub fn subsample_indices(groups: &GroupAssignment, seed: u64, data: &LabeledDataset) -> Result<Vec<usize>> {
    let members = check_groups(data, groups)?;
    let m = members.iter().map(Vec::len).min().unwrap_or(0);
    let mut r = rng::stream(seed, "robust/subsample");
    let mut idx: Vec<usize> = members
        .iter()
        .flat_map(|pool| sample(&mut r, pool.len(), m).into_iter().map(|i| pool[i]).collect::<Vec<_>>())
        .collect();
    idx.sort_unstable();
    Ok(idx)
}

pub fn subsample_balanced(data: &LabeledDataset, groups: &GroupAssignment, seed: u64) -> Result<LabeledDataset> {
    data.subset(&subsample_indices(groups, seed, data)?)
}

/// All rows, followed by copies drawn with replacement until every group reaches the largest size.
pub fn upsample_indices(groups: &GroupAssignment, seed: u64, data: &LabeledDataset) -> Result<Vec<usize>> {
    let members = check_groups(data, groups)?;
    let m = members.iter().map(Vec::len).max().unwrap_or(0);
    let mut r = rng::stream(seed, "robust/upsample");
    let mut idx: Vec<usize> = (0..data.len()).collect();
    for pool in &members {
        for _ in pool.len()..m {
            idx.push(pool[r.random_range(0..pool.len())]);
        }
    }
    Ok(idx)
}

pub fn upsample_to_majority(data: &LabeledDataset, groups: &GroupAssignment, seed: u64) -> Result<LabeledDataset> {
    data.subset(&upsample_indices(groups, seed, data)?)
}

/// Exponentiated-gradient step `q_g <- q_g exp(eta L_g)`, renormalized.
pub fn groupdro_update(q: &[f64], losses: &[f64], eta: f64) -> Vec<f64> {
    let shift = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = q.iter().zip(losses).map(|(&q, &l)| q * (eta * (l - shift)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Tracks validation worst-group accuracy and keeps the first best snapshot.
struct EarlyStopper<'a> {
    val: Option<&'a LabeledDataset>,
    scaler: Option<&'a Standardizer>,
    curve: Vec<f64>,
    best: Option<(f64, usize, MlpModel)>,
}

impl<'a> EarlyStopper<'a> {
    fn observe(&mut self, epoch: usize, model: &MlpModel) -> Result<()> {
        if let Some(val) = self.val {
            let raw = match self.scaler {
                Some(s) => s.fold_into(model)?,
                None => model.clone(),
            };
            let w = evaluate_model(&raw, val)?.worst;
            self.curve.push(w);
            if self.best.as_ref().is_none_or(|(b, _, _)| w > *b) {
                self.best = Some((w, epoch, raw));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RobustOutcome {
    pub model: MlpModel,
    pub train_curve: Vec<EpochStat>,
    /// Validation worst-group accuracy per epoch (empty without early stopping).
    pub val_worst_curve: Vec<f64>,
    /// Epoch of the returned snapshot (0 means the initialization).
    pub selected_epoch: usize,
    /// GroupDRO weights after every update, over `active_groups`.
    pub q_curve: Vec<Vec<f64>>,
    pub active_groups: Vec<usize>,
}

/// Full-batch GroupDRO over the non-empty inferred groups.
fn run_groupdro(
    model: &mut MlpModel,
    data: &LabeledDataset,
    groups: &GroupAssignment,
    cfg: &RobustTrainConfig,
    stopper: &mut EarlyStopper<'_>,
) -> Result<(Vec<EpochStat>, Vec<Vec<f64>>, Vec<usize>)> {
    let labels = data.require_labels()?;
    let members = groups.members();
    let active: Vec<usize> = (0..members.len()).filter(|&g| !members[g].is_empty()).collect();
    if active.len() < 2 {
        log::warn!("GroupDRO with a single non-empty group reduces to plain ERM");
    }
    let slot: Vec<Option<usize>> = (0..members.len()).map(|g| active.iter().position(|&a| a == g)).collect();
    let mut q = vec![1.0 / active.len() as f64; active.len()];
    let mut state = SgdState::new(model, cfg.sgd)?;
    let (mut curve, mut q_curve) = (Vec::new(), Vec::new());
    let x = data.features();
    for epoch in 1..=cfg.epochs {
        let cache = model.forward_cached(x)?;
        let probs = cache.output();
        let mut losses = vec![0.0; active.len()];
        for (i, &g) in groups.group_id.iter().enumerate() {
            let k = slot[g].unwrap();
            losses[k] -= probs[[i, labels[i]]].max(crate::nn::PROB_FLOOR).ln() / members[g].len() as f64;
        }
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(GicError::Training {
                epoch,
                message: "non-finite group loss".into(),
            });
        }
        if !cfg.groupdro_fixed_q {
            q = groupdro_update(&q, &losses, cfg.groupdro_eta);
        }
        q_curve.push(q.clone());
        let weights: Vec<f64> = groups
            .group_id
            .iter()
            .map(|&g| q[slot[g].unwrap()] / members[g].len() as f64)
            .collect();
        let loss = weighted_cross_entropy(probs, labels, &weights)?;
        let correct = argmax_rows(probs).iter().zip(labels).filter(|(p, y)| p == y).count();
        curve.push(EpochStat {
            epoch,
            loss: loss.loss,
            accuracy: correct as f64 / data.len().max(1) as f64,
        });
        let grads = model.backward_from_logits(&cache, &loss.grad_logits)?;
        sgd_step(model, &grads, &mut state).map_err(|e| GicError::Training {
            epoch,
            message: e.to_string(),
        })?;
        stopper.observe(epoch, model)?;
    }
    Ok((curve, q_curve, active))
}

/// Partners for each row under both strategies.
struct MixupPartners {
    intra_label: Vec<Vec<usize>>,
    intra_domain: Vec<Vec<usize>>,
}

fn mixup_partners(labels: &[usize], groups: &GroupAssignment) -> MixupPartners {
    let members = groups.members();
    let a = groups.num_spurious;
    let mut intra_label = Vec::with_capacity(labels.len());
    let mut intra_domain = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let s = groups.spurious_hard[i];
        // same label, other spurious value
        intra_label.push((0..a).filter(|&t| t != s).flat_map(|t| members[y * a + t].iter().copied()).collect());
        // same spurious value, other label
        intra_domain.push(
            (0..groups.num_classes)
                .filter(|&c| c != y)
                .flat_map(|c| members[c * a + s].iter().copied())
                .collect(),
        );
    }
    MixupPartners {
        intra_label,
        intra_domain,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_mixup(
    model: &mut MlpModel,
    data: &LabeledDataset,
    groups: &GroupAssignment,
    cfg: &RobustTrainConfig,
    stopper: &mut EarlyStopper<'_>,
) -> Result<Vec<EpochStat>> {
    let labels = data.require_labels()?;
    if groups.len() != data.len() {
        return Err(GicError::Shape(format!("{} group ids for {} rows", groups.len(), data.len())));
    }
    let partners = mixup_partners(labels, groups);
    let any_label = partners.intra_label.iter().any(|p| !p.is_empty());
    let any_domain = partners.intra_domain.iter().any(|p| !p.is_empty());
    if !any_label && !any_domain {
        return Err(GicError::Config("mixup found no valid pairs for either strategy".into()));
    }
    if !any_label {
        log::warn!("no intra-label pairs; using intra-domain mixing only");
    }
    if !any_domain {
        log::warn!("no intra-domain pairs; using intra-label mixing only");
    }
    let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).map_err(|e| GicError::Config(e.to_string()))?;
    let c = data.num_classes().max(model.output_dim());
    let x = data.features();
    let mut batch_rng = rng::stream(cfg.seed, "robust/batches");
    let mut mix_rng = rng::stream(cfg.seed, "robust/mixup");
    let mut state = SgdState::new(model, cfg.sgd)?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in epoch_batches(data.len(), cfg.batch_size, &mut batch_rng) {
            if batch.is_empty() {
                continue;
            }
            let intra_label = match (any_label, any_domain) {
                (true, true) => mix_rng.random::<f64>() < cfg.mixup_strategy_prob,
                (flag, _) => flag,
            };
            let mut xb = Array2::zeros((batch.len(), x.ncols()));
            let mut tb = Array2::zeros((batch.len(), c));
            for (row, &i) in batch.iter().enumerate() {
                let pool = if intra_label { &partners.intra_label[i] } else { &partners.intra_domain[i] };
                let j = if pool.is_empty() { i } else { pool[mix_rng.random_range(0..pool.len())] };
                let lam = cfg.mixup_fixed_lambda.unwrap_or_else(|| beta.sample(&mut mix_rng));
                let mixed = &x.row(i) * lam + &x.row(j) * (1.0 - lam);
                xb.row_mut(row).assign(&mixed);
                tb[[row, labels[i]]] += lam;
                tb[[row, labels[j]]] += 1.0 - lam;
            }
            let cache = model.forward_cached(&xb)?;
            let loss = soft_cross_entropy(cache.output(), &tb)?;
            if !loss.loss.is_finite() {
                return Err(GicError::Training {
                    epoch,
                    message: "non-finite mixup loss".into(),
                });
            }
            total += loss.loss * batch.len() as f64;
            correct += argmax_rows(cache.output())
                .iter()
                .zip(&batch)
                .filter(|(p, &i)| **p == labels[i])
                .count();
            let grads = model.backward_from_logits(&cache, &loss.grad_logits)?;
            sgd_step(model, &grads, &mut state).map_err(|e| GicError::Training {
                epoch,
                message: e.to_string(),
            })?;
        }
        let n = data.len().max(1) as f64;
        curve.push(EpochStat {
            epoch,
            loss: total / n,
            accuracy: correct as f64 / n,
        });
        stopper.observe(epoch, model)?;
    }
    Ok(curve)
}

/// Trains a fresh classifier with the configured method. With early stopping,
/// the snapshot with the highest validation worst-group accuracy is returned
/// (earliest epoch on ties).
pub fn train_robust(
    data: &LabeledDataset,
    groups: &GroupAssignment,
    cfg: &RobustTrainConfig,
    validation: Option<&LabeledDataset>,
) -> Result<RobustOutcome> {
    cfg.validate()?;
    let labels = data.require_labels()?;
    if cfg.early_stop && validation.and_then(LabeledDataset::group_ids).is_none() {
        return Err(GicError::Config("early stopping needs a validation set with oracle groups".into()));
    }
    let scaler = if cfg.standardize_inputs { Some(Standardizer::fit(data.features())?) } else { None };
    let scaled;
    let data = match &scaler {
        Some(s) => {
            scaled = s.apply_dataset(data)?;
            &scaled
        }
        None => data,
    };
    let arch = cfg.arch(data.dim(), data.num_classes());
    let mut model = MlpModel::classifier(&arch, &mut rng::stream(cfg.seed, "robust/init"))?;
    let mut stopper = EarlyStopper {
        val: if cfg.early_stop { validation } else { None },
        scaler: scaler.as_ref(),
        curve: Vec::new(),
        best: None,
    };
    let (mut q_curve, mut active_groups) = (Vec::new(), Vec::new());
    let train_curve = match cfg.method {
        RobustMethod::Subsample | RobustMethod::Upsample => {
            let idx = if cfg.method == RobustMethod::Subsample {
                subsample_indices(groups, cfg.seed, data)?
            } else {
                upsample_indices(groups, cfg.seed, data)?
            };
            let x = data.features().select(Axis(0), &idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut batches = rng::stream(cfg.seed, "robust/batches");
            fit_classifier(&mut model, &x, &y, &cfg.fit_config(), &mut batches, |e, m| stopper.observe(e, m))?
        }
        RobustMethod::GroupDro => {
            let (curve, q, active) = run_groupdro(&mut model, data, groups, cfg, &mut stopper)?;
            q_curve = q;
            active_groups = active;
            curve
        }
        RobustMethod::Mixup => run_mixup(&mut model, data, groups, cfg, &mut stopper)?,
    };
    let (model, selected_epoch) = match stopper.best {
        Some((_, epoch, snapshot)) => (snapshot, epoch),
        None => match &scaler {
            Some(s) => (s.fold_into(&model)?, cfg.epochs),
            None => (model, cfg.epochs),
        },
    };
    Ok(RobustOutcome {
        model,
        train_curve,
        val_worst_curve: stopper.curve,
        selected_epoch,
        q_curve,
        active_groups,
    })
}

/// First index of the maximum (the early-stopping selection rule), 1-based.
pub fn first_best_epoch(curve: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in curve.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i + 1)
}
