//! Stage 2: the spurious-attribute classifier and its (gamma, K) grid search.
//!
//! The head minimizes `CE(y_tr, head(z_tr)) - gamma * [KL_joint - KL_marginal]`.
//! Each epoch first takes `mine_steps_per_epoch` ascent steps on both
//! statistics networks with the head frozen, then one full-batch head step.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::erm::Standardizer;
use crate::error::{GicError, Result};
use crate::invariant::GroupAssignment;
use crate::kl::{spurious_term, MineConfig, MineEstimator, TermInputs, TermMode};
use crate::nn::{argmax_rows, cross_entropy, sgd_step, softmax_backward, MlpModel, SgdParams, SgdState};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GicConfig {
    pub gamma: f64,
    /// Training epochs `K`.
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mode: TermMode,
    pub mine_steps_per_epoch: usize,
    pub seed: u64,
    /// Hidden widths of the head; empty means a single linear layer.
    pub head_hidden: Vec<usize>,
    pub mine: MineConfig,
    /// Standardize representations with training-set statistics first.
    pub standardize: bool,
}

impl Default for GicConfig {
    fn default() -> Self {
        GicConfig {
            gamma: 10.0,
            epochs: 20,
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
            mode: TermMode::Labeled,
            mine_steps_per_epoch: 5,
            seed: 0,
            head_hidden: Vec::new(),
            mine: MineConfig::default(),
            standardize: true,
        }
    }
}

impl GicConfig {
    /// Published colored-digit settings: `gamma = 10`, `K = 20`, `lr = 1e-5`, momentum 0.9.
    pub fn cmnist_published() -> Self {
        GicConfig {
            gamma: 10.0,
            epochs: 20,
            lr: 1e-5,
            momentum: 0.9,
            ..GicConfig::default()
        }
    }

    pub fn sgd(&self) -> SgdParams {
        SgdParams::new(self.lr, self.momentum, self.weight_decay)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(GicError::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if self.epochs == 0 {
            return Err(GicError::Config("epochs K must be at least 1".into()));
        }
        if self.mine_steps_per_epoch == 0 {
            return Err(GicError::Config("mine_steps_per_epoch must be at least 1".into()));
        }
        self.sgd().validate()?;
        self.mine.sgd.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GicEpoch {
    pub epoch: usize,
    pub ce_loss: f64,
    pub kl_joint: f64,
    pub kl_marginal: f64,
    pub kl_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    config: GicConfig,
    standardizer: Option<Standardizer>,
    curves: Vec<GicEpoch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GicArtifacts {
    pub head: MlpModel,
    /// Applied to raw representations before the head.
    pub standardizer: Option<Standardizer>,
    pub curves: Vec<GicEpoch>,
    pub config: GicConfig,
}

impl GicArtifacts {
    /// Head input after standardization.
    pub fn head_input(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        match &self.standardizer {
            Some(s) => s.apply(features),
            None => Ok(features.clone()),
        }
    }

    /// Decision normal of a binary linear head in the raw representation space,
    /// unit length. `None` unless the head is linear with two outputs.
    pub fn boundary_normal(&self) -> Option<Vec<f64>> {
        if self.head.num_layers() != 1 || self.head.output_dim() != 2 {
            return None;
        }
        let w = &self.head.weights()[0];
        let mut v: Vec<f64> = (0..w.ncols()).map(|j| w[[1, j]] - w[[0, j]]).collect();
        if let Some(s) = &self.standardizer {
            v.iter_mut().zip(&s.std).for_each(|(v, s)| *v /= s);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (norm > 0.0).then(|| v.iter().map(|x| x / norm).collect())
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the head checkpoint to `path` and config, standardizer and curves
    /// to the same path with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.head.save(path)?;
        let side = Sidecar {
            config: self.config.clone(),
            standardizer: self.standardizer.clone(),
            curves: self.curves.clone(),
        };
        fs::write(Self::sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let head = MlpModel::load(path)?;
        let side: Sidecar = serde_json::from_slice(&fs::read(Self::sidecar_path(path))?)?;
        Ok(GicArtifacts {
            head,
            standardizer: side.standardizer,
            curves: side.curves,
            config: side.config,
        })
    }
}

/// CSV `epoch,ce_loss,kl_joint,kl_marginal,kl_total`.
pub fn write_curves(curves: &[GicEpoch], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,ce_loss,kl_joint,kl_marginal,kl_total\n");
    for c in curves {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            c.epoch, c.ce_loss, c.kl_joint, c.kl_marginal, c.kl_total
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Initial head `d -> hidden... -> A`: hidden layers from the seed's head
/// stream, output layer zero so every sample starts at uniform probabilities.
/// The spurious term is invariant to relabeling the attribute values, so a
/// random start can settle on the mirrored labeling; from the symmetric start
/// the correlation term picks the orientation.
pub fn init_head(input_dim: usize, num_spurious: usize, cfg: &GicConfig) -> Result<MlpModel> {
    let mut dims = vec![input_dim];
    dims.extend(&cfg.head_hidden);
    dims.push(num_spurious);
    let mut head = MlpModel::classifier(&dims, &mut rng::stream(cfg.seed, "gic/head"))?;
    head.weights_mut().last_mut().unwrap().fill(0.0);
    Ok(head)
}

pub fn train_gic(train: &LabeledDataset, comparison: &LabeledDataset, cfg: &GicConfig) -> Result<GicArtifacts> {
    cfg.validate()?;
    let y_tr = train.require_labels()?;
    let (c, a) = (train.num_classes(), train.num_spurious());
    if c != a {
        return Err(GicError::Config(format!(
            "the correlation term compares class labels with spurious predictions and needs C == A, got C={c}, A={a}"
        )));
    }
    if train.dim() != comparison.dim() {
        return Err(GicError::Shape(format!("train dim {} vs comparison dim {}", train.dim(), comparison.dim())));
    }
    if comparison.is_empty() {
        return Err(GicError::Input("comparison set is empty".into()));
    }
    let y_c = match cfg.mode {
        TermMode::Labeled => Some(comparison.labels().ok_or_else(|| {
            GicError::Config("labeled mode needs a labeled comparison set".into())
        })?),
        TermMode::Unlabeled => None,
    };

    let standardizer = if cfg.standardize { Some(Standardizer::fit(train.features())?) } else { None };
    let (z_tr, z_c) = match &standardizer {
        Some(s) => (s.apply(train.features())?, s.apply(comparison.features())?),
        None => (train.features().clone(), comparison.features().clone()),
    };

    let mut head = init_head(train.dim(), a, cfg)?;
    let mut state = SgdState::new(&head, cfg.sgd())?;
    let joint_dim = a + match cfg.mode {
        TermMode::Labeled => c,
        TermMode::Unlabeled => train.dim(),
    };
    let mut est_joint = MineEstimator::new(joint_dim, &cfg.mine, &mut rng::stream(cfg.seed, "gic/mine-joint"))?;
    let mut est_marg = MineEstimator::new(a, &cfg.mine, &mut rng::stream(cfg.seed, "gic/mine-marginal"))?;

    let mut curves = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let fail = |e: GicError| GicError::Training {
            epoch,
            message: e.to_string(),
        };
        let cache_tr = head.forward_cached(&z_tr).map_err(fail)?;
        let ce = cross_entropy(cache_tr.output(), y_tr).map_err(fail)?;
        let mut grads = if cfg.gamma == 0.0 {
            curves.push(GicEpoch {
                epoch,
                ce_loss: ce.loss,
                kl_joint: 0.0,
                kl_marginal: 0.0,
                kl_total: 0.0,
            });
            head.backward_from_logits(&cache_tr, &ce.grad_logits)?
        } else {
            let cache_c = head.forward_cached(&z_c).map_err(fail)?;
            let inputs = TermInputs {
                num_classes: c,
                y_tr,
                probs_tr: cache_tr.output(),
                z_tr: &z_tr,
                y_c,
                probs_c: cache_c.output(),
                z_c: &z_c,
            };
            let term = spurious_term(cfg.mode, &inputs, &mut est_joint, &mut est_marg, cfg.mine_steps_per_epoch)
                .map_err(fail)?;
            curves.push(GicEpoch {
                epoch,
                ce_loss: ce.loss,
                kl_joint: term.kl_joint,
                kl_marginal: term.kl_marginal,
                kl_total: term.value,
            });
            let g_tr = &ce.grad_logits - &(softmax_backward(cache_tr.output(), &term.grad_probs_tr) * cfg.gamma);
            let g_c = softmax_backward(cache_c.output(), &term.grad_probs_c) * -cfg.gamma;
            let mut g = head.backward_from_logits(&cache_tr, &g_tr)?;
            g.add_params(&head.backward_from_logits(&cache_c, &g_c)?);
            g
        };
        let total = ce.loss - cfg.gamma * curves.last().unwrap().kl_total;
        if !total.is_finite() {
            return Err(GicError::Training {
                epoch,
                message: format!("non-finite objective {total}"),
            });
        }
        grads.input = Array2::zeros((0, 0));
        sgd_step(&mut head, &grads, &mut state).map_err(fail)?;
    }
    Ok(GicArtifacts {
        head,
        standardizer,
        curves,
        config: cfg.clone(),
    })
}

/// Hard spurious labels (argmax, ties to the lowest index) and probabilities.
pub fn infer_spurious(art: &GicArtifacts, data: &LabeledDataset) -> Result<(Vec<usize>, Array2<f64>)> {
    let probs = art.head.forward(&art.head_input(data.features())?)?;
    Ok((argmax_rows(&probs), probs))
}

pub fn infer_groups(art: &GicArtifacts, data: &LabeledDataset) -> Result<GroupAssignment> {
    let labels = data.require_labels()?.to_vec();
    let (hard, probs) = infer_spurious(art, data)?;
    GroupAssignment::from_hard(labels, hard, probs, data.num_classes())
}

/// True when the last value exceeds `(1 + tau)` times the curve minimum.
pub fn ce_increase_detected(ce_curve: &[f64], tau: f64) -> bool {
    let min = ce_curve.iter().copied().fold(f64::INFINITY, f64::min);
    match ce_curve.last() {
        Some(&last) => last > (1.0 + tau) * min,
        None => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub gamma: f64,
    pub epochs: usize,
    pub detected: bool,
    pub final_ce: f64,
    pub final_kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub gamma: f64,
    pub epochs: usize,
    /// Every grid point was flagged; the last point tried is returned.
    pub exhausted: bool,
    pub points: Vec<GridPoint>,
}

pub const DEFAULT_GAMMA_GRID: [f64; 6] = [10.0, 5.0, 4.0, 3.0, 2.0, 1.0];
pub const DEFAULT_TAU: f64 = 0.02;

/// `K` in `{20, 15, 14, ..., 1}`.
pub fn default_k_grid() -> Vec<usize> {
    std::iter::once(20).chain((1..=15).rev()).collect()
}

/// Walks the grids in the given order: on a CE increase the next `K` is
/// tried, and once `K` is exhausted the next `gamma` (restarting at the first `K`).
/// `trainer` returns the per-epoch curves for one `(gamma, K)` configuration.
pub fn grid_search_with<F>(base: &GicConfig, gammas: &[f64], ks: &[usize], tau: f64, mut trainer: F) -> Result<GridSearchResult>
where
    F: FnMut(&GicConfig) -> Result<Vec<GicEpoch>>,
{
    if gammas.is_empty() || ks.is_empty() {
        return Err(GicError::Config("grid search needs non-empty gamma and K grids".into()));
    }
    let mut points = Vec::new();
    for &gamma in gammas {
        for &k in ks {
            let cfg = GicConfig {
                gamma,
                epochs: k,
                seed: rng::derive_seed(base.seed, &format!("grid/{gamma}/{k}")),
                ..base.clone()
            };
            let curves = trainer(&cfg)?;
            let ce: Vec<f64> = curves.iter().map(|c| c.ce_loss).collect();
            let detected = ce_increase_detected(&ce, tau);
            points.push(GridPoint {
                gamma,
                epochs: k,
                detected,
                final_ce: ce.last().copied().unwrap_or(f64::NAN),
                final_kl: curves.last().map_or(f64::NAN, |c| c.kl_total),
            });
            if !detected {
                return Ok(GridSearchResult {
                    gamma,
                    epochs: k,
                    exhausted: false,
                    points,
                });
            }
        }
    }
    let (gamma, epochs) = (*gammas.last().unwrap(), *ks.last().unwrap());
    log::warn!("every grid point showed a CE increase; falling back to gamma={gamma}, K={epochs}");
    Ok(GridSearchResult {
        gamma,
        epochs,
        exhausted: true,
        points,
    })
}

pub fn grid_search(
    train: &LabeledDataset,
    comparison: &LabeledDataset,
    base: &GicConfig,
    gammas: &[f64],
    ks: &[usize],
    tau: f64,
) -> Result<GridSearchResult> {
    grid_search_with(base, gammas, ks, tau, |cfg| Ok(train_gic(train, comparison, cfg)?.curves))
}

/// CSV `gamma,K,detected,final_ce,final_kl`.
pub fn write_grid(points: &[GridPoint], path: &Path) -> Result<()> {
    let mut out = String::from("gamma,K,detected,final_ce,final_kl\n");
    for p in points {
        out.push_str(&format!("{},{},{},{:.17e},{:.17e}\n", p.gamma, p.epochs, p.detected, p.final_ce, p.final_kl));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(ce: &[f64]) -> Vec<GicEpoch> {
        ce.iter()
            .enumerate()
            .map(|(i, &c)| GicEpoch {
                epoch: i + 1,
                ce_loss: c,
                kl_joint: 0.0,
                kl_marginal: 0.0,
                kl_total: 0.0,
            })
            .collect()
    }

    #[test]
    fn detection_threshold() {
        assert!(!ce_increase_detected(&[1.0, 0.8, 0.7], 0.02));
        assert!(!ce_increase_detected(&[1.0, 0.5, 0.509], 0.02));
        assert!(ce_increase_detected(&[1.0, 0.5, 0.52], 0.02));
    }

    #[test]
    fn monotone_curve_stops_at_first_point() {
        let r = grid_search_with(&GicConfig::default(), &DEFAULT_GAMMA_GRID, &default_k_grid(), DEFAULT_TAU, |c| {
            Ok(curve(&(0..c.epochs).map(|e| 1.0 / (1.0 + e as f64)).collect::<Vec<_>>()))
        })
        .unwrap();
        assert_eq!((r.gamma, r.epochs, r.exhausted), (10.0, 20, false));
        assert_eq!(r.points.len(), 1);
    }

    #[test]
    fn rising_after_epoch_ten_reduces_k() {
        // CE falls until epoch 10, then climbs.
        let shape = |e: usize| if e <= 10 { 1.0 - 0.05 * e as f64 } else { 0.5 + 0.05 * (e - 10) as f64 };
        let r = grid_search_with(&GicConfig::default(), &DEFAULT_GAMMA_GRID, &default_k_grid(), DEFAULT_TAU, |c| {
            Ok(curve(&(1..=c.epochs).map(shape).collect::<Vec<_>>()))
        })
        .unwrap();
        assert_eq!(r.gamma, 10.0);
        assert!(r.epochs <= 10, "{}", r.epochs);
    }

    #[test]
    fn exhaustion_returns_grid_minimum() {
        let r = grid_search_with(&GicConfig::default(), &DEFAULT_GAMMA_GRID, &default_k_grid(), DEFAULT_TAU, |_| {
            Ok(curve(&[0.5, 1.0]))
        })
        .unwrap();
        assert_eq!((r.gamma, r.epochs, r.exhausted), (1.0, 1, true));
        assert_eq!(r.points.len(), 6 * 16);
    }

    #[test]
    fn empty_grid_is_config_error() {
        assert!(matches!(
            grid_search_with(&GicConfig::default(), &[], &[1], 0.02, |_| Ok(vec![])),
            Err(GicError::Config(_))
        ));
    }

    #[test]
    fn published_settings_echo() {
        let c = GicConfig::cmnist_published();
        assert_eq!((c.gamma, c.epochs, c.lr, c.momentum), (10.0, 20, 1e-5, 0.9));
    }
}
