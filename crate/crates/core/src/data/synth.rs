//! Synthetic generators: the four-Gaussian toy and a colored-digit surrogate.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{GicError, Result};
use crate::rng;

/// Splits `n` into integer counts proportional to `fractions`. Floors first,
/// then hands the remaining units to the largest remainders (ties to the lower index).
pub fn largest_remainder_counts(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Toy2dGroup {
    pub mean: [f64; 2],
    pub label: usize,
    pub spurious: usize,
    /// Rows in (train, val, test).
    pub counts: [usize; 3],
}

/// Four unit-covariance Gaussian groups in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Toy2dSpec {
    pub groups: [Toy2dGroup; 4],
}

impl Default for Toy2dSpec {
    fn default() -> Self {
        let g = |mean: [f64; 2], label, counts| Toy2dGroup {
            mean,
            label,
            spurious: usize::from(mean[0] != 4.0),
            counts,
        };
        Toy2dSpec {
            groups: [
                g([4.0, 5.0], 0, [3900, 854, 3000]),
                g([4.0, 8.0], 1, [100, 287, 3000]),
                g([8.0, 8.0], 1, [3900, 18, 3000]),
                g([8.0, 5.0], 0, [100, 828, 3000]),
            ],
        }
    }
}

/// Returns `(train, val, test)`; rows appear group by group in spec order.
pub fn gen_toy2d(spec: &Toy2dSpec, seed: u64) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    for g in &spec.groups {
        if g.label > 1 || g.spurious > 1 || g.mean.iter().any(|m| !m.is_finite()) {
            return Err(GicError::Spec(format!("invalid toy group {g:?}")));
        }
    }
    let mut out = Vec::with_capacity(3);
    for (split, name) in ["train", "val", "test"].into_iter().enumerate() {
        let mut r = rng::stream(seed, &format!("toy2d/{name}"));
        let n: usize = spec.groups.iter().map(|g| g.counts[split]).sum();
        let mut x = Array2::zeros((n, 2));
        let (mut y, mut a) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let mut row = 0;
        for g in &spec.groups {
            for _ in 0..g.counts[split] {
                for k in 0..2 {
                    let e: f64 = r.sample(StandardNormal);
                    x[[row, k]] = g.mean[k] + e;
                }
                y.push(g.label);
                a.push(g.spurious);
                row += 1;
            }
        }
        out.push(LabeledDataset::with_cardinalities(name, x, Some(y), Some(a), 2, 2)?);
    }
    let test = out.pop().unwrap();
    let val = out.pop().unwrap();
    Ok((out.pop().unwrap(), val, test))
}

/// Feature-space surrogate with an invariant block (driven by a latent class)
/// and a spurious block (driven by the attribute).
///
/// Group fractions are indexed by `g = y * A + a` over the *observed* label.
/// The latent class equals the observed label except with probability
/// `label_flip`, so flipped rows carry another class's invariant signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpuriousSpec {
    pub num_classes: usize,
    pub num_spurious: usize,
    pub d_inv: usize,
    pub d_spu: usize,
    /// Fractions for (train, comparison, test).
    pub group_fractions: [Vec<f64>; 3],
    pub label_flip: f64,
    pub n: [usize; 3],
    pub signal: f64,
}

impl SynthSpuriousSpec {
    /// Colored-digit proportions: the attribute agrees with the label 80% of
    /// the time in training and 10% at test time, with 25% label noise.
    pub fn cmnist() -> Self {
        SynthSpuriousSpec {
            num_classes: 2,
            num_spurious: 2,
            d_inv: 4,
            d_spu: 4,
            group_fractions: [
                vec![0.1, 0.4, 0.4, 0.1],
                vec![0.26, 0.25, 0.25, 0.24],
                vec![0.45, 0.05, 0.05, 0.45],
            ],
            label_flip: 0.25,
            n: [30000, 10000, 20000],
            signal: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let groups = self.num_classes * self.num_spurious;
        if self.num_classes < 2 || self.num_spurious < 2 {
            return Err(GicError::Spec("need C >= 2 and A >= 2".into()));
        }
        if self.d_inv == 0 || self.d_spu == 0 {
            return Err(GicError::Spec("feature blocks must be non-empty".into()));
        }
        if self.num_classes > 2 && self.d_inv < self.num_classes || self.num_spurious > 2 && self.d_spu < self.num_spurious
        {
            return Err(GicError::Spec("with more than two values a block needs one axis per value".into()));
        }
        if !(0.0..0.5).contains(&self.label_flip) {
            return Err(GicError::Spec(format!("label_flip must lie in [0, 0.5), got {}", self.label_flip)));
        }
        if !(self.signal > 0.0 && self.signal.is_finite()) {
            return Err(GicError::Spec(format!("signal must be positive, got {}", self.signal)));
        }
        for (split, f) in self.group_fractions.iter().enumerate() {
            let sum: f64 = f.iter().sum();
            if f.len() != groups || f.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(GicError::Spec(format!(
                    "split {split}: need {groups} nonnegative group fractions summing to 1, got {f:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub data: LabeledDataset,
    /// Class that generated the invariant block, before label noise.
    pub latent_class: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplits {
    pub train: SynthSplit,
    pub comparison: SynthSplit,
    pub test: SynthSplit,
}

/// Class means: antipodal along the diagonal for two values, one axis each otherwise.
/// Any two means sit `signal` apart.
fn block_mean(value: usize, cardinality: usize, dim: usize, signal: f64) -> Vec<f64> {
    if cardinality == 2 {
        let s = if value == 0 { -0.5 } else { 0.5 } * signal / (dim as f64).sqrt();
        vec![s; dim]
    } else {
        let mut m = vec![0.0; dim];
        m[value] = signal / std::f64::consts::SQRT_2;
        m
    }
}

pub fn gen_synth_spurious(spec: &SynthSpuriousSpec, seed: u64) -> Result<SynthSplits> {
    spec.validate()?;
    let (c, a_card) = (spec.num_classes, spec.num_spurious);
    let d = spec.d_inv + spec.d_spu;
    let mut splits = Vec::with_capacity(3);
    for (split, name) in ["train", "comparison", "test"].into_iter().enumerate() {
        let mut r = rng::stream(seed, &format!("synth/{name}"));
        let n = spec.n[split];
        let counts = largest_remainder_counts(n, &spec.group_fractions[split]);
        let mut x = Array2::zeros((n, d));
        let (mut ys, mut as_, mut latent) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let mut row = 0;
        for (g, &count) in counts.iter().enumerate() {
            let (y, a) = (g / a_card, g % a_card);
            for _ in 0..count {
                let lc = if r.random::<f64>() < spec.label_flip {
                    let other = r.random_range(0..c - 1);
                    if other >= y {
                        other + 1
                    } else {
                        other
                    }
                } else {
                    y
                };
                let mi = block_mean(lc, c, spec.d_inv, spec.signal);
                let ms = block_mean(a, a_card, spec.d_spu, spec.signal);
                for (k, m) in mi.iter().chain(&ms).enumerate() {
                    let e: f64 = r.sample(StandardNormal);
                    x[[row, k]] = m + e;
                }
                ys.push(y);
                as_.push(a);
                latent.push(lc);
                row += 1;
            }
        }
        let data = LabeledDataset::with_cardinalities(name, x, Some(ys), Some(as_), c, a_card)?;
        splits.push(SynthSplit {
            data,
            latent_class: latent,
        });
    }
    let test = splits.pop().unwrap();
    let comparison = splits.pop().unwrap();
    Ok(SynthSplits {
        train: splits.pop().unwrap(),
        comparison,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_matches_hand_rounding() {
        assert_eq!(largest_remainder_counts(10, &[1.0 / 3.0; 3]), vec![4, 3, 3]);
        assert_eq!(largest_remainder_counts(7, &[0.5, 0.25, 0.25]), vec![3, 2, 2]);
        assert_eq!(largest_remainder_counts(0, &[0.5, 0.5]), vec![0, 0]);
    }

    #[test]
    fn default_toy_has_published_sizes() {
        let (tr, val, ts) = gen_toy2d(&Toy2dSpec::default(), 0).unwrap();
        assert_eq!((tr.len(), val.len(), ts.len()), (8000, 1987, 12000));
        assert_eq!(tr.group_counts().unwrap(), vec![3900, 100, 100, 3900]);
    }

    #[test]
    fn flip_zero_keeps_latent_equal_to_label() {
        let mut spec = SynthSpuriousSpec::cmnist();
        spec.label_flip = 0.0;
        spec.n = [500, 100, 100];
        let s = gen_synth_spurious(&spec, 3).unwrap();
        assert_eq!(s.train.data.labels().unwrap(), &s.train.latent_class[..]);
    }

    #[test]
    fn bad_fractions_are_a_spec_error() {
        let mut spec = SynthSpuriousSpec::cmnist();
        spec.group_fractions[0] = vec![0.5, 0.5, 0.5, 0.5];
        assert!(matches!(gen_synth_spurious(&spec, 0), Err(GicError::Spec(_))));
    }
}
