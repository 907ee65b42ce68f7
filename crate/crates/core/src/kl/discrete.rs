//! Exact KL, entropy and mutual information on discrete tables, plus the Gaussian closed form.

use ndarray::{Array1, Array2, Axis};

use crate::error::{GicError, Result};

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (s - 1.0).abs() > 1e-9 {
        return Err(GicError::Domain(format!("{what} is not a probability vector (sum {s})")));
    }
    Ok(())
}

/// `sum_i p_i ln(p_i / q_i)` in nats; zero-probability terms of `p` contribute 0.
pub fn kl_discrete(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(GicError::Shape(format!("lengths {} vs {}", p.len(), q.len())));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(GicError::Domain(format!("q[{i}] = 0 where p[{i}] = {pi}")));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p, "p")?;
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

/// `-sum_i p_i ln q_i`.
pub fn cross_entropy_dist(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok(entropy(p)? + kl_discrete(p, q)?)
}

/// KL between univariate normals `N(mu0, var0)` and `N(mu1, var1)`.
pub fn kl_gaussian(mu0: f64, var0: f64, mu1: f64, var1: f64) -> Result<f64> {
    if !(var0 > 0.0 && var1 > 0.0) {
        return Err(GicError::Domain(format!("variances must be positive, got {var0} and {var1}")));
    }
    Ok(0.5 * (var1 / var0).ln() + (var0 + (mu0 - mu1).powi(2)) / (2.0 * var1) - 0.5)
}

/// Nonnegative weights over cells `(row, column)`; rows are usually the class
/// label and columns the predicted spurious attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    pub counts: Array2<f64>,
}

impl DiscreteJoint {
    pub fn new(counts: Array2<f64>) -> Result<Self> {
        if counts.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(GicError::Domain("joint counts must be finite and nonnegative".into()));
        }
        Ok(DiscreteJoint { counts })
    }

    /// Tallies paired labels into a `rows x cols` table.
    pub fn from_labels(rows: &[usize], cols: &[usize], num_rows: usize, num_cols: usize) -> Result<Self> {
        if rows.len() != cols.len() {
            return Err(GicError::Shape(format!("{} vs {} labels", rows.len(), cols.len())));
        }
        let mut counts = Array2::zeros((num_rows, num_cols));
        for (&r, &c) in rows.iter().zip(cols) {
            if r >= num_rows || c >= num_cols {
                return Err(GicError::Input(format!("cell ({r}, {c}) outside {num_rows}x{num_cols}")));
            }
            counts[[r, c]] += 1.0;
        }
        Ok(DiscreteJoint { counts })
    }

    pub fn total(&self) -> f64 {
        self.counts.sum()
    }

    pub fn normalized(&self) -> Result<Array2<f64>> {
        let t = self.total();
        if t <= 0.0 {
            return Err(GicError::Domain("joint table has zero total".into()));
        }
        Ok(&self.counts / t)
    }

    /// Distribution of the column variable.
    pub fn column_marginal(&self) -> Result<Array1<f64>> {
        Ok(self.normalized()?.sum_axis(Axis(0)))
    }

    pub fn row_marginal(&self) -> Result<Array1<f64>> {
        Ok(self.normalized()?.sum_axis(Axis(1)))
    }
}

/// Both evaluations of the conditional KL of the row variable given the column variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalKl {
    /// `sum_s P(s) KL(P(. | s) || Q(. | s))`.
    pub direct: f64,
    /// `KL(P_joint || Q_joint) - KL(P_s || Q_s)`.
    pub decomposed: f64,
    pub joint: f64,
    pub marginal: f64,
}

pub fn kl_conditional_discrete(p: &DiscreteJoint, q: &DiscreteJoint) -> Result<ConditionalKl> {
    if p.counts.dim() != q.counts.dim() {
        return Err(GicError::Shape(format!("tables {:?} vs {:?}", p.counts.dim(), q.counts.dim())));
    }
    let (pj, qj) = (p.normalized()?, q.normalized()?);
    for ((r, c), &v) in pj.indexed_iter() {
        if v > 0.0 && qj[[r, c]] == 0.0 {
            return Err(GicError::Domain(format!("Q does not dominate P at cell ({r}, {c})")));
        }
    }
    let (pm, qm) = (pj.sum_axis(Axis(0)), qj.sum_axis(Axis(0)));
    let mut direct = 0.0;
    for s in 0..pj.ncols() {
        if pm[s] == 0.0 {
            continue;
        }
        let pc: Vec<f64> = pj.column(s).iter().map(|v| v / pm[s]).collect();
        let qc: Vec<f64> = qj.column(s).iter().map(|v| v / qm[s]).collect();
        direct += pm[s] * kl_discrete(&pc, &qc)?;
    }
    let joint = kl_discrete(pj.as_slice().unwrap(), qj.as_slice().unwrap())?;
    let marginal = kl_discrete(pm.as_slice().unwrap(), qm.as_slice().unwrap())?;
    Ok(ConditionalKl {
        direct,
        decomposed: joint - marginal,
        joint,
        marginal,
    })
}

/// `I(row; col)` of a joint table.
pub fn mutual_information(joint: &DiscreteJoint) -> Result<f64> {
    let pj = joint.normalized()?;
    let (pr, pc) = (pj.sum_axis(Axis(1)), pj.sum_axis(Axis(0)));
    let mut mi = 0.0;
    for ((r, c), &v) in pj.indexed_iter() {
        if v > 0.0 {
            mi += v * (v / (pr[r] * pc[c])).ln();
        }
    }
    Ok(mi.max(0.0))
}
