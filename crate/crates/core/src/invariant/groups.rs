//! Inferred group assignments and their CSV file.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{GicError, Result};

/// Pseudo groups `g = y * A + spurious_hard`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    pub group_id: Vec<usize>,
    pub class: Vec<usize>,
    pub spurious_hard: Vec<usize>,
    /// `n x A` spurious-attribute probabilities.
    pub spurious_soft: Array2<f64>,
    pub num_classes: usize,
    pub num_spurious: usize,
}

impl GroupAssignment {
    pub fn new(class: Vec<usize>, spurious_soft: Array2<f64>, num_classes: usize) -> Result<Self> {
        let hard = crate::nn::argmax_rows(&spurious_soft);
        Self::from_hard(class, hard, spurious_soft, num_classes)
    }

    pub fn from_hard(
        class: Vec<usize>,
        spurious_hard: Vec<usize>,
        spurious_soft: Array2<f64>,
        num_classes: usize,
    ) -> Result<Self> {
        let a = spurious_soft.ncols();
        if class.len() != spurious_hard.len() || class.len() != spurious_soft.nrows() {
            return Err(GicError::Shape("group assignment columns disagree in length".into()));
        }
        if num_classes < 2 || a < 2 {
            return Err(GicError::Spec(format!("need C >= 2 and A >= 2, got C={num_classes}, A={a}")));
        }
        if class.iter().any(|&y| y >= num_classes) || spurious_hard.iter().any(|&s| s >= a) {
            return Err(GicError::Input("group assignment id out of range".into()));
        }
        let group_id = class.iter().zip(&spurious_hard).map(|(&y, &s)| y * a + s).collect();
        Ok(GroupAssignment {
            group_id,
            class,
            spurious_hard,
            spurious_soft,
            num_classes,
            num_spurious: a,
        })
    }

    /// Groups taken straight from oracle labels (one-hot soft column).
    pub fn oracle(class: &[usize], spurious: &[usize], num_classes: usize, num_spurious: usize) -> Result<Self> {
        let soft = crate::kl::onehot(spurious, num_spurious)?;
        Self::from_hard(class.to_vec(), spurious.to_vec(), soft, num_classes)
    }

    pub fn len(&self) -> usize {
        self.group_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_id.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes * self.num_spurious
    }

    /// Row indices of each group id, in ascending row order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_groups()];
        for (i, &g) in self.group_id.iter().enumerate() {
            out[g].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members().iter().map(Vec::len).collect()
    }

    /// CSV `index,y,ys_hat,g_hat,p0,...,p{A-1}`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["index", "y", "ys_hat", "g_hat"].map(String::from).to_vec();
        header.extend((0..self.num_spurious).map(|k| format!("p{k}")));
        let fmt = |e: csv::Error| GicError::Format {
            offset: 0,
            message: e.to_string(),
        };
        w.write_record(&header).map_err(fmt)?;
        for i in 0..self.len() {
            let mut rec = vec![
                i.to_string(),
                self.class[i].to_string(),
                self.spurious_hard[i].to_string(),
                self.group_id[i].to_string(),
            ];
            rec.extend(self.spurious_soft.row(i).iter().map(|p| format!("{p:.16e}")));
            w.write_record(&rec).map_err(fmt)?;
        }
        let bytes = w.into_inner().map_err(|e| GicError::Format {
            offset: 0,
            message: e.to_string(),
        })?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Reads a groups file; `num_classes` is the class cardinality of the data it describes.
    pub fn load_csv(path: &Path, num_classes: usize) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = csv::Reader::from_reader(bytes.as_slice());
        let header = r
            .headers()
            .map_err(|e| GicError::Format {
                offset: 1,
                message: e.to_string(),
            })?
            .clone();
        let cols: Vec<&str> = header.iter().collect();
        let a = cols.len().saturating_sub(4);
        let ok = cols.len() >= 6
            && cols[..4] == ["index", "y", "ys_hat", "g_hat"]
            && cols[4..].iter().enumerate().all(|(k, c)| *c == format!("p{k}"));
        if !ok {
            return Err(GicError::Format {
                offset: 1,
                message: format!("groups header must be `index,y,ys_hat,g_hat,p0,...`, got `{}`", cols.join(",")),
            });
        }
        let (mut class, mut hard, mut soft, mut given) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in r.records().enumerate() {
            let line = row as u64 + 2;
            let bad = |message: String| GicError::Format { offset: line, message };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let int = |j: usize| rec[j].trim().parse::<usize>().map_err(|_| bad(format!("invalid integer `{}`", &rec[j])));
            if int(0)? != row {
                return Err(bad("index column must count rows from 0".into()));
            }
            class.push(int(1)?);
            hard.push(int(2)?);
            given.push(int(3)?);
            for j in 4..4 + a {
                soft.push(rec[j].trim().parse::<f64>().map_err(|_| bad(format!("invalid probability `{}`", &rec[j])))?);
            }
        }
        let n = class.len();
        let soft = Array2::from_shape_vec((n, a), soft).map_err(|e| GicError::Shape(e.to_string()))?;
        let out = Self::from_hard(class, hard, soft, num_classes)?;
        if let Some(i) = (0..n).find(|&i| out.group_id[i] != given[i]) {
            return Err(GicError::Format {
                offset: i as u64 + 2,
                message: format!("g_hat {} disagrees with y*A + ys_hat = {}", given[i], out.group_id[i]),
            });
        }
        Ok(out)
    }
}
