//! `GICM` checkpoint format.
//!
//! Layout (little-endian): magic `GICM`, `u32` version, `u32` layer count,
//! then per layer `u32 in_dim, u32 out_dim, u8 activation tag`, then for each
//! layer its weights (row-major `f64`) followed by its biases.

use ndarray::{Array1, Array2};

use super::{Activation, MlpModel};
use crate::error::{GicError, Result};

const MAGIC: &[u8; 4] = b"GICM";
const VERSION: u32 = 1;

impl MlpModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 9 * self.num_layers() + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_layers() as u32).to_le_bytes());
        for (w, act) in self.weights().iter().zip(self.activations()) {
            out.extend_from_slice(&(w.ncols() as u32).to_le_bytes());
            out.extend_from_slice(&(w.nrows() as u32).to_le_bytes());
            out.push(act.tag());
        }
        for (w, b) in self.weights().iter().zip(self.biases()) {
            for v in w.iter().chain(b.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(GicError::Format {
                offset: 0,
                message: "unknown magic, expected GICM".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(GicError::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let layers = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(layers);
        for _ in 0..layers {
            let at = r.pos as u64;
            let (din, dout) = (r.u32()? as usize, r.u32()? as usize);
            let tag = r.take(1)?[0];
            let act = Activation::from_tag(tag).ok_or_else(|| GicError::Format {
                offset: at + 8,
                message: format!("unknown activation tag {tag}"),
            })?;
            shapes.push((din, dout, act));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        let mut activations = Vec::with_capacity(layers);
        for (din, dout, act) in shapes {
            let w: Vec<f64> = (0..din * dout).map(|_| r.f64()).collect::<Result<_>>()?;
            let b: Vec<f64> = (0..dout).map(|_| r.f64()).collect::<Result<_>>()?;
            weights.push(Array2::from_shape_vec((dout, din), w).map_err(|e| GicError::Shape(e.to_string()))?);
            biases.push(Array1::from_vec(b));
            activations.push(act);
        }
        if r.pos != bytes.len() {
            return Err(GicError::Format {
                offset: r.pos as u64,
                message: "trailing bytes after checkpoint".into(),
            });
        }
        MlpModel::from_parts(weights, biases, activations)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(GicError::Format {
                offset: self.pos as u64,
                message: format!("unexpected end of data: needed {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut r = rng::stream(11, "t");
        let m = MlpModel::classifier(&[3, 7, 2], &mut r).unwrap();
        let back = MlpModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let mut r = rng::stream(11, "t");
        let m = MlpModel::classifier(&[3, 2], &mut r).unwrap();
        let mut bytes = m.to_bytes();
        assert!(matches!(MlpModel::from_bytes(&bytes[..bytes.len() - 3]), Err(GicError::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(MlpModel::from_bytes(&bytes), Err(GicError::Format { offset: 0, .. })));
    }
}
