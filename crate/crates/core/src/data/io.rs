//! CSV and `GICD` binary persistence.
//!
//! CSV header: `y,a,g,f0,...,f{d-1}`; a missing label or spurious column is
//! written as `-1` throughout. The `a` and `g` columns may also be omitted
//! from the header entirely.
//!
//! Binary layout (little-endian): magic `GICD`, `u32` version, `u32 n`,
//! `u32 d`, `u8` flags (bit0 labels, bit1 spurious), then labels as `u32`,
//! spurious as `u32` (each only if flagged), then row-major `f64` features.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::LabeledDataset;
use crate::error::{GicError, Result};
use crate::nn::checkpoint::Reader;

const MAGIC: &[u8; 4] = b"GICD";
const VERSION: u32 = 1;
const HEADER_BYTES: u64 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Bin,
}

impl DataFormat {
    /// `.csv` means CSV, anything else the binary format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Bin,
        }
    }
}

pub fn save_dataset(data: &LabeledDataset, path: &Path, format: DataFormat) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    match format {
        DataFormat::Csv => fs::write(path, to_csv(data)?)?,
        DataFormat::Bin => fs::write(path, to_bin(data)?)?,
    }
    Ok(())
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<LabeledDataset> {
    let bytes = fs::read(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    match format {
        DataFormat::Csv => from_csv(&bytes, name),
        DataFormat::Bin => from_bin(&bytes, name),
    }
}

fn to_csv(data: &LabeledDataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["y".to_string(), "a".to_string(), "g".to_string()];
    header.extend((0..data.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_err)?;
    let groups = data.group_ids();
    let cell = |v: Option<usize>| v.map_or("-1".to_string(), |v| v.to_string());
    for i in 0..data.len() {
        let mut rec = vec![
            cell(data.labels().map(|l| l[i])),
            cell(data.spurious().map(|a| a[i])),
            cell(groups.as_ref().map(|g| g[i])),
        ];
        // 17 significant digits round-trip every f64.
        rec.extend(data.features().row(i).iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| GicError::Format {
        offset: 0,
        message: e.to_string(),
    })
}

fn csv_err(e: csv::Error) -> GicError {
    let offset = e.position().map_or(0, |p| p.line());
    GicError::Format {
        offset,
        message: e.to_string(),
    }
}

fn from_csv(bytes: &[u8], name: String) -> Result<LabeledDataset> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(bytes);
    let header = r.headers().map_err(csv_err)?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let meta: Vec<&str> = cols.iter().take_while(|c| matches!(**c, "y" | "a" | "g")).copied().collect();
    if !matches!(meta.as_slice(), ["y"] | ["y", "a"] | ["y", "a", "g"]) {
        return Err(GicError::Format {
            offset: 1,
            message: format!("header must start with `y,a,g`, got `{}`", cols.join(",")),
        });
    }
    for (j, c) in cols[meta.len()..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(GicError::Format {
                offset: 1,
                message: format!("expected column `f{j}`, got `{c}`"),
            });
        }
    }
    let (m, d) = (meta.len(), cols.len() - meta.len());
    let mut ys: Vec<Option<usize>> = Vec::new();
    let mut as_: Vec<Option<usize>> = Vec::new();
    let mut gs: Vec<Option<usize>> = Vec::new();
    let mut feats = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| GicError::Format { offset: line, message };
        if rec.len() != cols.len() {
            return Err(bad(format!("row has {} fields, header has {}", rec.len(), cols.len())));
        }
        let id = |s: &str| -> Result<Option<usize>> {
            match s.trim().parse::<i64>() {
                Ok(-1) => Ok(None),
                Ok(v) if v >= 0 => Ok(Some(v as usize)),
                _ => Err(bad(format!("invalid id `{s}`"))),
            }
        };
        ys.push(id(&rec[0])?);
        as_.push(if m > 1 { id(&rec[1])? } else { None });
        gs.push(if m > 2 { id(&rec[2])? } else { None });
        for s in rec.iter().skip(m) {
            feats.push(s.trim().parse::<f64>().map_err(|_| bad(format!("invalid feature `{s}`")))?);
        }
    }
    let n = ys.len();
    let column = |v: &[Option<usize>], what: &str| -> Result<Option<Vec<usize>>> {
        if v.iter().all(Option::is_none) && n > 0 {
            return Ok(None);
        }
        v.iter()
            .enumerate()
            .map(|(i, x)| {
                x.ok_or_else(|| GicError::Format {
                    offset: i as u64 + 2,
                    message: format!("{what} column mixes present and absent entries"),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    };
    let labels = column(&ys, "label")?;
    let spurious = column(&as_, "spurious")?;
    let c = labels.as_ref().and_then(|v| v.iter().max()).map_or(2, |&x| (x + 1).max(2));
    let mut a = spurious.as_ref().and_then(|v| v.iter().max()).map_or(2, |&x| (x + 1).max(2));
    // The group column pins A down when some row has y > 0.
    if let (Some(ls), Some(sp)) = (&labels, &spurious) {
        if let Some(i) = (0..n).find(|&i| ls[i] > 0 && gs[i].is_some()) {
            let g = gs[i].unwrap();
            if g >= sp[i] && (g - sp[i]) % ls[i] == 0 {
                a = a.max((g - sp[i]) / ls[i]);
            }
        }
        for i in 0..n {
            if let Some(g) = gs[i] {
                if g != ls[i] * a + sp[i] {
                    return Err(GicError::Format {
                        offset: i as u64 + 2,
                        message: format!("group id {g} disagrees with y*A + a = {}", ls[i] * a + sp[i]),
                    });
                }
            }
        }
    }
    let features = Array2::from_shape_vec((n, d), feats).map_err(|e| GicError::Shape(e.to_string()))?;
    LabeledDataset::with_cardinalities(name, features, labels, spurious, c, a)
}

fn to_bin(data: &LabeledDataset) -> Result<Vec<u8>> {
    let (n, d) = (data.len(), data.dim());
    let narrow = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| GicError::Input(format!("{what} {v} does not fit the binary format")))
    };
    let mut out = Vec::with_capacity(HEADER_BYTES as usize + 8 * (n + n * d));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&narrow(n, "row count")?.to_le_bytes());
    out.extend_from_slice(&narrow(d, "dimension")?.to_le_bytes());
    let flags = u8::from(data.labels().is_some()) | (u8::from(data.spurious().is_some()) << 1);
    out.push(flags);
    for col in [data.labels(), data.spurious()].into_iter().flatten() {
        for &v in col {
            out.extend_from_slice(&narrow(v, "id")?.to_le_bytes());
        }
    }
    for v in data.features().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn from_bin(bytes: &[u8], name: String) -> Result<LabeledDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(GicError::Format {
            offset: 0,
            message: "unknown magic, expected GICD".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(GicError::Format {
            offset: 4,
            message: format!("unsupported dataset version {version}"),
        });
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let flags = r.take(1)?[0];
    if flags & !0b11 != 0 {
        return Err(GicError::Format {
            offset: 16,
            message: format!("unknown flag bits {flags:#04x}"),
        });
    }
    let mut ids = |present: bool| -> Result<Option<Vec<usize>>> {
        if !present {
            return Ok(None);
        }
        (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>().map(Some)
    };
    let labels = ids(flags & 1 != 0)?;
    let spurious = ids(flags & 2 != 0)?;
    let feature_start = r.pos as u64;
    let need = (n as u64) * (d as u64) * 8;
    let have = (bytes.len() as u64).saturating_sub(feature_start);
    if have < need {
        return Err(GicError::Format {
            offset: bytes.len() as u64,
            message: format!("feature block truncated: expected {need} bytes from offset {feature_start}, found {have}"),
        });
    }
    if have > need {
        return Err(GicError::Format {
            offset: feature_start + need,
            message: "trailing bytes after feature block".into(),
        });
    }
    let feats: Vec<f64> = (0..n * d).map(|_| r.f64()).collect::<Result<_>>()?;
    let features = Array2::from_shape_vec((n, d), feats).map_err(|e| GicError::Shape(e.to_string()))?;
    LabeledDataset::new(name, features, labels, spurious)
}
