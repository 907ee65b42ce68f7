//! Decision-boundary tracing and a standalone SVG scatter plot.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::data::LabeledDataset;
use crate::error::{GicError, Result};

/// Straight piece of a traced zero set.
pub type Segment = [(f64, f64); 2];

/// Zero set of `score` over a `resolution x resolution` lattice on the box,
/// by marching squares with linear interpolation along cell edges.
pub fn trace_boundary<F>(score: F, x_range: (f64, f64), y_range: (f64, f64), resolution: usize) -> Result<Vec<Segment>>
where
    F: Fn(&Array2<f64>) -> Result<Vec<f64>>,
{
    let r = resolution.max(2);
    let xs: Vec<f64> = (0..r).map(|i| x_range.0 + (x_range.1 - x_range.0) * i as f64 / (r - 1) as f64).collect();
    let ys: Vec<f64> = (0..r).map(|j| y_range.0 + (y_range.1 - y_range.0) * j as f64 / (r - 1) as f64).collect();
    let grid = Array2::from_shape_fn((r * r, 2), |(k, c)| if c == 0 { xs[k % r] } else { ys[k / r] });
    let s = score(&grid)?;
    if s.len() != r * r {
        return Err(GicError::Shape("score returned the wrong number of values".into()));
    }
    let at = |i: usize, j: usize| s[j * r + i];
    let cross = |p: (f64, f64), sp: f64, q: (f64, f64), sq: f64| {
        let t = sp / (sp - sq);
        (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
    };
    let mut segments = Vec::new();
    for j in 0..r - 1 {
        for i in 0..r - 1 {
            let corners = [
                ((xs[i], ys[j]), at(i, j)),
                ((xs[i + 1], ys[j]), at(i + 1, j)),
                ((xs[i + 1], ys[j + 1]), at(i + 1, j + 1)),
                ((xs[i], ys[j + 1]), at(i, j + 1)),
            ];
            let mut hits = Vec::with_capacity(4);
            for k in 0..4 {
                let (p, sp) = corners[k];
                let (q, sq) = corners[(k + 1) % 4];
                if (sp < 0.0) != (sq < 0.0) {
                    hits.push(cross(p, sp, q, sq));
                }
            }
            for pair in hits.chunks_exact(2) {
                segments.push([pair[0], pair[1]]);
            }
        }
    }
    Ok(segments)
}

/// A named scorer whose zero set is drawn; positive means class 1.
pub struct BoundaryModel<'a> {
    pub name: String,
    pub margin: Box<dyn Fn(&Array2<f64>) -> Result<Vec<f64>> + 'a>,
}

const GROUP_COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const LINE_COLORS: [&str; 6] = ["#000000", "#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#a65628"];

/// Scatter of the dataset colored by oracle group, with each model's boundary.
pub fn plot_boundary_2d(models: &[BoundaryModel<'_>], data: &LabeledDataset, path: &Path) -> Result<()> {
    if data.dim() != 2 {
        return Err(GicError::Dimension(format!("boundary plots need 2-D features, got {}", data.dim())));
    }
    let x = data.features();
    let bounds = |c: usize| {
        let (lo, hi) = x.column(c).iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        if lo.is_finite() {
            (lo - 0.5, hi + 0.5)
        } else {
            (0.0, 1.0)
        }
    };
    let (xr, yr) = (bounds(0), bounds(1));
    let (w, h, pad) = (640.0, 640.0, 40.0);
    let px = |v: f64| pad + (v - xr.0) / (xr.1 - xr.0) * (w - 2.0 * pad);
    let py = |v: f64| h - pad - (v - yr.0) / (yr.1 - yr.0) * (h - 2.0 * pad);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let groups = data.group_ids();
    for i in 0..data.len() {
        let color = groups.as_ref().map_or(GROUP_COLORS[0], |g| GROUP_COLORS[g[i] % GROUP_COLORS.len()]);
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{color}" fill-opacity="0.5"/>"#,
            px(x[[i, 0]]),
            py(x[[i, 1]])
        );
    }
    for (k, m) in models.iter().enumerate() {
        let color = LINE_COLORS[k % LINE_COLORS.len()];
        let segs = trace_boundary(&m.margin, xr, yr, 200)?;
        let mut d = String::new();
        for [a, b] in &segs {
            let _ = write!(d, "M{:.2} {:.2}L{:.2} {:.2}", px(a.0), py(a.1), px(b.0), py(b.1));
        }
        let _ = writeln!(
            svg,
            r#"<path class="boundary" data-model="{}" d="{d}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            m.name
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            pad + 5.0,
            pad + 14.0 * (k as f64 + 1.0),
            m.name
        );
    }
    svg.push_str("</svg>\n");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_score_traces_vertical_line() {
        let score = |g: &Array2<f64>| Ok(g.rows().into_iter().map(|r| r[0] - 6.0).collect());
        let segs = trace_boundary(score, (3.0, 9.0), (3.0, 9.0), 200).unwrap();
        assert!(!segs.is_empty());
        let step = 6.0 / 199.0;
        for s in &segs {
            for p in s {
                assert!((p.0 - 6.0).abs() <= step, "{p:?}");
            }
        }
    }

    #[test]
    fn non_planar_data_is_a_dimension_error() {
        let d = LabeledDataset::new("d", Array2::zeros((2, 3)), None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(plot_boundary_2d(&[], &d, &dir.path().join("p.svg")), Err(GicError::Dimension(_))));
    }
}
