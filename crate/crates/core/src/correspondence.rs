//! Point matching between two dense feature maps.
//!
//! Both maps are upsampled bilinearly with align-corners semantics: output
//! row `i` samples source row `i·(H−1)/(outH−1)`, and likewise for columns,
//! so corner cells map onto corner cells. The match for a source point is
//! the target location with the highest cosine similarity, first in
//! row-major order on ties.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::DenseFeatureMap;
use crate::error::{Error, Result};
use crate::kernels::{self, NORM_EPS};
use crate::tensor::{Scalar, Tensor};

/// `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: usize,
    pub y: usize,
}

/// Source coordinate and blend weight for output index `i` of `out` cells
/// over `n` source cells.
fn source_coord(i: usize, n: usize, out: usize) -> (usize, usize, f64) {
    if out == 1 || n == 1 {
        return (0, 0, 0.0);
    }
    let s = i as f64 * (n - 1) as f64 / (out - 1) as f64;
    let lo = (s.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    (lo, hi, s - lo as f64)
}

pub fn upsample<T: Scalar>(f: &DenseFeatureMap<T>, out_h: usize, out_w: usize) -> Result<DenseFeatureMap<T>> {
    let (h, w, c) = (f.height(), f.width(), f.channels());
    if out_h < h || out_w < w {
        return Err(Error::Range(format!("cannot upsample {h}x{w} to {out_h}x{out_w}")));
    }
    if out_h == h && out_w == w {
        return Ok(f.clone());
    }
    let rows: Vec<_> = (0..out_h).map(|i| source_coord(i, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| source_coord(j, w, out_w)).collect();
    let mut data = vec![T::zero(); out_h * out_w * c];
    data.par_chunks_mut(out_w * c).enumerate().for_each(|(i, row)| {
        let (y0, y1, ty) = rows[i];
        let ty = T::cast(ty);
        for (j, cell) in row.chunks_mut(c).enumerate() {
            let (x0, x1, tx) = cols[j];
            let tx = T::cast(tx);
            let (a, b) = (f.at_point(x0, y0), f.at_point(x1, y0));
            let (d, e) = (f.at_point(x0, y1), f.at_point(x1, y1));
            for k in 0..c {
                let top = a[k] + tx * (b[k] - a[k]);
                let bottom = d[k] + tx * (e[k] - d[k]);
                cell[k] = top + ty * (bottom - top);
            }
        }
    });
    DenseFeatureMap::new(out_h, out_w, Tensor::new(vec![out_h * out_w, c], data)?)
}

/// Best match for `p` in `target`, and the full `height×width` cosine map.
pub fn match_point<T: Scalar>(
    source: &DenseFeatureMap<T>,
    target: &DenseFeatureMap<T>,
    p: PixelPoint,
) -> Result<(PixelPoint, Tensor<T>)> {
    if source.channels() != target.channels() {
        return Err(Error::dims(
            "match_point channels",
            &[source.channels()],
            &[target.channels()],
        ));
    }
    if p.x >= source.width() || p.y >= source.height() {
        return Err(Error::Range(format!(
            "point ({}, {}) outside {}x{} source",
            p.x,
            p.y,
            source.height(),
            source.width()
        )));
    }
    let query = source.at_point(p.x, p.y);
    if kernels::norm(query) < T::cast(NORM_EPS) {
        return Err(Error::Degenerate(format!("source feature at ({}, {}) is zero", p.x, p.y)));
    }
    let heat: Vec<T> = (0..target.locations())
        .into_par_iter()
        .map(|j| kernels::cosine_sim(query, target.at(j)))
        .collect();
    let mut best = 0;
    for (j, &v) in heat.iter().enumerate() {
        if v > heat[best] {
            best = j;
        }
    }
    let w = target.width();
    let heat = Tensor::new(vec![target.height(), w], heat)?;
    Ok((PixelPoint { x: best % w, y: best / w }, heat))
}

/// Gray levels for `heat`: min maps to 0, max to 255, constant to 128.
pub fn heat_to_gray<T: Scalar>(heat: &Tensor<T>) -> Vec<u8> {
    let v: Vec<f64> = heat.as_slice().iter().map(|x| x.widen()).collect();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![128; v.len()];
    }
    v.iter().map(|&x| ((x - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Writes `<stem>.pgm` (binary P5) and `<stem>.csv` (one row per image row,
/// values as `{:.8e}`).
pub fn export_heatmap<T: Scalar>(heat: &Tensor<T>, stem: impl AsRef<Path>) -> Result<()> {
    let (h, w) = heat.matrix_dims("heatmap")?;
    if !heat.is_finite() {
        return Err(Error::Range("heatmap has non-finite values".into()));
    }
    let stem = stem.as_ref();
    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    pgm.extend(heat_to_gray(heat));
    let pgm_path = stem.with_extension("pgm");
    fs::write(&pgm_path, pgm).map_err(|e| Error::io(pgm_path, e))?;

    let mut csv = String::new();
    for r in 0..h {
        let row: Vec<String> = heat.row(r).iter().map(|x| format!("{:.8e}", x.widen())).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    let csv_path = stem.with_extension("csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path, e))
}
