//! Temporal similarity between cell demand series and the neighbor indices
//! built from it.

mod neighbors;
mod report;

pub use neighbors::{
    build_semantic_neighbors, build_spatial_neighbors, read_neighbor_index, write_neighbor_index, Metric,
    NeighborIndex, TIE_BREAK_VERSION,
};
pub use report::{neighbor_overlap, CellSimilarity, SimilarityReport};

use crate::{Error, Result};

/// Pearson correlation coefficient.
///
/// Returns `Ok(None)` when either series has zero variance, where the
/// coefficient is undefined.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::Data(format!("pearson needs at least 2 observations, got {}", x.len())));
    }
    let constant = |s: &[f64]| s.iter().all(|&v| v == s[0]);
    if constant(x) || constant(y) {
        return Ok(None);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

#[inline(always)]
fn min2(a: f64, b: f64) -> f64 {
    if b < a {
        b
    } else {
        a
    }
}

/// Dynamic time warping distance with `|x_i - y_j|` as the local cost and
/// the symmetric step set `{(1,0), (0,1), (1,1)}`.
///
/// `band` restricts warping to `|i - j| <= band` (Sakoe-Chiba); `None` is
/// exact DTW.
pub fn dtw(x: &[f64], y: &[f64], band: Option<usize>) -> Result<f64> {
    check_dtw_args(x, y, band)?;
    Ok(dtw_bounded(x, y, band, f64::INFINITY).expect("unbounded DTW never abandons"))
}

pub(crate) fn check_dtw_args(x: &[f64], y: &[f64], band: Option<usize>) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Data("dtw of an empty sequence".into()));
    }
    if let Some(b) = band {
        let diff = x.len().abs_diff(y.len());
        if b < diff {
            return Err(Error::Config(format!(
                "dtw band {b} is narrower than the length difference {diff}"
            )));
        }
    }
    Ok(())
}

/// DTW that gives up as soon as every partial path exceeds `threshold`,
/// returning `None`. A completed computation returns the exact distance.
///
/// Arguments are assumed valid (see [`dtw`]).
pub fn dtw_bounded(x: &[f64], y: &[f64], band: Option<usize>, threshold: f64) -> Option<f64> {
    // rows run over the longer series so the two buffers are O(min(|x|, |y|))
    let (rows, cols) = if x.len() >= y.len() { (x, y) } else { (y, x) };
    let m = cols.len();
    let band = band.unwrap_or(usize::MAX);
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![f64::INFINITY; m];

    for (i, &a) in rows.iter().enumerate() {
        let lo = i.saturating_sub(band);
        let hi = i.saturating_add(band).min(m - 1);
        if lo > hi {
            return None;
        }
        // cells left of the band in this row stay unreachable
        if lo > 0 {
            cur[lo - 1] = f64::INFINITY;
        }
        let mut row_min = f64::INFINITY;
        // the virtual cell before (0, 0) costs nothing
        let mut diag = if i == 0 { 0.0 } else if lo > 0 { prev[lo - 1] } else { f64::INFINITY };
        let mut left = f64::INFINITY;
        for j in lo..=hi {
            let up = prev[j];
            let v = (a - cols[j]).abs() + min2(min2(up, diag), left);
            cur[j] = v;
            row_min = min2(row_min, v);
            diag = up;
            left = v;
        }
        if hi + 1 < m {
            cur[hi + 1] = f64::INFINITY;
        }
        if row_min > threshold {
            return None;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Some(prev[m - 1])
}
