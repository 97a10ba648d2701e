use std::fmt::Write as _;

use serde::Serialize;

use super::{dtw, pearson, NeighborIndex};
use crate::grid::{Cell, DemandTensor};
use crate::{Error, Execution, Result};

/// Similarity of one central cell to its semantic and spatial neighbors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSimilarity {
    pub cell: Cell,
    /// Shared non-central cells of the two lists.
    pub overlap: usize,
    pub semantic_pearson: Option<f64>,
    pub spatial_pearson: Option<f64>,
    pub semantic_dtw: Option<f64>,
    pub spatial_dtw: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub rows: Vec<CellSimilarity>,
}

/// Compare each semantic list with the cell's spatial list over the
/// training series in `train`. Mean Pearson skips neighbors whose
/// correlation is undefined; DTW distances are raw (not path-normalized).
pub fn neighbor_overlap(
    semantic: &NeighborIndex,
    spatial: &NeighborIndex,
    train: &DemandTensor,
    exec: Execution,
) -> Result<SimilarityReport> {
    if (semantic.width, semantic.height) != (spatial.width, spatial.height)
        || (semantic.width, semantic.height) != (train.width(), train.height())
    {
        return Err(Error::shape(
            "neighbor_overlap",
            &[semantic.width, semantic.height],
            &[spatial.width, spatial.height],
        ));
    }
    if semantic.kernel_size != spatial.kernel_size {
        return Err(Error::shape("neighbor_overlap", &[semantic.kernel_size], &[spatial.kernel_size]));
    }
    let h = train.height();
    let series: Vec<Vec<f64>> = (0..train.cells()).map(|f| train.series(f)).collect();
    let cells: Vec<(Cell, Vec<Cell>)> = semantic
        .entries()
        .map(|(c, l)| (c, l[1..].iter().flatten().copied().collect()))
        .collect();

    let rows = exec.map_range(cells.len(), |a| {
        let (cell, sem) = &cells[a];
        let spa: Vec<Cell> = spatial
            .get(*cell)
            .map(|l| l[1..].iter().flatten().copied().collect())
            .unwrap_or_default();
        let overlap = sem.iter().filter(|c| spa.contains(c)).count();
        let center = &series[cell.flat(h)];
        let mean_pearson = |list: &[Cell]| {
            mean(list.iter().filter_map(|c| pearson(center, &series[c.flat(h)]).ok().flatten()))
        };
        let mean_dtw = |list: &[Cell]| mean(list.iter().filter_map(|c| dtw(center, &series[c.flat(h)], None).ok()));
        CellSimilarity {
            cell: *cell,
            overlap,
            semantic_pearson: mean_pearson(sem),
            spatial_pearson: mean_pearson(&spa),
            semantic_dtw: mean_dtw(sem),
            spatial_dtw: mean_dtw(&spa),
        }
    });
    Ok(SimilarityReport { rows })
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Linear-interpolated quantile of an unsorted sample.
fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v}"))
}

type Column = fn(&CellSimilarity) -> Option<f64>;

impl SimilarityReport {
    /// Share of central cells whose semantic and spatial lists share at most
    /// `max_shared` cells.
    pub fn fraction_overlap_at_most(&self, max_shared: usize) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.overlap <= max_shared).count() as f64 / self.rows.len() as f64
    }

    /// Number of cells with each overlap count 0..=8.
    pub fn overlap_histogram(&self) -> Vec<usize> {
        let max = self.rows.iter().map(|r| r.overlap).max().unwrap_or(0).max(8);
        let mut hist = vec![0; max + 1];
        for r in &self.rows {
            hist[r.overlap] += 1;
        }
        hist
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell_i,cell_j,overlap,semantic_pearson,spatial_pearson,semantic_dtw,spatial_dtw\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.cell.i,
                r.cell.j,
                r.overlap,
                opt(r.semantic_pearson),
                opt(r.spatial_pearson),
                opt(r.semantic_dtw),
                opt(r.spatial_dtw)
            )
            .unwrap();
        }
        out
    }

    /// Quantiles of overlap and of the mean similarities.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        writeln!(out, "cells={}", self.rows.len()).unwrap();
        let hist: Vec<String> = self.overlap_histogram().iter().map(|n| n.to_string()).collect();
        writeln!(out, "overlap_histogram={}", hist.join(",")).unwrap();
        writeln!(out, "fraction_overlap_le_1={}", self.fraction_overlap_at_most(1)).unwrap();
        let columns: [(&str, Column); 5] = [
            ("overlap", |r| Some(r.overlap as f64)),
            ("semantic_pearson", |r| r.semantic_pearson),
            ("spatial_pearson", |r| r.spatial_pearson),
            ("semantic_dtw", |r| r.semantic_dtw),
            ("spatial_dtw", |r| r.spatial_dtw),
        ];
        for (name, get) in columns {
            let v: Vec<f64> = self.rows.iter().filter_map(get).collect();
            let qs: Vec<String> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&q| opt(quantile(&v, q))).collect();
            writeln!(out, "{name}_quantiles_0_25_50_75_100={}", qs.join(",")).unwrap();
        }
        out
    }
}
