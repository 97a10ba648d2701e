use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{check_dtw_args, dtw_bounded, pearson};
use crate::grid::{Cell, DemandTensor};
use crate::{Error, Execution, Result};

/// Version tag of the ranking/tie-break rule written into index files.
pub const TIE_BREAK_VERSION: &str = "row-major-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Pearson,
    Dtw,
    Spatial,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Pearson => "pearson",
            Metric::Dtw => "dtw",
            Metric::Spatial => "spatial",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pearson" => Ok(Metric::Pearson),
            "dtw" => Ok(Metric::Dtw),
            "spatial" => Ok(Metric::Spatial),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

/// Per-cell kernel lists. Slot 0 of every list is the central cell; `None`
/// slots are zero-padding sentinels that always read as 0.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    pub metric: Metric,
    pub kernel_size: usize,
    pub width: usize,
    pub height: usize,
    pub band: Option<usize>,
    /// Flat cell order; `None` for cells without a list (inactive cells).
    entries: Vec<Option<Vec<Option<Cell>>>>,
}

impl NeighborIndex {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, cell: Cell) -> Option<&[Option<Cell>]> {
        self.entries[cell.flat(self.height)].as_deref()
    }

    pub fn entries(&self) -> impl Iterator<Item = (Cell, &[Option<Cell>])> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(f, e)| e.as_deref().map(|e| (Cell::from_flat(f, self.height), e)))
    }

    /// Dense `cells x kernel_size` table of flat neighbor positions for the
    /// convolution. Cells without a list get a self-only kernel.
    pub fn kernel_table(&self) -> Vec<Option<usize>> {
        let s = self.kernel_size;
        let mut table = vec![None; self.cells() * s];
        for (f, row) in table.chunks_mut(s).enumerate() {
            match &self.entries[f] {
                Some(list) => {
                    for (slot, c) in row.iter_mut().zip(list) {
                        *slot = c.map(|c| c.flat(self.height));
                    }
                }
                None => row[0] = Some(f),
            }
        }
        table
    }

    fn validate(&self) -> Result<()> {
        for (cell, list) in self.entries() {
            if list.len() != self.kernel_size {
                return Err(Error::Data(format!("cell {cell} lists {} cells, expected {}", list.len(), self.kernel_size)));
            }
            if list[0] != Some(cell) {
                return Err(Error::Data(format!("cell {cell} is not the first entry of its own list")));
            }
            let mut seen: Vec<Cell> = list.iter().flatten().copied().collect();
            if seen.iter().any(|c| c.i == 0 || c.j == 0 || c.i > self.width || c.j > self.height) {
                return Err(Error::Data(format!("cell {cell} lists a neighbor outside the grid")));
            }
            seen.sort();
            seen.dedup();
            if seen.len() != list.iter().flatten().count() {
                return Err(Error::Data(format!("cell {cell} lists a neighbor twice")));
            }
        }
        Ok(())
    }
}

/// 3x3 Moore neighborhoods in row-major order with the center moved to the
/// front. Positions outside the grid become zero sentinels.
pub fn build_spatial_neighbors(width: usize, height: usize) -> NeighborIndex {
    let mut entries = Vec::with_capacity(width * height);
    for f in 0..width * height {
        let c = Cell::from_flat(f, height);
        let mut list = vec![Some(c)];
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                if di == 0 && dj == 0 {
                    continue;
                }
                let (i, j) = (c.i as i64 + di, c.j as i64 + dj);
                let inside = i >= 1 && j >= 1 && i <= width as i64 && j <= height as i64;
                list.push(inside.then(|| Cell::new(i as usize, j as usize)));
            }
        }
        entries.push(Some(list));
    }
    NeighborIndex {
        metric: Metric::Spatial,
        kernel_size: 9,
        width,
        height,
        band: None,
        entries,
    }
}

/// Top-`k` most similar active cells for every active cell, computed on the
/// full series of `train`.
///
/// Pearson ranks by descending signed correlation and skips cells whose
/// correlation is undefined; DTW ranks by ascending distance. Ties go to
/// the row-major-smaller cell.
pub fn build_semantic_neighbors(
    train: &DemandTensor,
    active: &[bool],
    metric: Metric,
    k: usize,
    band: Option<usize>,
    exec: Execution,
) -> Result<NeighborIndex> {
    let n = train.cells();
    if active.len() != n {
        return Err(Error::shape("build_semantic_neighbors", &[active.len()], &[n]));
    }
    if metric == Metric::Spatial {
        return Err(Error::Config("use build_spatial_neighbors for spatial indices".into()));
    }
    let active_cells: Vec<usize> = (0..n).filter(|&f| active[f]).collect();
    if active_cells.len() < k + 1 {
        return Err(Error::Data(format!(
            "{} active cells cannot supply {k} neighbors each",
            active_cells.len()
        )));
    }
    let series: Vec<Vec<f64>> = (0..n).map(|f| train.series(f)).collect();
    if metric == Metric::Dtw {
        check_dtw_args(&series[0], &series[0], band)?;
    }

    let lists: Vec<Result<Vec<usize>>> = exec.map_range(active_cells.len(), |a| {
        let center = active_cells[a];
        let ranked = match metric {
            Metric::Pearson => top_k_pearson(&series, center, &active_cells, k)?,
            _ => top_k_dtw(&series, center, &active_cells, k, band),
        };
        if ranked.len() < k {
            return Err(Error::Data(format!(
                "cell {} has only {} valid neighbor candidates, {k} required",
                Cell::from_flat(center, train.height()),
                ranked.len()
            )));
        }
        Ok(ranked)
    });

    let mut entries = vec![None; n];
    for (&center, ranked) in active_cells.iter().zip(lists) {
        let h = train.height();
        let mut list = vec![Some(Cell::from_flat(center, h))];
        list.extend(ranked?.into_iter().map(|f| Some(Cell::from_flat(f, h))));
        entries[center] = Some(list);
    }
    Ok(NeighborIndex {
        metric,
        kernel_size: k + 1,
        width: train.width(),
        height: train.height(),
        band: if metric == Metric::Dtw { band } else { None },
        entries,
    })
}

fn top_k_pearson(series: &[Vec<f64>], center: usize, candidates: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for &c in candidates {
        if c == center {
            continue;
        }
        if let Some(r) = pearson(&series[center], &series[c])? {
            scored.push((r, c));
        }
    }
    // candidates arrive in row-major order and the sort is stable
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored.into_iter().take(k).map(|(_, c)| c).collect())
}

fn top_k_dtw(series: &[Vec<f64>], center: usize, candidates: &[usize], k: usize, band: Option<usize>) -> Vec<usize> {
    // sorted ascending by distance; equal distances keep arrival order
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for &c in candidates {
        if c == center {
            continue;
        }
        let threshold = if best.len() == k { best[k - 1].0 } else { f64::INFINITY };
        let Some(d) = dtw_bounded(&series[center], &series[c], band, threshold) else {
            continue;
        };
        if best.len() == k && d >= threshold {
            continue;
        }
        let pos = best.partition_point(|&(bd, _)| bd <= d);
        best.insert(pos, (d, c));
        best.truncate(k);
    }
    best.into_iter().map(|(_, c)| c).collect()
}

fn fmt_cell(c: Option<Cell>) -> String {
    match c {
        Some(c) => format!("{},{}", c.i, c.j),
        None => "-".into(),
    }
}

/// Canonical text rendering: a `key=value` header, then one row per central
/// cell in row-major order.
pub fn write_neighbor_index(path: &Path, idx: &NeighborIndex) -> Result<()> {
    let mut out = String::new();
    out.push_str("# bikedemand neighbor index\n");
    writeln!(out, "format_version=1").unwrap();
    writeln!(out, "metric={}", idx.metric.as_str()).unwrap();
    writeln!(out, "kernel_size={}", idx.kernel_size).unwrap();
    writeln!(out, "grid={}x{}", idx.width, idx.height).unwrap();
    writeln!(out, "band={}", idx.band.map_or("none".to_string(), |b| b.to_string())).unwrap();
    writeln!(out, "tie_break={TIE_BREAK_VERSION}").unwrap();
    writeln!(out, "rows={}", idx.entries().count()).unwrap();
    for (cell, list) in idx.entries() {
        let row: Vec<String> = list.iter().map(|&c| fmt_cell(c)).collect();
        writeln!(out, "{}\t{}", fmt_cell(Some(cell)), row.join(" ")).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_neighbor_index(path: &Path) -> Result<NeighborIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_neighbor_index(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn parse_neighbor_index(text: &str) -> std::result::Result<NeighborIndex, String> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let mut header = std::collections::HashMap::new();
    for _ in 0..7 {
        let line = lines.next().ok_or("truncated header")?;
        let (k, v) = line.split_once('=').ok_or_else(|| format!("bad header line {line:?}"))?;
        header.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| header.get(k).cloned().ok_or_else(|| format!("missing {k}"));
    if get("format_version")? != "1" {
        return Err("unsupported format_version".into());
    }
    if get("tie_break")? != TIE_BREAK_VERSION {
        return Err(format!("index was built with tie-break rule {}", get("tie_break")?));
    }
    let metric: Metric = get("metric")?.parse().map_err(|e: Error| e.to_string())?;
    let kernel_size: usize = get("kernel_size")?.parse().map_err(|_| "bad kernel_size")?;
    let grid = get("grid")?;
    let (w, h) = grid.split_once('x').ok_or("bad grid")?;
    let (width, height): (usize, usize) = (w.parse().map_err(|_| "bad grid")?, h.parse().map_err(|_| "bad grid")?);
    let band = match get("band")?.as_str() {
        "none" => None,
        b => Some(b.parse().map_err(|_| "bad band")?),
    };
    let rows: usize = get("rows")?.parse().map_err(|_| "bad rows")?;

    let parse_cell = |s: &str| -> std::result::Result<Option<Cell>, String> {
        if s == "-" {
            return Ok(None);
        }
        let (i, j) = s.split_once(',').ok_or_else(|| format!("bad cell {s:?}"))?;
        Ok(Some(Cell::new(
            i.parse().map_err(|_| format!("bad cell {s:?}"))?,
            j.parse().map_err(|_| format!("bad cell {s:?}"))?,
        )))
    };
    let mut entries = vec![None; width * height];
    let mut count = 0;
    for line in lines {
        let (center, list) = line.split_once('\t').ok_or_else(|| format!("bad row {line:?}"))?;
        let center = parse_cell(center)?.ok_or("sentinel as central cell")?;
        if center.i == 0 || center.j == 0 || center.i > width || center.j > height {
            return Err(format!("central cell {center} outside the grid"));
        }
        let list = list.split(' ').map(parse_cell).collect::<std::result::Result<Vec<_>, _>>()?;
        entries[center.flat(height)] = Some(list);
        count += 1;
    }
    if count != rows {
        return Err(format!("expected {rows} rows, found {count}"));
    }
    let idx = NeighborIndex {
        metric,
        kernel_size,
        width,
        height,
        band,
        entries,
    };
    idx.validate().map_err(|e| e.to_string())?;
    Ok(idx)
}
