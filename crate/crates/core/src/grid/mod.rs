//! Hourly demand grids built from trip records.
//!
//! A city is covered by a `width x height` raster of square cells. Cell
//! `(i, j)` uses 1-based indices: `i` runs east (along the width), `j` runs
//! north (along the height). Flat cell order is row-major over `(i, j)` and
//! tensor values are stored k-major, then `i`, then `j`.

mod ingest;
mod io;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use ingest::{ingest_csv, parse_timestamp, read_station_table, TripProfile, TripReader};
pub use io::{read_tensor, write_tensor};

const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

/// Where a trip starts or ends.
#[derive(Clone, Debug, PartialEq)]
pub enum Location {
    Point(GeoPoint),
    Station(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripRecord {
    /// Unix seconds.
    pub start_time: i64,
    pub end_time: i64,
    pub origin: Location,
    pub destination: Location,
}

pub type StationTable = HashMap<String, GeoPoint>;

/// A grid cell, 1-based on both axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub i: usize,
    pub j: usize,
}

impl Cell {
    pub const fn new(i: usize, j: usize) -> Self {
        Cell { i, j }
    }

    /// Row-major flat position for a grid of the given height.
    pub fn flat(self, height: usize) -> usize {
        (self.i - 1) * height + (self.j - 1)
    }

    pub fn from_flat(flat: usize, height: usize) -> Self {
        Cell {
            i: flat / height + 1,
            j: flat % height + 1,
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.i, self.j)
    }
}

/// Raster definition shared by ingestion, similarity and the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Southwest corner of cell (1, 1).
    pub origin: GeoPoint,
    #[serde(default = "default_cell_size")]
    pub cell_size_m: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_time_bin")]
    pub time_bin_s: i64,
    /// Unix seconds of the start of bin 0.
    pub t0: i64,
    /// Offset of the dataset's local clock from UTC, used for peak-hour
    /// slicing and for timestamps that carry no offset.
    #[serde(default)]
    pub utc_offset_s: i64,
    #[serde(skip)]
    pub stations: Option<StationTable>,
}

fn default_cell_size() -> f64 {
    1000.0
}

fn default_time_bin() -> i64 {
    3600
}

impl GridSpec {
    /// Unanchored grid for synthetic data.
    pub fn synthetic(width: usize, height: usize) -> Self {
        GridSpec {
            origin: GeoPoint { lon: 0.0, lat: 0.0 },
            cell_size_m: default_cell_size(),
            width,
            height,
            time_bin_s: default_time_bin(),
            t0: 0,
            utc_offset_s: 0,
            stations: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell_size_m.is_nan() || self.cell_size_m <= 0.0 {
            return Err(Error::Config(format!("cell_size_m must be > 0, got {}", self.cell_size_m)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "grid must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        if self.time_bin_s <= 0 {
            return Err(Error::Config(format!("time_bin_s must be > 0, got {}", self.time_bin_s)));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Local clock hour (0..24) at the start of bin `k`.
    pub fn local_hour(&self, k: usize) -> u32 {
        let t = self.t0 + k as i64 * self.time_bin_s + self.utc_offset_s;
        (t.rem_euclid(86_400) / 3600) as u32
    }
}

/// A location reference to a station missing from the station table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnknownStation(pub String);

/// Map a point or station onto the grid.
///
/// Cells are half-open `[lo, hi)` on both axes except along the far edges of
/// the grid, which are closed, so a point on a shared edge belongs to the
/// cell with the larger index.
pub fn resolve_cell(p: &Location, spec: &GridSpec) -> Result<Option<Cell>, UnknownStation> {
    let point = match p {
        Location::Point(g) => *g,
        Location::Station(id) => match spec.stations.as_ref().and_then(|t| t.get(id)) {
            Some(g) => *g,
            None => return Err(UnknownStation(id.clone())),
        },
    };
    Ok(point_to_cell(point, spec))
}

fn point_to_cell(p: GeoPoint, spec: &GridSpec) -> Option<Cell> {
    if !p.lon.is_finite() || !p.lat.is_finite() {
        return None;
    }
    let lat0 = spec.origin.lat.to_radians();
    let east = EARTH_RADIUS_M * (p.lon - spec.origin.lon).to_radians() * lat0.cos();
    let north = EARTH_RADIUS_M * (p.lat - spec.origin.lat).to_radians();
    let i = axis_index(east, spec.cell_size_m, spec.width)?;
    let j = axis_index(north, spec.cell_size_m, spec.height)?;
    Some(Cell { i, j })
}

fn axis_index(offset_m: f64, cell: f64, n: usize) -> Option<usize> {
    let extent = cell * n as f64;
    if offset_m < 0.0 || offset_m > extent {
        return None;
    }
    let idx = (offset_m / cell).floor() as usize;
    Some(idx.min(n - 1) + 1)
}

/// Per-reason tallies of what happened to every input record.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: u64,
    pub accepted: u64,
    pub dropped_intracell: u64,
    pub dropped_outside_horizon: u64,
    pub dropped_origin_outside_grid: u64,
    pub dropped_unknown_station: u64,
    pub dropped_malformed: u64,
    pub warnings: Vec<String>,
}

impl IngestReport {
    pub fn dropped(&self) -> u64 {
        self.dropped_intracell
            + self.dropped_outside_horizon
            + self.dropped_origin_outside_grid
            + self.dropped_unknown_station
            + self.dropped_malformed
    }

    fn warn_unknown_station(&mut self, id: &str) {
        const MAX_STATION_WARNINGS: usize = 20;
        let n = self.warnings.iter().filter(|w| w.starts_with("unknown station")).count();
        if n < MAX_STATION_WARNINGS {
            self.warnings.push(format!("unknown station id {id:?}"));
        }
    }
}

/// Stack of `bins` demand grids, `values[k][i][j]` = pick-ups in cell
/// `(i, j)` during bin `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DemandTensor {
    pub grid: GridSpec,
    bins: usize,
    values: Vec<u32>,
    /// Training-split maximum used for scaling, when known.
    pub scale_max: Option<f64>,
}

impl DemandTensor {
    pub fn zeros(grid: GridSpec, bins: usize) -> Self {
        let n = bins * grid.cells();
        DemandTensor {
            grid,
            bins,
            values: vec![0; n],
            scale_max: None,
        }
    }

    pub fn from_values(grid: GridSpec, bins: usize, values: Vec<u32>) -> Result<Self> {
        if values.len() != bins * grid.cells() {
            return Err(Error::shape(
                "DemandTensor::from_values",
                &[values.len()],
                &[bins, grid.width, grid.height],
            ));
        }
        Ok(DemandTensor {
            grid,
            bins,
            values,
            scale_max: None,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn cells(&self) -> usize {
        self.grid.cells()
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn get(&self, k: usize, cell: Cell) -> u32 {
        self.values[k * self.cells() + cell.flat(self.height())]
    }

    pub fn frame(&self, k: usize) -> &[u32] {
        let n = self.cells();
        &self.values[k * n..(k + 1) * n]
    }

    fn add(&mut self, k: usize, flat: usize) {
        let n = self.cells();
        self.values[k * n + flat] += 1;
    }

    pub fn total(&self) -> u64 {
        self.values.iter().map(|&v| v as u64).sum()
    }

    /// Demand series of one cell (flat index) over all bins.
    pub fn series(&self, flat: usize) -> Vec<f64> {
        let n = self.cells();
        (0..self.bins).map(|k| self.values[k * n + flat] as f64).collect()
    }

    /// Cells with any demand over the whole horizon, in flat order.
    pub fn active_mask(&self) -> Vec<bool> {
        let n = self.cells();
        let mut mask = vec![false; n];
        for frame in self.values.chunks(n) {
            for (m, &v) in mask.iter_mut().zip(frame) {
                *m |= v > 0;
            }
        }
        mask
    }

    pub fn max_value(&self) -> u32 {
        self.values.iter().copied().max().unwrap_or(0)
    }

    /// Elementwise sum of two partial tensors over the same grid and horizon.
    pub fn merge_add(&mut self, other: &DemandTensor) -> Result<()> {
        if self.bins != other.bins || self.grid.width != other.grid.width || self.grid.height != other.grid.height {
            return Err(Error::shape(
                "DemandTensor::merge_add",
                &[self.bins, self.width(), self.height()],
                &[other.bins, other.width(), other.height()],
            ));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
        Ok(())
    }

    /// Concatenate two chronologically adjacent tensors.
    pub fn concat(&self, later: &DemandTensor) -> Result<DemandTensor> {
        if self.width() != later.width() || self.height() != later.height() {
            return Err(Error::shape(
                "DemandTensor::concat",
                &[self.width(), self.height()],
                &[later.width(), later.height()],
            ));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&later.values);
        let mut out = DemandTensor::from_values(self.grid.clone(), self.bins + later.bins, values)?;
        out.scale_max = self.scale_max;
        Ok(out)
    }

    /// Bins `start..end` as a tensor of their own.
    pub fn slice_bins(&self, start: usize, end: usize) -> DemandTensor {
        let n = self.cells();
        let mut grid = self.grid.clone();
        grid.t0 = self.grid.t0 + start as i64 * self.grid.time_bin_s;
        DemandTensor {
            grid,
            bins: end - start,
            values: self.values[start * n..end * n].to_vec(),
            scale_max: self.scale_max,
        }
    }
}

/// Bin trips into per-cell pick-up counts over `[spec.t0, t_end)`.
///
/// A trip counts towards its origin cell only when its destination resolves
/// to a different cell; destinations outside the grid count.
pub fn bin_trips<I>(trips: I, spec: &GridSpec, t_end: i64) -> Result<(DemandTensor, IngestReport)>
where
    I: IntoIterator<Item = TripRecord>,
{
    let mut binner = Binner::new(spec, t_end)?;
    for trip in trips {
        binner.push(&trip);
    }
    Ok(binner.finish())
}

/// Streaming accumulator behind [`bin_trips`]. Memory is bounded by the
/// tensor size, not by the number of trips.
pub struct Binner<'a> {
    spec: &'a GridSpec,
    t_end: i64,
    tensor: DemandTensor,
    report: IngestReport,
}

impl<'a> Binner<'a> {
    pub fn new(spec: &'a GridSpec, t_end: i64) -> Result<Self> {
        spec.validate()?;
        let span = t_end - spec.t0;
        if span < 0 || span % spec.time_bin_s != 0 {
            return Err(Error::Config(format!(
                "horizon [{}, {}) is not aligned to {} s bins",
                spec.t0, t_end, spec.time_bin_s
            )));
        }
        let bins = (span / spec.time_bin_s) as usize;
        let mut grid = spec.clone();
        grid.stations = None;
        Ok(Binner {
            spec,
            t_end,
            tensor: DemandTensor::zeros(grid, bins),
            report: IngestReport::default(),
        })
    }

    /// Record a row that could not be parsed into a trip.
    pub fn push_malformed(&mut self) {
        self.report.rows += 1;
        self.report.dropped_malformed += 1;
    }

    pub fn push(&mut self, trip: &TripRecord) {
        let report = &mut self.report;
        report.rows += 1;
        if trip.end_time < trip.start_time {
            report.dropped_malformed += 1;
            return;
        }
        if trip.start_time < self.spec.t0 || trip.start_time >= self.t_end {
            report.dropped_outside_horizon += 1;
            return;
        }
        let k = ((trip.start_time - self.spec.t0) / self.spec.time_bin_s) as usize;
        let (origin, destination) = match (
            resolve_cell(&trip.origin, self.spec),
            resolve_cell(&trip.destination, self.spec),
        ) {
            (Ok(o), Ok(d)) => (o, d),
            (Err(UnknownStation(id)), _) | (_, Err(UnknownStation(id))) => {
                report.dropped_unknown_station += 1;
                report.warn_unknown_station(&id);
                return;
            }
        };
        let Some(origin) = origin else {
            report.dropped_origin_outside_grid += 1;
            return;
        };
        if destination == Some(origin) {
            report.dropped_intracell += 1;
            return;
        }
        let flat = origin.flat(self.tensor.height());
        self.tensor.add(k, flat);
        report.accepted += 1;
    }

    pub fn finish(mut self) -> (DemandTensor, IngestReport) {
        let report = &mut self.report;
        if report.rows == 0 {
            report.warnings.push("empty trip stream: demand tensor is all zeros".into());
        } else if report.accepted == 0 {
            report.warnings.push("no trip was accepted: demand tensor is all zeros".into());
        }
        (self.tensor, self.report)
    }
}

/// Chronological split: the first `floor(ratio * T)` bins train, the rest
/// validate.
///
/// Validation targets look back up to `max_lookback` bins, so the training
/// prefix must be at least that long for the first validation target to
/// have a full history.
pub fn split_train_val(d: &DemandTensor, ratio: f64, max_lookback: usize) -> Result<(DemandTensor, DemandTensor)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let split = (ratio * d.bins() as f64).floor() as usize;
    if split < max_lookback {
        let needed = (max_lookback as f64 / ratio).ceil() as usize;
        return Err(Error::Data(format!(
            "validation windows cannot reach t - {max_lookback}: the training prefix has {split} bins, \
             at least {max_lookback} are required (a horizon of >= {needed} bins at ratio {ratio})"
        )));
    }
    if split == d.bins() {
        return Err(Error::Data(format!("split at ratio {ratio} leaves no validation bins")));
    }
    Ok((d.slice_bins(0, split), d.slice_bins(split, d.bins())))
}

/// Demand mapped linearly onto `[-1, 1]` via `v = 2x/M - 1`, with `M` the
/// training maximum. Values above `M` map above 1 and are kept.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledTensor {
    pub grid: GridSpec,
    bins: usize,
    values: Vec<f64>,
    pub scale_max: f64,
}

impl ScaledTensor {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn cells(&self) -> usize {
        self.grid.cells()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.cells();
        &self.values[k * n..(k + 1) * n]
    }

    /// Map back to demand, clamping negatives to zero.
    pub fn unscale(&self) -> Vec<f64> {
        self.values.iter().map(|&v| unscale_value(v, self.scale_max)).collect()
    }

    /// Map back to integer counts. Exact inverse of [`scale`] for integer
    /// input; the real-valued [`unscale`](Self::unscale) can be off by an
    /// ulp or two.
    pub fn to_counts(&self) -> Vec<u32> {
        self.unscale().iter().map(|v| v.round() as u32).collect()
    }
}

pub fn scale(d: &DemandTensor, train_max: f64) -> Result<ScaledTensor> {
    if train_max.is_nan() || train_max <= 0.0 {
        return Err(Error::Data("training split has no demand".into()));
    }
    let values = d.values().iter().map(|&x| scale_value(x as f64, train_max)).collect();
    Ok(ScaledTensor {
        grid: d.grid.clone(),
        bins: d.bins(),
        values,
        scale_max: train_max,
    })
}

pub fn scale_value(x: f64, m: f64) -> f64 {
    (2.0 * x - m) / m
}

/// Inverse of [`scale_value`], clamped at zero for reporting.
pub fn unscale_value(v: f64, m: f64) -> f64 {
    ((v * m + m) / 2.0).max(0.0)
}
