//! Synthetic cities made of phase groups.
//!
//! Each cell follows its group's daily sinusoid plus Gaussian noise:
//! `round(max(0, A_g (1 + sin(2 pi (t - phi_g) / P)) + noise))`. Groups are
//! laid out so that same-group cells are spread across the grid rather
//! than clustered.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grid::{Cell, DemandTensor, GridSpec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseGroup {
    pub amplitude: f64,
    /// Shift in bins.
    pub phase: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupLayout {
    /// Group `(i + j) mod G`: a checkerboard for two groups.
    #[default]
    Interleaved,
    /// Balanced random assignment drawn from the seed.
    Shuffled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCitySpec {
    pub width: usize,
    pub height: usize,
    pub bins: usize,
    /// Bins per sinusoid cycle.
    pub cycle: f64,
    pub groups: Vec<PhaseGroup>,
    pub layout: GroupLayout,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticCitySpec {
    fn default() -> Self {
        SyntheticCitySpec {
            width: 8,
            height: 8,
            bins: 6 * 7 * 24,
            cycle: 24.0,
            groups: vec![
                PhaseGroup {
                    amplitude: 10.0,
                    phase: 0.0,
                },
                PhaseGroup {
                    amplitude: 10.0,
                    phase: 12.0,
                },
            ],
            layout: GroupLayout::Interleaved,
            noise: 2.0,
            seed: 0,
        }
    }
}

impl SyntheticCitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.bins == 0 {
            return Err(Error::Config("synthetic city needs a non-empty grid and horizon".into()));
        }
        if self.groups.is_empty() {
            return Err(Error::Config("synthetic city needs at least one group".into()));
        }
        if self.cycle.is_nan() || self.cycle <= 0.0 {
            return Err(Error::Config("cycle must be positive".into()));
        }
        let negative = |v: f64| v.is_nan() || v < 0.0;
        if negative(self.noise) || self.groups.iter().any(|g| negative(g.amplitude) || !g.phase.is_finite()) {
            return Err(Error::Config("noise and amplitudes must be non-negative and finite".into()));
        }
        Ok(())
    }

    /// Group of every cell in flat order.
    pub fn group_map(&self) -> Vec<usize> {
        let g = self.groups.len().max(1);
        let n = self.width * self.height;
        match self.layout {
            GroupLayout::Interleaved => (0..n)
                .map(|f| {
                    let c = Cell::from_flat(f, self.height);
                    (c.i + c.j) % g
                })
                .collect(),
            GroupLayout::Shuffled => {
                let mut map: Vec<usize> = (0..n).map(|f| f % g).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(2);
                map.shuffle(&mut rng);
                map
            }
        }
    }

    /// Noise-free expected demand of `group` at bin `t`.
    pub fn signal(&self, group: usize, t: usize) -> f64 {
        let g = self.groups[group];
        g.amplitude * (1.0 + (std::f64::consts::TAU * (t as f64 - g.phase) / self.cycle).sin())
    }
}

/// Generate the demand tensor and the group map.
pub fn generate(spec: &SyntheticCitySpec) -> Result<(DemandTensor, Vec<usize>)> {
    spec.validate()?;
    let map = spec.group_map();
    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::with_capacity(spec.bins * map.len());
    for t in 0..spec.bins {
        for &g in &map {
            let noise = if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            values.push((spec.signal(g, t) + noise).max(0.0).round() as u32);
        }
    }
    let d = DemandTensor::from_values(GridSpec::synthetic(spec.width, spec.height), spec.bins, values)?;
    Ok((d, map))
}

/// `i,j,group` rows with 1-based cell indices.
pub fn group_map_csv(map: &[usize], height: usize) -> String {
    let mut s = String::from("i,j,group\n");
    for (f, g) in map.iter().enumerate() {
        let c = Cell::from_flat(f, height);
        let _ = writeln!(s, "{},{},{g}", c.i, c.j);
    }
    s
}

pub fn write_group_map(path: &Path, map: &[usize], height: usize) -> Result<()> {
    std::fs::write(path, group_map_csv(map, height)).map_err(|e| Error::io(path, e))
}
