//! Experiment configuration, read from TOML.
//!
//! ```toml
//! id = "two-phase"
//! kind = "irconv_dtw"
//! seed = 7
//!
//! [data]
//! tensor = "demand.bdt"      # or `trips` + `[grid]`, or a `[synth]` table
//!
//! [neighbors]
//! kernel_size = 9
//!
//! [model]
//! hidden = 64
//!
//! [training]
//! epochs = 20
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::grid::{GridSpec, TripProfile};
use crate::model::{ModelConfig, ModelKind, TrainConfig};
use crate::synth::SyntheticCitySpec;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// A tensor written by `write_tensor`.
    pub tensor: Option<PathBuf>,
    /// A trip CSV binned with the `[grid]` table.
    pub trips: Option<PathBuf>,
    /// `latlon` or `station`.
    pub profile: Option<String>,
    pub stations: Option<PathBuf>,
    /// Exclusive end of the horizon, unix seconds.
    pub t_end: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeighborConfig {
    /// Kernel positions including the central cell.
    pub kernel_size: usize,
    /// Sakoe-Chiba band for DTW.
    pub band: Option<usize>,
}

impl Default for NeighborConfig {
    fn default() -> Self {
        NeighborConfig {
            kernel_size: 9,
            band: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub kind: ModelKind,
    pub seed: u64,
    /// Share of bins used for training.
    pub split_ratio: f64,
    /// Batch size for prediction during evaluation.
    pub eval_batch: usize,
    pub data: DataConfig,
    pub grid: Option<GridSpec>,
    pub synth: Option<SyntheticCitySpec>,
    pub neighbors: NeighborConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            id: "experiment".into(),
            kind: ModelKind::IrconvDtw,
            seed: 0,
            split_ratio: 0.8,
            eval_batch: 64,
            data: DataConfig::default(),
            grid: None,
            synth: None,
            neighbors: NeighborConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
        }
    }
}

/// Where the demand tensor comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Tensor(PathBuf),
    Trips {
        path: PathBuf,
        profile: TripProfile,
        stations: Option<PathBuf>,
        grid: GridSpec,
        t_end: i64,
    },
    Synthetic(SyntheticCitySpec),
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse `path` and resolve relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.tensor, &mut cfg.data.trips, &mut cfg.data.stations].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio)));
        }
        if self.neighbors.kernel_size < 1 {
            return Err(Error::Config("neighbors.kernel_size must be at least 1".into()));
        }
        if self.kind == ModelKind::CnnLstm && self.neighbors.kernel_size != 9 {
            return Err(Error::Config("cnn_lstm uses the 3x3 neighborhood, kernel_size must be 9".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be at least 1".into()));
        }
        if self.id.is_empty() || self.id.contains([',', '\n', '/', '\\']) {
            return Err(Error::Config(format!("experiment id {:?} must be non-empty without , / \\ or newlines", self.id)));
        }
        self.model.validate()?;
        self.training.validate()?;
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        self.source().map(|_| ())
    }

    pub fn source(&self) -> Result<DataSource> {
        let d = &self.data;
        match (&d.tensor, &d.trips, &self.synth) {
            (Some(t), None, None) => Ok(DataSource::Tensor(t.clone())),
            (None, Some(path), None) => {
                let grid = self.grid.clone().ok_or_else(|| Error::Config("data.trips needs a [grid] table".into()))?;
                let t_end = d.t_end.ok_or_else(|| Error::Config("data.trips needs data.t_end".into()))?;
                let profile = d.profile.as_deref().unwrap_or("latlon").parse()?;
                if profile == TripProfile::Station && d.stations.is_none() {
                    return Err(Error::Config("the station profile needs data.stations".into()));
                }
                Ok(DataSource::Trips {
                    path: path.clone(),
                    profile,
                    stations: d.stations.clone(),
                    grid,
                    t_end,
                })
            }
            (None, None, Some(s)) => Ok(DataSource::Synthetic(s.clone())),
            _ => Err(Error::Config("exactly one of data.tensor, data.trips or [synth] must be given".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("[data]\ntensor = \"d.bdt\"\n").unwrap();
        assert_eq!(cfg.kind, ModelKind::IrconvDtw);
        assert_eq!(cfg.model.hidden, 128);
        assert_eq!(cfg.model.filters, vec![32, 16, 1]);
        assert_eq!(cfg.model.sampling.closeness, 24);
        assert_eq!(cfg.training.batch_size, 32);
        assert_eq!(cfg.training.optimizer.learning_rate, 1e-3);
        assert_eq!(cfg.neighbors.kernel_size, 9);
        assert_eq!(cfg.source().unwrap(), DataSource::Tensor("d.bdt".into()));
    }

    #[test]
    fn nested_tables_parse() {
        let text = r#"
            id = "demo"
            kind = "cnn_lstm"
            seed = 3
            [synth]
            width = 4
            height = 4
            noise = 1.5
            [[synth.groups]]
            amplitude = 3.0
            phase = 0.0
            [model]
            hidden = 16
            [model.sampling]
            closeness = 6
            [training]
            epochs = 2
            [training.optimizer]
            learning_rate = 0.01
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.model.sampling.closeness, 6);
        assert_eq!(cfg.model.sampling.period, 7);
        assert_eq!(cfg.training.optimizer.learning_rate, 0.01);
        assert_eq!(cfg.training.optimizer.decay, 0.9);
        let DataSource::Synthetic(s) = cfg.source().unwrap() else { panic!() };
        assert_eq!((s.width, s.groups.len(), s.noise), (4, 1, 1.5));
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "",
            "[data]\ntensor = \"a\"\ntrips = \"b\"\n",
            "[data]\ntrips = \"b\"\n",
            "split_ratio = 1.5\n[data]\ntensor = \"a\"\n",
            "kind = \"cnn\"\n[data]\ntensor = \"a\"\n",
            "unknown = 1\n[data]\ntensor = \"a\"\n",
            "kind = \"cnn_lstm\"\n[neighbors]\nkernel_size = 5\n[data]\ntensor = \"a\"\n",
            "[model]\nfilters = [4, 2]\n[data]\ntensor = \"a\"\n",
        ] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "[data]\ntensor = \"d.bdt\"\n").unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.data.tensor.unwrap(), dir.path().join("d.bdt"));
    }
}
