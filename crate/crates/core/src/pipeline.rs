//! End-to-end runs: load data, split, scale, build neighbors, train,
//! evaluate, and write every artifact.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use crate::config::{DataSource, ExperimentConfig};
use crate::diff::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::grid::{ingest_csv, read_station_table, read_tensor, scale, split_train_val, DemandTensor, IngestReport};
use crate::irconv::neighbor_table;
use crate::model::{evaluate, make_samples, train, EvalReport, IrConvLstmModel, ModelConfig, ModelKind, TrainOutcome, CSV_HEADER};
use crate::similarity::{
    build_semantic_neighbors, build_spatial_neighbors, neighbor_overlap, read_neighbor_index, write_neighbor_index, Metric, NeighborIndex,
    SimilarityReport,
};
use crate::synth::generate;
use crate::{Error, Execution, Result};

/// Load the demand tensor named by the config. Ingestion also returns its
/// report; synthetic data also returns the group map.
pub fn load_demand(cfg: &ExperimentConfig) -> Result<(DemandTensor, Option<IngestReport>, Option<Vec<usize>>)> {
    match cfg.source()? {
        DataSource::Tensor(p) => Ok((read_tensor(&p)?, None, None)),
        DataSource::Trips {
            path,
            profile,
            stations,
            mut grid,
            t_end,
        } => {
            if let Some(s) = stations {
                grid.stations = Some(read_station_table(&s)?);
            }
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let (d, report) = ingest_csv(BufReader::new(file), profile, &grid, t_end)?;
            Ok((d, Some(report), None))
        }
        DataSource::Synthetic(spec) => {
            let (d, map) = generate(&spec)?;
            Ok((d, None, Some(map)))
        }
    }
}

/// Neighbor index for `kind` computed on the training prefix.
pub fn neighbors_for(kind: ModelKind, train: &DemandTensor, kernel_size: usize, band: Option<usize>, exec: Execution) -> Result<Option<NeighborIndex>> {
    match kind.metric() {
        None => Ok(None),
        Some(Metric::Spatial) => Ok(Some(build_spatial_neighbors(train.width(), train.height()))),
        Some(m) => build_semantic_neighbors(train, &train.active_mask(), m, kernel_size - 1, band, exec).map(Some),
    }
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub id: String,
    pub kind: ModelKind,
    pub model: IrConvLstmModel,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
    pub neighbors: Option<NeighborIndex>,
    /// Semantic against spatial lists, for semantic kinds with a 3x3-sized kernel.
    pub similarity: Option<SimilarityReport>,
    pub seed: u64,
}

impl RunArtifacts {
    pub fn checkpoint(&self) -> Checkpoint {
        self.model.checkpoint(self.seed, self.outcome.steps)
    }
}

/// Train and evaluate `cfg.kind` on `demand`.
pub fn run_experiment(cfg: &ExperimentConfig, demand: &DemandTensor, exec: Execution) -> Result<RunArtifacts> {
    cfg.validate()?;
    let sampling = cfg.model.sampling;
    let lookback = sampling.max_lookback();
    let (train_part, _) = split_train_val(demand, cfg.split_ratio, lookback)?;
    let split = train_part.bins();
    let scale_max = train_part.max_value() as f64;
    let scaled = scale(demand, scale_max)?;

    let neighbors = neighbors_for(cfg.kind, &train_part, cfg.neighbors.kernel_size, cfg.neighbors.band, exec)?;
    let similarity = match (&neighbors, cfg.kind.metric()) {
        (Some(sem), Some(Metric::Pearson | Metric::Dtw)) if sem.kernel_size == 9 => {
            let spatial = build_spatial_neighbors(demand.width(), demand.height());
            Some(neighbor_overlap(sem, &spatial, &train_part, exec)?)
        }
        _ => None,
    };
    let table = neighbors.as_ref().map(neighbor_table).transpose()?;
    let mut model = IrConvLstmModel::new(
        cfg.kind,
        cfg.model.clone(),
        (demand.width(), demand.height()),
        table,
        scale_max,
        cfg.seed,
    )?;

    let train_s = make_samples(demand.bins(), &sampling, lookback..split)?;
    let val_s = make_samples(demand.bins(), &sampling, split..demand.bins())?;
    log::info!(
        "{}: {} training and {} validation targets, {} parameters",
        cfg.id,
        train_s.len(),
        val_s.len(),
        model.params.numel()
    );
    let outcome = train(&mut model, &scaled, &train_s, &val_s, &cfg.training, cfg.seed, exec)?;
    let report = evaluate(&model, &scaled, demand, split..demand.bins(), &demand.active_mask(), cfg.eval_batch, exec)?;
    Ok(RunArtifacts {
        id: cfg.id.clone(),
        kind: cfg.kind,
        model,
        outcome,
        report,
        neighbors,
        similarity,
        seed: cfg.seed,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write `checkpoint/`, `report.csv`, `report.txt`, `history.csv`, and when
/// present `neighbors.txt` and `similarity.csv` under `dir`.
pub fn write_artifacts(dir: &Path, run: &RunArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_checkpoint(&dir.join("checkpoint"), &run.checkpoint())?;
    write(&dir.join("report.csv"), &format!("{CSV_HEADER}\n{}", run.report.to_csv(&run.id)))?;
    write(&dir.join("report.txt"), &run.report.to_table(&format!("{} ({})", run.id, run.kind)))?;
    write(&dir.join("history.csv"), &run.outcome.history_csv())?;
    if let Some(n) = &run.neighbors {
        write_neighbor_index(&dir.join("neighbors.txt"), n)?;
    }
    if let Some(s) = &run.similarity {
        write(&dir.join("similarity.csv"), &s.to_csv())?;
    }
    Ok(())
}

/// Rebuild the model saved by [`write_artifacts`] in `run_dir` and score it
/// on the validation split of `demand`.
pub fn evaluate_run(cfg: &ExperimentConfig, demand: &DemandTensor, run_dir: &Path, exec: Execution) -> Result<EvalReport> {
    cfg.validate()?;
    let ckpt = read_checkpoint(&run_dir.join("checkpoint"))?;
    let meta = &ckpt.meta;
    let kind: ModelKind = meta["kind"]
        .as_str()
        .ok_or_else(|| Error::Data("checkpoint metadata lacks the model kind".into()))?
        .parse()?;
    let config: ModelConfig = serde_json::from_value(meta["config"].clone())?;
    let scale_max = meta["scale_max"]
        .as_f64()
        .ok_or_else(|| Error::Data("checkpoint metadata lacks scale_max".into()))?;
    let table = match kind {
        ModelKind::LstmOnly => None,
        _ => Some(neighbor_table(&read_neighbor_index(&run_dir.join("neighbors.txt"))?)?),
    };
    let mut model = IrConvLstmModel::new(kind, config, (demand.width(), demand.height()), table, scale_max, ckpt.seed)?;
    model.load_params(&ckpt.params)?;
    let split = (cfg.split_ratio * demand.bins() as f64).floor() as usize;
    let lookback = model.config.sampling.max_lookback();
    if split < lookback || split >= demand.bins() {
        return Err(Error::Data(format!("split at bin {split} leaves no legal validation targets")));
    }
    let scaled = scale(demand, scale_max)?;
    evaluate(&model, &scaled, demand, split..demand.bins(), &demand.active_mask(), cfg.eval_batch, exec)
}
