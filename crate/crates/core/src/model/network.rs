use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampling::{BranchKind, SamplingConfig, TrainingSample};
use crate::diff::{Checkpoint, NeighborTable, ParamId, ParamStore, Tape, Tensor, Var};
use crate::grid::ScaledTensor;
use crate::irconv::{IrConvStack, DEFAULT_FILTERS};
use crate::lstm::{lstm_over_sequence, Head, LstmCellParams, DEFAULT_HIDDEN};
use crate::similarity::Metric;
use crate::{Error, Execution, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    IrconvPearson,
    IrconvDtw,
    CnnLstm,
    LstmOnly,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::IrconvPearson, ModelKind::IrconvDtw, ModelKind::CnnLstm, ModelKind::LstmOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::IrconvPearson => "irconv_pearson",
            ModelKind::IrconvDtw => "irconv_dtw",
            ModelKind::CnnLstm => "cnn_lstm",
            ModelKind::LstmOnly => "lstm_only",
        }
    }

    /// Where the convolution takes its neighbors from; `None` means no
    /// convolution at all.
    pub fn metric(self) -> Option<Metric> {
        match self {
            ModelKind::IrconvPearson => Some(Metric::Pearson),
            ModelKind::IrconvDtw => Some(Metric::Dtw),
            ModelKind::CnnLstm => Some(Metric::Spatial),
            ModelKind::LstmOnly => None,
        }
    }

    pub fn branches(self) -> &'static [BranchKind] {
        match self {
            ModelKind::LstmOnly => &[BranchKind::Closeness],
            _ => &BranchKind::ALL,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub filters: Vec<usize>,
    pub hidden: usize,
    pub sampling: SamplingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            filters: DEFAULT_FILTERS.to_vec(),
            hidden: DEFAULT_HIDDEN,
            sampling: SamplingConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        if self.hidden == 0 {
            return Err(Error::Config("model.hidden must be at least 1".into()));
        }
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::Config("model.filters must be non-empty and positive".into()));
        }
        if self.filters.last() != Some(&1) {
            return Err(Error::Config("the last convolution layer must have one filter".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub kind: BranchKind,
    pub conv: Option<IrConvStack>,
    pub lstm: LstmCellParams,
    pub head: Head,
    pub fusion: ParamId,
}

/// The three-branch network (one branch for the LSTM-only baseline).
#[derive(Clone, Debug)]
pub struct IrConvLstmModel {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub width: usize,
    pub height: usize,
    pub scale_max: f64,
    branches: Vec<Branch>,
}

impl IrConvLstmModel {
    /// Initialise parameters from `seed`. Every kind except `lstm_only`
    /// needs a neighbor `table`.
    pub fn new(
        kind: ModelKind,
        config: ModelConfig,
        (width, height): (usize, usize),
        table: Option<Arc<NeighborTable>>,
        scale_max: f64,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let cells = width * height;
        let table = match (kind, table) {
            (ModelKind::LstmOnly, _) => None,
            (_, Some(t)) if t.cells == cells => Some(t),
            (_, Some(t)) => return Err(Error::shape("IrConvLstmModel::new", &[t.cells], &[width, height])),
            (_, None) => return Err(Error::Config(format!("{kind} needs a neighbor index"))),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut branches = Vec::new();
        for &b in kind.branches() {
            let prefix = format!("branch.{}", b.as_str());
            let conv = table
                .as_ref()
                .map(|t| IrConvStack::new(&mut params, &prefix, &config.filters, t.clone(), &mut rng));
            let lstm = LstmCellParams::new(&mut params, &format!("{prefix}.lstm"), cells, config.hidden, &mut rng);
            let head = Head::new(&mut params, &format!("{prefix}.head"), cells, config.hidden, &mut rng);
            branches.push(Branch {
                kind: b,
                conv,
                lstm,
                head,
                fusion: ParamId(usize::MAX),
            });
        }
        let bound = 1.0 / (branches.len() as f64).sqrt();
        for b in &mut branches {
            b.fusion = params.add_uniform(format!("fusion.{}", b.kind.as_str()), vec![cells], bound, &mut rng);
        }
        Ok(IrConvLstmModel {
            kind,
            config,
            params,
            width,
            height,
            scale_max,
            branches,
        })
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Stack the branch's frames of every sample into `(L * B * N) x 1`,
    /// step-major then sample-major.
    fn branch_input(&self, scaled: &ScaledTensor, samples: &[TrainingSample], kind: BranchKind) -> Result<Tensor> {
        let n = self.cells();
        if scaled.cells() != n {
            return Err(Error::shape("forward", &[scaled.cells()], &[n]));
        }
        let len = samples.first().map_or(0, |s| s.frames(kind).len());
        let mut data = Vec::with_capacity(len * samples.len() * n);
        for l in 0..len {
            for s in samples {
                let k = *s.frames(kind).get(l).ok_or_else(|| Error::Data("samples have different window lengths".into()))?;
                if k >= scaled.bins() {
                    return Err(Error::Data(format!("frame {k} outside tensor of {} bins", scaled.bins())));
                }
                data.extend_from_slice(scaled.frame(k));
            }
        }
        Tensor::new(vec![data.len(), 1], data)
    }

    /// Branch feature map, `B x N`.
    pub fn branch_feature(&self, tape: &mut Tape, bound: &[Var], scaled: &ScaledTensor, samples: &[TrainingSample], branch: usize) -> Result<Var> {
        let b = &self.branches[branch];
        let (batch, n) = (samples.len(), self.cells());
        let input = self.branch_input(scaled, samples, b.kind)?;
        let steps = input.len() / (batch * n).max(1);
        let mut x = tape.constant(input);
        if let Some(conv) = &b.conv {
            x = conv.forward(tape, bound, x)?;
        }
        let x = tape.reshape(x, vec![steps * batch, n])?;
        let frames = (0..steps)
            .map(|l| tape.slice_rows(x, l * batch, batch))
            .collect::<Result<Vec<_>>>()?;
        lstm_over_sequence(tape, bound, &b.lstm, &b.head, &frames)
    }

    /// Scaled-domain prediction for every sample, `B x N`.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], scaled: &ScaledTensor, samples: &[TrainingSample]) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let (batch, n) = (samples.len(), self.cells());
        let tile: Arc<[Option<usize>]> = (0..batch * n).map(|i| Some(i % n)).collect();
        let mut fused = None;
        for i in 0..self.branches.len() {
            let f = self.branch_feature(tape, bound, scaled, samples, i)?;
            let w = tape.gather(bound[self.branches[i].fusion.0], tile.clone(), vec![batch, n])?;
            let term = tape.mul(w, f)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(tape.tanh(fused.expect("at least one branch")))
    }

    /// Target frames of `samples`, `B x N`.
    pub fn targets(&self, scaled: &ScaledTensor, samples: &[TrainingSample]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(samples.len() * self.cells());
        for s in samples {
            if s.target >= scaled.bins() {
                return Err(Error::Data(format!("target {} outside tensor of {} bins", s.target, scaled.bins())));
            }
            data.extend_from_slice(scaled.frame(s.target));
        }
        Tensor::new(vec![samples.len(), self.cells()], data)
    }

    /// Scaled predictions without gradient bookkeeping, in batches.
    pub fn predict(&self, scaled: &ScaledTensor, samples: &[TrainingSample], batch: usize, exec: Execution) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len() * self.cells());
        for chunk in samples.chunks(batch.max(1)) {
            let mut tape = Tape::with_execution(exec);
            let bound = self.params.bind_frozen(&mut tape);
            let y = self.forward(&mut tape, &bound, scaled, chunk)?;
            out.extend_from_slice(tape.value(y).data());
        }
        Ok(out)
    }

    pub fn checkpoint(&self, seed: u64, step: u64) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            seed,
            step,
            meta: serde_json::json!({
                "kind": self.kind.as_str(),
                "width": self.width,
                "height": self.height,
                "scale_max": self.scale_max,
                "config": self.config,
            }),
        }
    }

    pub fn load_params(&mut self, params: &ParamStore) -> Result<()> {
        self.params.copy_from(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{scale, DemandTensor, GridSpec};
    use crate::irconv::neighbor_table;
    use crate::model::make_samples;
    use crate::similarity::build_spatial_neighbors;
    use rand::Rng;

    fn tiny() -> (IrConvLstmModel, ScaledTensor, Vec<TrainingSample>) {
        let sampling = SamplingConfig {
            closeness: 3,
            period: 2,
            trend: 2,
            bins_per_day: 4,
            days_per_week: 2,
        };
        let config = ModelConfig {
            filters: vec![3, 2, 1],
            hidden: 4,
            sampling,
        };
        let (w, h) = (3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values: Vec<u32> = (0..30 * w * h).map(|_| rng.random_range(0..6)).collect();
        let d = DemandTensor::from_values(GridSpec::synthetic(w, h), 30, values).unwrap();
        let scaled = scale(&d, d.max_value() as f64).unwrap();
        let table = neighbor_table(&build_spatial_neighbors(w, h)).unwrap();
        let model = IrConvLstmModel::new(ModelKind::CnnLstm, config, (w, h), Some(table), d.max_value() as f64, 1).unwrap();
        let samples = make_samples(30, &sampling, 16..20).unwrap();
        (model, scaled, samples)
    }

    #[test]
    fn parameter_names() {
        let (model, _, _) = tiny();
        for name in [
            "branch.trend.conv1.kernel",
            "branch.period.conv3.bias",
            "branch.closeness.lstm.W_hc",
            "branch.closeness.lstm.b_io",
            "branch.trend.head.weight",
            "fusion.closeness",
        ] {
            assert!(model.params.find(name).is_some(), "{name}");
        }
        assert_eq!(model.params.get(model.params.find("fusion.trend").unwrap()).shape(), &[6]);
    }

    #[test]
    fn zero_fusion_gives_zero() {
        let (mut model, scaled, samples) = tiny();
        for b in model.branches.clone() {
            model.params.get_mut(b.fusion).data_mut().fill(0.0);
        }
        let y = model.predict(&scaled, &samples, 2, Execution::Sequential).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_branch_fusion_reduces_to_tanh() {
        let (mut model, scaled, samples) = tiny();
        for (i, b) in model.branches.clone().iter().enumerate() {
            model.params.get_mut(b.fusion).data_mut().fill(if i == 1 { 1.0 } else { 0.0 });
        }
        let mut tape = Tape::new();
        let bound = model.params.bind_frozen(&mut tape);
        let f = model.branch_feature(&mut tape, &bound, &scaled, &samples, 1).unwrap();
        let y = model.forward(&mut tape, &bound, &scaled, &samples).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(f).data()) {
            assert_eq!(*a, b.tanh());
        }
    }

    #[test]
    fn output_in_open_interval_and_batch_independent() {
        let (model, scaled, samples) = tiny();
        let all = model.predict(&scaled, &samples, 4, Execution::Sequential).unwrap();
        let single = model.predict(&scaled, &samples, 1, Execution::Sequential).unwrap();
        assert!(all.iter().all(|v| v.abs() < 1.0));
        for (a, b) in all.iter().zip(&single) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kinds_need_matching_tables() {
        let cfg = ModelConfig::default();
        assert!(IrConvLstmModel::new(ModelKind::IrconvDtw, cfg.clone(), (2, 2), None, 1.0, 0).is_err());
        let table = neighbor_table(&build_spatial_neighbors(3, 3)).unwrap();
        assert!(IrConvLstmModel::new(ModelKind::CnnLstm, cfg.clone(), (2, 2), Some(table), 1.0, 0).is_err());
        let m = IrConvLstmModel::new(ModelKind::LstmOnly, cfg, (2, 2), None, 1.0, 0).unwrap();
        assert_eq!(m.branches().len(), 1);
        assert!(m.params.find("branch.closeness.conv1.kernel").is_none());
        assert_eq!("cnn_lstm".parse::<ModelKind>().unwrap(), ModelKind::CnnLstm);
        assert!("cnn".parse::<ModelKind>().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let (a, _, _) = tiny();
        let (b, _, _) = tiny();
        assert_eq!(a.params, b.params);
    }
}
