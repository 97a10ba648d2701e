//! The full forecaster: window sampling, the branch network with fusion,
//! training and evaluation.

mod metrics;
mod network;
mod sampling;
mod train;


pub use metrics::{evaluate_predictions, metrics, usage_quintiles, EvalReport, MetricAccumulator, Metrics, CSV_HEADER};
pub use network::{Branch, IrConvLstmModel, ModelConfig, ModelKind};
pub use sampling::{make_samples, BranchKind, SamplingConfig, TrainingSample};
pub use train::{mse_on, train, EpochRecord, TrainConfig, TrainOutcome};

use std::ops::Range;

use crate::grid::{unscale_value, DemandTensor, ScaledTensor};
use crate::{Execution, Result};

/// Predict every bin in `val`, unscale and clamp at zero, and score against
/// `demand` over the active cells.
pub fn evaluate(
    model: &IrConvLstmModel,
    scaled: &ScaledTensor,
    demand: &DemandTensor,
    val: Range<usize>,
    active: &[bool],
    batch: usize,
    exec: Execution,
) -> Result<EvalReport> {
    let samples = make_samples(scaled.bins(), &model.config.sampling, val.clone())?;
    let pred: Vec<f64> = model
        .predict(scaled, &samples, batch, exec)?
        .into_iter()
        .map(|v| unscale_value(v, model.scale_max).max(0.0))
        .collect();
    evaluate_predictions(&pred, demand, val, active)
}
