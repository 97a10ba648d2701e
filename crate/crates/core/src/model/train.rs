use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::IrConvLstmModel;
use super::sampling::TrainingSample;
use crate::diff::{RmsProp, RmsPropConfig, Tape};
use crate::grid::ScaledTensor;
use crate::{Error, Execution, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: RmsPropConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            optimizer: RmsPropConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("training.epochs and training.batch_size must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-batch losses.
    pub train_loss: f64,
    pub val_mse: f64,
    pub best_val_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: u64,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_mse,best_val_mse\n");
        for r in &self.history {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_mse, r.best_val_mse);
        }
        s
    }
}

/// Mean squared error of the model on `samples`, scaled domain, all cells.
pub fn mse_on(model: &IrConvLstmModel, scaled: &ScaledTensor, samples: &[TrainingSample], batch: usize, exec: Execution) -> Result<f64> {
    let pred = model.predict(scaled, samples, batch, exec)?;
    let target = model.targets(scaled, samples)?;
    let n = pred.len().max(1) as f64;
    Ok(pred.iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Mini-batch RMSProp on shuffled `train` samples. On return the model holds
/// the parameters of the epoch with the lowest validation MSE (training
/// loss when `val` is empty).
pub fn train(
    model: &mut IrConvLstmModel,
    scaled: &ScaledTensor,
    train: &[TrainingSample],
    val: &[TrainingSample],
    cfg: &TrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut opt = RmsProp::new(cfg.optimizer, &model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.params.clone();
    let mut best_score = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = 0u64;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_id, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainingSample> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut tape = Tape::with_execution(exec);
            let bound = model.params.bind(&mut tape);
            let pred = model.forward(&mut tape, &bound, scaled, &batch)?;
            let target = tape.constant(model.targets(scaled, &batch)?);
            let loss = tape.mse(pred, target)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                let norms: Vec<String> = model.params.l2_norms().into_iter().map(|(n, v)| format!("{n}={v:.4e}")).collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} at epoch {epoch}, batch {batch_id}; parameter norms: {}",
                    norms.join(", ")
                )));
            }
            tape.backward(loss)?;
            let mut grads = model.params.grads(&tape, &bound);
            opt.step(&mut model.params, &mut grads);
            loss_sum += value;
            batches += 1;
            steps += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val_mse = if val.is_empty() {
            f64::NAN
        } else {
            mse_on(model, scaled, val, cfg.batch_size, exec)?
        };
        let score = if val.is_empty() { train_loss } else { val_mse };
        if !score.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation error at epoch {epoch}")));
        }
        if score < best_score {
            best_score = score;
            best_epoch = epoch;
            best.copy_from(&model.params)?;
        }
        log::info!("epoch {epoch}: train {train_loss:.6e} val {val_mse:.6e} best {best_score:.6e}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mse,
            best_val_mse: best_score,
        });
    }
    model.load_params(&best)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        steps,
    })
}
