//! Epoch loop shared by every training stage.

use std::time::Instant;

use avic_tensor::TensorError;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchPlan, DatasetSplit};
use crate::error::{Error, Result};

/// Batching and seeding of one stage. Epoch `e` of the stage uses the
/// shuffle and noise streams of epoch `epoch_offset + e`, so a stage can
/// continue the streams of an earlier one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub epoch_offset: usize,
}

impl Schedule {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            seed,
            epoch_offset: 0,
        }
    }

    pub fn continuing(mut self, offset: usize) -> Self {
        self.epoch_offset = offset;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: String,
    /// Per-epoch mean training loss, weighted by batch size.
    pub curve: Vec<f64>,
    pub final_metric: Option<f64>,
    pub metric: String,
    /// Excluded from canonical reports.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl StageResult {
    pub fn with_metric(mut self, metric: impl Into<String>, value: f64) -> Self {
        self.metric = metric.into();
        self.final_metric = Some(value);
        self
    }
}

/// Runs `step(epoch, batch_index, batch)` over every batch of every epoch.
/// `step` returns the batch's mean loss; `epoch` is the absolute epoch.
/// A non-finite value inside `step` becomes [`Error::Diverged`].
pub fn run_epochs(
    stage: &str,
    split: &DatasetSplit,
    schedule: Schedule,
    mut step: impl FnMut(usize, usize, &Batch) -> Result<f64>,
) -> Result<StageResult> {
    let start = Instant::now();
    let mut curve = Vec::with_capacity(schedule.epochs);
    for e in 0..schedule.epochs {
        let epoch = schedule.epoch_offset + e;
        let plan = BatchPlan::new(split.len(), schedule.batch_size, schedule.seed, epoch as u64)?;
        let (mut total, mut count) = (0.0, 0usize);
        for (b, rows) in plan.batch_indices().enumerate() {
            let batch = split.gather(rows)?;
            let loss = step(epoch, b, &batch).map_err(|err| diverged(err, epoch, b))?;
            if !loss.is_finite() {
                return Err(diverged(Error::Tensor(TensorError::NonFinite { op: "loss" }), epoch, b));
            }
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        curve.push(total / count as f64);
    }
    Ok(StageResult {
        stage: stage.to_string(),
        curve,
        final_metric: None,
        metric: String::new(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn diverged(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::Tensor(source @ TensorError::NonFinite { .. }) => Error::Diverged { epoch, batch, source },
        other => other,
    }
}
