use log::warn;

use crate::collapse::{CollapseReport, FeatureBatch};
use crate::data::{minibatches, LabeledDataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::interventions::{nc1_batch_loss, Nc1RegConfig};
use crate::nn::{cross_entropy, evaluate, MlpModel, SgdConfig};

/// Identifies one pass over a task's data; selects the shuffle stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochKey {
    pub task: usize,
    pub epoch: usize,
}

impl EpochKey {
    pub fn new(task: usize, epoch: usize) -> Self {
        EpochKey { task, epoch }
    }

    fn stream_index(self) -> usize {
        (self.task << 24) | self.epoch
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochSummary {
    pub mean_loss: f64,
    pub mean_penalty: f64,
    pub skipped_penalty_batches: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainSettings<'a> {
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub reg: Option<&'a Nc1RegConfig>,
}

/// One epoch of minibatch SGD. With `reg` set, the loss is
/// `CE + weight * NC1(batch)` and the NC1 gradient enters at the features.
pub fn train_epoch(
    model: &mut MlpModel,
    ds: &LabeledDataset,
    settings: &TrainSettings<'_>,
    key: EpochKey,
) -> Result<EpochSummary> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batches = minibatches(ds.len(), settings.batch_size, settings.seed, key.stream_index())?;
    let mut summary = EpochSummary::default();
    let reg = settings.reg.filter(|r| r.weight > 0.0);
    for idx in &batches {
        let x = ds.images.select_rows(idx);
        let y: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let (logits, features) = model.forward(&x)?;
        let (loss, grad) = cross_entropy(&logits, &y)?;
        summary.mean_loss += loss;
        let extra = match reg {
            Some(r) => {
                let p = nc1_batch_loss(&features, &y, model.num_classes(), r)?;
                if p.skipped {
                    summary.skipped_penalty_batches += 1;
                    None
                } else {
                    summary.mean_penalty += p.penalty;
                    Some(p.grad_features.scaled(r.weight))
                }
            }
            None => None,
        };
        model.backward_and_step(&grad, extra.as_ref(), &settings.sgd)?;
    }
    let nb = batches.len() as f64;
    summary.mean_loss /= nb;
    summary.mean_penalty /= nb;
    Ok(summary)
}

/// Accuracy and collapse metrics of `model` on `ds`. Metrics are computed on
/// the first `metric_samples` rows (all rows when 0); accuracy always uses
/// every row. A metric failure is logged and reported as `None`.
pub fn measure(
    model: &MlpModel,
    ds: &LabeledDataset,
    metric_samples: usize,
) -> Result<(f64, Option<CollapseReport>)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (features, logits) = model.features_and_logits(&ds.images)?;
    let correct = logits
        .argmax_rows()
        .iter()
        .zip(&ds.labels)
        .filter(|(p, y)| p == y)
        .count();
    let acc = correct as f64 / ds.len() as f64;

    let m = if metric_samples == 0 {
        ds.len()
    } else {
        metric_samples.min(ds.len())
    };
    let rows: Vec<usize> = (0..m).collect();
    let report = FeatureBatch::new(
        features.select_rows(&rows),
        ds.labels[..m].to_vec(),
        NUM_CLASSES,
    )
    .and_then(|b| CollapseReport::compute(&b, model.classifier_weight(), &logits.select_rows(&rows)));
    match report {
        Ok(r) => Ok((acc, Some(r))),
        Err(e) => {
            warn!("collapse metrics unavailable on {}: {e}", ds.source);
            Ok((acc, None))
        }
    }
}

/// How a plasticity probe scores the retrained copy.
#[derive(Clone, Copy, Debug)]
pub enum ProbeEval<'a> {
    /// Accuracy on the probe task's own training data.
    Train,
    /// Accuracy on a held-out set.
    Holdout(&'a LabeledDataset),
}

/// Trains a copy of `model` on `next_task` for `budget_epochs` and returns
/// its accuracy. `model` itself is not modified.
pub fn plasticity_probe(
    model: &MlpModel,
    next_task: &LabeledDataset,
    budget_epochs: usize,
    settings: &TrainSettings<'_>,
    task_index: usize,
    eval: ProbeEval<'_>,
) -> Result<f64> {
    if budget_epochs == 0 {
        return Err(Error::InvalidArgument("probe budget must be >= 1 epoch".into()));
    }
    let mut copy = model.clone();
    for e in 0..budget_epochs {
        train_epoch(&mut copy, next_task, settings, EpochKey::new(task_index, e))?;
    }
    match eval {
        ProbeEval::Train => evaluate(&copy, &next_task.images, &next_task.labels),
        ProbeEval::Holdout(ds) => evaluate(&copy, &ds.images, &ds.labels),
    }
}
