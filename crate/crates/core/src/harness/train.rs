use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::eval::predict;
use crate::error::{Error, Result};
use crate::nn::{Mode, OptimizerConfig};
use crate::zoo::Network;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub target_train_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_validation_accuracy: Option<f64>,
    pub stopped_early: bool,
}

fn accuracy(net: &Network, data: &Dataset, batch_size: usize) -> Result<f64> {
    let preds = predict(net, data, batch_size)?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, l)| p.predicted == **l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Mini-batch training with seeded shuffling. With a validation set, keeps
/// the parameters of the best validation epoch (earliest on ties) and stops
/// after `patience` epochs without improvement; without one, runs all
/// epochs and keeps the last.
pub fn train(net: &mut Network, train: &Dataset, val: Option<&Dataset>, opts: &TrainOptions) -> Result<History> {
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val.is_some_and(Dataset::is_empty) {
        return Err(Error::Config("validation split is empty".into()));
    }
    if opts.batch_size == 0 || opts.max_epochs == 0 {
        return Err(Error::Config("batch_size and max_epochs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut optim = net.optimizer(&opts.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, crate::nn::ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            let batches = train.batch(chunk)?;
            let refs: Vec<_> = batches.iter().collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = net.loss_and_grads(&refs, &labels, Mode::Train, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "{}: non-finite loss at epoch {epoch}, batch {}",
                    net.name(),
                    b + 1
                )));
            }
            optim
                .step(&mut net.params, &grads)
                .map_err(|e| Error::Numerical(format!("{}: epoch {epoch}, batch {}: {e}", net.name(), b + 1)))?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_accuracy = accuracy(net, train, opts.batch_size)?;
        let validation_accuracy = val.map(|v| accuracy(net, v, opts.batch_size)).transpose()?;
        log::info!(
            "{} epoch {epoch}: loss {:.4} train {:.3} val {:?}",
            net.name(),
            loss_sum / train.len() as f64,
            train_accuracy,
            validation_accuracy
        );
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_accuracy,
            validation_accuracy,
        });
        match validation_accuracy {
            Some(acc) => {
                if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                    best = Some((acc, net.params.clone()));
                    history.best_epoch = epoch;
                    history.best_validation_accuracy = Some(acc);
                    since_best = 0;
                } else {
                    since_best += 1;
                }
            }
            None => history.best_epoch = epoch,
        }
        let target_hit = opts.target_train_accuracy.is_some_and(|t| train_accuracy >= t);
        if target_hit || (val.is_some() && since_best >= opts.patience) {
            history.stopped_early = epoch < opts.max_epochs;
            break;
        }
    }
    if let Some((_, params)) = best {
        net.params = params;
    }
    Ok(history)
}
