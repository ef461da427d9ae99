//! Supervised classification plumbing shared by experts, the monolith, the
//! continual baselines and the few-shot heads.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Adam, Network, Tensor};
use crate::scalar::Scalar;
use crate::seeding::rng_from;

/// Flat, contiguous labelled samples of a fixed per-sample shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>) -> Self {
        Self {
            sample_shape,
            data: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, pixels: &[f32], label: usize) {
        debug_assert_eq!(pixels.len(), self.sample_len());
        self.data.extend_from_slice(pixels);
        self.labels.push(label);
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Batch tensor for the given sample indices.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend(self.sample(i).iter().map(|&v| T::from_f32_lossy(v)));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.sample_shape);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 = initialization).
    pub best_epoch: usize,
    pub wall_seconds: f64,
}

/// One optimizer step on a batch. Returns the mean cross-entropy.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    adam: &mut Adam<T>,
    x: &Tensor<T>,
    y: &[usize],
) -> Result<T> {
    let logits = net.forward_train(x)?;
    let (loss, grad) = softmax_cross_entropy(&logits, y)?;
    net.backward(&grad)?;
    adam.step(&mut net.params_mut())?;
    Ok(loss)
}

/// Mini-batch Adam training with a per-epoch shuffle drawn from `seed`.
///
/// With a validation set, the returned parameters are those of the epoch
/// with the best validation accuracy (ties keep the earlier epoch, and the
/// initialization counts as epoch 0).
pub fn train_classifier<T: Scalar>(
    mut net: Network<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(Network<T>, TrainLog)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::invalid("batch size must be ≥ 1"));
    }
    let start = Instant::now();
    let mut rng = rng_from(seed);
    let mut adam = Adam::new(T::lit(hyper.lr));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut best = match val {
        Some(v) => Some((evaluate_classifier(&net, v)?, net.clone())),
        None => None,
    };
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let (x, y) = train.batch::<T>(chunk);
            let loss = train_step(&mut net, &mut adam, &x, &y).map_err(|e| Error::Diverged {
                seed,
                epoch,
                detail: e.to_string(),
            })?;
            total += loss.to_f64().unwrap() * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                seed,
                epoch,
                detail: "training loss is not finite".into(),
            });
        }
        let val_accuracy = match val {
            Some(v) => Some(evaluate_classifier(&net, v)?),
            None => None,
        };
        if let (Some(acc), Some((best_acc, best_net))) = (val_accuracy, best.as_mut()) {
            if acc > *best_acc {
                *best_acc = acc;
                *best_net = net.clone();
                log.best_epoch = epoch;
            }
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
        });
    }
    if val.is_none() {
        log.best_epoch = hyper.epochs;
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    let net = match best {
        Some((_, best_net)) => best_net,
        None => net,
    };
    Ok((strip_grads(net), log))
}

fn strip_grads<T: Scalar>(mut net: Network<T>) -> Network<T> {
    for p in net.params_mut() {
        p.clear_grad();
    }
    net
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_BATCH: usize = 256;

/// Raw logits for every sample, in dataset order.
pub fn logits<T: Scalar>(net: &Network<T>, data: &Dataset) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.batch::<T>(chunk);
        let y = net.forward(&x)?;
        out.extend(y.data().chunks(net.num_outputs()).map(<[T]>::to_vec));
    }
    Ok(out)
}

pub fn predict<T: Scalar>(net: &Network<T>, data: &Dataset) -> Result<Vec<usize>> {
    Ok(logits(net, data)?.iter().map(|r| argmax(r)).collect())
}

/// Exact-match accuracy of argmax predictions.
pub fn evaluate_classifier<T: Scalar>(net: &Network<T>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= net.num_outputs()) {
        return Err(Error::invalid(format!(
            "label {bad} outside the network's {} outputs",
            net.num_outputs()
        )));
    }
    let preds = predict(net, data)?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}
