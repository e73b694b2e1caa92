//! Losses, optimizers, learning-rate schedules and the epoch loop.

mod checkpoint;
mod optim;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_weights, encode_weights, CheckpointManifest, ParamEntry};
pub use optim::{learning_rate, optimizer_step, OptimizerState};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Rng, RngState, Scalar, Tape, Tensor};
use crate::zoo::{argmax_rows, HeadKind, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum ScheduleKind {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum LossKind {
    CrossEntropy,
    L1Reconstruction,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(Serialize, Deserialize),
    serde(default, deny_unknown_fields)
)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: ScheduleKind::Cosine,
            loss: LossKind::CrossEntropy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config(String::from("epochs must be at least 1")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(String::from("batch_size must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Summary of one finished epoch (1-based).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Test accuracy for classification, mean test L1 for reconstruction.
    pub test_metric: f64,
    pub checkpoint_path: Option<String>,
}

/// What a per-epoch hook sees. The returned path, if any, is stored in the record.
pub struct EpochSnapshot<'a> {
    pub record: &'a EpochRecord,
    pub model: &'a Model<f32>,
    pub rng_state: RngState,
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    Ok(tape.constant(logits.clone()).cross_entropy(labels)?.value().item()?.as_f64())
}

/// Mean absolute error over all elements.
pub fn l1_reconstruction<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension {
            op: "l1_reconstruction",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b).abs().as_f64())
        .sum();
    Ok(sum / pred.numel().max(1) as f64)
}

const EVAL_BATCH: usize = 256;

/// Test accuracy or mean L1, depending on the head.
pub fn evaluate(model: &Model<f32>, ds: &Dataset) -> Result<f64> {
    let out = model.predict(&ds.images, EVAL_BATCH)?;
    match model.config().head {
        HeadKind::Classification => {
            let hits = argmax_rows(&out)
                .iter()
                .zip(&ds.labels)
                .filter(|(p, y)| p == y)
                .count();
            Ok(hits as f64 / ds.len() as f64)
        }
        HeadKind::Reconstruction => l1_reconstruction(&out, &ds.images),
    }
}

fn check_compatible(model: &Model<f32>, ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let mc = model.config();
    if ds.image_shape() != mc.input {
        return Err(Error::Dimension {
            op: "train",
            lhs: ds.images.shape()[1..].to_vec(),
            rhs: alloc::vec![mc.input.channels, mc.input.height, mc.input.width],
        });
    }
    match (mc.head, cfg.loss) {
        (HeadKind::Classification, LossKind::CrossEntropy) => {
            if ds.num_classes != mc.num_classes {
                return Err(Error::Config(format!(
                    "dataset {} has {} classes but the head has {}",
                    ds.name, ds.num_classes, mc.num_classes
                )));
            }
            Ok(())
        }
        (HeadKind::Reconstruction, LossKind::L1Reconstruction) => Ok(()),
        (head, loss) => Err(Error::Config(format!("loss {loss:?} does not fit a {head:?} head"))),
    }
}

/// Train every parameter of `model`. `hook` runs after each epoch's
/// evaluation; its returned path is recorded as that epoch's checkpoint.
pub fn train<H>(
    mut model: Model<f32>,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    mut hook: H,
) -> Result<(Model<f32>, Vec<EpochRecord>)>
where
    H: FnMut(&EpochSnapshot<'_>) -> Result<Option<String>>,
{
    cfg.validate()?;
    check_compatible(&model, train_ds, cfg)?;
    check_compatible(&model, test_ds, cfg)?;
    if train_ds.is_empty() {
        return Err(Error::Argument(String::from("empty training set")));
    }
    let n = train_ds.len();
    let batches = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches;
    let rng = Rng::new(cfg.seed);
    let mut state = OptimizerState::new(model.params().iter().map(|(_, t)| t.shape()));
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.fork(epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch, batch: b },
                other => other,
            };
            let x = train_ds.images.select_rows(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_ds.labels[i]).collect();
            let tape = Tape::new();
            let p = model.bind(&tape, true);
            let input = tape.constant(x.clone());
            let head = model.forward_graph(&p, input, &[], true).map_err(diverged)?.head.expect("head");
            let loss = match cfg.loss {
                LossKind::CrossEntropy => head.cross_entropy(&labels),
                LossKind::L1Reconstruction => head.l1(&input),
            }
            .map_err(diverged)?;
            let value = loss.value().item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            tape.backward(loss).map_err(diverged)?;
            let grads: Vec<Tensor<f32>> = model
                .params()
                .iter()
                .map(|(name, _)| tape.grad(p.get(name).expect("bound")).expect("trainable"))
                .collect();
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            optimizer_step(model.params_mut(), &grads, &mut state, cfg, step, total)?;
            loss_sum += value;
            step += 1;
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            test_metric: evaluate(&model, test_ds)?,
            checkpoint_path: None,
        };
        record.checkpoint_path = hook(&EpochSnapshot {
            record: &record,
            model: &model,
            rng_state: rng.state(),
        })?;
        records.push(record);
    }
    Ok((model, records))
}
