use alloc::vec;
use alloc::vec::Vec;

use super::{OptimizerKind, ScheduleKind, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Learning rate at step `t` of `total`.
pub fn learning_rate(cfg: &TrainConfig, t: usize, total: usize) -> Result<f64> {
    if t > total || total == 0 {
        return Err(Error::Schedule { step: t, total });
    }
    Ok(match cfg.schedule {
        ScheduleKind::Constant => cfg.lr,
        ScheduleKind::Cosine => {
            cfg.lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t as f64 / total as f64))
        }
    })
}

/// Per-parameter moment buffers, kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl OptimizerState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let first: Vec<Vec<f64>> = shapes
            .into_iter()
            .map(|s| vec![0.0; s.iter().product()])
            .collect();
        Self {
            second: first.clone(),
            first,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// One update of every parameter from its gradient.
///
/// SGD keeps a velocity `v = m v + g + wd θ` and moves `θ -= lr(t) v`.
/// Adam folds `wd θ` into the gradient and uses bias-corrected moments.
pub fn optimizer_step<'a, T: Scalar + 'a>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    t: usize,
    total: usize,
) -> Result<()> {
    let lr = learning_rate(cfg, t, total)?;
    state.steps += 1;
    let k = state.steps as i32;
    let (c1, c2) = (1.0 - libm::pow(BETA1, k as f64), 1.0 - libm::pow(BETA2, k as f64));
    let mut count = 0;
    for (i, p) in params.into_iter().enumerate() {
        let g = grads.get(i).ok_or_else(|| Error::Contract(alloc::format!("no gradient for parameter {i}")))?;
        let m = state
            .first
            .get_mut(i)
            .ok_or_else(|| Error::Contract(alloc::format!("no optimizer state for parameter {i}")))?;
        if g.shape() != p.shape() || m.len() != p.numel() {
            return Err(Error::Dimension {
                op: "optimizer_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let v = &mut state.second[i];
        for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let theta = w.as_f64();
            let grad = gj.as_f64() + cfg.weight_decay * theta;
            let delta = match cfg.optimizer {
                OptimizerKind::Sgd => {
                    m[j] = cfg.momentum * m[j] + grad;
                    m[j]
                }
                OptimizerKind::Adam => {
                    m[j] = BETA1 * m[j] + (1.0 - BETA1) * grad;
                    v[j] = BETA2 * v[j] + (1.0 - BETA2) * grad * grad;
                    (m[j] / c1) / (libm::sqrt(v[j] / c2) + ADAM_EPS)
                }
            };
            *w = T::from_f64_lossy(theta - lr * delta);
        }
        count += 1;
    }
    if count != grads.len() || count != state.first.len() {
        return Err(Error::Contract(alloc::format!(
            "{count} parameters, {} gradients, {} state buffers",
            grads.len(),
            state.first.len()
        )));
    }
    Ok(())
}
