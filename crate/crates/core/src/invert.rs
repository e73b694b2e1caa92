//! Input optimization so that a frozen layer reproduces given representations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{Executor, Sequential};
use crate::numerics::{Rng, Scalar, Tape, Tensor, Var};
use crate::zoo::Model;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const JITTER_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum InitKind {
    /// Independent `U[0, 1]` pixels.
    UniformNoise,
    /// The clean input plus `N(0, 0.1²)`, clamped.
    DataJitter,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(Serialize, Deserialize),
    serde(default, deny_unknown_fields)
)]
pub struct InversionConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub init: InitKind,
    /// Converged when the final loss is below this fraction of the mean
    /// squared target representation.
    pub match_tolerance: f64,
    /// Samples per independent job.
    pub chunk_size: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            step_size: 0.05,
            init: InitKind::UniformNoise,
            match_tolerance: 1e-2,
            chunk_size: 64,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.match_tolerance > 0.0) {
            return Err(Error::Config(format!(
                "match_tolerance must be positive, got {}",
                self.match_tolerance
            )));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config(String::from("chunk_size must be at least 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult<T> {
    /// Same shape as the clean input, values in `[0, 1]`.
    pub x_prime: Tensor<T>,
    /// Representation-match MSE after the last step.
    pub per_sample_loss: Vec<f64>,
    pub converged: Vec<bool>,
    pub init_loss: Vec<f64>,
}

impl<T> InversionResult<T> {
    pub fn converged_fraction(&self) -> f64 {
        let hits = self.converged.iter().filter(|&&c| c).count();
        hits as f64 / self.converged.len().max(1) as f64
    }

    pub fn mean_loss(&self) -> f64 {
        self.per_sample_loss.iter().sum::<f64>() / self.per_sample_loss.len().max(1) as f64
    }

    pub fn mean_init_loss(&self) -> f64 {
        self.init_loss.iter().sum::<f64>() / self.init_loss.len().max(1) as f64
    }
}

/// A differentiable map from an image batch to one row per sample.
pub trait Representer<T: Scalar>: Sync {
    fn represent<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>>;
}

/// Layer `layer` (0-based) of a frozen model.
pub struct LayerTap<'m, T> {
    pub model: &'m Model<T>,
    pub layer: usize,
}

impl<T: Scalar> Representer<T> for LayerTap<'_, T> {
    fn represent<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let p = self.model.bind(tape, false);
        let g = self.model.forward_graph(&p, x, &[self.layer], false)?;
        self.model.pool_tap(g.taps[0].1)
    }
}

/// Invert layer `layer` of `model` on the batch `x`, chunk by chunk in sequence.
pub fn invert<T: Scalar>(
    model: &Model<T>,
    layer: usize,
    x: &Tensor<T>,
    cfg: &InversionConfig,
    rng: &Rng,
) -> Result<InversionResult<T>> {
    invert_with(&LayerTap { model, layer }, x, cfg, rng, &Sequential)
}

/// General form: any representer, chunks dispatched through `exec`.
/// Chunk `c` draws its initialization from `rng.fork(c)`.
pub fn invert_with<T: Scalar, R: Representer<T>, E: Executor>(
    rep: &R,
    x: &Tensor<T>,
    cfg: &InversionConfig,
    rng: &Rng,
    exec: &E,
) -> Result<InversionResult<T>> {
    cfg.validate()?;
    if x.ndim() < 2 || x.shape()[0] == 0 {
        return Err(Error::Argument(format!("cannot invert a batch of shape {:?}", x.shape())));
    }
    let n = x.shape()[0];
    let chunks = n.div_ceil(cfg.chunk_size);
    let parts = exec.map(chunks, |c| {
        let start = c * cfg.chunk_size;
        let end = (start + cfg.chunk_size).min(n);
        let chunk = x.slice_rows(start, end)?;
        invert_chunk(rep, &chunk, cfg, &mut rng.fork(c as u64)).map_err(|e| match e {
            Error::InversionDiverged { iteration, sample } => Error::InversionDiverged {
                iteration,
                sample: sample + start,
            },
            other => other,
        })
    });
    let mut xs = Vec::with_capacity(chunks);
    let mut out = InversionResult {
        x_prime: Tensor::zeros(&[0]),
        per_sample_loss: Vec::with_capacity(n),
        converged: Vec::with_capacity(n),
        init_loss: Vec::with_capacity(n),
    };
    for part in parts {
        let part = part?;
        xs.push(part.x_prime);
        out.per_sample_loss.extend(part.per_sample_loss);
        out.converged.extend(part.converged);
        out.init_loss.extend(part.init_loss);
    }
    out.x_prime = Tensor::concat_rows(&xs)?;
    Ok(out)
}

fn initial<T: Scalar>(x: &Tensor<T>, init: InitKind, rng: &mut Rng) -> Result<Tensor<T>> {
    let data = x
        .data()
        .iter()
        .map(|&v| {
            T::from_f64_lossy(match init {
                InitKind::UniformNoise => rng.uniform(),
                InitKind::DataJitter => (v.as_f64() + JITTER_STD * rng.normal()).clamp(0.0, 1.0),
            })
        })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Per-sample MSE between the representation of `x` and `target`; with
/// `grad`, also the gradient of the summed loss with respect to `x`.
fn match_loss<T: Scalar, R: Representer<T>>(
    rep: &R,
    x: &Tensor<T>,
    target: &Tensor<T>,
    grad: bool,
) -> Result<(Vec<f64>, Option<Tensor<T>>)> {
    let tape = Tape::new();
    let xv = if grad {
        tape.param(x.clone())
    } else {
        tape.constant(x.clone())
    };
    let t = tape.constant(target.clone());
    let per = rep.represent(&tape, xv)?.sub(&t)?.square()?.mean_last()?;
    let losses = per.value().to_f64_vec();
    let g = if grad {
        tape.backward(per.sum()?)?;
        tape.grad(xv)
    } else {
        None
    };
    Ok((losses, g))
}

fn invert_chunk<T: Scalar, R: Representer<T>>(
    rep: &R,
    x: &Tensor<T>,
    cfg: &InversionConfig,
    rng: &mut Rng,
) -> Result<InversionResult<T>> {
    let n = x.shape()[0];
    let numel = x.numel();
    let locate = |iteration: usize| {
        move |e: Error| match e {
            Error::NonFinite { index, shape, .. } => {
                let total: usize = shape.iter().product();
                let rows = shape.first().copied().unwrap_or(1).max(1);
                let sample = if rows == n { index * n / total.max(1) } else { 0 };
                Error::InversionDiverged { iteration, sample }
            }
            other => other,
        }
    };
    let target = {
        let tape = Tape::new();
        let v = rep.represent(&tape, tape.constant(x.clone())).map_err(locate(0))?;
        (*v.value()).clone()
    };
    let scale: Vec<f64> = target
        .to_f64_vec()
        .chunks_exact(target.numel() / n)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64)
        .collect();

    let mut xp = initial(x, cfg.init, rng)?;
    let mut m = vec![0.0f64; numel];
    let mut v = vec![0.0f64; numel];
    let mut init_loss = Vec::new();
    for it in 0..cfg.iterations {
        let (losses, g) = match_loss(rep, &xp, &target, true).map_err(locate(it))?;
        if it == 0 {
            init_loss = losses;
        }
        let g = g.expect("input gradient");
        if let Some(i) = g.first_non_finite() {
            return Err(Error::InversionDiverged {
                iteration: it,
                sample: i * n / numel,
            });
        }
        let k = (it + 1) as f64;
        let (c1, c2) = (1.0 - libm::pow(BETA1, k), 1.0 - libm::pow(BETA2, k));
        for (j, (p, gj)) in xp.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj.as_f64();
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            let step = cfg.step_size * (m[j] / c1) / (libm::sqrt(v[j] / c2) + ADAM_EPS);
            *p = T::from_f64_lossy((p.as_f64() - step).clamp(0.0, 1.0));
        }
    }
    let (final_loss, _) = match_loss(rep, &xp, &target, false).map_err(locate(cfg.iterations))?;
    if cfg.iterations == 0 {
        init_loss = final_loss.clone();
    }
    let converged = final_loss
        .iter()
        .zip(&scale)
        .map(|(&l, &s)| l < cfg.match_tolerance * s)
        .collect();
    Ok(InversionResult {
        x_prime: xp,
        per_sample_loss: final_loss,
        converged,
        init_loss,
    })
}

#[cfg(test)]
mod tests;
