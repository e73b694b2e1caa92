//! Metric traces over finetuning epochs, corrupted-set accuracy curves and
//! the correlation analyses between them.

mod grid;
mod stats;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub use grid::{
    grid_formula, grid_selections, grid_specs, hypothesis_grid, CorrelationReport, GridMode, GridReport,
    HypothesisSpec, LayerSelection, MetricOp,
};
pub use stats::{bonferroni, bonferroni_threshold, pearson, prefix_correlation, regularized_beta, Correlation, P_FLOOR};

use crate::data::{corrupt, CorruptionKind, CorruptionSpec, Dataset};
use crate::error::{Error, Result};
use crate::metrics::MetricProfile;
use crate::numerics::Rng;
use crate::train::evaluate;
use crate::zoo::Model;

/// Sampled test inputs per corrupted cell.
pub const DEFAULT_PER_CELL: usize = 1000;

/// Per-epoch accuracies on the clean test set and each corruption cell.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RobustnessCurve {
    pub epochs: Vec<usize>,
    pub clean_acc: Vec<f64>,
    /// Cells in `(kind, severity)` order, each with one accuracy per epoch.
    pub cells: Vec<(CorruptionSpec, Vec<f64>)>,
}

impl RobustnessCurve {
    /// Mean over all corrupted cells, per epoch.
    pub fn mean_corrupted(&self) -> Vec<f64> {
        (0..self.epochs.len())
            .map(|e| self.cells.iter().map(|(_, a)| a[e]).sum::<f64>() / self.cells.len().max(1) as f64)
            .collect()
    }

    /// Accuracy per epoch at one severity, averaged over kinds.
    pub fn mean_at_severity(&self, severity: u8) -> Vec<f64> {
        let cells: Vec<&Vec<f64>> = self
            .cells
            .iter()
            .filter(|(s, _)| s.severity == severity)
            .map(|(_, a)| a)
            .collect();
        (0..self.epochs.len())
            .map(|e| cells.iter().map(|a| a[e]).sum::<f64>() / cells.len().max(1) as f64)
            .collect()
    }
}

/// Accuracy of each epoch's model on fixed samples of every corrupted cell.
///
/// `load(epoch)` supplies the model; its failures are reported with the epoch.
/// Cell `(kind, severity)` samples from `rng.fork_path(&[kind, severity])`
/// once, so every epoch sees the same inputs.
pub fn robustness_curve<L>(
    mut load: L,
    epochs: &[usize],
    test_ds: &Dataset,
    kinds: &[CorruptionKind],
    severities: &[u8],
    n_per_cell: usize,
    rng: &Rng,
) -> Result<RobustnessCurve>
where
    L: FnMut(usize) -> Result<Model<f32>>,
{
    if n_per_cell == 0 || n_per_cell > test_ds.len() {
        return Err(Error::Argument(format!(
            "n_per_cell must be in 1..={}, got {n_per_cell}",
            test_ds.len()
        )));
    }
    let mut cells = Vec::new();
    for &kind in kinds {
        for &severity in severities {
            let spec = CorruptionSpec::new(kind, severity)?;
            let kind_id = CorruptionKind::ALL.iter().position(|&k| k == kind).unwrap_or(0) as u64;
            let mut r = rng.fork_path(&[kind_id, severity as u64]);
            let subset = test_ds.subset(&r.sample_indices(test_ds.len(), n_per_cell))?;
            cells.push((spec, corrupt(&subset, spec, &r.fork(0))?));
        }
    }
    let clean = test_ds.subset(&rng.fork(u64::MAX).sample_indices(test_ds.len(), n_per_cell))?;
    let mut curve = RobustnessCurve {
        epochs: epochs.to_vec(),
        clean_acc: Vec::with_capacity(epochs.len()),
        cells: cells.iter().map(|(s, _)| (*s, Vec::with_capacity(epochs.len()))).collect(),
    };
    for &epoch in epochs {
        let model = load(epoch).map_err(|e| match e {
            Error::Load { .. } => e,
            other => Error::Load {
                epoch,
                message: format!("{other}"),
            },
        })?;
        curve.clean_acc.push(evaluate(&model, &clean)?);
        for (slot, (_, ds)) in curve.cells.iter_mut().zip(&cells) {
            slot.1.push(evaluate(&model, ds)?);
        }
    }
    Ok(curve)
}

/// Metric profiles and accuracies on a shared epoch axis.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DynamicsTrace {
    pub epochs: Vec<usize>,
    pub profiles: Vec<MetricProfile>,
    pub clean_acc: Vec<f64>,
    pub corrupted_acc: Vec<BTreeMap<String, f64>>,
}

impl DynamicsTrace {
    pub fn new(profiles: Vec<MetricProfile>, curve: &RobustnessCurve) -> Result<Self> {
        if profiles.len() != curve.epochs.len() {
            return Err(Error::Consistency(format!(
                "{} profiles for {} epochs",
                profiles.len(),
                curve.epochs.len()
            )));
        }
        let corrupted_acc = (0..curve.epochs.len())
            .map(|e| {
                curve
                    .cells
                    .iter()
                    .map(|(s, a)| (format!("{}@{}", s.kind.name(), s.severity), a[e]))
                    .collect()
            })
            .collect();
        Ok(Self {
            epochs: curve.epochs.clone(),
            profiles,
            clean_acc: curve.clean_acc.clone(),
            corrupted_acc,
        })
    }

    /// Mean corrupted accuracy per epoch, the default correlation target.
    pub fn target(&self) -> Vec<f64> {
        self.corrupted_acc
            .iter()
            .map(|m| m.values().sum::<f64>() / m.len().max(1) as f64)
            .collect()
    }
}
