use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use super::stats::{bonferroni, pearson};
use super::DynamicsTrace;
use crate::error::{Error, Result};
use crate::metrics::{AggregateOp, MetricProfile};

/// Layers feeding an aggregate, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum LayerSelection {
    Single(usize),
    FirstN(usize),
    LastN(usize),
}

impl LayerSelection {
    /// 1-based inclusive range within `layers` layers.
    pub fn range(self, layers: usize) -> Result<(usize, usize)> {
        let (lo, hi) = match self {
            LayerSelection::Single(l) => (l, l),
            LayerSelection::FirstN(n) => (1, n),
            LayerSelection::LastN(n) => (layers.saturating_sub(n) + 1, layers),
        };
        if lo == 0 || hi > layers || lo > hi || matches!(self, LayerSelection::LastN(n) if n > layers) {
            return Err(Error::Argument(format!("{} does not fit {layers} layers", self.label())));
        }
        Ok((lo, hi))
    }

    pub fn label(self) -> String {
        match self {
            LayerSelection::Single(l) => format!("layer {l}"),
            LayerSelection::FirstN(n) => format!("first {n}"),
            LayerSelection::LastN(n) => format!("last {n}"),
        }
    }
}

/// Per-layer quantity that is aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum MetricOp {
    LearningOnly,
    ForgettingOnly,
    /// forgetting + learning
    Sum,
    /// forgetting - learning
    Difference,
    CkaDivergence,
}

impl MetricOp {
    pub const STIR_OPS: [MetricOp; 4] = [
        MetricOp::LearningOnly,
        MetricOp::ForgettingOnly,
        MetricOp::Sum,
        MetricOp::Difference,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricOp::LearningOnly => "learning_only",
            MetricOp::ForgettingOnly => "forgetting_only",
            MetricOp::Sum => "sum",
            MetricOp::Difference => "difference",
            MetricOp::CkaDivergence => "cka_divergence",
        }
    }

    pub fn per_layer(self, p: &MetricProfile) -> Vec<f64> {
        let zip = |f: fn(f64, f64) -> f64| p.forgetting.iter().zip(&p.learning).map(|(&a, &b)| f(a, b)).collect();
        match self {
            MetricOp::LearningOnly => p.learning.clone(),
            MetricOp::ForgettingOnly => p.forgetting.clone(),
            MetricOp::Sum => zip(|f, l| f + l),
            MetricOp::Difference => zip(|f, l| f - l),
            MetricOp::CkaDivergence => p.cka_divergence.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct HypothesisSpec {
    pub layers: LayerSelection,
    pub metric: MetricOp,
    pub aggregation: AggregateOp,
}

impl HypothesisSpec {
    pub fn label(&self) -> String {
        format!("{} {} over {}", self.aggregation.name(), self.metric.name(), self.layers.label())
    }

    /// The aggregate value for one epoch's profile.
    pub fn evaluate(&self, p: &MetricProfile) -> Result<f64> {
        let values = self.metric.per_layer(p);
        let (lo, hi) = self.layers.range(values.len())?;
        self.aggregation.apply(&values[lo - 1..hi])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum GridMode {
    /// Forgetting and learning combinations.
    LearningForgetting,
    CkaDivergence,
}

/// Layer selections of the grid: the first and last `n` layers for
/// `n` in `2..=layers`.
pub fn grid_selections(layers: usize) -> Vec<LayerSelection> {
    let mut out: Vec<LayerSelection> = (2..=layers).map(LayerSelection::FirstN).collect();
    out.extend((2..=layers).map(LayerSelection::LastN));
    out
}

/// All hypotheses of a grid in evaluation order.
pub fn grid_specs(layers: usize, mode: GridMode) -> Vec<HypothesisSpec> {
    let metrics: &[MetricOp] = match mode {
        GridMode::LearningForgetting => &MetricOp::STIR_OPS,
        GridMode::CkaDivergence => &[MetricOp::CkaDivergence],
    };
    let mut out = Vec::new();
    for sel in grid_selections(layers) {
        for &metric in metrics {
            for aggregation in AggregateOp::ALL {
                out.push(HypothesisSpec {
                    layers: sel,
                    metric,
                    aggregation,
                });
            }
        }
    }
    out
}

/// Grid size as a readable formula.
pub fn grid_formula(layers: usize, mode: GridMode) -> String {
    let ops = match mode {
        GridMode::LearningForgetting => 4,
        GridMode::CkaDivergence => 1,
    };
    format!(
        "2*({layers}-1) selections x {ops} metric op(s) x 4 aggregations = {}",
        2 * layers.saturating_sub(1) * ops * 4
    )
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CorrelationReport {
    pub hypothesis: HypothesisSpec,
    /// `None` when the hypothesis was skipped.
    pub r: Option<f64>,
    pub p_value: Option<f64>,
    pub n: usize,
    pub m_hypotheses: usize,
    pub bonferroni_pass: bool,
    pub skip_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GridReport {
    pub mode: GridMode,
    pub formula: String,
    pub alpha: f64,
    /// Ranked by `|r|`, skipped hypotheses last, ties in grid order.
    pub reports: Vec<CorrelationReport>,
}

/// Correlate every grid hypothesis's per-epoch series with `target`.
pub fn hypothesis_grid(trace: &DynamicsTrace, target: &[f64], mode: GridMode, alpha: f64) -> Result<GridReport> {
    let epochs = trace.epochs.len();
    if epochs < 3 {
        return Err(Error::Argument(format!("need at least 3 epochs, got {epochs}")));
    }
    if target.len() != epochs || trace.profiles.len() != epochs {
        return Err(Error::Dimension {
            op: "hypothesis_grid",
            lhs: alloc::vec![epochs, trace.profiles.len()],
            rhs: alloc::vec![target.len()],
        });
    }
    let layers = trace.profiles[0].layers.len();
    if trace.profiles.iter().any(|p| p.layers.len() != layers) {
        return Err(Error::Consistency(String::from("profiles cover different layer sets")));
    }
    let specs = grid_specs(layers, mode);
    let m = specs.len();
    let mut reports: Vec<CorrelationReport> = specs
        .into_iter()
        .map(|h| {
            let series: Result<Vec<f64>> = trace.profiles.iter().map(|p| h.evaluate(p)).collect();
            let outcome = series.and_then(|s| pearson(&s, target));
            match outcome {
                Ok(c) => CorrelationReport {
                    hypothesis: h,
                    r: Some(c.r),
                    p_value: Some(c.p),
                    n: c.n,
                    m_hypotheses: m,
                    bonferroni_pass: bonferroni(c.p, m, alpha),
                    skip_reason: None,
                },
                Err(e) => CorrelationReport {
                    hypothesis: h,
                    r: None,
                    p_value: None,
                    n: epochs,
                    m_hypotheses: m,
                    bonferroni_pass: false,
                    skip_reason: Some(format!("{e}")),
                },
            }
        })
        .collect();
    reports.sort_by(|a, b| {
        let key = |r: &CorrelationReport| r.r.map_or(-1.0, f64::abs);
        key(b).partial_cmp(&key(a)).unwrap_or(core::cmp::Ordering::Equal)
    });
    Ok(GridReport {
        mode,
        formula: grid_formula(layers, mode),
        alpha,
        reports,
    })
}
