//! Invariance metrics built on inverted representations: STIR and the
//! forgetting, learning, divergence and flow quantities derived from it.
//!
//! Inverted sets are keyed by `(layer, rep)` under the caller's RNG, so every
//! term that conditions on the same model and layer sees the same `X` and
//! `X′`. [`profile`] and [`flow_matrix`] fork the root generator by role
//! (0 for sets inverted against the pretrained model, 1 for the finetuned
//! model, 2 for clean samples used by the divergence).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::{Executor, Sequential};
use crate::invert::{invert_with, InversionConfig, InversionResult, LayerTap};
use crate::numerics::{Rng, Tensor};
use crate::sim::linear_cka;
use crate::zoo::Model;

pub const ROLE_PRETRAINED: u64 = 0;
pub const ROLE_FINETUNED: u64 = 1;
pub const ROLE_CLEAN: u64 = 2;

/// Sampling and inversion constants shared by every metric.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(Serialize, Deserialize),
    serde(default, deny_unknown_fields)
)]
pub struct Protocol {
    /// Samples per repetition.
    pub n: usize,
    /// Repetitions.
    pub k: usize,
    pub inversion: InversionConfig,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            n: 500,
            k: 3,
            inversion: InversionConfig::default(),
        }
    }
}

impl Protocol {
    /// Small constants for quick runs.
    pub fn fast() -> Self {
        Self {
            n: 64,
            k: 1,
            inversion: InversionConfig {
                iterations: 20,
                ..InversionConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::Config(format!("n must be at least 4, got {}", self.n)));
        }
        if self.k == 0 {
            return Err(Error::Config(String::from("k must be at least 1")));
        }
        self.inversion.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct StirScore {
    pub mean: f64,
    /// Population standard deviation over repetitions.
    pub std: f64,
    pub k: usize,
    pub per_rep: Vec<f64>,
    pub n_samples: usize,
}

impl StirScore {
    fn from_reps(per_rep: Vec<f64>, n_samples: usize) -> Self {
        let (mean, std) = mean_std(&per_rep);
        Self {
            mean,
            std,
            k: per_rep.len(),
            per_rep,
            n_samples,
        }
    }
}

/// A difference of two STIR terms evaluated on shared sets.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MetricValue {
    pub value: f64,
    pub std: f64,
    pub per_rep: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Clean samples and their inversion against one reference layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedSet {
    pub layer: usize,
    pub rep: usize,
    pub x: Tensor<f32>,
    pub inversion: InversionResult<f32>,
}

/// `n` distinct samples drawn with `rng`.
pub fn sample_pool(pool: &Dataset, n: usize, rng: &mut Rng) -> Result<Tensor<f32>> {
    if n > pool.len() {
        return Err(Error::Argument(format!(
            "asked for {n} samples from a pool of {}",
            pool.len()
        )));
    }
    pool.images.select_rows(&rng.sample_indices(pool.len(), n))
}

fn check_pair(a: &Model<f32>, b: &Model<f32>) -> Result<()> {
    if a.config().input != b.config().input {
        return Err(Error::Argument(String::from("models take different input shapes")));
    }
    if a.layer_count() != b.layer_count() {
        return Err(Error::Argument(format!(
            "layer mismatch: {} vs {} layers",
            a.layer_count(),
            b.layer_count()
        )));
    }
    Ok(())
}

fn check_layer(model: &Model<f32>, layer: usize) -> Result<()> {
    if layer >= model.layer_count() {
        return Err(Error::Index {
            index: layer,
            len: model.layer_count(),
        });
    }
    Ok(())
}

/// `k` inverted sets per requested layer of `reference`. Set `(j, r)` samples
/// and initializes from `rng.fork_path(&[j, r])`; jobs run through `exec`.
pub fn invert_sets<E: Executor>(
    reference: &Model<f32>,
    layers: &[usize],
    pool: &Dataset,
    protocol: &Protocol,
    rng: &Rng,
    exec: &E,
) -> Result<BTreeMap<usize, Vec<InvertedSet>>> {
    protocol.validate()?;
    for &l in layers {
        check_layer(reference, l)?;
    }
    if pool.image_shape() != reference.config().input {
        return Err(Error::Argument(format!("pool {} does not fit the model input", pool.name)));
    }
    let k = protocol.k;
    let jobs = exec.map(layers.len() * k, |job| -> Result<InvertedSet> {
        let (layer, rep) = (layers[job / k], job % k);
        let mut r = rng.fork_path(&[layer as u64, rep as u64]);
        let x = sample_pool(pool, protocol.n, &mut r)?;
        let tap = LayerTap { model: reference, layer };
        let inversion = invert_with(&tap, &x, &protocol.inversion, &r.fork(0), &Sequential)?;
        Ok(InvertedSet { layer, rep, x, inversion })
    });
    let mut out: BTreeMap<usize, Vec<InvertedSet>> = BTreeMap::new();
    for set in jobs {
        let set = set?;
        out.entry(set.layer).or_default().push(set);
    }
    Ok(out)
}

/// CKA between `target`'s layer-`i` views of the clean and inverted inputs.
pub fn stir_on_set(target: &Model<f32>, i: usize, set: &InvertedSet) -> Result<f64> {
    let both = Tensor::concat_rows(&[set.x.clone(), set.inversion.x_prime.clone()])?;
    let reps = target.representations(&both, &[i])?;
    let m = &reps[&i].matrix;
    let n = set.x.shape()[0];
    linear_cka(&m.slice_rows(0, n)?, &m.slice_rows(n, 2 * n)?)
}

pub fn stir_on_sets(target: &Model<f32>, i: usize, sets: &[InvertedSet]) -> Result<StirScore> {
    check_layer(target, i)?;
    let per_rep = sets
        .iter()
        .map(|s| stir_on_set(target, i, s))
        .collect::<Result<Vec<_>>>()?;
    let n = sets.first().map_or(0, |s| s.x.shape()[0]);
    Ok(StirScore::from_reps(per_rep, n))
}

/// Similarity of `target` layer `i` on inputs that `reference` layer `j`
/// cannot tell apart from the clean ones.
pub fn stir(
    target: &Model<f32>,
    i: usize,
    reference: &Model<f32>,
    j: usize,
    pool: &Dataset,
    protocol: &Protocol,
    rng: &Rng,
) -> Result<StirScore> {
    check_pair(target, reference)?;
    check_layer(target, i)?;
    let sets = invert_sets(reference, &[j], pool, protocol, rng, &Sequential)?;
    stir_on_sets(target, i, &sets[&j])
}

/// `STIR(a^i | sets) - STIR(b^i | sets)` from one shared collection of sets.
/// When `a` is the model that produced the sets and `i` is their layer, the
/// first term is taken as exactly 1.
fn stir_difference(
    conditioning: &Model<f32>,
    other: &Model<f32>,
    i: usize,
    sets: &[InvertedSet],
) -> Result<(MetricValue, StirScore)> {
    let j = sets.first().map(|s| s.layer).ok_or_else(|| Error::Argument(String::from("no inverted sets")))?;
    let second = stir_on_sets(other, i, sets)?;
    if i == j {
        let per_rep = second.per_rep.iter().map(|s| 1.0 - s).collect();
        let value = MetricValue {
            value: 1.0 - second.mean,
            std: second.std,
            per_rep,
        };
        return Ok((value, second));
    }
    let first = stir_on_sets(conditioning, i, sets)?;
    let per_rep: Vec<f64> = first.per_rep.iter().zip(&second.per_rep).map(|(a, b)| a - b).collect();
    let (value, std) = mean_std(&per_rep);
    Ok((MetricValue { value, std, per_rep }, second))
}

/// Invariances of pretrained layer `j` that finetuned layer `i` no longer shares.
pub fn forgetting(
    ft: &Model<f32>,
    pt: &Model<f32>,
    i: usize,
    j: usize,
    pool: &Dataset,
    protocol: &Protocol,
    rng: &Rng,
) -> Result<MetricValue> {
    check_pair(ft, pt)?;
    check_layer(ft, i)?;
    let sets = invert_sets(pt, &[j], pool, protocol, &rng.fork(ROLE_PRETRAINED), &Sequential)?;
    Ok(stir_difference(pt, ft, i, &sets[&j])?.0)
}

/// Invariances of finetuned layer `j` that pretrained layer `i` does not share.
pub fn learning(
    ft: &Model<f32>,
    pt: &Model<f32>,
    i: usize,
    j: usize,
    pool: &Dataset,
    protocol: &Protocol,
    rng: &Rng,
) -> Result<MetricValue> {
    check_pair(ft, pt)?;
    check_layer(pt, i)?;
    let sets = invert_sets(ft, &[j], pool, protocol, &rng.fork(ROLE_FINETUNED), &Sequential)?;
    Ok(stir_difference(ft, pt, i, &sets[&j])?.0)
}

/// `1 - CKA` between corresponding layers on shared clean samples.
pub fn cka_divergence_layers(
    ft: &Model<f32>,
    pt: &Model<f32>,
    layers: &[usize],
    pool: &Dataset,
    n: usize,
    rng: &Rng,
) -> Result<Vec<f64>> {
    check_pair(ft, pt)?;
    let x = sample_pool(pool, n, &mut rng.fork(ROLE_CLEAN))?;
    let a = ft.representations(&x, layers)?;
    let b = pt.representations(&x, layers)?;
    layers
        .iter()
        .map(|l| Ok(1.0 - linear_cka(&a[l].matrix, &b[l].matrix)?))
        .collect()
}

pub fn cka_divergence(ft: &Model<f32>, pt: &Model<f32>, i: usize, pool: &Dataset, n: usize, rng: &Rng) -> Result<f64> {
    Ok(cka_divergence_layers(ft, pt, &[i], pool, n, rng)?[0])
}

/// Provenance attached to a profile.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ProfileContext {
    pub ft_checkpoint: String,
    pub pt_checkpoint: String,
    pub dataset: String,
    pub n: usize,
    pub k: usize,
    pub seed: u64,
}

/// Per-layer forgetting, learning and divergence (same-layer pairs).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MetricProfile {
    /// 0-based layer indices.
    pub layers: Vec<usize>,
    pub forgetting: Vec<f64>,
    pub forgetting_std: Vec<f64>,
    pub learning: Vec<f64>,
    pub learning_std: Vec<f64>,
    pub cka_divergence: Vec<f64>,
    /// `STIR(ft^i | pt^i)`, the term forgetting is derived from.
    pub stir_ft_given_pt: Vec<StirScore>,
    /// `STIR(pt^i | ft^i)`, the term learning is derived from.
    pub stir_pt_given_ft: Vec<StirScore>,
    /// Fraction of converged inversions per layer, against pt then ft.
    pub converged_pt: Vec<f64>,
    pub converged_ft: Vec<f64>,
    pub context: ProfileContext,
}

fn converged(sets: &[InvertedSet]) -> f64 {
    let total: usize = sets.iter().map(|s| s.inversion.converged.len()).sum();
    let hits: usize = sets
        .iter()
        .map(|s| s.inversion.converged.iter().filter(|&&c| c).count())
        .sum();
    hits as f64 / total.max(1) as f64
}

/// Sets inverted against both models, as used by [`profile_from_sets`].
pub struct SharedSets {
    pub pretrained: BTreeMap<usize, Vec<InvertedSet>>,
    pub finetuned: BTreeMap<usize, Vec<InvertedSet>>,
}

impl SharedSets {
    pub fn build<E: Executor>(
        ft: &Model<f32>,
        pt: &Model<f32>,
        layers: &[usize],
        pool: &Dataset,
        protocol: &Protocol,
        rng: &Rng,
        exec: &E,
    ) -> Result<Self> {
        check_pair(ft, pt)?;
        Ok(Self {
            pretrained: invert_sets(pt, layers, pool, protocol, &rng.fork(ROLE_PRETRAINED), exec)?,
            finetuned: invert_sets(ft, layers, pool, protocol, &rng.fork(ROLE_FINETUNED), exec)?,
        })
    }
}

pub fn profile<E: Executor>(
    ft: &Model<f32>,
    pt: &Model<f32>,
    layers: &[usize],
    pool: &Dataset,
    protocol: &Protocol,
    rng: &Rng,
    exec: &E,
) -> Result<MetricProfile> {
    let sets = SharedSets::build(ft, pt, layers, pool, protocol, rng, exec)?;
    profile_from_sets(ft, pt, layers, pool, protocol, rng, &sets, exec)
}

#[allow(clippy::too_many_arguments)]
pub fn profile_from_sets<E: Executor>(
    ft: &Model<f32>,
    pt: &Model<f32>,
    layers: &[usize],
    pool: &Dataset,
    protocol: &Protocol,
    rng: &Rng,
    sets: &SharedSets,
    exec: &E,
) -> Result<MetricProfile> {
    check_pair(ft, pt)?;
    let missing = |l: usize| Error::Argument(format!("no inverted sets for layer {}", l + 1));
    let rows = exec.map(layers.len(), |idx| -> Result<_> {
        let l = layers[idx];
        let pts = sets.pretrained.get(&l).ok_or_else(|| missing(l))?;
        let fts = sets.finetuned.get(&l).ok_or_else(|| missing(l))?;
        let (f, s_ft) = stir_difference(pt, ft, l, pts)?;
        let (g, s_pt) = stir_difference(ft, pt, l, fts)?;
        Ok((f, s_ft, g, s_pt, converged(pts), converged(fts)))
    });
    let mut p = MetricProfile {
        layers: layers.to_vec(),
        forgetting: Vec::new(),
        forgetting_std: Vec::new(),
        learning: Vec::new(),
        learning_std: Vec::new(),
        cka_divergence: cka_divergence_layers(ft, pt, layers, pool, protocol.n, rng)?,
        stir_ft_given_pt: Vec::new(),
        stir_pt_given_ft: Vec::new(),
        converged_pt: Vec::new(),
        converged_ft: Vec::new(),
        context: ProfileContext {
            dataset: pool.name.clone(),
            n: protocol.n,
            k: protocol.k,
            seed: rng.seed(),
            ..ProfileContext::default()
        },
    };
    for row in rows {
        let (f, s_ft, g, s_pt, cp, cf) = row?;
        p.forgetting.push(f.value);
        p.forgetting_std.push(f.std);
        p.learning.push(g.value);
        p.learning_std.push(g.std);
        p.stir_ft_given_pt.push(s_ft);
        p.stir_pt_given_ft.push(s_pt);
        p.converged_pt.push(cp);
        p.converged_ft.push(cf);
    }
    Ok(p)
}

/// Entry `(a, b)` is `STIR(ft^layers[b] | pt^layers[a]) - STIR(ft^layers[a] | pt^layers[a])`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct FlowMatrix {
    /// 0-based layer indices labelling rows (pretrained) and columns (finetuned).
    pub layers: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowRegion {
    /// Invariances moved to an earlier finetuned layer.
    Compression,
    /// Invariances moved to a deeper finetuned layer.
    Expansion,
    Neutral,
}

/// Region of a positive flow entry from pretrained layer `i` to finetuned layer `j`.
pub fn classify_region(i: usize, j: usize, value: f64) -> FlowRegion {
    if value > 0.0 && j < i {
        FlowRegion::Compression
    } else if value > 0.0 && j > i {
        FlowRegion::Expansion
    } else {
        FlowRegion::Neutral
    }
}

pub fn flow_matrix<E: Executor>(
    ft: &Model<f32>,
    pt: &Model<f32>,
    layers: &[usize],
    pool: &Dataset,
    protocol: &Protocol,
    rng: &Rng,
    exec: &E,
) -> Result<FlowMatrix> {
    check_pair(ft, pt)?;
    let sets = invert_sets(pt, layers, pool, protocol, &rng.fork(ROLE_PRETRAINED), exec)?;
    flow_matrix_from_sets(ft, layers, &sets, exec)
}

/// Flow matrix from sets inverted against the pretrained model.
pub fn flow_matrix_from_sets<E: Executor>(
    ft: &Model<f32>,
    layers: &[usize],
    pretrained_sets: &BTreeMap<usize, Vec<InvertedSet>>,
    exec: &E,
) -> Result<FlowMatrix> {
    let l = layers.len();
    let scores = exec.map(l * l, |job| -> Result<f64> {
        let (a, b) = (layers[job / l], layers[job % l]);
        let sets = pretrained_sets
            .get(&a)
            .ok_or_else(|| Error::Argument(format!("no inverted sets for layer {}", a + 1)))?;
        Ok(stir_on_sets(ft, b, sets)?.mean)
    });
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    let values = (0..l)
        .map(|a| (0..l).map(|b| scores[a * l + b] - scores[a * l + a]).collect())
        .collect();
    Ok(FlowMatrix {
        layers: layers.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum AggregateOp {
    Mean,
    Std,
    Min,
    Max,
}

impl AggregateOp {
    pub const ALL: [AggregateOp; 4] = [AggregateOp::Mean, AggregateOp::Std, AggregateOp::Min, AggregateOp::Max];

    pub fn name(self) -> &'static str {
        match self {
            AggregateOp::Mean => "mean",
            AggregateOp::Std => "std",
            AggregateOp::Min => "min",
            AggregateOp::Max => "max",
        }
    }

    pub fn apply(self, v: &[f64]) -> Result<f64> {
        if v.is_empty() {
            return Err(Error::Argument(String::from("aggregate over an empty range")));
        }
        Ok(match self {
            AggregateOp::Mean => mean_std(v).0,
            AggregateOp::Std => mean_std(v).1,
            AggregateOp::Min => v.iter().copied().fold(f64::INFINITY, f64::min),
            AggregateOp::Max => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Aggregate of `values[lo-1..=hi-1]` (1-based inclusive layers); `std` is the
/// population standard deviation.
pub fn aggregate(values: &[f64], lo: usize, hi: usize, op: AggregateOp) -> Result<f64> {
    if lo == 0 || hi < lo || hi > values.len() {
        return Err(Error::Argument(format!(
            "layer range {lo}..={hi} is empty or outside 1..={}",
            values.len()
        )));
    }
    op.apply(&values[lo - 1..hi])
}
