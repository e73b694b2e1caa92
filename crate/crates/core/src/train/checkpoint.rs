//! Checkpoint contents: a manifest plus a flat little-endian f32 blob.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};
use crate::zoo::{Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub epoch: usize,
    pub rng_state: RngState,
    pub param_order: Vec<ParamEntry>,
}

impl CheckpointManifest {
    pub fn for_model(model: &Model<f32>, epoch: usize, rng_state: RngState) -> Self {
        Self {
            config: model.config().clone(),
            epoch,
            rng_state,
            param_order: model
                .params()
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }
}

/// Parameters concatenated in model order.
pub fn encode_weights(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * model.param_count());
    for (_, t) in model.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_weights`] under `manifest`'s order.
pub fn decode_weights(manifest: &CheckpointManifest, bytes: &[u8]) -> Result<Model<f32>> {
    let expected: usize = manifest
        .param_order
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != 4 * expected {
        return Err(Error::Format(format!(
            "weights blob has {} bytes, manifest needs {}",
            bytes.len(),
            4 * expected
        )));
    }
    let mut stored = BTreeMap::new();
    let mut words = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    for e in &manifest.param_order {
        let n = e.shape.iter().product();
        let data: Vec<f32> = words.by_ref().take(n).collect();
        if stored.insert(e.name.clone(), Tensor::new(&e.shape, data)?).is_some() {
            return Err(Error::Format(format!("parameter {} listed twice", e.name)));
        }
    }
    Model::from_params(manifest.config.clone(), stored)
}
