//! Desk-scale models with per-layer representation taps: an MLP classifier,
//! a tiny patch-based transformer encoder and a reconstruction decoder.
//!
//! Layers are indexed from 0 internally; reports number them from 1.

mod config;
mod decoder;
mod model;

pub use config::{HeadKind, Init, InputShape, ModelConfig, ModelKind, ParamSpec, TokenPooling, VitConfig};
pub use decoder::{build_decoder, Decoder};
pub use model::{argmax_rows, BoundParams, Forward, GraphForward, Model, Representation};
