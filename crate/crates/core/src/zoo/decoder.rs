//! Per-patch linear un-embedding from encoder tokens back to pixels.

use alloc::string::String;
use alloc::vec::Vec;

use super::config::{HeadKind, ModelConfig, ModelKind};
use super::model::BoundParams;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tape, Tensor, Var};

/// Reconstruction head for a tiny ViT encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    config: ModelConfig,
    weight: Tensor<T>,
    bias: Tensor<T>,
}

/// Fresh decoder matching `encoder`'s token width and patch geometry.
pub fn build_decoder<T: Scalar>(encoder: &ModelConfig, rng: &mut Rng) -> Result<Decoder<T>> {
    if encoder.kind != ModelKind::TinyVit {
        return Err(Error::Unsupported(String::from(
            "decoder requires a tiny_vit encoder",
        )));
    }
    let mut config = encoder.clone();
    config.head = HeadKind::Reconstruction;
    config.validate()?;
    let (d, out) = (config.vit.embed_dim, config.patch_dim());
    let std = 1.0 / libm::sqrt(d as f64);
    let w = (0..d * out).map(|_| T::from_f64_lossy(rng.normal() * std)).collect();
    Ok(Decoder {
        weight: Tensor::new(&[d, out], w)?,
        bias: Tensor::zeros(&[out]),
        config,
    })
}

impl<T: Scalar> Decoder<T> {
    pub fn into_params(self) -> Vec<(String, Tensor<T>)> {
        alloc::vec![
            (String::from("decoder.weight"), self.weight),
            (String::from("decoder.bias"), self.bias),
        ]
    }

    /// `[N, patches, dim]` tokens to `[N, c, h, w]` images in `[0, 1]`.
    pub fn forward(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let x = tape.constant(tokens.clone());
        let out = unembed(&self.config, x, w, b)?;
        Ok((*out.value()).clone())
    }
}

pub(crate) fn decode_graph<'t, T: Scalar>(
    config: &ModelConfig,
    p: &BoundParams<'t, T>,
    tokens: Var<'t, T>,
) -> Result<Var<'t, T>> {
    unembed(config, tokens, p.get("decoder.weight")?, p.get("decoder.bias")?)
}

fn unembed<'t, T: Scalar>(
    config: &ModelConfig,
    tokens: Var<'t, T>,
    w: Var<'t, T>,
    b: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let s = tokens.shape();
    let ps = config.vit.patch_size;
    let (c, h, wd) = (config.input.channels, config.input.height, config.input.width);
    let (hp, wp) = (h / ps, wd / ps);
    if s.len() != 3 || s[1] != hp * wp || s[2] != config.vit.embed_dim {
        return Err(Error::Dimension {
            op: "decoder",
            lhs: s,
            rhs: alloc::vec![0, hp * wp, config.vit.embed_dim],
        });
    }
    let n = s[0];
    tokens
        .matmul(&w)?
        .add_broadcast(&b)?
        .sigmoid()?
        .reshape(&[n, hp, wp, c, ps, ps])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .reshape(&[n, c, h, wd])
}
