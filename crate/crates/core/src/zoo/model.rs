use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::config::{HeadKind, Init, ModelConfig, ModelKind, ParamSpec, TokenPooling};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// One row per sample of a layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation<T> {
    /// Internal 0-based layer index.
    pub layer: usize,
    /// `n_samples × d`.
    pub matrix: Tensor<T>,
}

/// Result of [`Model::forward_with_taps`].
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub taps: BTreeMap<usize, Representation<T>>,
    /// Logits `[n, C]` or reconstructed images `[n, c, h, w]`.
    pub head: Tensor<T>,
}

/// Graph-level forward output.
pub struct GraphForward<'t, T: Scalar> {
    /// Requested taps as raw block outputs (`[n, tokens, dim]` or `[n, width]`).
    pub taps: Vec<(usize, Var<'t, T>)>,
    pub head: Option<Var<'t, T>>,
}

/// Model parameters recorded as leaves on a tape.
pub struct BoundParams<'t, T: Scalar> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    /// Substitute one bound parameter, e.g. to differentiate with respect to it.
    pub fn replace(&mut self, name: &str, var: Var<'t, T>) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = var;
                Ok(())
            }
            None => Err(Error::Argument(format!("unknown parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Layered network with representation taps after every block.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<(String, Tensor<T>)>,
}

fn init_tensor<T: Scalar>(spec: &ParamSpec, rng: &mut Rng) -> Tensor<T> {
    let n: usize = spec.shape.iter().product();
    let data = match spec.init {
        Init::Zeros => alloc::vec![T::zero(); n],
        Init::Ones => alloc::vec![T::one(); n],
        Init::ScaledNormal { fan_in } => {
            let std = 1.0 / libm::sqrt(fan_in as f64);
            (0..n).map(|_| T::from_f64_lossy(rng.normal() * std)).collect()
        }
        Init::Normal { std } => (0..n).map(|_| T::from_f64_lossy(rng.normal() * std)).collect(),
    };
    Tensor::new(&spec.shape, data).expect("spec shape")
}

impl<T: Scalar> Model<T> {
    /// Fresh model; deterministic in `(config, rng)`.
    pub fn build(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_specs()
            .iter()
            .map(|s| (s.name.clone(), init_tensor(s, rng)))
            .collect();
        Ok(Self { config, params })
    }

    /// Assemble from stored tensors; names and shapes must match the config.
    pub fn from_params(config: ModelConfig, mut stored: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for spec in config.param_specs() {
            let t = stored
                .remove(&spec.name)
                .ok_or_else(|| Error::Consistency(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Dimension {
                    op: "from_params",
                    lhs: spec.shape,
                    rhs: t.shape().to_vec(),
                });
            }
            params.push((spec.name, t));
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Consistency(format!("unexpected parameter {extra}")));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer_count(&self) -> usize {
        self.config.layer_count()
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Parameter tensors in declaration order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Same encoder with a freshly initialized head.
    pub fn reheaded(&self, head: HeadKind, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        let mut config = self.config.clone();
        config.head = head;
        config.num_classes = num_classes;
        config.validate()?;
        let encoder: Vec<String> = config.encoder_specs().into_iter().map(|s| s.name).collect();
        let mut params: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .filter(|(n, _)| encoder.contains(n))
            .cloned()
            .collect();
        let head_specs = match head {
            HeadKind::Reconstruction => super::decoder::build_decoder::<T>(&config, rng)?.into_params(),
            HeadKind::Classification => config
                .head_specs()
                .iter()
                .map(|s| (s.name.clone(), init_tensor(s, rng)))
                .collect(),
        };
        params.extend(head_specs);
        Ok(Self { config, params })
    }

    /// Record parameters on `tape`; `trainable` decides whether they receive gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundParams<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    fn check_input(&self, input: &[usize]) -> Result<()> {
        let i = &self.config.input;
        if input.len() != 4 || input[1..] != [i.channels, i.height, i.width] {
            return Err(Error::Dimension {
                op: "model_input",
                lhs: input.to_vec(),
                rhs: alloc::vec![0, i.channels, i.height, i.width],
            });
        }
        Ok(())
    }

    fn check_layers(&self, layers: &[usize]) -> Result<()> {
        let l = self.layer_count();
        match layers.iter().find(|&&i| i >= l) {
            Some(&bad) => Err(Error::Index { index: bad, len: l }),
            None => Ok(()),
        }
    }

    /// Forward pass on a tape. Stops after the deepest requested tap when
    /// `with_head` is false.
    pub fn forward_graph<'t>(
        &self,
        p: &BoundParams<'t, T>,
        input: Var<'t, T>,
        taps: &[usize],
        with_head: bool,
    ) -> Result<GraphForward<'t, T>> {
        self.check_input(&input.shape())?;
        self.check_layers(taps)?;
        let last = if with_head {
            self.layer_count()
        } else {
            taps.iter().map(|&i| i + 1).max().unwrap_or(0)
        };
        match self.config.kind {
            ModelKind::Mlp => self.forward_mlp(p, input, taps, last, with_head),
            ModelKind::TinyVit => self.forward_vit(p, input, taps, last, with_head),
        }
    }

    fn linear<'t>(&self, p: &BoundParams<'t, T>, x: Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
        let w = p.get(&format!("{prefix}.weight"))?;
        let b = p.get(&format!("{prefix}.bias"))?;
        x.matmul(&w)?.add_broadcast(&b)
    }

    fn layer_norm<'t>(&self, p: &BoundParams<'t, T>, x: Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
        let g = p.get(&format!("{prefix}.weight"))?;
        let b = p.get(&format!("{prefix}.bias"))?;
        x.layernorm_last(T::from_f64_lossy(LN_EPS))?
            .mul_broadcast(&g)?
            .add_broadcast(&b)
    }

    fn forward_mlp<'t>(
        &self,
        p: &BoundParams<'t, T>,
        input: Var<'t, T>,
        taps: &[usize],
        last: usize,
        with_head: bool,
    ) -> Result<GraphForward<'t, T>> {
        let n = input.shape()[0];
        let mut x = input.reshape(&[n, self.config.input.numel()])?;
        let mut out = Vec::new();
        for i in 0..last {
            x = self.linear(p, x, &format!("layers.{i}"))?.relu()?;
            if taps.contains(&i) {
                out.push((i, x));
            }
        }
        let head = if with_head {
            Some(self.linear(p, x, "head")?)
        } else {
            None
        };
        Ok(GraphForward { taps: out, head })
    }

    /// Patch embedding plus class token and position embedding.
    fn embed<'t>(&self, p: &BoundParams<'t, T>, input: Var<'t, T>) -> Result<Var<'t, T>> {
        let c = &self.config;
        let n = input.shape()[0];
        let ps = c.vit.patch_size;
        let (hp, wp) = (c.input.height / ps, c.input.width / ps);
        let patches = input
            .reshape(&[n, c.input.channels, hp, ps, wp, ps])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[n, hp * wp, c.patch_dim()])?;
        let tokens = self.linear(p, patches, "patch_embed")?;
        tokens
            .prepend_token(&p.get("cls_token")?)?
            .add_broadcast(&p.get("pos_embed")?)
    }

    pub(crate) fn block<'t>(&self, p: &BoundParams<'t, T>, x: Var<'t, T>, b: usize) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let heads = self.config.vit.num_heads;
        let dh = d / heads;
        let pre = format!("blocks.{b}");

        let h = self.layer_norm(p, x, &format!("{pre}.norm1"))?;
        let split = |name: &str| -> Result<Var<'t, T>> {
            self.linear(p, h, &format!("{pre}.attn.{name}"))?
                .reshape(&[n, t, heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[n * heads, t, dh])
        };
        let (q, k, v) = (split("q")?, split("k")?, split("v")?);
        let scale = T::from_f64_lossy(1.0 / libm::sqrt(dh as f64));
        let att = q.bmm_nt(&k)?.scale(scale)?.softmax_last()?;
        let mixed = att
            .bmm(&v)?
            .reshape(&[n, heads, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, t, d])?;
        let x = x.add(&self.linear(p, mixed, &format!("{pre}.attn.proj"))?)?;

        let h = self.layer_norm(p, x, &format!("{pre}.norm2"))?;
        let h = self.linear(p, h, &format!("{pre}.mlp.fc1"))?.gelu()?;
        let h = self.linear(p, h, &format!("{pre}.mlp.fc2"))?;
        x.add(&h)
    }

    fn forward_vit<'t>(
        &self,
        p: &BoundParams<'t, T>,
        input: Var<'t, T>,
        taps: &[usize],
        last: usize,
        with_head: bool,
    ) -> Result<GraphForward<'t, T>> {
        let mut x = self.embed(p, input)?;
        let mut out = Vec::new();
        for b in 0..last {
            x = self.block(p, x, b)?;
            if taps.contains(&b) {
                out.push((b, x));
            }
        }
        let head = if with_head {
            let h = self.layer_norm(p, x, "norm")?;
            Some(match self.config.head {
                HeadKind::Classification => self.linear(p, h.select_token(0)?, "head")?,
                HeadKind::Reconstruction => {
                    super::decoder::decode_graph(&self.config, p, h.slice_tokens(1)?)?
                }
            })
        } else {
            None
        };
        Ok(GraphForward { taps: out, head })
    }

    /// Flatten (or pool) a raw tap to one row per sample.
    pub fn pool_tap<'t>(&self, tap: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = tap.shape();
        match (s.len(), self.config.pooling) {
            (2, _) => Ok(tap),
            (3, TokenPooling::Flatten) => tap.reshape(&[s[0], s[1] * s[2]]),
            (3, TokenPooling::Mean) => tap.permute(&[0, 2, 1])?.mean_last(),
            _ => Err(Error::Dimension {
                op: "pool_tap",
                lhs: s,
                rhs: Vec::new(),
            }),
        }
    }

    /// Representations at `layers` plus the head output for a batch.
    pub fn forward_with_taps(&self, batch: &Tensor<T>, layers: &[usize]) -> Result<Forward<T>> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let x = tape.constant(batch.clone());
        let g = self.forward_graph(&p, x, layers, true)?;
        let mut taps = BTreeMap::new();
        for (layer, v) in g.taps {
            let matrix = (*self.pool_tap(v)?.value()).clone();
            taps.insert(layer, Representation { layer, matrix });
        }
        let head = (*g.head.expect("head requested").value()).clone();
        Ok(Forward { taps, head })
    }

    /// Representations only; skips layers after the deepest request.
    pub fn representations(&self, batch: &Tensor<T>, layers: &[usize]) -> Result<BTreeMap<usize, Representation<T>>> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let x = tape.constant(batch.clone());
        let g = self.forward_graph(&p, x, layers, false)?;
        let mut taps = BTreeMap::new();
        for (layer, v) in g.taps {
            let matrix = (*self.pool_tap(v)?.value()).clone();
            taps.insert(layer, Representation { layer, matrix });
        }
        Ok(taps)
    }

    /// Head output in batches of `batch_size`.
    pub fn predict(&self, images: &Tensor<T>, batch_size: usize) -> Result<Tensor<T>> {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + batch_size.max(1)).min(n);
            let tape = Tape::new();
            let p = self.bind(&tape, false);
            let x = tape.constant(images.slice_rows(start, end)?);
            let g = self.forward_graph(&p, x, &[], true)?;
            parts.push((*g.head.expect("head requested").value()).clone());
            start = end;
        }
        if parts.is_empty() {
            return Err(Error::Argument("predict on an empty batch".to_string()));
        }
        Tensor::concat_rows(&parts)
    }
}

/// Index of the largest logit in each row.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape().last().copied().unwrap_or(1);
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
