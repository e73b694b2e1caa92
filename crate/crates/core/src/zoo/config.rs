use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum ModelKind {
    Mlp,
    TinyVit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum HeadKind {
    /// Linear classifier on the class token (or last hidden layer for MLPs).
    Classification,
    /// Per-patch un-embedding decoder producing an image in `[0, 1]`.
    Reconstruction,
}

/// How token-level representations become one row per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum TokenPooling {
    /// Concatenate every token, class token included.
    #[default]
    Flatten,
    /// Average over tokens.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn batch_shape(&self, n: usize) -> [usize; 4] {
        [n, self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct VitConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 32,
            num_heads: 4,
            depth: 4,
            mlp_ratio: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input: InputShape,
    #[cfg_attr(feature = "serde", serde(default))]
    pub mlp_widths: Vec<usize>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub vit: VitConfig,
    pub num_classes: usize,
    pub head: HeadKind,
    #[cfg_attr(feature = "serde", serde(default))]
    pub pooling: TokenPooling,
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `1/sqrt(fan_in)`.
    ScaledNormal { fan_in: usize },
    /// Normal with a fixed std (class token, position embedding).
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// Name, shape and initializer of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        init: Init::ScaledNormal { fan_in },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![fan_out],
        init: Init::Zeros,
    });
}

fn norm(out: &mut Vec<ParamSpec>, prefix: &str, dim: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![dim],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![dim],
        init: Init::Zeros,
    });
}

impl ModelConfig {
    /// Desk-scale tiny ViT: patch 4, width 32, 4 heads.
    pub fn tiny_vit(input: InputShape, depth: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::TinyVit,
            input,
            mlp_widths: Vec::new(),
            vit: VitConfig {
                depth,
                ..VitConfig::default()
            },
            num_classes,
            head: HeadKind::Classification,
            pooling: TokenPooling::Flatten,
        }
    }

    pub fn mlp(input: InputShape, widths: &[usize], num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input,
            mlp_widths: widths.to_vec(),
            vit: VitConfig::default(),
            num_classes,
            head: HeadKind::Classification,
            pooling: TokenPooling::Flatten,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let i = &self.input;
        if i.channels == 0 || i.height == 0 || i.width == 0 {
            return Err(Error::Config(format!("empty input shape {i:?}")));
        }
        match self.kind {
            ModelKind::Mlp => {
                if self.mlp_widths.is_empty() || self.mlp_widths.contains(&0) {
                    return Err(Error::Config(String::from(
                        "mlp needs at least one non-zero hidden width",
                    )));
                }
                if self.head == HeadKind::Reconstruction {
                    return Err(Error::Unsupported(String::from(
                        "reconstruction head requires a tiny_vit encoder",
                    )));
                }
            }
            ModelKind::TinyVit => {
                let v = &self.vit;
                if v.patch_size == 0 || i.height % v.patch_size != 0 || i.width % v.patch_size != 0 {
                    return Err(Error::Config(format!(
                        "input {}x{} is not divisible by patch size {}",
                        i.height, i.width, v.patch_size
                    )));
                }
                if v.num_heads == 0 || v.embed_dim == 0 || v.embed_dim % v.num_heads != 0 {
                    return Err(Error::Config(format!(
                        "embed_dim {} is not divisible by num_heads {}",
                        v.embed_dim, v.num_heads
                    )));
                }
                if v.depth == 0 || v.mlp_ratio == 0 {
                    return Err(Error::Config(String::from("depth and mlp_ratio must be >= 1")));
                }
            }
        }
        if self.head == HeadKind::Classification && self.num_classes < 2 {
            return Err(Error::Config(format!(
                "classification needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Number of tapped layers `L`.
    pub fn layer_count(&self) -> usize {
        match self.kind {
            ModelKind::Mlp => self.mlp_widths.len(),
            ModelKind::TinyVit => self.vit.depth,
        }
    }

    pub fn num_patches(&self) -> usize {
        let p = self.vit.patch_size.max(1);
        (self.input.height / p) * (self.input.width / p)
    }

    /// Tokens per sample including the class token (ViT only).
    pub fn token_count(&self) -> usize {
        match self.kind {
            ModelKind::Mlp => 1,
            ModelKind::TinyVit => self.num_patches() + 1,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.input.channels * self.vit.patch_size * self.vit.patch_size
    }

    /// Encoder parameters in construction order; a pure function of the config.
    pub fn encoder_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        match self.kind {
            ModelKind::Mlp => {
                let mut fan_in = self.input.numel();
                for (i, &w) in self.mlp_widths.iter().enumerate() {
                    linear(&mut out, &format!("layers.{i}"), fan_in, w);
                    fan_in = w;
                }
            }
            ModelKind::TinyVit => {
                let d = self.vit.embed_dim;
                linear(&mut out, "patch_embed", self.patch_dim(), d);
                out.push(ParamSpec {
                    name: String::from("cls_token"),
                    shape: vec![d],
                    init: Init::Normal { std: 0.02 },
                });
                out.push(ParamSpec {
                    name: String::from("pos_embed"),
                    shape: vec![self.token_count(), d],
                    init: Init::Normal { std: 0.02 },
                });
                let hidden = d * self.vit.mlp_ratio;
                for b in 0..self.vit.depth {
                    let p = format!("blocks.{b}");
                    norm(&mut out, &format!("{p}.norm1"), d);
                    for name in ["q", "k", "v", "proj"] {
                        linear(&mut out, &format!("{p}.attn.{name}"), d, d);
                    }
                    norm(&mut out, &format!("{p}.norm2"), d);
                    linear(&mut out, &format!("{p}.mlp.fc1"), d, hidden);
                    linear(&mut out, &format!("{p}.mlp.fc2"), hidden, d);
                }
                norm(&mut out, "norm", d);
            }
        }
        out
    }

    /// Head parameters in construction order.
    pub fn head_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        match (self.kind, self.head) {
            (ModelKind::Mlp, _) => {
                let w = *self.mlp_widths.last().unwrap_or(&0);
                linear(&mut out, "head", w, self.num_classes);
            }
            (ModelKind::TinyVit, HeadKind::Classification) => {
                linear(&mut out, "head", self.vit.embed_dim, self.num_classes);
            }
            (ModelKind::TinyVit, HeadKind::Reconstruction) => {
                linear(&mut out, "decoder", self.vit.embed_dim, self.patch_dim());
            }
        }
        out
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut all = self.encoder_specs();
        all.extend(self.head_specs());
        all
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}
