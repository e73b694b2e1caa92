//! Run configuration: one JSON document drives every subcommand.

use std::path::{Path, PathBuf};

use ilens_core::data::{CorruptionKind, ShapeKind};
use ilens_core::invert::InversionConfig;
use ilens_core::metrics::Protocol;
use ilens_core::train::{LossKind, TrainConfig};
use ilens_core::zoo::{HeadKind, InputShape, ModelConfig, ModelKind, TokenPooling, VitConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable overriding [`RunConfig::seed`].
pub const SEED_ENV: &str = "ILENS_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub image: InputShape,
    pub source: DataSource,
    #[serde(default)]
    pub corruptions: CorruptionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Procedural shapes; the two class lists must be disjoint.
    Shapes {
        pretrain_classes: Vec<ShapeKind>,
        finetune_classes: Vec<ShapeKind>,
        n_train: usize,
        n_test: usize,
    },
    Idx { pretrain: IdxTask, finetune: IdxTask },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxTask {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default)]
    pub num_classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    /// Test inputs per cell; `None` takes `min(1000, test set size)`.
    pub n_per_cell: Option<usize>,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            kinds: CorruptionKind::ALL.to_vec(),
            severities: vec![1, 2, 3, 4, 5],
            n_per_cell: None,
        }
    }
}

/// Encoder architecture; input shape and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub vit: VitConfig,
    pub mlp_widths: Vec<usize>,
    pub pooling: TokenPooling,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::TinyVit,
            vit: VitConfig::default(),
            mlp_widths: vec![64, 64],
            pooling: TokenPooling::Flatten,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, input: InputShape, num_classes: usize, head: HeadKind) -> ModelConfig {
        ModelConfig {
            kind: self.kind,
            input,
            mlp_widths: self.mlp_widths.clone(),
            vit: self.vit,
            num_classes,
            head,
            pooling: self.pooling,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Reconstruction,
}

impl Task {
    pub fn head(self) -> HeadKind {
        match self {
            Task::Classification => HeadKind::Classification,
            Task::Reconstruction => HeadKind::Reconstruction,
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            Task::Classification => LossKind::CrossEntropy,
            Task::Reconstruction => LossKind::L1Reconstruction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitFrom {
    Pretrained,
    Scratch,
}

/// Finetuning stage. The loss always follows `task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    pub task: Task,
    pub init: InitFrom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSplit {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// 1-based layers; `None` means all.
    pub layers: Option<Vec<usize>>,
    pub n: usize,
    pub k: usize,
    pub inversion: InversionConfig,
    /// Finetuning-task split the samples are drawn from.
    pub pool: PoolSplit,
    /// Also write every `STIR(ft^j | pt^i)` score.
    pub dump_stir: bool,
    /// Write PNG grids of inverted images.
    pub dump_inversions: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        let p = Protocol::default();
        Self {
            layers: None,
            n: p.n,
            k: p.k,
            inversion: p.inversion,
            pool: PoolSplit::Test,
            dump_stir: false,
            dump_inversions: false,
        }
    }
}

impl MetricsConfig {
    pub fn protocol(&self) -> Protocol {
        Protocol {
            n: self.n,
            k: self.k,
            inversion: self.inversion.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSeries {
    /// Mean accuracy over every corruption cell.
    MeanCorrupted,
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub grid: bool,
    pub cka_grid: bool,
    pub alpha: f64,
    pub targets: Vec<TargetSeries>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            grid: true,
            cka_grid: true,
            alpha: 0.05,
            targets: vec![TargetSeries::MeanCorrupted],
        }
    }
}

fn schema(path: &str, message: impl Into<String>) -> CliError {
    CliError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            schema(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, applies the seed override from the environment, and validates.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| schema(SEED_ENV, format!("not an unsigned integer: {v:?}")))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let core = |path: &str, r: ilens_core::Result<()>| r.map_err(|e| schema(path, e.to_string()));
        core("pretrain", self.pretrain.validate())?;
        core("finetune.train", self.finetune.train.validate())?;
        if self.pretrain.loss != LossKind::CrossEntropy {
            return Err(schema("pretrain.loss", "pretraining is classification, loss must be cross_entropy"));
        }
        core("metrics", self.metrics.protocol().validate())?;
        if let Some(layers) = &self.metrics.layers {
            if layers.is_empty() || layers.contains(&0) {
                return Err(schema("metrics.layers", "layers are 1-based and must be non-empty"));
            }
        }
        let img = self.data.image;
        if img.channels == 0 || img.height == 0 || img.width == 0 {
            return Err(schema("data.image", "image dimensions must be positive"));
        }
        if let DataSource::Shapes {
            pretrain_classes,
            finetune_classes,
            n_train,
            n_test,
        } = &self.data.source
        {
            if pretrain_classes.len() < 2 || finetune_classes.len() < 2 {
                return Err(schema("data.source", "each task needs at least 2 classes"));
            }
            if pretrain_classes.iter().any(|k| finetune_classes.contains(k)) {
                return Err(schema("data.source", "pretrain and finetune classes must be disjoint"));
            }
            if *n_train < pretrain_classes.len().max(finetune_classes.len()) || *n_test < 4 {
                return Err(schema("data.source", "too few samples"));
            }
        }
        let c = &self.data.corruptions;
        if c.kinds.is_empty() || c.severities.is_empty() {
            return Err(schema("data.corruptions", "need at least one kind and one severity"));
        }
        if let Some(&s) = c.severities.iter().find(|s| !(1..=5).contains(*s)) {
            return Err(schema("data.corruptions.severities", format!("severity {s} not in 1..=5")));
        }
        if c.n_per_cell == Some(0) {
            return Err(schema("data.corruptions.n_per_cell", "must be positive"));
        }
        if !(self.analysis.alpha > 0.0 && self.analysis.alpha < 1.0) {
            return Err(schema("analysis.alpha", "must be in (0, 1)"));
        }
        Ok(())
    }

    /// Finetuning configuration with the loss the task requires.
    pub fn finetune_train(&self) -> TrainConfig {
        TrainConfig {
            loss: self.finetune.task.loss(),
            seed: self.seed,
            ..self.finetune.train.clone()
        }
    }

    pub fn pretrain_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}
