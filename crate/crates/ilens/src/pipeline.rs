//! Subcommands. Every step reads and writes only under the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ilens_core::data::{gen_shapes_kinds, Dataset, Split};
use ilens_core::dynamics::{
    hypothesis_grid, prefix_correlation, robustness_curve, DynamicsTrace, GridMode, GridReport,
    HypothesisSpec, LayerSelection, MetricOp,
};
use ilens_core::metrics::{
    flow_matrix_from_sets, invert_sets, profile_from_sets, stir_on_sets, AggregateOp, FlowMatrix, InvertedSet,
    MetricProfile, Protocol, SharedSets, ROLE_FINETUNED, ROLE_PRETRAINED,
};
use ilens_core::numerics::Rng;
use ilens_core::train::{train, CheckpointManifest, EpochRecord};
use ilens_core::zoo::{HeadKind, Model};
use ilens_core::exec::Executor;

use crate::config::{DataSource, InitFrom, PoolSplit, RunConfig, TargetSeries, Task};
use crate::error::{CliError, CliResult};
use crate::exec::RayonExecutor;
use crate::files::{
    create_dir, fmt_float, load_checkpoint, read_dataset, read_idx_pair, read_json, relative, save_checkpoint,
    write_atomic, write_dataset, write_json, Table,
};
use crate::manifest::RunManifest;
use crate::plot::{heatmap, line_plot, Series};
use crate::report;

const STREAM_DATA: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_METRICS: u64 = 3;
const STREAM_ROBUSTNESS: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
    Scratch,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Scratch => "scratch",
        }
    }

    fn id(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Step {
    GenData,
    Train,
    Metrics,
    Flow,
    Dynamics,
    Correlate,
    Report,
    /// Every step above in order.
    All,
}

impl Step {
    pub const PIPELINE: [Step; 7] = [
        Step::GenData,
        Step::Train,
        Step::Metrics,
        Step::Flow,
        Step::Dynamics,
        Step::Correlate,
        Step::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::GenData => "gen-data",
            Step::Train => "train",
            Step::Metrics => "metrics",
            Step::Flow => "flow",
            Step::Dynamics => "dynamics",
            Step::Correlate => "correlate",
            Step::Report => "report",
            Step::All => "all",
        }
    }
}

/// Per-invocation options shared by the steps.
#[derive(Debug, Clone, Default)]
pub struct StepOptions {
    /// Training stage for `train`, or the target model's stage for analysis steps.
    pub stage: Option<Stage>,
    /// Explicit target checkpoint directory.
    pub ft: Option<PathBuf>,
    /// Explicit reference checkpoint directory; defaults to the target
    /// stage's epoch 0, the weights finetuning started from.
    pub pt: Option<PathBuf>,
}

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub protocol: Protocol,
    pub exec: RayonExecutor,
}

impl Context {
    /// `fast` swaps in the quick protocol constants; `jobs == 0` uses every core.
    pub fn new(config: RunConfig, jobs: usize, fast: bool) -> Self {
        let protocol = if fast { Protocol::fast() } else { config.metrics.protocol() };
        Self {
            out: config.output_dir.clone(),
            config,
            protocol,
            exec: RayonExecutor::new(jobs),
        }
    }

    fn root(&self) -> Rng {
        Rng::new(self.config.seed)
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join("checkpoints").join(stage.name())
    }

    fn write_text(&self, rel: &str, text: &str) -> CliResult<PathBuf> {
        let p = self.out.join(rel);
        write_atomic(&p, text.as_bytes())?;
        Ok(p)
    }

    /// Runs one step, then refreshes the run manifest.
    pub fn run(&self, step: Step, opts: &StepOptions) -> CliResult<()> {
        let steps: Vec<Step> = if step == Step::All { Step::PIPELINE.to_vec() } else { vec![step] };
        for s in steps {
            let start = Instant::now();
            match s {
                Step::GenData => self.gen_data()?,
                Step::Train => match opts.stage {
                    Some(stage) => {
                        self.train_stage(stage)?;
                    }
                    None => {
                        self.train_stage(Stage::Pretrain)?;
                        self.train_stage(Stage::Finetune)?;
                    }
                },
                Step::Metrics => {
                    self.metrics(opts)?;
                }
                Step::Flow => {
                    self.flow(opts)?;
                }
                Step::Dynamics => {
                    self.dynamics(opts)?;
                }
                Step::Correlate => {
                    self.correlate(opts)?;
                }
                Step::Report => report::write_report(&self.out)?,
                Step::All => unreachable!(),
            }
            let mut m = RunManifest::load_or_default(&self.out)?;
            m.timings.insert(s.name().into(), start.elapsed().as_secs_f64());
            m.finish(&self.out, &self.config.hash(), self.config.seed)?;
        }
        Ok(())
    }

    // ---- data ----

    pub fn gen_data(&self) -> CliResult<()> {
        let dir = self.data_dir();
        create_dir(&dir)?;
        let cfg = &self.config.data;
        let rng = self.root().fork(STREAM_DATA);
        let seed = self.config.seed;
        match &cfg.source {
            DataSource::Shapes {
                pretrain_classes,
                finetune_classes,
                n_train,
                n_test,
            } => {
                for (t, (task, kinds)) in [("pretrain", pretrain_classes), ("finetune", finetune_classes)]
                    .into_iter()
                    .enumerate()
                {
                    for (s, (split, n)) in [("train", *n_train), ("test", *n_test)].into_iter().enumerate() {
                        let mut r = rng.fork_path(&[t as u64, s as u64]);
                        let mut ds = gen_shapes_kinds(n, kinds, cfg.image, &mut r)?;
                        ds.split = if s == 0 { Split::Train } else { Split::Test };
                        write_dataset(&dir, &format!("{task}-{split}"), &ds, seed)?;
                    }
                }
            }
            DataSource::Idx { pretrain, finetune } => {
                for (task, paths) in [("pretrain", pretrain), ("finetune", finetune)] {
                    for (split, imgs, labs, kind) in [
                        ("train", &paths.train_images, &paths.train_labels, Split::Train),
                        ("test", &paths.test_images, &paths.test_labels, Split::Test),
                    ] {
                        let name = imgs.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        let ds = read_idx_pair(imgs, labs, paths.num_classes, &name, kind)?;
                        if ds.image_shape() != cfg.image {
                            return Err(CliError::Schema {
                                path: "data.image".into(),
                                message: format!("{} holds {:?} images", imgs.display(), ds.image_shape()),
                            });
                        }
                        write_dataset(&dir, &format!("{task}-{split}"), &ds, seed)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dataset(&self, task: &str, split: Split) -> CliResult<Dataset> {
        let s = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        read_dataset(&self.data_dir(), &format!("{task}-{s}"), split)
    }

    // ---- training ----

    fn initial_model(&self, stage: Stage, classes: usize) -> CliResult<Model<f32>> {
        let cfg = &self.config;
        let init = self.root().fork(STREAM_INIT);
        let input = cfg.data.image;
        match stage {
            Stage::Pretrain => {
                let mc = cfg.model.model_config(input, classes, HeadKind::Classification);
                Ok(Model::build(mc, &mut init.fork(stage.id()))?)
            }
            Stage::Finetune | Stage::Scratch => {
                let from_pretrained = stage == Stage::Finetune && cfg.finetune.init == InitFrom::Pretrained;
                let encoder = if from_pretrained {
                    self.load_stage(Stage::Pretrain, None)?.0
                } else {
                    let mc = cfg.model.model_config(input, classes, HeadKind::Classification);
                    Model::build(mc, &mut init.fork(Stage::Scratch.id()))?
                };
                let task = cfg.finetune.task;
                let head_classes = if task == Task::Reconstruction { 0 } else { classes };
                Ok(encoder.reheaded(task.head(), head_classes, &mut init.fork(Stage::Finetune.id()).fork(1))?)
            }
        }
    }

    pub fn train_stage(&self, stage: Stage) -> CliResult<Vec<EpochRecord>> {
        let task = if stage == Stage::Pretrain { "pretrain" } else { "finetune" };
        let train_ds = self.dataset(task, Split::Train)?;
        let test_ds = self.dataset(task, Split::Test)?;
        let tc = if stage == Stage::Pretrain {
            self.config.pretrain_train()
        } else {
            self.config.finetune_train()
        };
        let model = self.initial_model(stage, train_ds.num_classes)?;
        let dir = self.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        let start_rng = Rng::new(tc.seed).fork(0);
        save_checkpoint(
            &dir.join(epoch_dir(0)),
            &model,
            &CheckpointManifest::for_model(&model, 0, start_rng.state()),
        )?;
        let out = &self.out;
        let mut failure = None;
        let trained = train(model, &train_ds, &test_ds, &tc, |snap| {
            let d = dir.join(epoch_dir(snap.record.epoch));
            let manifest = CheckpointManifest::for_model(snap.model, snap.record.epoch, snap.rng_state.clone());
            match save_checkpoint(&d, snap.model, &manifest) {
                Ok(()) => Ok(Some(relative(out, &d))),
                Err(e) => {
                    failure = Some(e);
                    Err(ilens_core::Error::Contract("checkpoint write failed".into()))
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let (_, records) = trained?;
        let mut t = Table::new(&["epoch", "train_loss", "test_metric", "checkpoint_path"]);
        for r in &records {
            t.row(&[
                r.epoch.to_string(),
                fmt_float(r.train_loss),
                fmt_float(r.test_metric),
                r.checkpoint_path.clone().unwrap_or_default(),
            ]);
        }
        t.write(&dir.join("epochs.csv"))?;
        Ok(records)
    }

    /// Epochs with a checkpoint on disk, ascending.
    pub fn stage_epochs(&self, stage: Stage) -> CliResult<Vec<usize>> {
        let dir = self.stage_dir(stage);
        let entries = std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
        let mut epochs: Vec<usize> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_prefix("epoch-")?.parse().ok())
            .collect();
        epochs.sort_unstable();
        if epochs.is_empty() {
            return Err(CliError::Missing {
                path: dir,
                message: "no checkpoints".into(),
            });
        }
        Ok(epochs)
    }

    /// A stage's checkpoint, the last one unless `epoch` is given.
    pub fn load_stage(&self, stage: Stage, epoch: Option<usize>) -> CliResult<(Model<f32>, CheckpointManifest)> {
        let e = match epoch {
            Some(e) => e,
            None => *self.stage_epochs(stage)?.last().expect("non-empty"),
        };
        load_checkpoint(&self.stage_dir(stage).join(epoch_dir(e)))
    }

    // ---- metrics ----

    fn target_stage(opts: &StepOptions) -> Stage {
        opts.stage.unwrap_or(Stage::Finetune)
    }

    fn pair(&self, opts: &StepOptions) -> CliResult<(Model<f32>, Model<f32>, String, String)> {
        let stage = Self::target_stage(opts);
        let (ft, ft_name) = match &opts.ft {
            Some(d) => (load_checkpoint(d)?.0, relative(&self.out, d)),
            None => {
                let e = *self.stage_epochs(stage)?.last().expect("non-empty");
                (self.load_stage(stage, Some(e))?.0, relative(&self.out, &self.stage_dir(stage).join(epoch_dir(e))))
            }
        };
        let (pt, pt_name) = match &opts.pt {
            Some(d) => (load_checkpoint(d)?.0, relative(&self.out, d)),
            None => (
                self.load_stage(stage, Some(0))?.0,
                relative(&self.out, &self.stage_dir(stage).join(epoch_dir(0))),
            ),
        };
        Ok((ft, pt, ft_name, pt_name))
    }

    fn layers(&self, model: &Model<f32>) -> CliResult<Vec<usize>> {
        let total = model.layer_count();
        match &self.config.metrics.layers {
            None => Ok((0..total).collect()),
            Some(ls) => {
                if let Some(&bad) = ls.iter().find(|&&l| l > total) {
                    return Err(CliError::Schema {
                        path: "metrics.layers".into(),
                        message: format!("layer {bad} exceeds the {total} layers of the model"),
                    });
                }
                let mut v: Vec<usize> = ls.iter().map(|l| l - 1).collect();
                v.sort_unstable();
                v.dedup();
                Ok(v)
            }
        }
    }

    /// Samples for the metrics come from the task the target stage trained on.
    fn pool(&self, stage: Stage) -> CliResult<Dataset> {
        let task = if stage == Stage::Pretrain { "pretrain" } else { "finetune" };
        match self.config.metrics.pool {
            PoolSplit::Train => self.dataset(task, Split::Train),
            PoolSplit::Test => self.dataset(task, Split::Test),
        }
    }

    fn metrics_rng(&self) -> Rng {
        self.root().fork(STREAM_METRICS)
    }

    pub fn metrics(&self, opts: &StepOptions) -> CliResult<MetricProfile> {
        let (ft, pt, ft_name, pt_name) = self.pair(opts)?;
        let layers = self.layers(&ft)?;
        let pool = self.pool(Self::target_stage(opts))?;
        let rng = self.metrics_rng();
        let sets = SharedSets::build(&ft, &pt, &layers, &pool, &self.protocol, &rng, &self.exec)?;
        let mut profile = profile_from_sets(&ft, &pt, &layers, &pool, &self.protocol, &rng, &sets, &self.exec)?;
        profile.context.ft_checkpoint = ft_name;
        profile.context.pt_checkpoint = pt_name;
        check_profile(&profile)?;

        let dir = format!("metrics/{}", Self::target_stage(opts).name());
        self.write_text(&format!("{dir}/profile.csv"), &profile_csv(&profile))?;
        write_json(&self.out.join(&dir).join("profile.json"), &profile)?;
        self.write_text(&format!("{dir}/profile.svg"), &profile_svg(&profile))?;
        if self.config.metrics.dump_stir {
            let mut t = Table::new(&["pt_layer", "ft_layer", "stir_mean", "stir_std"]);
            let l = layers.len();
            let scores = self.exec.map(l * l, |job| stir_on_sets(&ft, layers[job % l], &sets.pretrained[&layers[job / l]]));
            for (job, s) in scores.into_iter().enumerate() {
                let s = s?;
                t.row(&[
                    (layers[job / l] + 1).to_string(),
                    (layers[job % l] + 1).to_string(),
                    fmt_float(s.mean),
                    fmt_float(s.std),
                ]);
            }
            t.write(&self.out.join(&dir).join("stir_pairs.csv"))?;
        }
        if self.config.metrics.dump_inversions {
            for (role, map) in [("pt", &sets.pretrained), ("ft", &sets.finetuned)] {
                for (layer, group) in map {
                    let path = self.out.join(&dir).join("inversions").join(format!("{role}-layer{}.png", layer + 1));
                    write_inversion_grid(&path, &group[0])?;
                }
            }
        }
        Ok(profile)
    }

    pub fn flow(&self, opts: &StepOptions) -> CliResult<FlowMatrix> {
        let (ft, pt, _, _) = self.pair(opts)?;
        let layers = self.layers(&ft)?;
        let pool = self.pool(Self::target_stage(opts))?;
        let rng = self.metrics_rng().fork(ROLE_PRETRAINED);
        let sets = invert_sets(&pt, &layers, &pool, &self.protocol, &rng, &self.exec)?;
        let flow = flow_matrix_from_sets(&ft, &layers, &sets, &self.exec)?;
        if flow.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CliError::NonFinite("flow matrix entry".into()));
        }
        let dir = format!("flow/{}", Self::target_stage(opts).name());
        let labels: Vec<String> = layers.iter().map(|l| (l + 1).to_string()).collect();
        let mut header = vec![String::from("pt\\ft")];
        header.extend(labels.iter().cloned());
        let mut t = Table::new(&header);
        for (a, row) in flow.values.iter().enumerate() {
            let mut cells = vec![labels[a].clone()];
            cells.extend(row.iter().map(|&v| fmt_float(v)));
            t.row(&cells);
        }
        t.write(&self.out.join(&dir).join("flow.csv"))?;
        write_json(&self.out.join(&dir).join("flow.json"), &flow)?;
        let svg = heatmap(
            "Invariance flow, pretrained layer to finetuned layer",
            "pretrained layer",
            "finetuned layer",
            &labels,
            &flow.values,
        );
        self.write_text(&format!("{dir}/flow.svg"), &svg)?;
        Ok(flow)
    }

    // ---- dynamics ----

    pub fn dynamics(&self, opts: &StepOptions) -> CliResult<DynamicsTrace> {
        let stage = Self::target_stage(opts);
        if stage == Stage::Pretrain {
            return Err(CliError::Other("dynamics needs a finetune or scratch stage".into()));
        }
        let epochs = self.stage_epochs(stage)?;
        let (pt, _) = match &opts.pt {
            Some(d) => load_checkpoint(d)?,
            None => self.load_stage(stage, Some(0))?,
        };
        let pool = self.pool(Self::target_stage(opts))?;
        let test_ds = self.dataset("finetune", Split::Test)?;
        let c = &self.config.data.corruptions;
        let n_cell = c.n_per_cell.unwrap_or(1000).min(test_ds.len());
        let curve = robustness_curve(
            |e| Ok(self.load_stage(stage, Some(e)).map_err(|err| ilens_core::Error::Load { epoch: e, message: err.to_string() })?.0),
            &epochs,
            &test_ds,
            &c.kinds,
            &c.severities,
            n_cell,
            &self.root().fork(STREAM_ROBUSTNESS),
        )?;

        let layers = self.layers(&pt)?;
        let rng = self.metrics_rng();
        let mut shared = SharedSets {
            pretrained: invert_sets(&pt, &layers, &pool, &self.protocol, &rng.fork(ROLE_PRETRAINED), &self.exec)?,
            finetuned: BTreeMap::new(),
        };
        let mut profiles = Vec::with_capacity(epochs.len());
        for &e in &epochs {
            let (ft, _) = self.load_stage(stage, Some(e))?;
            shared.finetuned = invert_sets(&ft, &layers, &pool, &self.protocol, &rng.fork(ROLE_FINETUNED), &self.exec)?;
            let mut p = profile_from_sets(&ft, &pt, &layers, &pool, &self.protocol, &rng, &shared, &self.exec)?;
            p.context.ft_checkpoint = relative(&self.out, &self.stage_dir(stage).join(epoch_dir(e)));
            check_profile(&p)?;
            profiles.push(p);
        }
        let trace = DynamicsTrace::new(profiles, &curve)?;
        self.write_trace(&format!("dynamics/{}", stage.name()), &trace)?;
        Ok(trace)
    }

    fn write_trace(&self, dir: &str, trace: &DynamicsTrace) -> CliResult<()> {
        let base = self.out.join(dir);
        write_json(&base.join("trace.json"), trace)?;
        let layers = &trace.profiles[0].layers;
        let mut header = vec![String::from("epoch")];
        header.extend(layers.iter().map(|l| format!("layer{}", l + 1)));
        let series: [(&str, fn(&MetricProfile) -> &Vec<f64>); 3] = [
            ("forgetting", |p| &p.forgetting),
            ("learning", |p| &p.learning),
            ("cka_divergence", |p| &p.cka_divergence),
        ];
        for (name, get) in series {
            let mut t = Table::new(&header);
            let mut lines: Vec<Series> = layers
                .iter()
                .map(|l| Series {
                    name: format!("layer {}", l + 1),
                    points: Vec::new(),
                })
                .collect();
            for (e, p) in trace.epochs.iter().zip(&trace.profiles) {
                let mut row = vec![e.to_string()];
                row.extend(get(p).iter().map(|&v| fmt_float(v)));
                t.row(&row);
                for (s, &v) in lines.iter_mut().zip(get(p)) {
                    s.points.push((*e as f64, v));
                }
            }
            t.write(&base.join(format!("{name}.csv")))?;
            let svg = line_plot(&format!("{name} during finetuning"), "epoch", name, &lines);
            write_atomic(&base.join(format!("{name}.svg")), svg.as_bytes())?;
        }
        let cells: Vec<&String> = trace.corrupted_acc.first().map(|m| m.keys().collect()).unwrap_or_default();
        let mut header = vec![String::from("epoch"), "clean".into(), "mean_corrupted".into()];
        header.extend(cells.iter().map(|s| s.to_string()));
        let mut t = Table::new(&header);
        let target = trace.target();
        for (k, e) in trace.epochs.iter().enumerate() {
            let mut row = vec![e.to_string(), fmt_float(trace.clean_acc[k]), fmt_float(target[k])];
            row.extend(cells.iter().map(|c| fmt_float(trace.corrupted_acc[k][*c])));
            t.row(&row);
        }
        t.write(&base.join("accuracy.csv"))?;
        let pts = |v: &[f64]| trace.epochs.iter().zip(v).map(|(&e, &a)| (e as f64, a)).collect();
        let svg = line_plot(
            "Accuracy during finetuning",
            "epoch",
            "accuracy",
            &[
                Series {
                    name: "clean".into(),
                    points: pts(&trace.clean_acc),
                },
                Series {
                    name: "mean corrupted".into(),
                    points: pts(&target),
                },
            ],
        );
        write_atomic(&base.join("accuracy.svg"), svg.as_bytes())
    }

    // ---- correlation ----

    pub fn correlate(&self, opts: &StepOptions) -> CliResult<Vec<(TargetSeries, GridReport)>> {
        let stage = Self::target_stage(opts);
        let trace: DynamicsTrace = read_json(&self.out.join("dynamics").join(stage.name()).join("trace.json"))?;
        let dir = self.out.join("correlate").join(stage.name());
        let a = &self.config.analysis;
        let mut modes = Vec::new();
        if a.grid {
            modes.push(GridMode::LearningForgetting);
        }
        if a.cka_grid {
            modes.push(GridMode::CkaDivergence);
        }
        let mut out = Vec::new();
        for &target_kind in &a.targets {
            let target = match target_kind {
                TargetSeries::MeanCorrupted => trace.target(),
                TargetSeries::Clean => trace.clean_acc.clone(),
            };
            let tname = target_name(target_kind);
            for &mode in &modes {
                let g = hypothesis_grid(&trace, &target, mode, a.alpha)?;
                let stem = format!("grid_{}_{tname}", mode_name(mode));
                grid_csv(&g).write(&dir.join(format!("{stem}.csv")))?;
                write_json(&dir.join(format!("{stem}.json")), &g)?;
                out.push((target_kind, g));
            }
            self.forgetting_std_analysis(&dir, &trace, &target, tname)?;
        }
        Ok(out)
    }

    /// Prefix correlation of the spread of forgetting over the last L-1 layers
    /// with the target, plus both series over epochs.
    fn forgetting_std_analysis(&self, dir: &Path, trace: &DynamicsTrace, target: &[f64], tname: &str) -> CliResult<()> {
        let layers = trace.profiles[0].layers.len();
        if layers < 3 {
            return Ok(());
        }
        let spec = HypothesisSpec {
            layers: LayerSelection::LastN(layers - 1),
            metric: MetricOp::ForgettingOnly,
            aggregation: AggregateOp::Std,
        };
        let series: Vec<f64> = trace.profiles.iter().map(|p| spec.evaluate(p)).collect::<Result<_, _>>()?;
        let prefix = prefix_correlation(&series, target)?;
        let mut t = Table::new(&["epoch", "forgetting_std", "target", "prefix_r"]);
        for (k, e) in trace.epochs.iter().enumerate() {
            t.row(&[
                e.to_string(),
                fmt_float(series[k]),
                fmt_float(target[k]),
                prefix[k].map(fmt_float).unwrap_or_default(),
            ]);
        }
        t.write(&dir.join(format!("forgetting_std_{tname}.csv")))?;
        let z = |v: &[f64]| -> Vec<(f64, f64)> {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            let s = if s > 0.0 { s } else { 1.0 };
            trace.epochs.iter().zip(v).map(|(&e, &x)| (e as f64, (x - m) / s)).collect()
        };
        let svg = line_plot(
            &format!("{} vs {tname} (z-scored)", spec.label()),
            "epoch",
            "z-score",
            &[
                Series {
                    name: "forgetting std".into(),
                    points: z(&series),
                },
                Series {
                    name: tname.into(),
                    points: z(target),
                },
            ],
        );
        write_atomic(&dir.join(format!("forgetting_std_{tname}.svg")), svg.as_bytes())
    }
}

pub fn epoch_dir(epoch: usize) -> String {
    format!("epoch-{epoch:03}")
}

pub fn mode_name(mode: GridMode) -> &'static str {
    match mode {
        GridMode::LearningForgetting => "learning_forgetting",
        GridMode::CkaDivergence => "cka",
    }
}

pub fn target_name(t: TargetSeries) -> &'static str {
    match t {
        TargetSeries::MeanCorrupted => "mean_corrupted",
        TargetSeries::Clean => "clean",
    }
}

fn check_profile(p: &MetricProfile) -> CliResult<()> {
    let cols = [
        ("forgetting", &p.forgetting),
        ("learning", &p.learning),
        ("cka_divergence", &p.cka_divergence),
    ];
    for (name, v) in cols {
        if let Some(k) = v.iter().position(|x| !x.is_finite()) {
            return Err(CliError::NonFinite(format!("{name} at layer {}", p.layers[k] + 1)));
        }
    }
    Ok(())
}

pub fn profile_csv(p: &MetricProfile) -> String {
    let mut t = Table::new(&["layer", "forgetting", "forgetting_std", "learning", "learning_std", "cka_divergence"]);
    for (k, l) in p.layers.iter().enumerate() {
        t.row(&[
            (l + 1).to_string(),
            fmt_float(p.forgetting[k]),
            fmt_float(p.forgetting_std[k]),
            fmt_float(p.learning[k]),
            fmt_float(p.learning_std[k]),
            fmt_float(p.cka_divergence[k]),
        ]);
    }
    String::from_utf8(t.into_bytes()).expect("utf8")
}

fn profile_svg(p: &MetricProfile) -> String {
    let pts = |v: &[f64]| p.layers.iter().zip(v).map(|(&l, &x)| ((l + 1) as f64, x)).collect();
    line_plot(
        "Forgetting and learning per layer",
        "layer",
        "metric",
        &[
            Series {
                name: "forgetting".into(),
                points: pts(&p.forgetting),
            },
            Series {
                name: "learning".into(),
                points: pts(&p.learning),
            },
            Series {
                name: "cka divergence".into(),
                points: pts(&p.cka_divergence),
            },
        ],
    )
}

fn grid_csv(g: &GridReport) -> Table {
    let mut t = Table::new(&[
        "rank",
        "layers",
        "metric",
        "aggregation",
        "r",
        "p_value",
        "n",
        "m_hypotheses",
        "bonferroni_pass",
        "skip_reason",
    ]);
    for (k, r) in g.reports.iter().enumerate() {
        t.row(&[
            (k + 1).to_string(),
            r.hypothesis.layers.label(),
            r.hypothesis.metric.name().into(),
            r.hypothesis.aggregation.name().into(),
            r.r.map(fmt_float).unwrap_or_default(),
            r.p_value.map(fmt_float).unwrap_or_default(),
            r.n.to_string(),
            r.m_hypotheses.to_string(),
            r.bonferroni_pass.to_string(),
            r.skip_reason.clone().unwrap_or_default(),
        ]);
    }
    t
}

/// Originals on the top row, inversions below, each pixel scaled up 4 times.
fn write_inversion_grid(path: &Path, set: &InvertedSet) -> CliResult<()> {
    const SCALE: u32 = 4;
    let s = set.x.shape();
    let (n, c, h, w) = (s[0].min(8), s[1], s[2], s[3]);
    let mut img = image::RgbImage::new((n * w) as u32 * SCALE, (2 * h) as u32 * SCALE);
    for (row, t) in [&set.x, &set.inversion.x_prime].into_iter().enumerate() {
        let d = t.data();
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let px = |ch: usize| (d[((i * c + ch.min(c - 1)) * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                    let rgb = image::Rgb([px(0), px(1), px(2)]);
                    for dy in 0..SCALE {
                        for dx in 0..SCALE {
                            img.put_pixel((i * w + x) as u32 * SCALE + dx, (row * h + y) as u32 * SCALE + dy, rgb);
                        }
                    }
                }
            }
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| CliError::Other(e.to_string()))?;
    write_atomic(path, &bytes)
}
