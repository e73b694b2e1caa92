//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `cargo test --release -p ilens --test acceptance`

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ilens::config::{InitFrom, Task};
use ilens::manifest::RunManifest;
use ilens::{Context, RunConfig, Stage, StepOptions};
use ilens_core::data::{gen_shapes_kinds, Dataset, ShapeKind, Split};
use ilens_core::dynamics::{
    bonferroni_threshold, grid_specs, pearson, prefix_correlation, GridMode,
};
use ilens_core::exec::Sequential;
use ilens_core::invert::InversionConfig;
use ilens_core::metrics::{
    flow_matrix_from_sets, invert_sets, profile_from_sets, stir_on_sets, InvertedSet, MetricProfile, Protocol,
    SharedSets, ROLE_FINETUNED, ROLE_PRETRAINED,
};
use ilens_core::numerics::{grad_check, Rng, Tape, Tensor, Var};
use ilens_core::sim::linear_cka;
use ilens_core::train::{train, TrainConfig};
use ilens_core::zoo::{HeadKind, InputShape, Model, ModelConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, budget_secs: u64) -> Result<(), String> {
    ensure(
        elapsed <= Duration::from_secs(budget_secs),
        format!("took {:.1}s, budget {budget_secs}s", elapsed.as_secs_f64()),
    )
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

fn centered_gram(x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let v = x.data();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (0..d).map(|c| v[i * d + c] * v[j * d + c]).sum()).collect())
        .collect();
    let h = |i: usize, j: usize| if i == j { 1.0 - 1.0 / n as f64 } else { -1.0 / n as f64 };
    let hk: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|m| h(i, m) * k[m][j]).sum()).collect())
        .collect();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|m| hk[i][m] * h(m, j)).sum()).collect())
        .collect()
}

fn oracle_cka(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let (kx, ky) = (centered_gram(x), centered_gram(y));
    let dot = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(p, q)| p * q).sum::<f64>()).sum()
    };
    dot(&kx, &ky) / (dot(&kx, &kx) * dot(&ky, &ky)).sqrt()
}

fn criterion_cka() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d1 = 2 + rng.below(15);
        let d2 = 2 + rng.below(15);
        let x = random(&[40, d1], &mut rng);
        let y = random(&[40, d2], &mut rng);
        let got = linear_cka(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle_cka(&x, &y)).abs());
    }
    ensure(worst <= 1e-6, format!("max deviation {worst:e}"))?;
    within(start.elapsed(), 5)?;
    Ok(format!("50 pairs, max |cka - oracle| = {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

type OpFn = for<'t> fn(&'t Tape<f64>, Var<'t, f64>) -> ilens_core::Result<Var<'t, f64>>;

/// Weighted sum so every output coordinate carries a distinct gradient.
fn project<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>) -> ilens_core::Result<Var<'t, f64>> {
    let shape = out.shape();
    let mut rng = Rng::new(shape.iter().product::<usize>() as u64);
    let w = random(&shape, &mut rng);
    out.mul(&tape.constant(w))?.sum()
}

fn c<'t>(tape: &'t Tape<f64>, shape: &[usize], seed: u64) -> Var<'t, f64> {
    tape.constant(random(shape, &mut Rng::new(seed)))
}

fn op_cases() -> Vec<(&'static str, Vec<usize>, OpFn)> {
    vec![
        ("matmul lhs", vec![3, 4], |t, v| project(t, v.matmul(&c(t, &[4, 2], 1))?)),
        ("matmul rhs", vec![4, 2], |t, v| project(t, c(t, &[2, 3, 4], 2).matmul(&v)?)),
        ("bmm lhs", vec![2, 3, 4], |t, v| project(t, v.bmm(&c(t, &[2, 4, 3], 3))?)),
        ("bmm rhs", vec![2, 4, 3], |t, v| project(t, c(t, &[2, 3, 4], 4).bmm(&v)?)),
        ("bmm_nt lhs", vec![2, 3, 4], |t, v| project(t, v.bmm_nt(&c(t, &[2, 5, 4], 5))?)),
        ("bmm_nt rhs", vec![2, 5, 4], |t, v| project(t, c(t, &[2, 3, 4], 6).bmm_nt(&v)?)),
        ("add", vec![3, 4], |t, v| project(t, v.add(&c(t, &[3, 4], 7))?)),
        ("sub rhs", vec![3, 4], |t, v| project(t, c(t, &[3, 4], 8).sub(&v)?)),
        ("mul", vec![3, 4], |t, v| project(t, v.mul(&c(t, &[3, 4], 9))?)),
        ("mul self", vec![3, 4], |t, v| project(t, v.mul(&v)?)),
        ("add_broadcast lhs", vec![2, 3, 4], |t, v| project(t, v.add_broadcast(&c(t, &[4], 10))?)),
        ("add_broadcast rhs", vec![3, 4], |t, v| project(t, c(t, &[2, 3, 4], 11).add_broadcast(&v)?)),
        ("mul_broadcast lhs", vec![2, 3, 4], |t, v| project(t, v.mul_broadcast(&c(t, &[4], 12))?)),
        ("mul_broadcast rhs", vec![4], |t, v| project(t, c(t, &[2, 3, 4], 13).mul_broadcast(&v)?)),
        ("scale", vec![3, 4], |t, v| project(t, v.scale(-1.7)?)),
        ("relu", vec![3, 4], |t, v| project(t, v.relu()?)),
        ("gelu", vec![3, 4], |t, v| project(t, v.gelu()?)),
        ("sigmoid", vec![3, 4], |t, v| project(t, v.sigmoid()?)),
        ("square", vec![3, 4], |t, v| project(t, v.square()?)),
        ("abs", vec![3, 4], |t, v| project(t, v.abs()?)),
        ("softmax_last", vec![3, 5], |t, v| project(t, v.softmax_last()?)),
        ("layernorm_last", vec![3, 5], |t, v| project(t, v.layernorm_last(1e-5)?)),
        ("sum", vec![3, 4], |_, v| v.sum()?.square()),
        ("mean", vec![3, 4], |_, v| v.mean()?.square()),
        ("mean_last", vec![2, 3, 4], |t, v| project(t, v.mean_last()?)),
        ("l1", vec![3, 4], |t, v| v.l1(&c(t, &[3, 4], 14))),
        ("reshape", vec![3, 4], |t, v| project(t, v.reshape(&[2, 6])?)),
        ("permute", vec![2, 3, 4], |t, v| project(t, v.permute(&[2, 0, 1])?)),
        ("prepend_token seq", vec![2, 3, 4], |t, v| project(t, v.prepend_token(&c(t, &[4], 15))?)),
        ("prepend_token token", vec![4], |t, v| project(t, c(t, &[2, 3, 4], 16).prepend_token(&v)?)),
        ("select_token", vec![2, 3, 4], |t, v| project(t, v.select_token(1)?)),
        ("slice_tokens", vec![2, 3, 4], |t, v| project(t, v.slice_tokens(1)?)),
        ("cross_entropy", vec![4, 3], |_, v| v.cross_entropy(&[0, 2, 1, 2])),
    ]
}

/// Values bounded away from the kinks of relu, abs and l1.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_in(0.2, 1.5);
            if rng.uniform() < 0.5 { -m } else { m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn model_grad(model: &Model<f64>, name: &str, x: &Tensor<f64>, labels: &[usize]) -> ilens_core::Result<f64> {
    let target = model.param(name).expect("param").clone();
    let reconstruction = model.config().head == HeadKind::Reconstruction;
    let r = grad_check(
        |tape, v| {
            let mut p = model.bind(tape, false);
            p.replace(name, v)?;
            let input = tape.constant(x.clone());
            let out = model.forward_graph(&p, input, &[], true)?.head.expect("head");
            if reconstruction {
                out.sub(&input)?.square()?.mean()
            } else {
                out.cross_entropy(labels)
            }
        },
        &target,
        1e-5,
    )?;
    Ok(r.max_rel_error)
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    let mut note = |name: String, err: f64| {
        count += 1;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, name);
        }
    };
    for (k, (name, shape, f)) in op_cases().into_iter().enumerate() {
        let x = away_from_zero(&shape, 200 + k as u64);
        let r = grad_check(f, &x, 1e-6).map_err(|e| format!("{name}: {e}"))?;
        note(name.to_string(), r.max_rel_error);
    }

    let mut rng = Rng::new(7);
    let shape = InputShape::new(1, 8, 8);
    let x = Tensor::new(&shape.batch_shape(3), (0..192).map(|_| rng.uniform()).collect()).unwrap();
    let labels = [0, 2, 1];
    let mlp: Model<f64> = Model::build(ModelConfig::mlp(shape, &[6, 5], 3), &mut rng).unwrap();
    for p in mlp.params().iter().map(|(n, _)| n.clone()).collect::<Vec<_>>() {
        note(format!("mlp {p}"), model_grad(&mlp, &p, &x, &labels).map_err(|e| e.to_string())?);
    }
    let mut cfg = ModelConfig::tiny_vit(shape, 2, 3);
    cfg.vit.embed_dim = 8;
    cfg.vit.num_heads = 2;
    let vit: Model<f64> = Model::build(cfg, &mut rng).unwrap();
    for p in vit.params().iter().map(|(n, _)| n.clone()).collect::<Vec<_>>() {
        note(format!("vit {p}"), model_grad(&vit, &p, &x, &labels).map_err(|e| e.to_string())?);
    }
    let rec = vit.reheaded(HeadKind::Reconstruction, 0, &mut rng).unwrap();
    for p in ["decoder.weight", "decoder.bias", "blocks.1.attn.k.weight"] {
        note(format!("vit reconstruction {p}"), model_grad(&rec, p, &x, &[]).map_err(|e| e.to_string())?);
    }
    let input_err = grad_check(
        |tape, v| {
            let p = vit.bind(tape, false);
            let g = vit.forward_graph(&p, v, &[1], false)?;
            project(tape, vit.pool_tap(g.taps[0].1)?)
        },
        &x,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    note("vit input through tap".into(), input_err.max_rel_error);

    ensure(worst.0 < 1e-4, format!("{}: max rel error {:e}", worst.1, worst.0))?;
    within(start.elapsed(), 60)?;
    Ok(format!("{count} checks, worst {:.2e} ({})", worst.0, worst.1))
}

// ---------------------------------------------------------------- 3, 4

struct SelfIdentity {
    model: Model<f32>,
    pool: Dataset,
    other_task: (Dataset, Dataset),
    protocol: Protocol,
    rng: Rng,
    sets: BTreeMap<usize, Vec<InvertedSet>>,
    report: Result<String, String>,
}

fn shapes(kinds: &[ShapeKind], n: usize, seed: u64, split: Split) -> Dataset {
    let mut ds = gen_shapes_kinds(n, kinds, InputShape::new(1, 16, 16), &mut Rng::new(seed)).unwrap();
    ds.split = split;
    ds
}

fn self_identity() -> &'static SelfIdentity {
    static CELL: OnceLock<SelfIdentity> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let task_a = &ShapeKind::ALL[..3];
        let task_b = &ShapeKind::ALL[5..8];
        let train_ds = shapes(task_a, 1000, 1, Split::Train);
        let test_ds = shapes(task_a, 300, 2, Split::Test);
        let cfg = TrainConfig {
            batch_size: 16,
            ..TrainConfig::default()
        };
        let m0 = Model::build(ModelConfig::tiny_vit(InputShape::new(1, 16, 16), 4, 3), &mut Rng::new(0)).unwrap();
        let (model, records) = train(m0, &train_ds, &test_ds, &cfg, |_| Ok(None)).unwrap();
        let protocol = Protocol {
            n: 64,
            k: 1,
            inversion: InversionConfig {
                iterations: 50,
                ..InversionConfig::default()
            },
        };
        let rng = Rng::new(33);
        let layers: Vec<usize> = (0..model.layer_count()).collect();
        let sets = invert_sets(&model, &layers, &test_ds, &protocol, &rng.fork(ROLE_PRETRAINED), &Sequential).unwrap();
        let mut lines = Vec::new();
        let mut failures = Vec::new();
        let mut checked = 0;
        for &l in &layers {
            let s = stir_on_sets(&model, l, &sets[&l]).unwrap();
            let conv = sets[&l].iter().map(|s| s.inversion.converged_fraction()).sum::<f64>() / sets[&l].len() as f64;
            if conv >= 0.5 {
                checked += 1;
                if s.mean < 0.90 {
                    failures.push(format!("layer {} stir {:.4}", l + 1, s.mean));
                }
                lines.push(format!("L{} {:.4} (conv {:.0}%)", l + 1, s.mean, 100.0 * conv));
            } else {
                lines.push(format!("L{} {:.4} (conv {:.0}%, <50% reported)", l + 1, s.mean, 100.0 * conv));
            }
        }
        let acc = records.last().map_or(0.0, |r| r.test_metric);
        let elapsed = start.elapsed();
        let report = if !failures.is_empty() {
            Err(failures.join(", "))
        } else if elapsed > Duration::from_secs(600) {
            Err(format!("took {:.0}s, budget 600s", elapsed.as_secs_f64()))
        } else {
            Ok(format!("acc {acc:.3}, {checked} converged layers checked; {}", lines.join(", ")))
        };
        SelfIdentity {
            model,
            pool: test_ds,
            other_task: (shapes(task_b, 600, 3, Split::Train), shapes(task_b, 200, 4, Split::Test)),
            protocol,
            rng,
            sets,
            report,
        }
    })
}

fn criterion_self_identity() -> Outcome {
    self_identity().report.clone()
}

fn criterion_identities() -> Outcome {
    let art = self_identity();
    let pt = &art.model;
    let (train_b, test_b) = &art.other_task;
    let start = pt.reheaded(HeadKind::Classification, 3, &mut Rng::new(5)).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 32,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let (ft, _) = train(start, train_b, test_b, &cfg, |_| Ok(None)).unwrap();
    let layers: Vec<usize> = (0..pt.layer_count()).collect();
    let shared = SharedSets {
        pretrained: art.sets.clone(),
        finetuned: invert_sets(&ft, &layers, &art.pool, &art.protocol, &art.rng.fork(ROLE_FINETUNED), &Sequential)
            .unwrap(),
    };
    let p: MetricProfile =
        profile_from_sets(&ft, pt, &layers, &art.pool, &art.protocol, &art.rng, &shared, &Sequential).unwrap();
    for (k, &l) in layers.iter().enumerate() {
        let s_ft = stir_on_sets(&ft, l, &shared.pretrained[&l]).unwrap().mean;
        let s_pt = stir_on_sets(pt, l, &shared.finetuned[&l]).unwrap().mean;
        ensure(s_ft == p.stir_ft_given_pt[k].mean, format!("layer {}: shared STIR(ft|pt) differs", l + 1))?;
        ensure(s_pt == p.stir_pt_given_ft[k].mean, format!("layer {}: shared STIR(pt|ft) differs", l + 1))?;
        ensure(p.forgetting[k] + s_ft == 1.0, format!("layer {}: forgetting + STIR = {:e}", l + 1, p.forgetting[k] + s_ft))?;
        ensure(p.learning[k] + s_pt == 1.0, format!("layer {}: learning + STIR = {:e}", l + 1, p.learning[k] + s_pt))?;
    }
    let flow = flow_matrix_from_sets(&ft, &layers, &shared.pretrained, &Sequential).unwrap();
    for (a, row) in flow.values.iter().enumerate() {
        ensure(row[a] == 0.0, format!("flow diagonal {} = {:e}", a + 1, row[a]))?;
    }
    Ok(format!(
        "{} layers bit-exact; forgetting {:?}",
        layers.len(),
        p.forgetting.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
    ))
}

// ---------------------------------------------------------------- 5, 6

const SEEDS: [u64; 3] = [11, 12, 13];

fn base_config(seed: u64, dir: &Path) -> RunConfig {
    let text = include_str!("../configs/demo.json");
    let mut cfg = RunConfig::from_json(text).unwrap();
    cfg.seed = seed;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

struct SeedRun {
    finetuned: MetricProfile,
    scratch: MetricProfile,
    reconstruction: MetricProfile,
    elapsed: Duration,
}

fn seed_runs() -> &'static Vec<Result<SeedRun, String>> {
    static CELL: OnceLock<Vec<Result<SeedRun, String>>> = OnceLock::new();
    CELL.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| -> Result<SeedRun, String> {
                let start = Instant::now();
                let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
                let err = |e: ilens::CliError| format!("seed {seed}: {e}");
                let mut cfg = base_config(seed, tmp.path());
                // every finetune uses the pretraining optimizer
                cfg.finetune.train = TrainConfig {
                    epochs: cfg.finetune.train.epochs,
                    ..cfg.pretrain.clone()
                };
                cfg.finetune.init = InitFrom::Pretrained;
                cfg.finetune.task = Task::Classification;
                let ctx = Context::new(cfg.clone(), 0, true);
                let opts = |stage| StepOptions {
                    stage: Some(stage),
                    ..StepOptions::default()
                };
                ctx.gen_data().map_err(err)?;
                for stage in [Stage::Pretrain, Stage::Finetune, Stage::Scratch] {
                    ctx.train_stage(stage).map_err(err)?;
                }
                let finetuned = ctx.metrics(&opts(Stage::Finetune)).map_err(err)?;
                let scratch = ctx.metrics(&opts(Stage::Scratch)).map_err(err)?;
                cfg.finetune.task = Task::Reconstruction;
                let ctx = Context::new(cfg, 0, true);
                ctx.train_stage(Stage::Finetune).map_err(err)?;
                let reconstruction = ctx.metrics(&opts(Stage::Finetune)).map_err(err)?;
                Ok(SeedRun {
                    finetuned,
                    scratch,
                    reconstruction,
                    elapsed: start.elapsed(),
                })
            })
            .collect()
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn early_change(p: &MetricProfile) -> f64 {
    let half = p.layers.len().div_ceil(2);
    mean(&(0..half).map(|k| p.forgetting[k] + p.learning[k]).collect::<Vec<_>>())
}

fn criterion_pretraining_effect() -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    let mut total = Duration::ZERO;
    for (seed, run) in SEEDS.iter().zip(seed_runs()) {
        let run = run.as_ref().map_err(|e| e.clone())?;
        total += run.elapsed;
        let (a, b) = (early_change(&run.finetuned), early_change(&run.scratch));
        wins += usize::from(a < b);
        lines.push(format!("seed {seed}: pretrained {a:.3} vs scratch {b:.3}"));
    }
    ensure(wins >= 2, format!("{wins}/3 seeds; {}", lines.join("; ")))?;
    within(total, 1800)?;
    Ok(format!("{wins}/3 seeds; {}", lines.join("; ")))
}

fn criterion_task_effect() -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for (seed, run) in SEEDS.iter().zip(seed_runs()) {
        let run = run.as_ref().map_err(|e| e.clone())?;
        let (r, c) = (mean(&run.reconstruction.learning), mean(&run.finetuned.learning));
        wins += usize::from(r >= c);
        lines.push(format!("seed {seed}: reconstruction {r:.3} vs classification {c:.3}"));
    }
    ensure(wins >= 2, format!("{wins}/3 seeds; {}", lines.join("; ")))?;
    Ok(format!("{wins}/3 seeds; {}", lines.join("; ")))
}

// ---------------------------------------------------------------- 7

fn textbook_r(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn textbook_p(r: f64, n: usize) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).unwrap();
    2.0 * dist.cdf(-t.abs())
}

fn criterion_statistics() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(77);
    let (mut worst_r, mut worst_p, mut worst_prefix) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = 5 + rng.below(20);
        let slope = rng.uniform_in(-1.0, 1.0);
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let y: Vec<f64> = x.iter().map(|v| slope * v + rng.normal()).collect();
        let c = pearson(&x, &y).map_err(|e| e.to_string())?;
        worst_r = worst_r.max((c.r - textbook_r(&x, &y)).abs());
        worst_p = worst_p.max((c.p - textbook_p(textbook_r(&x, &y), n)).abs());
        let prefix = prefix_correlation(&x, &y).map_err(|e| e.to_string())?;
        for (k, v) in prefix.iter().enumerate() {
            if k >= 2 {
                let want = textbook_r(&x[..=k], &y[..=k]);
                let got = v.ok_or("missing prefix entry")?;
                worst_prefix = worst_prefix.max((got - want).abs());
            }
        }
        ensure(prefix.last().copied().flatten() == Some(c.r), "last prefix entry is not the full r")?;
    }
    ensure(worst_r <= 1e-9 && worst_p <= 1e-9 && worst_prefix <= 1e-9, format!("r {worst_r:e}, p {worst_p:e}, prefix {worst_prefix:e}"))?;
    ensure(bonferroni_threshold(0.05, 352) == 0.05 / 352.0, "bonferroni threshold")?;
    let lf = grid_specs(12, GridMode::LearningForgetting).len();
    let cka = grid_specs(12, GridMode::CkaDivergence).len();
    ensure(lf == 352 && cka == 88, format!("grid sizes {lf}/{cka}"))?;
    within(start.elapsed(), 5)?;
    Ok(format!("max dev r {worst_r:.1e}, p {worst_p:.1e}, prefix {worst_prefix:.1e}; grids {lf}/{cka}"))
}

// ---------------------------------------------------------------- 8

fn run_demo(dir: &Path, jobs: &str) -> Result<RunManifest, String> {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/demo.json");
    let out = Command::new(env!("CARGO_BIN_EXE_ilens"))
        .args(["--config", config, "--jobs", jobs, "--output-dir"])
        .arg(dir)
        .arg("all")
        .env_remove("ILENS_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())?;
    RunManifest::load_or_default(dir).map_err(|e| e.to_string())
}

fn criterion_reproducibility() -> Outcome {
    let start = Instant::now();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ma = run_demo(a.path(), "1")?;
    let mb = run_demo(b.path(), "2")?;
    let csvs: Vec<&String> = ma.files.keys().filter(|p| p.ends_with(".csv")).collect();
    ensure(csvs.iter().any(|p| p.starts_with("metrics/")), "no metric CSVs")?;
    for p in &csvs {
        let (x, y) = (std::fs::read(a.path().join(p)), std::fs::read(b.path().join(p)));
        ensure(x.is_ok() && x.ok() == y.ok(), format!("{p} differs"))?;
    }
    ensure(ma.config_hash == mb.config_hash, "config hashes differ")?;
    ensure(ma.files == mb.files, "manifest checksums differ")?;
    let stale = ma.verify(a.path()).map_err(|e| e.to_string())?;
    ensure(stale.is_empty(), format!("manifest does not verify: {stale:?}"))?;
    within(start.elapsed(), 3600)?;
    Ok(format!(
        "{} files ({} CSVs) identical across two runs (jobs 1 and 2), {:.0}s",
        ma.files.len(),
        csvs.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("CKA oracle equivalence", criterion_cka),
        ("gradient integrity", criterion_gradients),
        ("STIR self-identity", criterion_self_identity),
        ("exact algebraic identities", criterion_identities),
        ("pretraining effect", criterion_pretraining_effect),
        ("task effect", criterion_task_effect),
        ("statistics oracle", criterion_statistics),
        ("reproducibility", criterion_reproducibility),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(k + 1)) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} {name} [{secs:.1}s]: {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {} {name} [{secs:.1}s]: {detail}", k + 1);
            }
        }
    }
    println!("acceptance: {} failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
