use alloc::vec::Vec;

use super::*;
use crate::zoo::{InputShape, ModelConfig};

struct Linear {
    w: Tensor<f64>,
}

impl Representer<f64> for Linear {
    fn represent<'t>(&self, tape: &'t Tape<f64>, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let n = x.shape()[0];
        x.reshape(&[n, self.w.shape()[0]])?.matmul(&tape.constant(self.w.clone()))
    }
}

struct Exploding;

impl Representer<f64> for Exploding {
    fn represent<'t>(&self, _: &'t Tape<f64>, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let n = x.shape()[0];
        x.reshape(&[n, x.shape()[1..].iter().product()])?.scale(1e200)?.scale(1e200)
    }
}

/// Runs jobs last-to-first.
struct Reversed;

impl Executor for Reversed {
    fn map<R, F>(&self, jobs: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        let mut out: Vec<(usize, R)> = (0..jobs).rev().map(|i| (i, f(i))).collect();
        out.sort_by_key(|(i, _)| *i);
        out.into_iter().map(|(_, r)| r).collect()
    }
}

fn batch(n: usize, shape: InputShape, lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    let data = (0..n * shape.numel()).map(|_| rng.uniform_in(lo, hi)).collect();
    Tensor::new(&shape.batch_shape(n), data).unwrap()
}

// solve (WWᵀ) z = W y for the row-vector convention y = x W
fn least_squares(w: &Tensor<f64>, y: &[f64]) -> Vec<f64> {
    let (d, k) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let mut a = alloc::vec![0.0; d * (d + 1)];
    for i in 0..d {
        for j in 0..d {
            a[i * (d + 1) + j] = (0..k).map(|c| wd[i * k + c] * wd[j * k + c]).sum();
        }
        a[i * (d + 1) + d] = (0..k).map(|c| wd[i * k + c] * y[c]).sum();
    }
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&r, &s| a[r * (d + 1) + col].abs().partial_cmp(&a[s * (d + 1) + col].abs()).unwrap())
            .unwrap();
        for c in 0..=d {
            a.swap(col * (d + 1) + c, piv * (d + 1) + c);
        }
        for r in 0..d {
            if r != col {
                let f = a[r * (d + 1) + col] / a[col * (d + 1) + col];
                for c in 0..=d {
                    a[r * (d + 1) + c] -= f * a[col * (d + 1) + c];
                }
            }
        }
    }
    (0..d).map(|i| a[i * (d + 1) + d] / a[i * (d + 1) + i]).collect()
}

#[test]
fn zero_iterations_return_the_initialization() {
    let mut rng = Rng::new(1);
    let model: Model<f64> = Model::build(ModelConfig::mlp(InputShape::new(1, 4, 4), &[8], 2), &mut rng).unwrap();
    let x = batch(5, model.config().input, 0.0, 1.0, &mut rng);
    let cfg = InversionConfig {
        iterations: 0,
        chunk_size: 3,
        ..InversionConfig::default()
    };
    let seed = Rng::new(7);
    let out = invert(&model, 0, &x, &cfg, &seed).unwrap();
    let mut want = Vec::new();
    for c in 0..2u64 {
        let rows = if c == 0 { 3 } else { 2 };
        let mut r = seed.fork(c);
        want.extend((0..rows * 16).map(|_| r.uniform()));
    }
    assert_eq!(out.x_prime.data(), want.as_slice());
    assert_eq!(out.init_loss, out.per_sample_loss);

    let jitter = InversionConfig {
        init: InitKind::DataJitter,
        ..cfg
    };
    let out = invert(&model, 0, &x, &jitter, &seed).unwrap();
    assert!(out.x_prime.max_abs_diff(&x) < 0.6);
    assert!(out.x_prime.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn injective_linear_layer_is_inverted_to_the_least_squares_solution() {
    let mut rng = Rng::new(2);
    let w = Tensor::new(&[4, 6], (0..24).map(|_| rng.normal()).collect()).unwrap();
    let x = batch(3, InputShape::new(1, 2, 2), 0.1, 0.9, &mut rng);
    let cfg = InversionConfig {
        iterations: 3000,
        step_size: 0.01,
        ..InversionConfig::default()
    };
    let rep = Linear { w: w.clone() };
    let out = invert_with(&rep, &x, &cfg, &Rng::new(3), &Sequential).unwrap();
    assert!(out.per_sample_loss.iter().all(|&l| l < 1e-4), "{:?}", out.per_sample_loss);
    assert!(out.converged.iter().all(|&c| c));
    for s in 0..3 {
        let row = &x.data()[4 * s..4 * s + 4];
        let y: Vec<f64> = (0..6).map(|c| (0..4).map(|i| row[i] * w.data()[i * 6 + c]).sum()).collect();
        let oracle = least_squares(&w, &y);
        for i in 0..4 {
            assert!((out.x_prime.data()[4 * s + i] - oracle[i]).abs() < 1e-2);
        }
    }
}

#[test]
fn inversion_is_deterministic_clamped_and_leaves_model_untouched() {
    let mut rng = Rng::new(4);
    let mut cfg = ModelConfig::tiny_vit(InputShape::new(1, 8, 8), 2, 3);
    cfg.vit.embed_dim = 16;
    cfg.vit.num_heads = 2;
    let model: Model<f64> = Model::build(cfg, &mut rng).unwrap();
    let before = model.clone();
    let x = batch(7, model.config().input, 0.0, 1.0, &mut rng);
    let cfg = InversionConfig {
        iterations: 15,
        chunk_size: 3,
        ..InversionConfig::default()
    };
    let a = invert(&model, 1, &x, &cfg, &Rng::new(5)).unwrap();
    let b = invert_with(&LayerTap { model: &model, layer: 1 }, &x, &cfg, &Rng::new(5), &Reversed).unwrap();
    assert_eq!(a, b);
    assert_eq!(model, before);
    assert_eq!(a.x_prime.shape(), x.shape());
    assert_eq!(a.per_sample_loss.len(), 7);
    assert!(a.x_prime.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.mean_loss() <= a.mean_init_loss());
    assert!(matches!(invert(&model, 2, &x, &cfg, &Rng::new(5)), Err(Error::Index { .. })));
}

#[test]
fn mean_loss_improves_for_every_layer_of_small_models() {
    let mut rng = Rng::new(6);
    let mlp: Model<f32> = Model::build(ModelConfig::mlp(InputShape::new(1, 8, 8), &[32, 32, 16], 3), &mut rng).unwrap();
    let vit: Model<f32> = Model::build(ModelConfig::tiny_vit(InputShape::new(1, 8, 8), 3, 3), &mut rng).unwrap();
    let x = batch(8, InputShape::new(1, 8, 8), 0.0, 1.0, &mut rng).cast::<f32>();
    let cfg = InversionConfig {
        iterations: 20,
        ..InversionConfig::default()
    };
    for model in [&mlp, &vit] {
        for layer in 0..model.layer_count() {
            let out = invert(model, layer, &x, &cfg, &Rng::new(layer as u64)).unwrap();
            assert!(out.mean_loss() <= out.mean_init_loss(), "layer {layer}");
        }
    }
}

#[test]
fn non_finite_representations_abort_with_location() {
    let x = batch(4, InputShape::new(1, 2, 2), 0.2, 0.8, &mut Rng::new(0));
    let cfg = InversionConfig {
        chunk_size: 2,
        ..InversionConfig::default()
    };
    let err = invert_with(&Exploding, &x, &cfg, &Rng::new(0), &Sequential).unwrap_err();
    assert_eq!(err, Error::InversionDiverged { iteration: 0, sample: 0 });
    let bad = InversionConfig {
        step_size: 0.0,
        ..InversionConfig::default()
    };
    assert!(matches!(invert_with(&Exploding, &x, &bad, &Rng::new(0), &Sequential), Err(Error::Config(_))));
}
