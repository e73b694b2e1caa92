//! Linear centered kernel alignment with the biased HSIC estimator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::kernels::{gemm_nt, gemm_tn};
use crate::numerics::{Scalar, Tensor};

const MIN_ROWS: usize = 4;
const DEGENERATE_RATIO: f64 = 1e-12;

/// Which algebraic route computes the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkaForm {
    /// Cheaper of the two for the given shapes.
    Auto,
    /// Cross-covariances `XᵀY`, `XᵀX`, `YᵀY`.
    Feature,
    /// `n × n` centered Gram matrices.
    Gram,
}

struct Centered {
    data: Vec<f64>,
    n: usize,
    d: usize,
}

fn center<T: Scalar>(x: &Tensor<T>, which: &str) -> Result<Centered> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Dimension {
            op: "linear_cka",
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        });
    }
    let (n, d) = (s[0], s[1]);
    let mut data = x.to_f64_vec();
    let raw: f64 = data.iter().map(|v| v * v).sum();
    let mut mean = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for row in data.chunks_exact_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let centered: f64 = data.iter().map(|v| v * v).sum();
    if !(centered > DEGENERATE_RATIO * DEGENERATE_RATIO * raw) || centered == 0.0 {
        return Err(Error::Degenerate(format!(
            "{which} representation has no variance across its {n} rows"
        )));
    }
    Ok(Centered { data, n, d })
}

fn frob2(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

fn feature_form(x: &Centered, y: &Centered) -> f64 {
    let n = x.n;
    let mut xy = vec![0.0; x.d * y.d];
    gemm_tn(&x.data, &y.data, &mut xy, x.d, n, y.d);
    let mut xx = vec![0.0; x.d * x.d];
    gemm_tn(&x.data, &x.data, &mut xx, x.d, n, x.d);
    let mut yy = vec![0.0; y.d * y.d];
    gemm_tn(&y.data, &y.data, &mut yy, y.d, n, y.d);
    frob2(&xy) / libm::sqrt(frob2(&xx) * frob2(&yy))
}

fn gram_form(x: &Centered, y: &Centered) -> f64 {
    let n = x.n;
    let mut k = vec![0.0; n * n];
    gemm_nt(&x.data, &x.data, &mut k, n, x.d, n);
    let mut l = vec![0.0; n * n];
    gemm_nt(&y.data, &y.data, &mut l, n, y.d, n);
    let kl: f64 = k.iter().zip(&l).map(|(a, b)| a * b).sum();
    kl / libm::sqrt(frob2(&k) * frob2(&l))
}

/// Linear CKA between two `n × d` representation matrices.
pub fn linear_cka<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    linear_cka_with(x, y, CkaForm::Auto)
}

pub fn linear_cka_with<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, form: CkaForm) -> Result<f64> {
    let (xs, ys) = (x.shape(), y.shape());
    if xs.len() != 2 || ys.len() != 2 || xs[0] != ys[0] {
        return Err(Error::Dimension {
            op: "linear_cka",
            lhs: xs.to_vec(),
            rhs: ys.to_vec(),
        });
    }
    if xs[0] < MIN_ROWS {
        return Err(Error::Argument(format!(
            "linear_cka needs at least {MIN_ROWS} rows, got {}",
            xs[0]
        )));
    }
    let cx = center(x, "first")?;
    let cy = center(y, "second")?;
    let (n, d1, d2) = (cx.n, cx.d, cy.d);
    let use_gram = match form {
        CkaForm::Feature => false,
        CkaForm::Gram => true,
        CkaForm::Auto => n * n * (d1 + d2 + 3) < n * (d1 * d2 + d1 * d1 + d2 * d2),
    };
    Ok(if use_gram {
        gram_form(&cx, &cy)
    } else {
        feature_form(&cx, &cy)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn random(n: usize, d: usize, rng: &mut Rng) -> Tensor<f64> {
        Tensor::new(&[n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    // HSIC(K, L) = tr(K H L H) / (n-1)^2 with explicit centering matrix H
    fn oracle(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
        let n = x.shape()[0];
        let gram = |m: &Tensor<f64>| {
            let d = m.shape()[1];
            let mut g = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    g[i][j] = (0..d).map(|k| m.data()[i * d + k] * m.data()[j * d + k]).sum();
                }
            }
            g
        };
        let h: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64).collect())
            .collect();
        let mul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            let mut c = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    c[i][j] = (0..n).map(|k| a[i][k] * b[k][j]).sum();
                }
            }
            c
        };
        let kc = mul(&mul(&h, &gram(x)), &h);
        let lc = mul(&mul(&h, &gram(y)), &h);
        let hsic = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            let mut t = 0.0;
            for i in 0..n {
                for j in 0..n {
                    t += a[i][j] * b[j][i];
                }
            }
            t / ((n - 1) * (n - 1)) as f64
        };
        hsic(&kc, &lc) / libm::sqrt(hsic(&kc, &kc) * hsic(&lc, &lc))
    }

    fn orthogonal(d: usize, rng: &mut Rng) -> Tensor<f64> {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for c in &cols {
                let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= p * ci;
                }
            }
            let norm = libm::sqrt(v.iter().map(|a| a * a).sum());
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
        let mut q = vec![0.0; d * d];
        for (j, c) in cols.iter().enumerate() {
            for i in 0..d {
                q[i * d + j] = c[i];
            }
        }
        Tensor::new(&[d, d], q).unwrap()
    }

    #[test]
    fn fixed_pair_matches_gram_oracle() {
        let x = Tensor::new(
            &[6, 2],
            vec![1.0, 2.0, -0.5, 0.3, 2.2, -1.0, 0.0, 0.7, 1.5, 1.5, -2.0, 0.1],
        )
        .unwrap();
        let y = Tensor::new(
            &[6, 3],
            vec![
                0.2, 1.0, -1.0, 0.9, -0.4, 0.3, 1.1, 0.0, 2.0, -0.6, 0.8, 0.5, 0.4, 1.9, -0.2, -1.3, 0.1, 0.0,
            ],
        )
        .unwrap();
        let want = oracle(&x, &y);
        for form in [CkaForm::Auto, CkaForm::Feature, CkaForm::Gram] {
            assert!((linear_cka_with(&x, &y, form).unwrap() - want).abs() < 1e-6);
        }
    }

    #[test]
    fn self_scale_and_rotation_give_one() {
        let mut rng = Rng::new(1);
        let x = random(30, 5, &mut rng);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        assert!((linear_cka(&x, &x.map(|v| 3.7 * v)).unwrap() - 1.0).abs() < 1e-6);
        let q = orthogonal(5, &mut rng);
        assert!((linear_cka(&x, &x.matmul(&q).unwrap()).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        let mut rng = Rng::new(2);
        let x = random(8, 3, &mut rng);
        assert!(matches!(linear_cka(&x, &random(9, 3, &mut rng)), Err(Error::Dimension { .. })));
        let flat = Tensor::new(&[8, 3], [1.0, 2.0, 3.0].repeat(8)).unwrap();
        assert!(matches!(linear_cka(&x, &flat), Err(Error::Degenerate(_))));
        let tiny = random(3, 2, &mut rng);
        assert!(matches!(linear_cka(&tiny, &tiny), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn properties(seed: u64, n in 4usize..24, d1 in 1usize..10, d2 in 1usize..10) {
            let mut rng = Rng::new(seed);
            let x = random(n, d1, &mut rng);
            let y = random(n, d2, &mut rng);
            let a = linear_cka(&x, &y).unwrap();
            prop_assert!((-1e-6..=1.0 + 1e-6).contains(&a));
            prop_assert!((a - linear_cka(&y, &x).unwrap()).abs() < 1e-9);
            let f = linear_cka_with(&x, &y, CkaForm::Feature).unwrap();
            let g = linear_cka_with(&x, &y, CkaForm::Gram).unwrap();
            prop_assert!((f - g).abs() < 1e-6);
            let offset: Vec<f64> = (0..d1).map(|_| 10.0 * rng.normal()).collect();
            let mut shifted = x.clone();
            for row in shifted.data_mut().chunks_exact_mut(d1) {
                for (v, o) in row.iter_mut().zip(&offset) {
                    *v += o;
                }
            }
            prop_assert!((linear_cka(&shifted, &y).unwrap() - a).abs() < 1e-6);
        }
    }
}
