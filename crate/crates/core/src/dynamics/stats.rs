use alloc::format;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest reported p-value.
pub const P_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Correlation {
    pub r: f64,
    /// Two-sided, from Student's t with `n - 2` degrees of freedom.
    pub p: f64,
    pub n: usize,
}

/// Sample Pearson correlation and its two-sided p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            op: "pearson",
            lhs: alloc::vec![x.len()],
            rhs: alloc::vec![y.len()],
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Argument(format!("pearson needs at least 3 points, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(format!(
            "correlation undefined for a constant series of length {n}"
        )));
    }
    let r = (sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0);
    Ok(Correlation {
        r,
        p: p_value(r, n),
        n,
    })
}

fn p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let one_minus = 1.0 - r * r;
    if one_minus <= 0.0 {
        return P_FLOOR;
    }
    let t2 = r * r * df / one_minus;
    // P(|T| > t) = I_{df / (df + t²)}(df / 2, 1 / 2)
    let p = regularized_beta(df / (df + t2), df / 2.0, 0.5);
    p.clamp(P_FLOOR, 1.0)
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b)
        + a * libm::log(x)
        + b * libm::log1p(-x);
    if x < (a + 1.0) / (a + b + 2.0) {
        libm::exp(ln_front) * beta_fraction(x, a, b) / a
    } else {
        1.0 - libm::exp(ln_front) * beta_fraction(1.0 - x, b, a) / b
    }
}

fn beta_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let guard = |v: f64| if v.abs() < TINY { TINY } else { v };
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - qab * x / qap);
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 / guard(1.0 + aa * d);
        c = guard(1.0 + aa / c);
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 / guard(1.0 + aa * d);
        c = guard(1.0 + aa / c);
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Per-hypothesis significance level.
pub fn bonferroni_threshold(alpha: f64, m: usize) -> f64 {
    alpha / m as f64
}

/// Whether `p` survives correction for `m` hypotheses. Nothing passes when `m == 0`.
pub fn bonferroni(p: f64, m: usize, alpha: f64) -> bool {
    m > 0 && p < bonferroni_threshold(alpha, m)
}

/// Entry `e` is the correlation over the first `e + 1` points; entries
/// before index 2 and entries whose prefix is constant are `None`.
pub fn prefix_correlation(x: &[f64], y: &[f64]) -> Result<Vec<Option<f64>>> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            op: "prefix_correlation",
            lhs: alloc::vec![x.len()],
            rhs: alloc::vec![y.len()],
        });
    }
    if x.len() < 3 {
        return Err(Error::Argument(format!(
            "prefix_correlation needs at least 3 points, got {}",
            x.len()
        )));
    }
    (0..x.len())
        .map(|e| {
            if e < 2 {
                return Ok(None);
            }
            match pearson(&x[..=e], &y[..=e]) {
                Ok(c) => Ok(Some(c.r)),
                Err(Error::Degenerate(_)) => Ok(None),
                Err(other) => Err(other),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    // textbook r = (nΣxy - ΣxΣy) / sqrt((nΣx² - (Σx)²)(nΣy² - (Σy)²))
    fn oracle_r(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mut sx, mut sy, mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..x.len() {
            sx += x[i];
            sy += y[i];
            sxy += x[i] * y[i];
            sxx += x[i] * x[i];
            syy += y[i] * y[i];
        }
        (n * sxy - sx * sy) / libm::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy))
    }

    // two-sided tail of Student's t by Simpson quadrature of the density
    fn oracle_p(r: f64, n: usize) -> f64 {
        let df = (n - 2) as f64;
        let t = (r * libm::sqrt(df / (1.0 - r * r))).abs();
        let c = libm::exp(libm::lgamma((df + 1.0) / 2.0) - libm::lgamma(df / 2.0))
            / libm::sqrt(df * core::f64::consts::PI);
        let dens = |s: f64| c * libm::pow(1.0 + s * s / df, -(df + 1.0) / 2.0);
        let steps = 20_000;
        let h = t / steps as f64;
        let mut acc = dens(0.0) + dens(t);
        for i in 1..steps {
            acc += dens(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        1.0 - 2.0 * acc * h / 3.0
    }

    #[test]
    fn exact_linear_relations() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let c = pearson(&x, &y).unwrap();
        assert!((c.r - 1.0).abs() < 1e-15);
        assert_eq!(c.p, P_FLOOR);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap().r + 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_series_matches_textbook_formula() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 1.0, 4.0, 3.0, 6.0];
        let c = pearson(&x, &y).unwrap();
        assert!((c.r - oracle_r(&x, &y)).abs() < 1e-9);
        assert!((c.r - 0.821_994_936_526_786_5).abs() < 1e-12);
        assert!((c.p - oracle_p(c.r, 5)).abs() < 1e-6);
        assert!((c.p - 0.087_706_647_008_065_53).abs() < 1e-9);
    }

    #[test]
    fn errors_and_degenerate_prefixes() {
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::Argument(_))));
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
        let pc = prefix_correlation(&[1.0, 1.0, 1.0, 2.0], &[3.0, 1.0, 2.0, 5.0]).unwrap();
        assert_eq!(pc[..3], [None, None, None]);
        assert!(pc[3].is_some());
    }

    #[test]
    fn bonferroni_examples() {
        assert_eq!(bonferroni_threshold(0.05, 352), 0.05 / 352.0);
        assert!((bonferroni_threshold(0.05, 352) - 1.4205e-4).abs() < 1e-8);
        assert!(bonferroni(3.52e-18, 352, 0.05));
        assert!(!bonferroni(0.01, 352, 0.05));
        assert!(!bonferroni(0.0, 0, 0.05));
    }

    #[test]
    fn prefix_series_by_brute_force() {
        let x = [0.3, 0.9, 0.4, 1.2, 0.8, 1.5];
        let y = [1.0, 1.4, 0.7, 2.0, 1.1, 2.6];
        let pc = prefix_correlation(&x, &y).unwrap();
        assert_eq!(pc[..2], [None, None]);
        for e in 2..6 {
            assert!((pc[e].unwrap() - oracle_r(&x[..=e], &y[..=e])).abs() < 1e-9);
        }
        assert_eq!(pc[5].unwrap(), pearson(&x, &y).unwrap().r);
        let lin = prefix_correlation(&x, &x.map(|v| 3.0 * v - 1.0)).unwrap();
        assert!(lin.iter().flatten().all(|r| (r - 1.0).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn symmetric_affine_invariant_and_matches_oracles(seed: u64, n in 3usize..40, a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let mut rng = Rng::new(seed);
            let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rng.normal()).collect();
            let c = pearson(&x, &y).unwrap();
            prop_assert!((c.r - pearson(&y, &x).unwrap().r).abs() < 1e-12);
            let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((c.r - pearson(&ax, &y).unwrap().r).abs() < 1e-9);
            prop_assert!((c.r - oracle_r(&x, &y)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&c.p));
            if c.r.abs() < 0.99 {
                prop_assert!((c.p - oracle_p(c.r, n)).abs() < 1e-6);
            }
        }
    }
}
