use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Gradient-check report.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Worst per-coordinate relative error.
    pub max_rel_error: f64,
    /// Coordinate where it occurred.
    pub worst_index: usize,
}

/// Compare the reverse-mode gradient of `f` at `x` with central finite
/// differences of step `eps`. The relative error of coordinate `i` is
/// `|a - n| / max(|a|, |n|, floor)` with `floor = 1e-6`, so coordinates whose
/// true derivative is ~0 are judged on absolute error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).expect("param leaf has a gradient");

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t);
        f(&tape, v)?.value().item()
    };

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        let rel = (a - numeric).abs() / denom;
        if rel > worst.max_rel_error {
            worst = GradCheck {
                max_rel_error: rel,
                worst_index: i,
            };
        }
    }
    Ok(worst)
}
