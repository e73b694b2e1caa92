//! Procedurally rendered shape images, one class per shape kind.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::zoo::InputShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum ShapeKind {
    Disc,
    Pair,
    Triangle,
    Ring,
    Cross,
    Bars,
    Checker,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Disc,
        ShapeKind::Pair,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Bars,
        ShapeKind::Checker,
        ShapeKind::Blob,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Pair => "pair",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Bars => "bars",
            ShapeKind::Checker => "checker",
            ShapeKind::Blob => "blob",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown shape kind {s:?}")))
    }

    /// Coverage in `[0, 1]` at shape-local coordinates `(u, v)` (unit radius).
    /// `aspect` only affects blobs.
    fn coverage(self, u: f64, v: f64, aspect: f64) -> f64 {
        let inside = |b: bool| if b { 1.0 } else { 0.0 };
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Disc => inside(r2 <= 1.0),
            ShapeKind::Pair => {
                let du = u.abs() - 0.55;
                inside(du * du + v * v <= 0.16)
            }
            ShapeKind::Triangle => inside(v >= -0.5 && v <= 1.0 - libm::sqrt(3.0) * u.abs()),
            ShapeKind::Ring => inside((0.3025..=1.0).contains(&r2)),
            ShapeKind::Cross => inside(
                (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            ),
            ShapeKind::Bars => {
                let band = libm::floor((v + 1.0) * 2.0) as i64;
                inside(u.abs() <= 1.0 && v.abs() <= 1.0 && band % 2 == 0)
            }
            ShapeKind::Checker => {
                let a = libm::floor((u + 1.0) * 2.0) as i64;
                let b = libm::floor((v + 1.0) * 2.0) as i64;
                inside(u.abs() <= 1.0 && v.abs() <= 1.0 && (a + b) % 2 == 0)
            }
            ShapeKind::Blob => libm::exp(-2.0 * (u * u * aspect + v * v / aspect)),
        }
    }
}

fn quantize(v: f64) -> f32 {
    super::idx::byte_to_pixel(libm::round(v.clamp(0.0, 1.0) * 255.0) as u8)
}

fn render(kind: ShapeKind, image: InputShape, rng: &mut Rng, out: &mut Vec<f32>) {
    let (h, w) = (image.height as f64, image.width as f64);
    let side = h.min(w);
    let radius = side * rng.uniform_in(0.3, 0.42);
    let cy = h * rng.uniform_in(0.35, 0.65);
    let cx = w * rng.uniform_in(0.35, 0.65);
    let theta = rng.uniform_in(0.0, 2.0 * PI);
    let aspect = rng.uniform_in(0.5, 2.0);
    let fg = rng.uniform_in(0.6, 1.0);
    let bg = rng.uniform_in(0.0, 0.2);
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let mut mask = Vec::with_capacity(image.height * image.width);
    for y in 0..image.height {
        for x in 0..image.width {
            let dy = (y as f64 + 0.5 - cy) / radius;
            let dx = (x as f64 + 0.5 - cx) / radius;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            mask.push(kind.coverage(u, v, aspect));
        }
    }
    for _ in 0..image.channels {
        let tint = if image.channels == 1 {
            1.0
        } else {
            rng.uniform_in(0.5, 1.0)
        };
        for &m in &mask {
            let noise = 0.03 * rng.normal();
            out.push(quantize(bg + m * (fg * tint - bg) + noise));
        }
    }
}

/// `n` images drawn from the first `num_classes` shape kinds.
pub fn gen_shapes(n: usize, num_classes: usize, image: InputShape, rng: &mut Rng) -> Result<Dataset> {
    if !(2..=ShapeKind::ALL.len()).contains(&num_classes) {
        return Err(Error::Argument(format!(
            "num_classes must be in 2..=8, got {num_classes}"
        )));
    }
    gen_shapes_kinds(n, &ShapeKind::ALL[..num_classes], image, rng)
}

/// `n` images whose label is the position of their kind in `kinds`.
/// Sample `i` has label `i % kinds.len()`, so classes are balanced.
pub fn gen_shapes_kinds(n: usize, kinds: &[ShapeKind], image: InputShape, rng: &mut Rng) -> Result<Dataset> {
    if kinds.is_empty() {
        return Err(Error::Argument(String::from("no shape kinds requested")));
    }
    if n < kinds.len() {
        return Err(Error::Argument(format!(
            "n = {n} is smaller than the number of classes {}",
            kinds.len()
        )));
    }
    let mut data = Vec::with_capacity(n * image.numel());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % kinds.len();
        let mut r = rng.fork(i as u64);
        render(kinds[label], image, &mut r, &mut data);
        labels.push(label);
    }
    let name: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
    Dataset::new(
        Tensor::new(&image.batch_shape(n), data)?,
        labels,
        kinds.len(),
        format!("shapes[{}]", name.join(",")),
        Split::Train,
    )
}
