//! Severity-graded corruptions. Each kind has a fixed five-level table.
//!
//! | kind           | parameter                                   | 1    | 2    | 3    | 4    | 5    |
//! |----------------|---------------------------------------------|------|------|------|------|------|
//! | gaussian_noise | noise std                                   | 0.04 | 0.08 | 0.12 | 0.18 | 0.26 |
//! | box_blur       | box radius (px)                             | 1    | 2    | 3    | 4    | 5    |
//! | contrast       | factor around per-channel mean              | 0.8  | 0.65 | 0.5  | 0.35 | 0.2  |
//! | occlusion      | square side as fraction of height           | 0.2  | 0.3  | 0.4  | 0.5  | 0.6  |

use alloc::format;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Rng;

const NOISE_STD: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const BLUR_RADIUS: [usize; 5] = [1, 2, 3, 4, 5];
const CONTRAST: [f64; 5] = [0.8, 0.65, 0.5, 0.35, 0.2];
const OCCLUSION_FILL: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum CorruptionKind {
    GaussianNoise,
    BoxBlur,
    Contrast,
    Occlusion,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Occlusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Occlusion => "occlusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        let spec = Self { kind, severity };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Argument(format!(
                "severity must be in 1..=5, got {}",
                self.severity
            )));
        }
        Ok(())
    }

    fn level(&self) -> usize {
        self.severity as usize - 1
    }
}

/// Side of the occluding square for an image of height `h`.
pub fn occlusion_side(h: usize, severity: u8) -> usize {
    libm::floor(h as f64 * (0.1 + 0.1 * severity as f64)) as usize
}

/// Corrupted copy of `ds`. Image `i` draws from `rng.fork(i)`.
pub fn corrupt(ds: &Dataset, spec: CorruptionSpec, rng: &Rng) -> Result<Dataset> {
    spec.validate()?;
    let shape = ds.image_shape();
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    let per = shape.numel();
    let mut out = ds.clone();
    for (i, img) in out.images.data_mut().chunks_mut(per.max(1)).enumerate() {
        let mut r = rng.fork(i as u64);
        match spec.kind {
            CorruptionKind::GaussianNoise => {
                let s = NOISE_STD[spec.level()];
                for v in img.iter_mut() {
                    *v = (*v as f64 + s * r.normal()) as f32;
                }
            }
            CorruptionKind::BoxBlur => {
                for ch in img.chunks_mut(h * w) {
                    box_blur(ch, h, w, BLUR_RADIUS[spec.level()]);
                }
            }
            CorruptionKind::Contrast => {
                let f = CONTRAST[spec.level()];
                for ch in img.chunks_mut(h * w) {
                    let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64;
                    for v in ch.iter_mut() {
                        *v = (mean + f * (*v as f64 - mean)) as f32;
                    }
                }
            }
            CorruptionKind::Occlusion => {
                let side = occlusion_side(h, spec.severity).min(w);
                let y0 = r.below(h - side + 1);
                let x0 = r.below(w - side + 1);
                for ch in 0..c {
                    for y in y0..y0 + side {
                        let row = ch * h * w + y * w;
                        img[row + x0..row + x0 + side].fill(OCCLUSION_FILL);
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    out.name = format!("{}+{}@{}", ds.name, spec.kind.name(), spec.severity);
    Ok(out)
}

/// Mean over the `(2r+1)²` window, truncated at the borders.
fn box_blur(ch: &mut [f32], h: usize, w: usize, r: usize) {
    let src: Vec<f32> = ch.to_vec();
    for y in 0..h {
        for x in 0..w {
            let (ya, yb) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (xa, xb) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut acc = 0.0f64;
            for yy in ya..=yb {
                acc += src[yy * w + xa..=yy * w + xb].iter().map(|&v| v as f64).sum::<f64>();
            }
            ch[y * w + x] = (acc / ((yb - ya + 1) * (xb - xa + 1)) as f64) as f32;
        }
    }
}
