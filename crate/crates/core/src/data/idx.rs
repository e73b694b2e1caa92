//! IDX encoding: big-endian magic `0x0000_08NN` (unsigned bytes, `NN`
//! dimensions), `NN` big-endian `u32` sizes, then raw bytes.
//!
//! Images are written with 3 dimensions `[n, h, w]` when single-channel and
//! 4 dimensions `[n, c, h, w]` otherwise; labels with 1 dimension.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_COLOR_IMAGES_MAGIC: u32 = 0x0000_0804;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub(crate) fn byte_to_pixel(b: u8) -> f32 {
    (b as f64 / 255.0) as f32
}

fn pixel_to_byte(v: f32) -> u8 {
    libm::round(v.clamp(0.0, 1.0) as f64 * 255.0) as u8
}

fn header(bytes: &[u8], what: &str) -> Result<(u32, Vec<usize>, usize)> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
    };
    let magic = word(0)?;
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|d| word(4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok((magic, dims, 4 + 4 * ndim))
}

fn write_header(out: &mut Vec<u8>, dims: &[usize]) {
    out.extend_from_slice(&(0x0800u32 | dims.len() as u32).to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
}

/// Decode an image/label file pair. `num_classes` defaults to `max label + 1`.
pub fn decode_idx(
    images: &[u8],
    labels: &[u8],
    num_classes: Option<usize>,
    name: impl Into<String>,
    split: Split,
) -> Result<Dataset> {
    let (magic, dims, off) = header(images, "images")?;
    let shape = match (magic, dims.as_slice()) {
        (IDX_IMAGES_MAGIC, &[n, h, w]) => [n, 1, h, w],
        (IDX_COLOR_IMAGES_MAGIC, &[n, c, h, w]) => [n, c, h, w],
        _ => {
            return Err(Error::Format(format!(
                "images: bad magic {magic:#010x} (expected {IDX_IMAGES_MAGIC:#010x})"
            )))
        }
    };
    let (lmagic, ldims, loff) = header(labels, "labels")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels: bad magic {lmagic:#010x} (expected {IDX_LABELS_MAGIC:#010x})"
        )));
    }
    if ldims[0] != shape[0] {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            shape[0], ldims[0]
        )));
    }
    let numel: usize = shape.iter().product();
    let pixels = images
        .get(off..off + numel)
        .ok_or_else(|| Error::Format(String::from("images: truncated payload")))?;
    if images.len() != off + numel {
        return Err(Error::Format(String::from("images: trailing bytes")));
    }
    let raw_labels = labels
        .get(loff..loff + ldims[0])
        .ok_or_else(|| Error::Format(String::from("labels: truncated payload")))?;
    if labels.len() != loff + ldims[0] {
        return Err(Error::Format(String::from("labels: trailing bytes")));
    }
    let label_vec: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = num_classes.unwrap_or_else(|| label_vec.iter().max().map_or(0, |m| m + 1));
    let data = pixels.iter().map(|&b| byte_to_pixel(b)).collect();
    Dataset::new(Tensor::new(&shape, data)?, label_vec, classes, name, split)
}

pub fn encode_idx_images(ds: &Dataset) -> Vec<u8> {
    let s = ds.images.shape();
    let mut out = Vec::with_capacity(20 + ds.images.numel());
    if s[1] == 1 {
        write_header(&mut out, &[s[0], s[2], s[3]]);
    } else {
        write_header(&mut out, s);
    }
    out.extend(ds.images.data().iter().map(|&v| pixel_to_byte(v)));
    out
}

pub fn encode_idx_labels(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + ds.len());
    write_header(&mut out, &[ds.len()]);
    for &l in &ds.labels {
        let b = u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit a byte")))?;
        out.push(b);
    }
    Ok(out)
}
