//! On-disk formats: IDX datasets with JSON sidecars, checkpoint
//! directories, CSV tables and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ilens_core::data::{decode_idx, encode_idx_images, encode_idx_labels, Dataset, Split};
use ilens_core::train::{decode_weights, encode_weights, CheckpointManifest};
use ilens_core::zoo::Model;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// `v` with 9 significant digits, like C's `%.9g`.
pub fn fmt_float(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    create_dir(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let bytes = read(path)?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| CliError::Schema {
        path: format!("{}:{}", path.display(), e.path()),
        message: e.into_inner().to_string(),
    })
}

/// A CSV table built in memory and written in one go.
pub struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(header.iter().map(|s| s.as_ref()))
            .expect("in-memory write");
        Self { writer }
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        self.writer
            .write_record(cells.iter().map(|s| s.as_ref()))
            .expect("in-memory write");
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.writer.into_inner().expect("in-memory flush")
    }

    pub fn write(self, path: &Path) -> CliResult<()> {
        write_atomic(path, &self.into_bytes())
    }
}

pub fn read_csv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let bytes = read(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let bad = |e: csv::Error| CliError::Other(format!("{}: {e}", path.display()));
    let header = r.headers().map_err(bad)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()
        .map_err(bad)?;
    Ok((header, rows))
}

/// Metadata written next to every IDX pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub name: String,
    pub n: usize,
    pub classes: usize,
    /// `[channels, height, width]`.
    pub image_shape: [usize; 3],
    pub seed: u64,
}

fn split_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}-images.idx")),
        dir.join(format!("{stem}-labels.idx")),
        dir.join(format!("{stem}.json")),
    )
}

pub fn write_dataset(dir: &Path, stem: &str, ds: &Dataset, seed: u64) -> CliResult<Vec<PathBuf>> {
    let (images, labels, meta) = split_paths(dir, stem);
    write_atomic(&images, &encode_idx_images(ds))?;
    write_atomic(&labels, &encode_idx_labels(ds)?)?;
    let s = ds.image_shape();
    write_json(
        &meta,
        &DatasetSidecar {
            name: ds.name.clone(),
            n: ds.len(),
            classes: ds.num_classes,
            image_shape: [s.channels, s.height, s.width],
            seed,
        },
    )?;
    Ok(vec![images, labels, meta])
}

pub fn read_idx_pair(images: &Path, labels: &Path, classes: Option<usize>, name: &str, split: Split) -> CliResult<Dataset> {
    let img = read(images)?;
    let lab = read(labels)?;
    Ok(decode_idx(&img, &lab, classes, name, split)?)
}

pub fn read_dataset(dir: &Path, stem: &str, split: Split) -> CliResult<Dataset> {
    let (images, labels, meta) = split_paths(dir, stem);
    let side: DatasetSidecar = read_json(&meta)?;
    let ds = read_idx_pair(&images, &labels, Some(side.classes), &side.name, split)?;
    if ds.len() != side.n {
        return Err(CliError::Core(ilens_core::Error::Consistency(format!(
            "{} holds {} samples, sidecar says {}",
            images.display(),
            ds.len(),
            side.n
        ))));
    }
    Ok(ds)
}

pub fn save_checkpoint(dir: &Path, model: &Model<f32>, manifest: &CheckpointManifest) -> CliResult<()> {
    create_dir(dir)?;
    write_atomic(&dir.join("weights.bin"), &encode_weights(model))?;
    write_json(&dir.join("manifest.json"), manifest)
}

pub fn load_checkpoint(dir: &Path) -> CliResult<(Model<f32>, CheckpointManifest)> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    let bytes = read(&dir.join("weights.bin"))?;
    let model = decode_weights(&manifest, &bytes)?;
    Ok((model, manifest))
}

/// Path of `p` relative to `base` with forward slashes, or `p` itself.
pub fn relative(base: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(base).unwrap_or(p);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_have_nine_significant_digits() {
        assert_eq!(fmt_float(0.0), "0");
        assert_eq!(fmt_float(1.0), "1");
        assert_eq!(fmt_float(-0.5), "-0.5");
        assert_eq!(fmt_float(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_float(2.0 / 3.0), "0.666666667");
        assert_eq!(fmt_float(123456789.4), "123456789");
        assert_eq!(fmt_float(1234567890.0), "1.23456789e+09");
        assert_eq!(fmt_float(1.0e-7), "1e-07");
        assert_eq!(fmt_float(0.00012345678912), "0.000123456789");
        assert_eq!(fmt_float(9.9999999999), "10");
        assert_eq!(fmt_float(f64::NAN), "nan");
    }

    proptest::proptest! {
        #[test]
        fn formatted_floats_round_trip_to_nine_digits(v in -1e12f64..1e12) {
            let s = fmt_float(v);
            let back: f64 = s.parse().unwrap();
            let tol = v.abs() * 5e-9 + 1e-300;
            proptest::prop_assert!((back - v).abs() <= tol, "{} -> {}", v, s);
            proptest::prop_assert!(!s.contains(','));
        }
    }
}
