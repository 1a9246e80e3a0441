//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! pixel bytes (1024 red, 1024 green, 1024 blue, each row-major 32×32).

use std::fs;
use std::path::{Path, PathBuf};

use super::dataset::{Dataset, Preprocessing, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 3073;
const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
const CLASSES: usize = 10;

fn split_for(path: &Path) -> Split {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.starts_with("test") {
        Split::Test
    } else {
        Split::Train
    }
}

fn parse(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::format(
            path,
            format!(
                "size {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::format(path, format!("record {i} has label {label}")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

/// Loads one batch file as an `N×3×32×32` dataset scaled to `[0, 1]`.
pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (pixels, labels) = parse(&bytes, path)?;
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 3, SIDE, SIDE], pixels)?,
        labels,
        CLASSES,
        split_for(path),
    )
}

/// Loads `data_batch_1.bin` .. `data_batch_5.bin` or `test_batch.bin` from
/// the standard binary distribution directory.
pub fn load_cifar10_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
        let (p, l) = parse(&bytes, f)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 3, SIDE, SIDE], pixels)?,
        labels,
        CLASSES,
        split,
    )
}

/// Applies a `D×D` whitening matrix (raw little-endian `f64`, row-major,
/// `D = C·H·W`) to every image: `x ← M x`.
pub fn apply_whitening(ds: &Dataset, matrix_path: impl AsRef<Path>) -> Result<Dataset> {
    let path = matrix_path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let d: usize = ds.sample_shape().iter().product();
    if bytes.len() != d * d * 8 {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes for a {d}x{d} matrix, got {}",
                d * d * 8,
                bytes.len()
            ),
        ));
    }
    let m: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut out = ds.clone();
    for img in out.images.data_mut().chunks_mut(d) {
        let x = img.to_vec();
        for (r, v) in img.iter_mut().enumerate() {
            *v = m[r * d..(r + 1) * d]
                .iter()
                .zip(&x)
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    out.preprocessing = Preprocessing::GcnWhitened;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_sizes() {
        let p = Path::new("x.bin");
        assert!(matches!(parse(&[], p), Err(Error::Format { .. })));
        assert!(matches!(
            parse(&vec![0u8; CIFAR_RECORD_BYTES + 1], p),
            Err(Error::Format { .. })
        ));
        let mut bad = vec![0u8; CIFAR_RECORD_BYTES];
        bad[0] = 10;
        assert!(matches!(parse(&bad, p), Err(Error::Format { .. })));
    }

    #[test]
    fn full_batch_record_count() {
        let bytes = vec![3u8; CIFAR_RECORD_BYTES * 10_000];
        let (px, labels) = parse(&bytes, Path::new("data_batch_1.bin")).unwrap();
        assert_eq!(labels.len(), 10_000);
        assert_eq!(px.len(), 10_000 * PIXELS);
    }

    #[test]
    fn split_from_file_name() {
        assert_eq!(split_for(Path::new("/d/test_batch.bin")), Split::Test);
        assert_eq!(split_for(Path::new("/d/data_batch_2.bin")), Split::Train);
    }
}
