//! IDX (MNIST) file parsing. All header integers are big-endian.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, IdxError, Result};
use crate::linalg::Matrix;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], header: usize, len: usize) -> Result<&'a [u8]> {
    let expected = header + len;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            found: bytes.len(),
        }
        .into());
    }
    if bytes.len() > expected {
        return Err(Error::arg(format!(
            "IDX file has {} trailing bytes after the promised payload",
            bytes.len() - expected
        )));
    }
    Ok(&bytes[header..])
}

/// Parses an image file into an `n × (rows·cols)` matrix scaled to [0, 1].
pub fn parse_images(bytes: &[u8]) -> Result<Matrix> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let d = rows * cols;
    let pixels = body(bytes, 16, n * d)?;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Matrix::new(n, d, data)
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let labels = body(bytes, 8, n)?;
    if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= CLASSES) {
        return Err(IdxError::BadLabel(bad).into());
    }
    Ok(labels.to_vec())
}

pub fn one_hot(labels: &[u8], classes: usize) -> Matrix {
    Matrix::from_fn(labels.len(), classes, |r, c| f64::from(usize::from(labels[r]) == c))
}

/// Loads an image/label file pair into a dataset with one-hot labels.
pub fn load_mnist(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_images(&fs::read(images)?)?;
    let lab = parse_labels(&fs::read(labels)?)?;
    if x.rows() != lab.len() {
        return Err(IdxError::CountMismatch {
            images: x.rows(),
            labels: lab.len(),
        }
        .into());
    }
    let name = images
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mnist".into());
    Ok(Dataset {
        name,
        y: one_hot(&lab, CLASSES),
        x,
        labels: Some(lab),
    })
}

/// Training and test splits from a directory holding the four standard
/// uncompressed files.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_mnist(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_mnist(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}
