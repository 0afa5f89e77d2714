//! MNIST IDX and CIFAR-10 binary readers and writers.

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

fn idx_err(detail: impl Into<String>) -> Error {
    Error::Format {
        format: "IDX",
        detail: detail.into(),
    }
}

fn be_u32(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| idx_err(format!("truncated header ({} bytes)", buf.len())))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(buf: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(buf, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(buf, 4)? as usize;
    let rows = be_u32(buf, 8)? as usize;
    let cols = be_u32(buf, 12)? as usize;
    let need = n * rows * cols;
    let body = &buf[16..];
    if body.len() != need {
        return Err(idx_err(format!("expected {need} pixel bytes, found {}", body.len())));
    }
    Ok((n, rows, cols, body))
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(buf, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(buf, 4)? as usize;
    let body = &buf[8..];
    if body.len() != n {
        return Err(idx_err(format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body)
}

/// Loads an MNIST image/label file pair; pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let ibuf = read(images_path.as_ref())?;
    let lbuf = read(labels_path.as_ref())?;
    let (n, rows, cols, pixels) = parse_idx_images(&ibuf)?;
    let labels = parse_idx_labels(&lbuf)?;
    if labels.len() != n {
        return Err(idx_err(format!("{n} images but {} labels", labels.len())));
    }
    let images = Tensor::new([n, 1, rows, cols], pixels.iter().map(|&b| b as f32 / 255.0).collect())?;
    Dataset::new(images, labels.iter().map(|&l| l as usize).collect(), 10, split)
}

/// Loads the canonical MNIST files from `dir` (`train-*` or `t10k-*`).
pub fn load_mnist_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = dir.as_ref();
    load_mnist_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

pub fn encode_idx_images(images: &[u8], n: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(images);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Parses concatenated 3073-byte CIFAR-10 records.
pub fn parse_cifar_records(buf: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if buf.is_empty() || buf.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format {
            format: "CIFAR-10",
            detail: format!("{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records", buf.len()),
        });
    }
    let n = buf.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in buf.chunks_exact(CIFAR_RECORD_BYTES) {
        if rec[0] > 9 {
            return Err(Error::Format {
                format: "CIFAR-10",
                detail: format!("label byte {} out of range", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (px, lb) = parse_cifar_records(&read(p.as_ref())?)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    let n = labels.len();
    Dataset::new(Tensor::new([n, 3, 32, 32], pixels)?, labels, 10, split)
}

/// Loads `data_batch_{1..5}.bin` or `test_batch.bin` from `dir` (or its
/// `cifar-10-batches-bin` subdirectory).
pub fn load_cifar10_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let mut dir = dir.as_ref().to_path_buf();
    if dir.join("cifar-10-batches-bin").is_dir() {
        dir.push("cifar-10-batches-bin");
    }
    let paths: Vec<_> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    load_cifar10_bin(&paths, split)
}

/// Encodes `[N, 3, 32, 32]` images in `[0, 1]` as CIFAR-10 records.
pub fn encode_cifar_records(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.images.shape()[1..] != [3, 32, 32] {
        return Err(Error::shape("encode_cifar_records", ds.images.shape(), &[0, 3, 32, 32]));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_BYTES);
    for (img, &label) in ds.images.data().chunks(CIFAR_RECORD_BYTES - 1).zip(&ds.labels) {
        out.push(label as u8);
        out.extend(img.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

/// Encodes a single-channel dataset as an IDX image/label byte pair.
pub fn encode_idx_dataset(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = ds.images.shape();
    if s[1] != 1 {
        return Err(Error::shape("encode_idx_dataset", s, &[s[0], 1, s[2], s[3]]));
    }
    let px: Vec<u8> = ds.images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let labels: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    Ok((encode_idx_images(&px, s[0], s[2], s[3]), encode_idx_labels(&labels)))
}
