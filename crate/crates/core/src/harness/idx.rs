//! IDX (MNIST-family) files: big-endian header, `u8` payload.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::image::ImageBatch;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated header: need {needed} bytes, file has {len}")]
    TruncatedHeader { needed: usize, len: usize },
    #[error("truncated data at offset {offset}: need {needed} bytes, file has {len}")]
    TruncatedData { offset: usize, needed: usize, len: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn header(bytes: &[u8], expected: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let needed = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(IdxError::TruncatedHeader { needed, len: bytes.len() });
    }
    let found = read_u32(bytes, 0);
    if found != expected {
        return Err(IdxError::BadMagic { found, expected });
    }
    if bytes.len() < needed {
        return Err(IdxError::TruncatedHeader { needed, len: bytes.len() });
    }
    Ok((0..dims).map(|i| read_u32(bytes, 4 + 4 * i) as usize).collect())
}

/// Parses an image file into `(count, rows, cols, pixels/255)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>), IdxError> {
    let dims = header(bytes, IMAGE_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let offset = 16;
    let needed = count * rows * cols;
    if bytes.len() - offset < needed {
        return Err(IdxError::TruncatedData { offset, needed, len: bytes.len() });
    }
    let pixels = bytes[offset..offset + needed].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((count, rows, cols, pixels))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    let count = header(bytes, LABEL_MAGIC, 1)?[0];
    let offset = 8;
    if bytes.len() - offset < count {
        return Err(IdxError::TruncatedData { offset, needed: count, len: bytes.len() });
    }
    Ok(bytes[offset..offset + count].iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io { path: path.display().to_string(), source })
}

/// Loads an image file and, if given, its label file. Without labels every
/// image gets label 0.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<ImageBatch, IdxError> {
    let (count, rows, cols, pixels) = parse_images(&read(images)?)?;
    let labels = match labels {
        Some(p) => parse_labels(&read(p)?)?,
        None => vec![0; count],
    };
    if labels.len() != count {
        return Err(IdxError::CountMismatch { images: count, labels: labels.len() });
    }
    Ok(ImageBatch::new((1, rows, cols), pixels, labels).expect("sizes checked"))
}

/// Serializes images (rounded to bytes) in IDX format.
pub fn encode_images(batch: &ImageBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + batch.pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [batch.len(), batch.height, batch.width] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(batch.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}
