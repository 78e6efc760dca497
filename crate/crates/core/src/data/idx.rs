//! IDX image/label files (the MNIST distribution format).
//!
//! Both files start with a big-endian magic number followed by big-endian
//! `u32` dimension sizes; the payload is unsigned bytes.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::Dataset;
use crate::model::Batch;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{file}: bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic {
        file: String,
        expected: u32,
        found: u32,
    },
    #[error("{file}: truncated ({needed} bytes needed, {available} present)")]
    Truncated {
        file: String,
        needed: usize,
        available: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
}

fn read_u32(bytes: &[u8], offset: usize, file: &str) -> Result<u32, LoadError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| LoadError::Truncated {
            file: file.to_string(),
            needed: offset + 4,
            available: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, file: &str) -> Result<(), LoadError> {
    let found = read_u32(bytes, 0, file)?;
    if found != expected {
        return Err(LoadError::BadMagic {
            file: file.to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, file: &str) -> Result<&'a [u8], LoadError> {
    bytes.get(offset..offset + len).ok_or(LoadError::Truncated {
        file: file.to_string(),
        needed: offset + len,
        available: bytes.len(),
    })
}

/// Parse in-memory IDX image and label buffers.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset, LoadError> {
    check_magic(images, IMAGES_MAGIC, "images")?;
    check_magic(labels, LABELS_MAGIC, "labels")?;

    let count = read_u32(images, 4, "images")? as usize;
    let rows = read_u32(images, 8, "images")? as usize;
    let cols = read_u32(images, 12, "images")? as usize;
    let label_count = read_u32(labels, 4, "labels")? as usize;
    if count != label_count {
        return Err(LoadError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let dim = rows * cols;
    let pixels = payload(images, 16, count * dim, "images")?;
    let label_bytes = payload(labels, 8, count, "labels")?;

    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    // Batch::new only fails on shape mismatch, which the reads above rule out.
    let samples = Batch::new(features, labels, dim.max(1)).expect("consistent IDX shape");
    Ok(Dataset {
        samples,
        num_classes,
    })
}

/// Load an IDX image file and its label file. Pixels are scaled to `[0, 1]`
/// and each image is flattened to `rows * cols` features.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, LoadError> {
    let read = |p: &Path| {
        fs::read(p).map_err(|source| LoadError::Io {
            file: p.display().to_string(),
            source,
        })
    };
    let images = read(images_path.as_ref())?;
    let labels = read(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}
