//! Reader for the MNIST IDX files.

use std::fs;
use std::path::Path;

use image::GrayImage;

use crate::error::{Error, IoContext, Result};

pub const MNIST_SIDE: u32 = 28;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// A clean labeled digit from the source corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanDigit {
    pub label: u8,
    pub image: GrayImage,
}

/// Source corpus with its standard train/test partition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MnistCorpus {
    pub train: Vec<CleanDigit>,
    pub test: Vec<CleanDigit>,
}

impl MnistCorpus {
    /// Loads the four uncompressed IDX files from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Io {
                path: dir.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST directory not found"),
            });
        }
        Ok(Self {
            train: read_pair(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?,
            test: read_pair(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?,
        })
    }

    pub fn count(partition: &[CleanDigit], digit: u8) -> usize {
        partition.iter().filter(|d| d.label == digit).count()
    }
}

fn read_pair(images: &Path, labels: &Path) -> Result<Vec<CleanDigit>> {
    let image_bytes = fs::read(images).at(images)?;
    let label_bytes = fs::read(labels).at(labels)?;
    let images_parsed = parse_images(&image_bytes).map_err(|e| Error::Corpus(format!("{}: {e}", images.display())))?;
    let labels_parsed = parse_labels(&label_bytes).map_err(|e| Error::Corpus(format!("{}: {e}", labels.display())))?;
    if images_parsed.len() != labels_parsed.len() {
        return Err(Error::Corpus(format!(
            "{} images but {} labels",
            images_parsed.len(),
            labels_parsed.len()
        )));
    }
    Ok(images_parsed
        .into_iter()
        .zip(labels_parsed)
        .map(|(image, label)| CleanDigit { label, image })
        .collect())
}

fn be_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, String> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| "truncated header".to_string())
}

pub fn parse_images(bytes: &[u8]) -> std::result::Result<Vec<GrayImage>, String> {
    if be_u32(bytes, 0)? != 0x0000_0803 {
        return Err("bad magic for an image file".into());
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)?;
    let cols = be_u32(bytes, 12)?;
    let len = (rows * cols) as usize;
    let body = &bytes[16..];
    if body.len() != count * len {
        return Err(format!("expected {} pixel bytes, found {}", count * len, body.len()));
    }
    Ok(body
        .chunks_exact(len)
        .map(|px| GrayImage::from_raw(cols, rows, px.to_vec()).expect("chunk matches dims"))
        .collect())
}

pub fn parse_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, String> {
    if be_u32(bytes, 0)? != 0x0000_0801 {
        return Err("bad magic for a label file".into());
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(format!("expected {count} labels, found {}", body.len()));
    }
    if let Some(bad) = body.iter().find(|&&l| l > 9) {
        return Err(format!("label {bad} out of range"));
    }
    Ok(body.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, side: u32) -> Vec<u8> {
        let mut out = vec![0, 0, 8, 3];
        for v in [n, side, side] {
            out.extend(v.to_be_bytes());
        }
        out.extend((0..n * side * side).map(|i| (i % 256) as u8));
        out
    }

    #[test]
    fn parses_well_formed_files() {
        let imgs = parse_images(&idx_images(2, 3)).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[1].get_pixel(0, 0).0[0], 9);
        let labels = parse_labels(&[0, 0, 8, 1, 0, 0, 0, 2, 7, 3]).unwrap();
        assert_eq!(labels, vec![7, 3]);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut bytes = idx_images(2, 3);
        bytes.pop();
        assert!(parse_images(&bytes).is_err());
        assert!(parse_labels(&[0, 0, 8, 3, 0, 0, 0, 0]).is_err());
        assert!(parse_labels(&[0, 0, 8, 1, 0, 0, 0, 1, 12]).is_err());
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let err = MnistCorpus::load(Path::new("/nonexistent/mnist")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
