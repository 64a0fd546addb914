use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::grouped::GroupedDataset;
use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Side length images are zero-padded to.
pub const PADDED_SIZE: usize = 32;
/// Digits drawn with a closed loop.
pub const CIRCLE_DIGITS: [u8; 4] = [0, 6, 8, 9];

/// Raw `u8` images as stored in an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(r: &mut Reader<'_>, magic: u32) -> Result<()> {
    let at = r.offset();
    let got = u32::from_be_bytes(r.take(4, "IDX magic")?.try_into().unwrap());
    if got != magic {
        return Err(Error::format(at, format!("bad IDX magic {got:#010x}, expected {magic:#010x}")));
    }
    Ok(())
}

fn be_u32(r: &mut Reader<'_>, what: &str) -> Result<usize> {
    Ok(u32::from_be_bytes(r.take(4, what)?.try_into().unwrap()) as usize)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut r = Reader::new(bytes);
    header(&mut r, IDX_IMAGES_MAGIC)?;
    let count = be_u32(&mut r, "image count")?;
    let rows = be_u32(&mut r, "row count")?;
    let cols = be_u32(&mut r, "column count")?;
    let pixels = r.take(count * rows * cols, "image pixels")?.to_vec();
    r.finish("IDX images")?;
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader::new(bytes);
    header(&mut r, IDX_LABELS_MAGIC)?;
    let count = be_u32(&mut r, "label count")?;
    let labels = r.take(count, "labels")?.to_vec();
    r.finish("IDX labels")?;
    Ok(labels)
}

/// Reads an IDX image file, gzip-compressed or not.
pub fn load_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read_maybe_gzip(path)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read_maybe_gzip(path)?)
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes IDX bytes, gzip-compressed when `gzip` is set.
pub fn write_idx(path: &Path, bytes: &[u8], gzip: bool) -> Result<()> {
    if gzip {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        std::io::Write::write_all(&mut enc, bytes)?;
        std::fs::write(path, enc.finish()?)?;
    } else {
        std::fs::write(path, bytes)?;
    }
    Ok(())
}

pub fn is_circle_digit(digit: usize) -> bool {
    CIRCLE_DIGITS.iter().any(|&d| d as usize == digit)
}

/// Builds the digit dataset: pixels scaled to [0, 1] and centred in a
/// 32x32 zero canvas; content label 1 for circle digits, private label is
/// the digit.
pub fn mnist_dataset(images: &IdxImages, labels: &[u8]) -> Result<GroupedDataset> {
    if images.count != labels.len() {
        return Err(Error::shape("IDX labels", &[images.count], &[labels.len()]));
    }
    if images.rows > PADDED_SIZE || images.cols > PADDED_SIZE {
        return Err(Error::Config(format!(
            "images {}x{} exceed the {PADDED_SIZE}x{PADDED_SIZE} canvas",
            images.rows, images.cols
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Config(format!("digit label {bad} out of range")));
    }
    let (top, left) = ((PADDED_SIZE - images.rows) / 2, (PADDED_SIZE - images.cols) / 2);
    let plane = PADDED_SIZE * PADDED_SIZE;
    let mut data = vec![0.0; images.count * plane];
    for n in 0..images.count {
        for r in 0..images.rows {
            for c in 0..images.cols {
                let p = images.pixels[(n * images.rows + r) * images.cols + c];
                data[n * plane + (r + top) * PADDED_SIZE + c + left] = p as f64 / 255.0;
            }
        }
    }
    let samples = Tensor::from_vec(&[images.count, 1, PADDED_SIZE, PADDED_SIZE], data)?;
    let content = labels.iter().map(|&l| is_circle_digit(l as usize) as usize).collect();
    let private = labels.iter().map(|&l| l as usize).collect();
    GroupedDataset::with_classes(samples, content, private, 2, 10)
}

/// Loads an image/label IDX pair into a [`mnist_dataset`].
pub fn load_mnist(images: &Path, labels: &Path) -> Result<GroupedDataset> {
    mnist_dataset(&load_idx_images(images)?, &load_idx_labels(labels)?)
}

/// Inverse of [`mnist_dataset`] for the pixels: crops the canvas back to
/// `rows x cols` and rescales to bytes.
pub fn to_idx_images(dataset: &GroupedDataset, rows: usize, cols: usize) -> Result<IdxImages> {
    if dataset.item_shape() != [1, PADDED_SIZE, PADDED_SIZE] {
        return Err(Error::shape("IDX export", &[1, PADDED_SIZE, PADDED_SIZE], dataset.item_shape()));
    }
    let (top, left) = ((PADDED_SIZE - rows) / 2, (PADDED_SIZE - cols) / 2);
    let mut pixels = Vec::with_capacity(dataset.len() * rows * cols);
    for n in 0..dataset.len() {
        let s = dataset.sample(n);
        for r in 0..rows {
            for c in 0..cols {
                let v = s[(r + top) * PADDED_SIZE + c + left];
                pixels.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(IdxImages {
        count: dataset.len(),
        rows,
        cols,
        pixels,
    })
}
