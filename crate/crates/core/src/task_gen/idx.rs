//! Big-endian IDX files of 28×28 `u8` images and their labels.

use std::path::Path;

use crate::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;

/// Images stored row-major, `PIXELS` bytes each, with one label per image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSet {
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * PIXELS {
            return Err(Error::Format(format!(
                "{} pixel bytes for {} labels",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    /// First `n` images.
    pub fn truncate(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels[..n * PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != expected {
        return Err(Error::Format(format!(
            "{what}: magic {magic:#010x}, expected {expected:#010x}"
        )));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    match bytes.len().checked_sub(start) {
        Some(have) if have == len => Ok(&bytes[start..]),
        Some(have) if have > len => Err(Error::Format(format!("{what}: {} trailing bytes", have - len))),
        _ => Err(Error::Format(format!("{what}: truncated payload"))),
    }
}

/// Parses an image file; dimensions must be `count × 28 × 28`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, Vec<u8>)> {
    let what = "image file";
    check_magic(bytes, IMAGE_MAGIC, what)?;
    let count = be_u32(bytes, 4, what)? as usize;
    let (rows, cols) = (be_u32(bytes, 8, what)? as usize, be_u32(bytes, 12, what)? as usize);
    if (rows, cols) != (SIDE, SIDE) {
        return Err(Error::Format(format!(
            "{what}: images are {rows}×{cols}, expected 28×28"
        )));
    }
    let data = payload(bytes, 16, count * PIXELS, what)?;
    Ok((count, data.to_vec()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let what = "label file";
    check_magic(bytes, LABEL_MAGIC, what)?;
    let count = be_u32(bytes, 4, what)? as usize;
    Ok(payload(bytes, 8, count, what)?.to_vec())
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<ImageSet> {
    let (count, pixels) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != count {
        return Err(Error::Format(format!("{count} images but {} labels", labels.len())));
    }
    ImageSet::new(pixels, labels)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageSet> {
    parse_idx(&std::fs::read(images_path)?, &std::fs::read(labels_path)?)
}

/// Encodes `set` as an image file and a label file.
pub fn encode_idx(set: &ImageSet) -> (Vec<u8>, Vec<u8>) {
    let n = set.len() as u32;
    let mut images = Vec::with_capacity(16 + set.pixels.len());
    for v in [IMAGE_MAGIC, n, SIDE as u32, SIDE as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend_from_slice(&set.pixels);
    let mut labels = Vec::with_capacity(8 + set.labels.len());
    for v in [LABEL_MAGIC, n] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend_from_slice(&set.labels);
    (images, labels)
}
