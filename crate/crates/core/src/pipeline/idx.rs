//! IDX files (the MNIST container): big-endian magic, dimension sizes, then raw `u8` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::InputShape;
use crate::mfa::MaskedImage;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Complete images scaled to `[0, 1]` with their labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<MaskedImage>,
    pub labels: Vec<u8>,
    pub shape: InputShape,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .iter()
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0)
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads at most `limit` examples (all when `None`).
pub fn load_idx_limit(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img_bytes = read(images_path)?;
    let lbl_bytes = read(labels_path)?;

    if read_u32(&img_bytes, 0) != Some(IMAGES_MAGIC) {
        return Err(Error::format(images_path, "bad magic, expected 0x00000803"));
    }
    if read_u32(&lbl_bytes, 0) != Some(LABELS_MAGIC) {
        return Err(Error::format(labels_path, "bad magic, expected 0x00000801"));
    }
    let header = |i: usize| {
        read_u32(&img_bytes, 4 * i)
            .map(|v| v as usize)
            .ok_or_else(|| Error::format(images_path, "truncated header"))
    };
    let (count, rows, cols) = (header(1)?, header(2)?, header(3)?);
    let label_count = read_u32(&lbl_bytes, 4)
        .ok_or_else(|| Error::format(labels_path, "truncated header"))?
        as usize;
    if count != label_count {
        return Err(Error::format(
            images_path,
            format!("{count} images but {label_count} labels"),
        ));
    }
    let pixels = rows * cols;
    if img_bytes.len() < 16 + count * pixels {
        return Err(Error::format(images_path, "truncated image payload"));
    }
    if lbl_bytes.len() < 8 + count {
        return Err(Error::format(labels_path, "truncated label payload"));
    }

    let take = limit.map_or(count, |l| l.min(count));
    let images = img_bytes[16..16 + take * pixels]
        .chunks_exact(pixels)
        .map(|raw| MaskedImage::complete(raw.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect();
    Ok(Dataset {
        images,
        labels: lbl_bytes[8..8 + take].to_vec(),
        shape: InputShape::new(1, rows, cols),
    })
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    load_idx_limit(images_path, labels_path, None)
}

/// Writes `u8` images (`rows × cols` each) and labels as an IDX pair.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    images: &[Vec<u8>],
    labels: &[u8],
    rows: usize,
    cols: usize,
) -> Result<()> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    if images.len() != labels.len() || images.iter().any(|im| im.len() != rows * cols) {
        return Err(Error::InvalidParameter("inconsistent IDX payload".into()));
    }
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    images.iter().for_each(|im| img.extend_from_slice(im));
    let mut lbl = Vec::with_capacity(8 + labels.len());
    for v in [LABELS_MAGIC, labels.len() as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend_from_slice(labels);
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lbl).map_err(|e| Error::io(labels_path, e))
}
