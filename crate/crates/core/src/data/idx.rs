use std::fs;
use std::path::Path;

use super::{Dataset, Example};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let chunk = bytes.get(at..at + 4).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::WrongMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize, path: &Path) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Reads an IDX image/label pair (MNIST layout). Pixels are scaled by
/// 1/255; bias labels are left at 0 and the number of targets is taken as
/// `max(label) + 1`, at least 2.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip)?;
    let labels = fs::read(lp)?;

    check_magic(&images, IMAGES_MAGIC, ip)?;
    let count = read_u32(&images, 4, ip)? as usize;
    let rows = read_u32(&images, 8, ip)? as usize;
    let cols = read_u32(&images, 12, ip)? as usize;
    let pixels = rows * cols;

    check_magic(&labels, LABELS_MAGIC, lp)?;
    let label_count = read_u32(&labels, 4, lp)? as usize;
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    check_len(&images, 16 + count * pixels, ip)?;
    check_len(&labels, 8 + count, lp)?;

    let label_bytes = &labels[8..8 + count];
    let num_targets = label_bytes
        .iter()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0)
        .max(2);
    let examples = images[16..16 + count * pixels]
        .chunks(pixels.max(1))
        .zip(label_bytes)
        .map(|(px, &label)| Example {
            features: px.iter().map(|&p| f64::from(p) / 255.0).collect(),
            target: label as usize,
            bias: 0,
        })
        .collect();

    Ok(Dataset {
        examples,
        num_targets,
        num_bias: 1,
        feature_len: pixels,
        provenance: format!("idx {} / {}", ip.display(), lp.display()),
        seed: 0,
    })
}

/// Writes an IDX image/label pair. Images are `rows * cols` bytes each.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    rows: u32,
    cols: u32,
    images: &[Vec<u8>],
    labels: &[u8],
) -> Result<()> {
    let mut img = Vec::with_capacity(16 + images.len() * (rows * cols) as usize);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&rows.to_be_bytes());
    img.extend_from_slice(&cols.to_be_bytes());
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}
