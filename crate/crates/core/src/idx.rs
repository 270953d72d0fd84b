//! Reader for the IDX binary format (MNIST distribution files).
//!
//! Layout: a big-endian u32 magic (`0x00000803` for rank-3 u8 images,
//! `0x00000801` for rank-1 u8 labels), one big-endian u32 per dimension,
//! then the raw bytes.

use std::path::Path;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses a header with `dims` dimensions and returns them with the payload.
fn parse<'a>(bytes: &'a [u8], path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let shape = (0..dims)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * dims;
    let expected = header + shape.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((shape, &bytes[header..expected]))
}

/// Loads an image/label file pair. Pixels are scaled to [0, 1]; the class
/// count is `max(label) + 1` (at least 2).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read(ip)?;
    let label_bytes = read(lp)?;
    let (shape, pixels) = parse(&image_bytes, ip, IMAGES_MAGIC, 3)?;
    let (lshape, labels) = parse(&label_bytes, lp, LABELS_MAGIC, 1)?;
    let (n, d) = (shape[0], shape[1] * shape[2]);
    if lshape[0] != n {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: lshape[0],
        });
    }
    if n == 0 || d == 0 {
        return Err(Error::EmptyBatch("load_idx"));
    }
    let features = Matrix::from_vec(n, d, pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    LabeledDataset::new(features, labels, classes)
}
