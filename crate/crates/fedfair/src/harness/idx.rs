//! IDX (MNIST byte layout) reader: big-endian magic + dims, raw u8 payload.
//! Digits become a binary task (`1[digit >= threshold]`) with digit parity
//! as the sensitive attribute.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use ndarray::Array2;

use crate::dataset::TabularDataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an images/labels IDX pair. Pixels are scaled to `[0, 1]`; the
/// binary label is `1[digit >= digit_threshold]`; the group id is the
/// digit's parity (0 even, 1 odd).
pub fn load_idx_with(
    images_path: &Path,
    labels_path: &Path,
    digit_threshold: u8,
) -> Result<TabularDataset> {
    let (count, rows, cols, pixels) = read_images(images_path)?;
    let digits = read_labels(labels_path)?;
    if digits.len() != count {
        return Err(Error::IdxParse {
            offset: 4,
            message: format!(
                "image count {count} does not match label count {}",
                digits.len()
            ),
        });
    }

    let p = rows * cols;
    let mut features = Array2::zeros((count, p));
    for i in 0..count {
        for j in 0..p {
            features[[i, j]] = f64::from(pixels[i * p + j]) / 255.0;
        }
    }
    let labels = digits
        .iter()
        .map(|&d| f64::from(d >= digit_threshold))
        .collect();
    let group = digits.iter().map(|&d| usize::from(d % 2 == 1)).collect();
    TabularDataset::new(features, labels, Some(group))
}

/// [`load_idx_with`] at the conventional threshold of 5.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<TabularDataset> {
    load_idx_with(images_path, labels_path, 5)
}

struct Cursor<'a> {
    reader: std::io::BufReader<std::fs::File>,
    path: &'a Path,
    offset: u64,
}

impl<'a> Cursor<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(Self {
            reader: std::io::BufReader::new(file),
            path,
            offset: 0,
        })
    }

    fn fail(&self, message: String) -> Error {
        Error::IdxParse {
            offset: self.offset,
            message: format!("{}: {message}", self.path.display()),
        }
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let v = self
            .reader
            .read_u32::<BigEndian>()
            .map_err(|e| self.fail(format!("reading {what}: {e}")))?;
        self.offset += 4;
        Ok(v)
    }

    fn read_payload(&mut self, expected: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(expected);
        self.reader
            .read_to_end(&mut buf)
            .map_err(|e| self.fail(format!("reading {what}: {e}")))?;
        if buf.len() != expected {
            return Err(self.fail(format!(
                "{what} payload has {} bytes, expected {expected} ({} missing)",
                buf.len(),
                expected.saturating_sub(buf.len())
            )));
        }
        self.offset += buf.len() as u64;
        Ok(buf)
    }
}

fn read_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut cur = Cursor::open(path)?;
    let magic = cur.read_u32("magic")?;
    if magic != IMAGES_MAGIC {
        return Err(cur.fail(format!(
            "bad images magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"
        )));
    }
    let count = cur.read_u32("image count")? as usize;
    let rows = cur.read_u32("row count")? as usize;
    let cols = cur.read_u32("column count")? as usize;
    let pixels = cur.read_payload(count * rows * cols, "pixel")?;
    Ok((count, rows, cols, pixels))
}

fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let mut cur = Cursor::open(path)?;
    let magic = cur.read_u32("magic")?;
    if magic != LABELS_MAGIC {
        return Err(cur.fail(format!(
            "bad labels magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"
        )));
    }
    let count = cur.read_u32("label count")? as usize;
    cur.read_payload(count, "label")
}
