//! IDX binary format (the MNIST container): big-endian magic and dimension
//! sizes, then the raw payload. Images use magic `0x00000803`, labels
//! `0x00000801`. Parse failures carry the byte offset.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw images with pixels rescaled to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct RawImages {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// `count × (height·width)` pixel matrix, row per image.
    pub pixels: Matrix,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32_be(&mut self, what: &str) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(Error::IdxFormat {
                offset: self.pos as u64,
                what: format!(
                    "truncated while reading {what}: need 4 bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn payload(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::IdxFormat {
                offset: self.pos as u64,
                what: format!(
                    "truncated {what}: need {len} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

pub fn parse_images(bytes: &[u8]) -> Result<RawImages> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.u32_be("image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::IdxFormat {
            offset: 0,
            what: format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let count = c.u32_be("image count")? as usize;
    let height = c.u32_be("image height")? as usize;
    let width = c.u32_be("image width")? as usize;
    let total = count
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or(Error::IdxFormat {
            offset: 4,
            what: format!("dimension overflow: {count} x {height} x {width}"),
        })?;
    let payload = c.payload(total, "pixel payload")?;
    let pixels = Matrix::from_vec(
        count,
        height * width,
        payload.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    Ok(RawImages {
        count,
        height,
        width,
        pixels,
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.u32_be("label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::IdxFormat {
            offset: 0,
            what: format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let count = c.u32_be("label count")? as usize;
    let payload = c.payload(count, "label payload")?;
    Ok(payload.to_vec())
}

pub fn load_images(path: &Path) -> Result<RawImages> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_images(&bytes)
}

pub fn load_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_labels(&bytes)
}

/// Serializes images back to IDX bytes; used to craft fixtures.
pub fn encode_images(images: &RawImages) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count as u32).to_be_bytes());
    out.extend_from_slice(&(images.height as u32).to_be_bytes());
    out.extend_from_slice(&(images.width as u32).to_be_bytes());
    for v in images.pixels.as_slice() {
        out.push((v * 255.0).round() as u8);
    }
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
