//! FMAP grid files.
//!
//! Layout (little-endian): magic `FMAP`, then `u32` version (1), width,
//! height, channel count, then `count * height * width` `f32` values,
//! channel-major and row-major within a channel.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// A stack of equally sized `f32` grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Channels {
    width: usize,
    height: usize,
    count: usize,
    data: Vec<f32>,
}

impl Channels {
    pub fn zeros(width: usize, height: usize, count: usize) -> Self {
        Channels {
            width,
            height,
            count,
            data: vec![0.0; width * height * count],
        }
    }

    pub fn from_vec(width: usize, height: usize, count: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * count {
            return Err(Error::DimensionMismatch {
                what: "channel data".into(),
                expected: width * height * count,
                found: data.len(),
            });
        }
        Ok(Channels {
            width,
            height,
            count,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, c: usize, x: usize, y: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(FMAP_MAGIC);
        for v in [FMAP_VERSION, self.width as u32, self.height as u32, self.count as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, message: String| Error::Parse {
            what: "FMAP".into(),
            location: format!("byte {offset}"),
            message,
        };
        if bytes.len() < HEADER_LEN {
            return Err(err(bytes.len(), format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
        }
        if &bytes[0..4] != FMAP_MAGIC {
            return Err(err(0, "missing FMAP magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != FMAP_VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let (width, height, count) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let values = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(count))
            .ok_or_else(|| err(8, "dimensions overflow".into()))?;
        let expected = HEADER_LEN + 4 * values;
        if bytes.len() != expected {
            return Err(err(
                bytes.len().min(expected),
                format!("expected {expected} bytes for {count}x{height}x{width}, found {}", bytes.len()),
            ));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Channels {
            width,
            height,
            count,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Channels::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse { location, message, .. } => Error::Parse {
                what: path.display().to_string(),
                location,
                message,
            },
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let c = Channels::from_vec(2, 1, 1, vec![1.0, -2.5]).unwrap();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"FMAP");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&b[24..28], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn truncated_payload_names_offset() {
        let c = Channels::zeros(3, 3, 2);
        let mut b = c.to_bytes();
        b.truncate(b.len() - 3);
        match Channels::from_bytes(&b) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, format!("byte {}", b.len())),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let mut b = Channels::zeros(1, 1, 1).to_bytes();
        b[0] = b'X';
        assert!(Channels::from_bytes(&b).is_err());
    }
}
