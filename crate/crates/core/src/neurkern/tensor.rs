//! `TNSR` tensor files: magic, version byte, rank, little-endian `u32` dims,
//! then row-major little-endian `f32` data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 0x01;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.len() > u8::MAX as usize || n != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} do not match {} values", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one tensor from the front of `bytes`, returning it and the bytes consumed.
    pub fn from_bytes_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let bad = |reason: &str| Error::format("tensor file", 0, reason.to_string());
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic (expected \"TNSR\")"));
        }
        if bytes[4] != VERSION {
            return Err(bad("unsupported version"));
        }
        let rank = bytes[5] as usize;
        let mut pos = 6;
        if bytes.len() < pos + 4 * rank {
            return Err(bad("truncated dims"));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|k| u32::from_le_bytes(bytes[pos + 4 * k..pos + 4 * k + 4].try_into().unwrap()) as usize)
            .collect();
        pos += 4 * rank;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("element count overflows"))?;
        if bytes.len() < pos + 4 * n {
            return Err(bad("truncated data"));
        }
        let data = bytes[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Self { dims, data }, pos + 4 * n))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::from_bytes_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::format("tensor file", 0, "trailing bytes"));
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..6], b"TNSR\x01\x02");
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(b.len(), 6 + 8 + 8);
    }

    #[test]
    fn rejects_truncation() {
        let mut b = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().to_bytes();
        b.pop();
        assert!(Tensor::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in prop::collection::vec(1usize..4, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32) * 0.37).collect();
            let t = Tensor::new(dims, data).unwrap();
            prop_assert_eq!(Tensor::from_bytes(&t.to_bytes()).unwrap(), t);
        }
    }
}
