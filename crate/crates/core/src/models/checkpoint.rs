//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size       field
//! 0       8          magic  b"DKDMLP\0\0"
//! 8       4          format version (u32, currently 1)
//! 12      4          n = number of layer dims (u32, >= 2)
//! 16      4·n        layer dims [input, hidden..., embedding] (u32 each)
//! ..      4          number of classes K (u32)
//! ..      8·…        f64 values: for each layer its weight (out × in,
//!                    row-major) then its bias; finally the K × embedding
//!                    class weight matrix, row-major
//! ```
//!
//! Identical parameters always serialise to identical bytes.

use std::path::Path;

use super::{Dense, MlpParams};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 8] = b"DKDMLP\0\0";
const VERSION: u32 = 1;

impl MlpParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.layer_dims();
        let mut out = Vec::with_capacity(20 + 4 * dims.len() + 8 * self.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.num_classes() as u32).to_le_bytes());
        for block in self.slices() {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MlpParams> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::data("not a model checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        if n < 2 {
            return Err(Error::data("checkpoint declares fewer than 2 layer dims"));
        }
        let dims = (0..n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let k = r.u32()? as usize;
        if dims.contains(&0) || k < 2 {
            return Err(Error::data("checkpoint has a zero dimension or fewer than 2 classes"));
        }
        let mut layers = Vec::with_capacity(n - 1);
        for w in dims.windows(2) {
            let weight = Matrix::from_vec(w[1], w[0], r.f64s(w[0] * w[1])?);
            let bias = r.f64s(w[1])?;
            layers.push(Dense { weight, bias });
        }
        let emb = dims[n - 1];
        let class_weights = Matrix::from_vec(k, emb, r.f64s(k * emb)?);
        if r.pos != bytes.len() {
            return Err(Error::data(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(MlpParams {
            layers,
            class_weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<MlpParams> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        MlpParams::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::data("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::data("checkpoint too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
