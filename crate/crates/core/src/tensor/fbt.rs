//! FBT1 binary tensor files.
//!
//! Layout: the four magic bytes `FBT1`, a `u8` dtype code (0 = real32,
//! 1 = real64), a `u8` rank, one little-endian `u64` per extent, then the
//! row-major little-endian payload.

use std::fs;
use std::path::Path;

use super::{numel, DType, Tensor};
use crate::error::{Error, Result};

pub const FBT_MAGIC: &[u8; 4] = b"FBT1";

impl Tensor {
    pub fn to_fbt_bytes(&self) -> Vec<u8> {
        let width = match self.dtype {
            DType::Real32 => 4,
            DType::Real64 => 8,
        };
        let mut out = Vec::with_capacity(6 + 8 * self.ndim() + width * self.numel());
        out.extend_from_slice(FBT_MAGIC);
        out.push(self.dtype.code());
        out.push(self.ndim() as u8);
        for &e in self.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match self.dtype {
            DType::Real32 => {
                for &v in self.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::Real64 => {
                for &v in self.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Decodes an FBT1 buffer; `path` is only used for error messages.
    pub fn from_fbt_bytes(bytes: &[u8], path: &Path) -> Result<Tensor> {
        let fail = |offset: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg,
        };
        if bytes.len() < 6 {
            return Err(fail(bytes.len(), "truncated header".into()));
        }
        if &bytes[..4] != FBT_MAGIC {
            return Err(fail(0, "bad magic, expected FBT1".into()));
        }
        let dtype = DType::from_code(bytes[4])
            .ok_or_else(|| fail(4, format!("unknown dtype code {}", bytes[4])))?;
        let ndim = bytes[5] as usize;
        let mut pos = 6;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let chunk = bytes
                .get(pos..pos + 8)
                .ok_or_else(|| fail(pos, "truncated extents".into()))?;
            shape.push(u64::from_le_bytes(chunk.try_into().unwrap()) as usize);
            pos += 8;
        }
        let width = match dtype {
            DType::Real32 => 4,
            DType::Real64 => 8,
        };
        let count = numel(&shape);
        let expected = pos + count * width;
        if bytes.len() != expected {
            return Err(fail(
                bytes.len().min(expected),
                format!(
                    "payload size mismatch: expected {} bytes total, found {}",
                    expected,
                    bytes.len()
                ),
            ));
        }
        let data: Vec<f64> = match dtype {
            DType::Real32 => bytes[pos..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::Real64 => bytes[pos..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok(Tensor { shape, dtype, data })
    }
}

pub fn write_fbt(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_fbt_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_fbt(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_fbt_bytes(&bytes, path)
}
