//! NTSR: a minimal little-endian tensor file.
//!
//! ```text
//! "NTSR" | version u8 = 1 | dtype u8 (1 = f32, 2 = f64) | rank u8 | rank × u32 extents | payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"NTSR";
pub const VERSION: u8 = 1;

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.shape().len() + T::BYTES * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE_CODE);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode<T: Real>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let err = |offset: usize, detail: String| Error::Parse { path: path.to_path_buf(), offset: offset as u64, detail };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(err(0, "bad magic, not an NTSR file".into()));
    }
    let header = |i: usize, what: &str| bytes.get(i).copied().ok_or_else(|| err(i, format!("truncated before {what}")));
    let version = header(4, "version")?;
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let dtype = header(5, "dtype")?;
    if dtype != T::DTYPE_CODE {
        return Err(err(5, format!("dtype {dtype} does not match requested dtype {}", T::DTYPE_CODE)));
    }
    let rank = header(6, "rank")? as usize;
    let dims_end = 7 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(err(
            bytes.len(),
            format!("truncated extents: expected {dims_end} header bytes, found {}", bytes.len()),
        ));
    }
    let shape: Vec<usize> =
        bytes[7..dims_end].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    let count: usize = shape.iter().product();
    let expected = dims_end + count * T::BYTES;
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected),
            format!("expected {expected} bytes for shape {shape:?}, found {}", bytes.len()),
        ));
    }
    let data = bytes[dims_end..].chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn write<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
