//! `SAFT` binary tensor container.
//!
//! ```text
//! offset  size       field
//! 0       4          magic "SAFT"
//! 4       2          version (u16 LE, currently 1)
//! 6       1          dtype code (1 = f32, 2 = f64)
//! 7       1          rank
//! 8       8 * rank   dims (u64 LE each)
//! ..      n * size   row-major payload, IEEE-754 LE
//! ```
//!
//! No padding, no trailing bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{AnyTensor, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SAFT";
pub const VERSION: u16 = 1;

pub fn header_len(rank: usize) -> usize {
    8 + 8 * rank
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(t.rank()) + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.as_slice() {
        x.write_le(&mut out);
    }
    out
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

/// Parses and validates the header; returns dtype, dims and payload offset.
pub fn decode_header(bytes: &[u8]) -> Result<(DType, Vec<usize>, usize)> {
    if bytes.len() < 8 {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(bytes[6]).ok_or_else(|| format_err(6, format!("unknown dtype code {}", bytes[6])))?;
    let rank = bytes[7] as usize;
    if rank == 0 {
        return Err(format_err(7, "rank must be at least 1"));
    }
    let end = header_len(rank);
    if bytes.len() < end {
        return Err(format_err(bytes.len(), "truncated dims"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 8 + 8 * i;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        if d == 0 {
            return Err(format_err(at, "zero-sized dimension"));
        }
        dims.push(usize::try_from(d).map_err(|_| format_err(at, "dimension overflows usize"))?);
    }
    Ok((dtype, dims, end))
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let (dtype, dims, start) = decode_header(bytes)?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(8, "element count overflows"))?;
    let expected = count
        .checked_mul(dtype.size())
        .and_then(|n| n.checked_add(start))
        .ok_or_else(|| format_err(8, "payload size overflows"))?;
    if bytes.len() < expected {
        return Err(format_err(bytes.len(), format!("truncated payload, expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after payload"));
    }
    fn read<T: Scalar>(payload: &[u8], dims: Vec<usize>) -> Result<Tensor<T>> {
        let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Tensor::new(dims, data)
    }
    let payload = &bytes[start..];
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(read(payload, dims)?),
        DType::F64 => AnyTensor::F64(read(payload, dims)?),
    })
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads and converts to `T`.
pub fn read_tensor_as<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(read_tensor(path)?.into_scalar())
}

/// Reads only the header; used for manifest validation.
pub fn read_header(path: impl AsRef<Path>) -> Result<(DType, Vec<usize>)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = vec![0u8; 8];
    file.read_exact(&mut head).map_err(|_| format_err(0, "truncated header"))?;
    let rank = head[7] as usize;
    head.resize(header_len(rank), 0);
    file.read_exact(&mut head[8..]).map_err(|_| format_err(8, "truncated dims"))?;
    let (dtype, dims, _) = decode_header(&head)?;
    Ok((dtype, dims))
}
