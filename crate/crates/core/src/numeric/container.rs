//! Flat binary tensor container.
//!
//! Layout (all integers little-endian):
//! `"TNSR"` | version: u32 | rank: u32 | extents: u64 × rank | values: f64 LE × Π extents

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<u64> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(encoded_len(t))
}

/// Byte length of one encoded record.
pub fn encoded_len(t: &Tensor) -> u64 {
    (12 + 8 * t.rank() + 8 * t.len()) as u64
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut v = Vec::with_capacity(encoded_len(t) as usize);
    write_tensor(&mut v, t).expect("writing to a Vec cannot fail");
    v
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = bytes;
    read_tensor(&mut cur)
}
