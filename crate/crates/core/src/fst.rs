//! `FST1` binary tensor files.
//!
//! Layout: the magic `FST1`, one dtype byte (0 = real32, 1 = uint8 mask), one
//! rank byte, `rank` little-endian `u32` extents, then the row-major payload in
//! little-endian order. Masks are stored with rank 2.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"FST1";
pub const DTYPE_REAL32: u8 = 0;
pub const DTYPE_MASK: u8 = 1;

/// A decoded FST payload.
#[derive(Debug, Clone, PartialEq)]
pub enum FstValue {
    Real(Tensor),
    Mask(BinaryMask),
}

fn header(dtype: u8, dims: &[usize]) -> Result<Vec<u8>> {
    let rank = u8::try_from(dims.len())
        .map_err(|_| Error::Shape(format!("rank {} does not fit in FST", dims.len())))?;
    let mut out = Vec::with_capacity(6 + 4 * dims.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype);
    out.push(rank);
    for &d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::Shape(format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_REAL32, t.dims())?;
    out.reserve(4 * t.data().len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_mask(m: &BinaryMask) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_MASK, &[m.height(), m.width()])?;
    out.extend_from_slice(m.bits());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.buf.len() as u64,
                format!(
                    "truncated {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            )),
        }
    }
}

pub fn decode(buf: &[u8]) -> Result<FstValue> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"FST1\"")));
    }
    let dtype = cur.take(1, "dtype")?[0];
    if dtype != DTYPE_REAL32 && dtype != DTYPE_MASK {
        return Err(Error::format(4, format!("unknown dtype {dtype}")));
    }
    let rank = cur.take(1, "rank")?[0] as usize;
    if rank == 0 {
        return Err(Error::format(5, "rank must be at least 1"));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = cur.pos as u64;
        let raw = cur.take(4, "extent")?;
        let d = u32::from_le_bytes(raw.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::format(at, "zero extent"));
        }
        dims.push(d);
    }
    let shape = Shape::new(&dims).map_err(|e| Error::format(6, e.to_string()))?;
    let payload_at = cur.pos;
    let value = if dtype == DTYPE_REAL32 {
        let bytes = shape
            .numel()
            .checked_mul(4)
            .ok_or_else(|| Error::format(6, "payload size overflows"))?;
        let raw = cur.take(bytes, "real32 payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FstValue::Real(Tensor::new(&dims, data)?)
    } else {
        if rank != 2 {
            return Err(Error::format(5, format!("mask rank must be 2, got {rank}")));
        }
        let raw = cur.take(shape.numel(), "mask payload")?;
        if let Some(i) = raw.iter().position(|&b| b > 1) {
            return Err(Error::format(
                (payload_at + i) as u64,
                format!("mask byte {} is not 0 or 1", raw[i]),
            ));
        }
        FstValue::Mask(BinaryMask::new(dims[0], dims[1], raw.to_vec())?)
    };
    if cur.pos != buf.len() {
        return Err(Error::format(
            cur.pos as u64,
            format!("{} trailing bytes after payload", buf.len() - cur.pos),
        ));
    }
    Ok(value)
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor> {
    match decode(buf)? {
        FstValue::Real(t) => Ok(t),
        FstValue::Mask(_) => Err(Error::format(4, "expected real32 tensor, found mask")),
    }
}

pub fn decode_mask(buf: &[u8]) -> Result<BinaryMask> {
    match decode(buf)? {
        FstValue::Mask(m) => Ok(m),
        FstValue::Real(_) => Err(Error::format(4, "expected uint8 mask, found real32 tensor")),
    }
}

pub fn write_tensor(mut w: impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&encode_tensor(t)?)?;
    Ok(())
}

pub fn read_value(mut r: impl Read) -> Result<FstValue> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn save_mask(path: impl AsRef<Path>, m: &BinaryMask) -> Result<()> {
    fs::write(path, encode_mask(m)?)?;
    Ok(())
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    with_path(path, decode_tensor(&fs::read(path)?))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    with_path(path, decode_mask(&fs::read(path)?))
}
