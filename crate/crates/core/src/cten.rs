//! CTEN tensor container.
//!
//! Single tensor record:
//!
//! ```text
//! "CTEN" | u8 version = 1 | u8 dtype (0 = f32) | u8 ndim | ndim x u32 LE extents | f32 LE payload
//! ```
//!
//! Table-of-contents file (checkpoints): the same 5-byte prefix with dtype byte
//! [`TOC_MARKER`], then `u32` entry count and per entry `u16` name length, the
//! UTF-8 name and a `u64` absolute byte offset of an embedded single-tensor
//! record.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CTEN";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
pub const TOC_MARKER: u8 = 0x80;

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.ndim() + 4 * t.len());
    write_tensor_into(&mut out, t);
    out
}

fn write_tensor_into(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(t.ndim() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads the common prefix and returns the dtype byte.
    fn header(&mut self) -> Result<u8> {
        if self.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = self.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        self.u8()
    }
}

fn read_record(r: &mut Reader<'_>) -> Result<Tensor<f32>> {
    let dtype = r.header()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {dtype}")));
    }
    let ndim = r.u8()? as usize;
    if ndim > crate::tensor::MAX_AXES {
        return Err(Error::Format(format!("{ndim} axes")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32()? as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("extent overflow".into()))?;
    let bytes = r.take(
        n.checked_mul(4)
            .ok_or_else(|| Error::Format("extent overflow".into()))?,
    )?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data)
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader { buf, pos: 0 };
    let t = read_record(&mut r)?;
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(t)
}

/// Only validates the header, without reading the payload.
pub fn peek_dims(buf: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { buf, pos: 0 };
    if r.header()? != DTYPE_F32 {
        return Err(Error::Format("not a single-tensor record".into()));
    }
    let ndim = r.u8()? as usize;
    (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect()
}

pub fn encode_toc(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.push(VERSION);
    head.push(TOC_MARKER);
    head.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let toc_len: usize = entries.iter().map(|(n, _)| 2 + n.len() + 8).sum();
    let mut offset = (head.len() + toc_len) as u64;
    let mut body = Vec::new();
    for (name, t) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
        head.extend_from_slice(&name_len.to_le_bytes());
        head.extend_from_slice(name.as_bytes());
        head.extend_from_slice(&offset.to_le_bytes());
        let before = body.len();
        write_tensor_into(&mut body, t);
        offset += (body.len() - before) as u64;
    }
    head.extend_from_slice(&body);
    Ok(head)
}

pub fn decode_toc(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.header()? != TOC_MARKER {
        return Err(Error::Format("not a table-of-contents file".into()));
    }
    let count = r.u32()? as usize;
    let mut index = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let off = r.u64()? as usize;
        index.push((name, off));
    }
    index
        .into_iter()
        .map(|(name, off)| {
            if off > buf.len() {
                return Err(Error::Format(format!("offset {off} past end for {name}")));
            }
            let mut rec = Reader { buf, pos: off };
            Ok((name, read_record(&mut rec)?))
        })
        .collect()
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&buf)
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(vec![7, 7, 2], vec![1.5f32; 98]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"CTEN");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0);
        assert_eq!(b[6], 3);
        assert_eq!(&b[7..11], &7u32.to_le_bytes());
        assert_eq!(&b[15..19], &2u32.to_le_bytes());
        assert_eq!(&b[19..23], &1.5f32.to_le_bytes());
        assert_eq!(b.len(), 19 + 98 * 4);
        assert_eq!(peek_dims(&b).unwrap(), vec![7, 7, 2]);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let b = encode_tensor(&t);
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad).is_err());
        assert!(decode_toc(&b).is_err());
    }

    #[test]
    fn toc_roundtrip_preserves_order_and_names() {
        let entries = vec![
            (
                "head.conv1.w".to_string(),
                Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap(),
            ),
            (
                "head.bn1.mean".to_string(),
                Tensor::new(vec![1], vec![-0.5f32]).unwrap(),
            ),
        ];
        let b = encode_toc(&entries).unwrap();
        assert_eq!(b[5], TOC_MARKER);
        assert_eq!(decode_toc(&b).unwrap(), entries);
    }
}
