//! Parameter checkpoint file.
//!
//! Layout (all integers little-endian `u32`):
//! `"MSPW"`, version, then per parameter until end of file:
//! name length, name bytes (UTF-8), rank, extents, `f32` values.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::NdArray;

pub const MAGIC: &[u8; 4] = b"MSPW";
pub const VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_params<W: Write>(w: &mut W, params: &[(String, NdArray<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    for (name, arr) in params {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, arr.shape().len() as u32)?;
        for &e in arr.shape() {
            put_u32(w, e as u32)?;
        }
        let mut buf = Vec::with_capacity(arr.len() * 4);
        for v in arr.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_params<R: Read>(r: &mut R) -> Result<Vec<(String, NdArray<f32>)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a parameter checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, NdArray::from_vec(&shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let params = vec![
            ("a.w".to_string(), NdArray::from_vec(&[2, 1], vec![1.5f32, -2.0]).unwrap()),
            ("b".to_string(), NdArray::from_vec(&[1], vec![0.25f32]).unwrap()),
        ];
        let mut buf = Vec::new();
        write_params(&mut buf, &params).unwrap();
        assert_eq!(&buf[..4], b"MSPW");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(&buf[12..15], b"a.w");
        let back = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let params = vec![("w".to_string(), NdArray::from_vec(&[3], vec![1f32, 2., 3.]).unwrap())];
        let mut buf = Vec::new();
        write_params(&mut buf, &params).unwrap();
        buf.pop();
        assert!(matches!(read_params(&mut buf.as_slice()), Err(Error::Format(_))));
        buf[0] = b'X';
        assert!(read_params(&mut buf.as_slice()).is_err());
    }
}
