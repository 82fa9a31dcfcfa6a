//! "DDF1" parameter checkpoint container.
//!
//! Layout, all integers little-endian:
//!   magic "DDF1"
//!   u32 tensor count
//!   per tensor, manifest order: u32 name length, name bytes (UTF-8),
//!     u8 dtype code (1 = f64), u32 ndim, u32 extent per dimension
//!   payloads: for each manifest entry in order, extent-product f64 values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DDF1";
pub const DTYPE_F64: u8 = 1;

/// Serializes named tensors in the given order.
pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(DTYPE_F64);
        let shape = t.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in &shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
    }
    for (_, t) in entries {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::TruncatedPayload { what: what.to_string() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

/// Parses a DDF1 byte stream back into named tensors.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: [magic[0], magic[1], magic[2], magic[3]] });
    }
    let count = r.u32("tensor count")? as usize;
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| Error::LengthMismatch { what: format!("manifest name {i} is not UTF-8") })?;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::LengthMismatch { what: format!("unsupported dtype code {dtype} for {name}") });
        }
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let e = r.u32("extent")? as usize;
            if e == 0 {
                return Err(Error::LengthMismatch { what: format!("zero extent in {name}") });
            }
            shape.push(e);
        }
        manifest.push((name, shape));
    }
    let mut out = Vec::with_capacity(count);
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64(&format!("payload of {name}"))?);
        }
        out.push((name, Tensor::from_vec(data, &shape)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::LengthMismatch { what: "trailing bytes after payload".to_string() });
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(entries)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut f = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries() -> Vec<(String, Tensor)> {
        vec![
            ("w".to_string(), Tensor::from_vec(vec![1.0, -2.5, 3.25, 0.0], &[2, 2]).unwrap()),
            ("b".to_string(), Tensor::from_vec(vec![0.125], &[1]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_bitwise() {
        let e = entries();
        let bytes = encode(&e).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in e.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let (d0, d1) = (t0.data(), t1.data());
            assert!(d0.iter().zip(&d1).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn bad_magic_detected() {
        let mut bytes = encode(&entries()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode(&entries()).unwrap();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(decode(cut), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn trailing_garbage_detected() {
        let mut bytes = encode(&entries()).unwrap();
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn known_byte_layout() {
        // One tensor "ab", shape [2], values 1.0 and -1.0.
        let e = vec![("ab".to_string(), Tensor::from_vec(vec![1.0, -1.0], &[2]).unwrap())];
        let bytes = encode(&e).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"DDF1");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.push(1u8);
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-1.0f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }
}
