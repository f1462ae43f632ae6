//! Binary tensor (`TNSR`) and checkpoint (`TCKP`) containers.
//!
//! TNSR layout, little-endian: magic `TNSR`, `u8` version (1), `u8` rank,
//! `u32` extent per axis, then the `f32` payload in row-major order.
//!
//! TCKP layout: magic `TCKP`, `u8` version (1), `u32` entry count, a name
//! table of `u32` byte length + UTF-8 bytes per entry, then one TNSR block
//! per entry in table order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCKP";
pub const FORMAT_VERSION: u8 = 1;

/// Cursor over a byte buffer that reports the offset of every failure.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.offset(), msg: msg.into() })
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.remaining()
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(want)
                ),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, want: u8) -> Result<()> {
        let at = self.pos;
        let v = self.u8("version")?;
        if v != want {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!("unsupported version {v}, expected {want}"),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format { offset: self.offset(), msg: format!("{what} too large") })?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return self.fail(format!("{} trailing bytes", self.remaining()));
        }
        Ok(())
    }
}

pub fn encode_tensor_into(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Contract(format!("rank {} does not fit in u8", t.rank())));
    }
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Contract(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_tensor_into(t, &mut out)?;
    Ok(out)
}

pub fn read_tensor_block(r: &mut ByteReader<'_>) -> Result<Tensor> {
    r.magic(TENSOR_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let rank = r.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("extent")? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format { offset: r.offset(), msg: "element count overflows".into() })?;
    let data = r.f32s(n, "payload")?;
    Tensor::new(&shape, data)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    let t = read_tensor_block(&mut r)?;
    r.finish()?;
    Ok(t)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&std::fs::read(path)?)
}

pub fn encode_checkpoint(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for name in params.names() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for t in params.tensors() {
        encode_tensor_into(t, &mut out)?;
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let count = r.u32("entry count")? as usize;
    let mut names = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.offset();
        let raw = r.take(len, "name")?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| Error::Format { offset: at, msg: "name is not UTF-8".into() })?;
        names.push(name.to_string());
    }
    let mut tensors = Vec::with_capacity(names.len());
    for _ in 0..count {
        tensors.push(read_tensor_block(&mut r)?);
    }
    r.finish()?;
    ParamSet::from_parts(names, tensors)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(-3.25);
        let b = encode_tensor(&t).unwrap();
        assert_eq!(b.len(), 4 + 1 + 1 + 4);
        assert_eq!(decode_tensor(&b).unwrap(), t);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = encode_tensor(&t).unwrap();
        assert_eq!(&b[..4], b"TNSR");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
    }

    #[test]
    fn corrupt_inputs_name_offsets() {
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = encode_tensor(&t).unwrap();
        let trunc = decode_tensor(&b[..b.len() - 2]).unwrap_err();
        assert!(matches!(trunc, Error::Format { offset: 10, .. }), "{trunc}");
        b[4] = 9;
        assert!(matches!(decode_tensor(&b), Err(Error::Format { offset: 4, .. })));
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ParamSet::new();
        p.push("conv.w", Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        p.push("bias", Tensor::scalar(7.0));
        let b = encode_checkpoint(&p).unwrap();
        assert_eq!(decode_checkpoint(&b).unwrap(), p);
        assert!(decode_checkpoint(&b[..b.len() - 1]).is_err());
    }
}
