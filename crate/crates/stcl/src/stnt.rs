//! `STNT` binary tensors: magic, `u32` version, `u32` rank, `rank × u64`
//! dims, then the row-major `f64` payload. All integers and floats are
//! little-endian.

use std::path::Path;

use stcl_core::tensor::Tensor;

use crate::error::{read_file, write_file, Error, Result};

pub const MAGIC: &[u8; 4] = b"STNT";
pub const VERSION: u32 = 1;

/// Header size for a tensor of the given rank.
pub fn header_len(rank: usize) -> usize {
    4 + 4 + 4 + 8 * rank
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(t.rank()) + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads little-endian fields off a byte slice.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format!("truncated: wanted {} bytes at offset {}, have {}", n, self.pos, self.bytes.len())
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Decodes one tensor; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut c = Cursor::new(bytes);
    if c.take(4)? != MAGIC {
        return Err(String::from("bad magic, expected STNT"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported STNT version {}", version));
    }
    let rank = c.u32()? as usize;
    if rank > 16 {
        return Err(format!("implausible rank {}", rank));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = usize::try_from(c.u64()?).map_err(|_| String::from("dimension overflows usize"))?;
        numel = numel.checked_mul(d).ok_or_else(|| String::from("element count overflows"))?;
        shape.push(d);
    }
    if c.remaining() != numel * 8 {
        return Err(format!(
            "payload holds {} bytes, shape {:?} needs {}",
            c.remaining(),
            shape,
            numel * 8
        ));
    }
    let data = (0..numel).map(|_| c.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode(&read_file(path)?).map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_of_a_small_tensor() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"STNT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..20], &2u64.to_le_bytes());
        assert_eq!(&b[28..36], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), header_len(2) + 16);
        assert_eq!(decode(&b).unwrap(), t);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let b = encode(&Tensor::zeros(&[3]));
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().contains("magic"));
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(decode(&v2).unwrap_err().contains("version"));
        let mut extra = b;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
