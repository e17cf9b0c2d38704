//! Little-endian binary framing shared by the checkpoint, variant and
//! dataset containers: `magic | version | body | crc32(magic..body)`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn shape(&mut self, shape: &[usize]) {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
    }

    /// Append the checksum and return the finished container.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Check framing (length, checksum, magic, version) and position the
    /// reader at the start of the body.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Corrupt("container too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if &body[..4] != magic {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let mut r = Self { buf: body, pos: 4 };
        let v = r.u32()?;
        if v != version {
            return Err(Error::Corrupt(alloc::format!("unsupported version {v}, expected {version}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Corrupt("invalid utf-8 string".into()))
    }

    pub fn shape(&mut self) -> Result<Vec<usize>> {
        let nd = self.u32()? as usize;
        if nd > 8 {
            return Err(Error::Corrupt(alloc::format!("implausible rank {nd}")));
        }
        (0..nd).map(|_| self.u32().map(|d| d as usize)).collect()
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn expect_done(&self) -> Result<()> {
        if !self.is_done() {
            return Err(Error::Corrupt("trailing bytes".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_tamper_detection() {
        let mut w = Writer::new(b"TEST", 3);
        w.str("cam.block0");
        w.shape(&[2, 3]);
        w.f32s(&[1.0, -0.0, f32::MIN_POSITIVE]);
        let bytes = w.finish();
        let mut r = Reader::open(&bytes, b"TEST", 3).unwrap();
        assert_eq!(r.str().unwrap(), "cam.block0");
        assert_eq!(r.shape().unwrap(), alloc::vec![2, 3]);
        let v = r.f32s(3).unwrap();
        assert_eq!(v[1].to_bits(), (-0.0f32).to_bits());
        r.expect_done().unwrap();

        assert!(Reader::open(&bytes, b"TEST", 4).is_err());
        assert!(Reader::open(&bytes, b"NOPE", 3).is_err());
        assert!(Reader::open(&bytes[..bytes.len() - 1], b"TEST", 3).is_err());
        let mut flipped = bytes.clone();
        flipped[10] ^= 1;
        assert!(matches!(Reader::open(&flipped, b"TEST", 3), Err(Error::Corrupt(_))));
    }
}
