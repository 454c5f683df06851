//! Little-endian binary encoding helpers shared by the checkpoint and
//! target-cache file formats.

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("bad magic")]
    Magic,
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("truncated file")]
    Truncated,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("string is not valid UTF-8")]
    Utf8,
}

pub fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Writes each f64 as its nearest f32, little-endian.
pub fn put_f32_slice(buf: &mut Vec<u8>, vals: &[f64]) {
    for &v in vals {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.bytes.len() {
            return Err(WireError::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<(), WireError> {
        if self.take(4)? != magic {
            return Err(WireError::Magic);
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn string(&mut self, len: usize) -> Result<String, WireError> {
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| WireError::Utf8)
    }

    /// Reads `n` little-endian f32 values, widening to f64.
    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>, WireError> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect())
    }

    pub fn expect_end(&self) -> Result<(), WireError> {
        let rest = self.bytes.len() - self.pos;
        if rest != 0 {
            return Err(WireError::Trailing(rest));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_scalars() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"TEST");
        put_u32(&mut buf, 7);
        put_u16(&mut buf, 300);
        put_f32_slice(&mut buf, &[1.5, -2.25]);
        let mut rd = Reader::new(&buf);
        rd.expect_magic(b"TEST").unwrap();
        assert_eq!(rd.u32().unwrap(), 7);
        assert_eq!(rd.u16().unwrap(), 300);
        assert_eq!(rd.f32_vec(2).unwrap(), vec![1.5, -2.25]);
        rd.expect_end().unwrap();
    }

    #[test]
    fn truncation_detected() {
        let buf = vec![0u8; 3];
        let mut rd = Reader::new(&buf);
        assert!(matches!(rd.u32(), Err(WireError::Truncated)));
    }
}
