//! Little-endian byte encoding shared by the checkpoint and bundle formats.

use crate::error::{Error, Result};

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, n: usize, what: &str) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::OutOfRange(format!("{what} {n} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }

    /// u32 length prefix followed by UTF-8 bytes.
    pub fn str_u32(&mut self, s: &str) -> Result<()> {
        self.len_u32(s.len(), "name length")?;
        self.bytes(s.as_bytes());
        Ok(())
    }

    /// u16 length prefix followed by UTF-8 bytes.
    pub fn str_u16(&mut self, s: &str) -> Result<()> {
        let n = u16::try_from(s.len())
            .map_err(|_| Error::OutOfRange(format!("name of {} bytes exceeds u16", s.len())))?;
        self.u16(n);
        self.bytes(s.as_bytes());
        Ok(())
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Malformed(format!(
                "record runs past the payload end ({n} bytes needed at offset {}, {} left)",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Malformed("name is not valid UTF-8".into()))
    }

    pub fn str_u32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        self.utf8(n)
    }

    pub fn str_u16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        self.utf8(n)
    }
}

/// Common framing: `magic | version | field | payload-length` header, then
/// the payload, then CRC-32 over header and payload.
pub(crate) const HEADER_LEN: usize = 16;
pub(crate) const TRAILER_LEN: usize = 4;

pub(crate) fn frame(magic: &[u8; 4], version: u32, field: u32, payload: &[u8]) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(magic);
    w.u32(version);
    w.u32(field);
    w.len_u32(payload.len(), "payload length")?;
    w.bytes(payload);
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

pub(crate) struct Framed<'a> {
    pub field: u32,
    pub payload: &'a [u8],
    pub crc: u32,
}

/// Validates framing in a fixed order so each failure has one error kind:
/// a file shorter than its header claims is `Truncated`; otherwise any
/// byte-level damage is a `CrcMismatch`; only an intact file can report a
/// foreign magic or an unsupported version.
pub(crate) fn unframe<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Framed<'a>> {
    let min = HEADER_LEN + TRAILER_LEN;
    if bytes.len() < min {
        return Err(Error::Truncated {
            needed: min,
            have: bytes.len(),
        });
    }
    let body_end = bytes.len() - TRAILER_LEN;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        let declared = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let needed = HEADER_LEN.saturating_add(declared).saturating_add(TRAILER_LEN);
        if needed > bytes.len() {
            return Err(Error::Truncated {
                needed,
                have: bytes.len(),
            });
        }
        return Err(Error::CrcMismatch { stored, computed });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &found != magic {
        return Err(Error::BadMagic {
            expected: *magic,
            found,
        });
    }
    let v = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if v != version {
        return Err(Error::VersionMismatch {
            expected: version,
            found: v,
        });
    }
    let field = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let declared = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if HEADER_LEN + declared + TRAILER_LEN != bytes.len() {
        return Err(Error::Malformed(format!(
            "payload length {declared} disagrees with file size {}",
            bytes.len()
        )));
    }
    Ok(Framed {
        field,
        payload: &bytes[HEADER_LEN..body_end],
        crc: stored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip_and_error_kinds() {
        let f = frame(b"TEST", 3, 7, b"hello").unwrap();
        assert_eq!(f.len(), HEADER_LEN + 5 + TRAILER_LEN);
        let u = unframe(&f, b"TEST", 3).unwrap();
        assert_eq!((u.field, u.payload), (7, &b"hello"[..]));
        assert!(matches!(unframe(&f, b"NOPE", 3), Err(Error::BadMagic { .. })));
        assert!(matches!(unframe(&f, b"TEST", 4), Err(Error::VersionMismatch { found: 3, .. })));
        assert!(matches!(unframe(&f[..f.len() - 2], b"TEST", 3), Err(Error::Truncated { .. })));
        assert!(matches!(unframe(&f[..10], b"TEST", 3), Err(Error::Truncated { .. })));
        let mut bad = f.clone();
        bad[17] ^= 0x01;
        assert!(matches!(unframe(&bad, b"TEST", 3), Err(Error::CrcMismatch { .. })));
    }

    #[test]
    fn reader_reports_overrun() {
        let mut r = Reader::new(&[1, 0]);
        assert_eq!(r.u16().unwrap(), 1);
        assert!(r.u8().is_err());
    }
}
